//! Dense symmetric linear-algebra helpers shared by the solver and the tape.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Frobenius inner product.
pub fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
///
/// Ties keep their solver order; every eigenvector is signed so its
/// largest-magnitude component (first one on ties) is positive, which makes
/// the output a deterministic function of the input.
pub fn eigh(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("eigh of {}x{} matrix", n, a.ncols())));
    }
    if !all_finite(a) {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    let sym = symmetrize(a);
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let mut pivot = 0;
        for r in 1..n {
            if col[r].abs() > col[pivot].abs() + 1e-12 {
                pivot = r;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(k, &col);
    }
    Ok((values, vectors))
}

/// U f(λ) Uᵀ for a symmetric matrix given its eigendecomposition.
pub fn spectral_map(values: &DVector<f64>, vectors: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(values[k]);
    }
    &scaled * vectors.transpose()
}

/// Solves `a x = b` with a column-pivoted LU; `None` when singular or when
/// the 1-norm condition estimate exceeds `max_condition`.
pub fn solve_guarded(a: &DMatrix<f64>, b: &DVector<f64>, max_condition: f64) -> Option<DVector<f64>> {
    let lu = a.clone().full_piv_lu();
    let inv = lu.try_inverse()?;
    let norm1 = |m: &DMatrix<f64>| {
        m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
    };
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > max_condition {
        return None;
    }
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}
