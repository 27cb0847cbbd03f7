//! Pulay DIIS: commutator residuals, the bordered B-matrix system and Fock
//! extrapolation.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::integrals::BasisContext;
use crate::linalg;

pub const DEFAULT_HISTORY: usize = 8;

/// Bordered systems with a larger 1-norm condition estimate count as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// R̃ = Xᵀ (F P S − S P F) X.
pub fn diis_residual(f: &DMatrix<f64>, p: &DMatrix<f64>, ctx: &BasisContext) -> DMatrix<f64> {
    let fps = f * p * &ctx.overlap;
    let r = &fps - fps.transpose();
    ctx.x.transpose() * r * &ctx.x
}

/// Bordered Pulay matrix for the given residuals, with B normalised by its
/// largest diagonal entry (the minimiser is invariant to that scale).
pub fn bordered_matrix(residuals: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let t = residuals.len();
    let mut b = DMatrix::zeros(t + 1, t + 1);
    for j in 0..t {
        for k in 0..=j {
            let v = linalg::dot(residuals[j], residuals[k]);
            b[(j, k)] = v;
            b[(k, j)] = v;
        }
    }
    let scale = (0..t).map(|j| b[(j, j)]).fold(0.0, f64::max);
    if scale > 0.0 {
        for j in 0..t {
            for k in 0..t {
                b[(j, k)] /= scale;
            }
        }
    }
    for j in 0..t {
        b[(j, t)] = -1.0;
        b[(t, j)] = -1.0;
    }
    b
}

/// Right-hand side (0, …, 0, −1) of the Pulay equations.
pub fn bordered_rhs(t: usize) -> DVector<f64> {
    let mut rhs = DVector::zeros(t + 1);
    rhs[t] = -1.0;
    rhs
}

/// Pulay coefficients for the newest `residuals.len() - skip` entries.
///
/// Returns `(skip, a)`: the number of oldest entries that had to be dropped
/// before the bordered system became solvable, and the coefficients of the
/// remaining ones. A single remaining entry always gets `a = [1]`.
pub fn pulay_coefficients(residuals: &[&DMatrix<f64>]) -> (usize, Vec<f64>) {
    let t = residuals.len();
    for skip in 0..t.saturating_sub(1) {
        let window = &residuals[skip..];
        let b = bordered_matrix(window);
        if let Some(x) = linalg::solve_guarded(&b, &bordered_rhs(window.len()), MAX_CONDITION) {
            return (skip, x.iter().take(window.len()).copied().collect());
        }
    }
    (t.saturating_sub(1), vec![1.0])
}

/// Bounded FIFO of (Fock, orthonormal-basis residual) pairs.
#[derive(Clone, Debug)]
pub struct DiisState {
    capacity: usize,
    history: VecDeque<(DMatrix<f64>, DMatrix<f64>)>,
    last_coefficients: Vec<f64>,
}

impl DiisState {
    pub fn new(capacity: usize) -> Self {
        DiisState { capacity: capacity.max(1), history: VecDeque::new(), last_coefficients: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, fock: DMatrix<f64>, residual: DMatrix<f64>) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back((fock, residual));
    }

    pub fn last_coefficients(&self) -> &[f64] {
        &self.last_coefficients
    }

    pub fn history(&self) -> impl Iterator<Item = &(DMatrix<f64>, DMatrix<f64>)> {
        self.history.iter()
    }
}

/// F_DIIS = Σ a_i F_i. Entries dropped to regularise a singular system are
/// evicted from the state.
///
/// Panics if the history is empty.
pub fn diis_extrapolate(state: &mut DiisState) -> DMatrix<f64> {
    assert!(!state.history.is_empty(), "DIIS extrapolation needs at least one entry");
    let residuals: Vec<&DMatrix<f64>> = state.history.iter().map(|(_, r)| r).collect();
    let (skip, a) = pulay_coefficients(&residuals);
    for _ in 0..skip {
        state.history.pop_front();
    }
    let mut f = DMatrix::zeros(state.history[0].0.nrows(), state.history[0].0.ncols());
    for ((fock, _), &c) in state.history.iter().zip(&a) {
        f += fock * c;
    }
    state.last_coefficients = a;
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn single_entry_passes_through() {
        let mut st = DiisState::new(8);
        let f = diag(&[1.0, 2.0]);
        st.push(f.clone(), diag(&[0.3, 0.1]));
        assert_eq!(diis_extrapolate(&mut st), f);
        assert_eq!(st.last_coefficients(), &[1.0]);
    }

    #[test]
    fn zero_residual_entry_wins() {
        let r1 = DMatrix::from_row_slice(2, 2, &[0.0, 0.2, -0.2, 0.0]);
        let (skip, a) = pulay_coefficients(&[&r1, &DMatrix::zeros(2, 2)]);
        assert_eq!(skip, 0);
        assert!(a[0].abs() < 1e-10 && (a[1] - 1.0).abs() < 1e-10, "{a:?}");
    }

    #[test]
    fn orthonormal_residuals_split_evenly() {
        let r1 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0]);
        let r2 = diag(&[1.0, 0.0]);
        let (_, a) = pulay_coefficients(&[&r1, &r2]);
        assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicate_residuals_evict_oldest() {
        let mut st = DiisState::new(4);
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        st.push(diag(&[1.0, 1.0]), r.clone());
        st.push(diag(&[2.0, 2.0]), r.clone());
        let f = diis_extrapolate(&mut st);
        assert_eq!(st.len(), 1);
        assert_eq!(f, diag(&[2.0, 2.0]));
    }

    #[test]
    fn fifo_capacity() {
        let mut st = DiisState::new(2);
        for k in 0..5 {
            st.push(diag(&[k as f64]), diag(&[1.0 / (k + 1) as f64]));
        }
        assert_eq!(st.len(), 2);
        assert_eq!(st.history().next().unwrap().0[(0, 0)], 3.0);
    }

    #[test]
    fn commuting_diagonals_have_zero_residual() {
        use crate::chem_io::{BasisSet, parse_xyz};
        let m = parse_xyz("2\n\nH 0 0 0\nH 0 0 50").unwrap();
        let mut ctx = BasisContext::build(&m, &BasisSet::sto3g()).unwrap();
        ctx.overlap = DMatrix::identity(2, 2);
        ctx.x = DMatrix::identity(2, 2);
        let r = diis_residual(&diag(&[-0.5, 0.3]), &diag(&[2.0, 0.0]), &ctx);
        assert_eq!(r, DMatrix::zeros(2, 2));
    }
}
