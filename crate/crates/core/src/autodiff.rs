//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive together with the forward values its
//! adjoint needs. [`Tape::backward`] walks the record in reverse; the
//! symmetric eigendecomposition uses a Lorentzian-broadened adjoint so the
//! pass is total even at degeneracies.

use nalgebra::{DMatrix, DVector};

use crate::diis;
use crate::error::{Error, Result};
use crate::guess::{self, ContextVars, GuessModel, ModelInputs};
use crate::integrals::{BasisContext, Eri};
use crate::linalg;
use crate::scf::{self, ScfOptions};

/// Broadening of eigenvalue differences in the eigenvector adjoint.
pub const EIG_BROADENING: f64 = 1e-9;

/// Eigenvalue pairs closer than this are reported as near-degenerate.
pub const DEGENERACY_FLAG: f64 = 1e-6;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Hadamard(Var, Var),
    /// Matrix plus a broadcast 1×m row.
    AddRow(Var, Var),
    Tanh(Var),
    Silu(Var),
    Abs(Var),
    Sqrt(Var),
    /// Sum of all entries, 1×1.
    Sum(Var),
    /// Frobenius norm, 1×1.
    Norm(Var),
    /// Matrix times a 1×1 value.
    MulScalar(Var, Var),
    Columns(Var, Vec<usize>),
    /// Value: eigenvectors (ascending). Eigenvalues live in the node's aux slot.
    Eigh { src: Var, boundary: Option<usize> },
    /// Eigenvalues of an `Eigh` node as an n×1 column.
    EigenValues(Var),
    /// x = A⁻¹ b with constant b.
    Solve(Var, DVector<f64>),
    /// Σ_k c_k M_k over constant matrices.
    Weighted(Var, Vec<DMatrix<f64>>),
    /// Σ_k c_k M_k over recorded matrices; uses the first `mats.len()` entries of c.
    Combine(Var, Vec<Var>),
    /// Bordered Pulay matrix of the residuals with B divided by a fixed scale.
    Pulay(Vec<Var>, f64),
    /// J(P) − (α/2) K(P).
    TwoElectron(Var, f64),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::MatMul(a, b) | Op::Hadamard(a, b) | Op::AddRow(a, b) | Op::MulScalar(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Norm(a)
            | Op::Columns(a, _)
            | Op::Eigh { src: a, .. }
            | Op::EigenValues(a)
            | Op::Solve(a, _)
            | Op::Weighted(a, _)
            | Op::TwoElectron(a, _) => vec![*a],
            Op::Combine(c, mats) => std::iter::once(*c).chain(mats.iter().copied()).collect(),
            Op::Pulay(rs, _) => rs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Hadamard(..) => "hadamard",
            Op::AddRow(..) => "add_row",
            Op::Tanh(..) => "tanh",
            Op::Silu(..) => "silu",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Norm(..) => "norm",
            Op::MulScalar(..) => "mul_scalar",
            Op::Columns(..) => "columns",
            Op::Eigh { .. } => "eigh",
            Op::EigenValues(..) => "eigenvalues",
            Op::Solve(..) => "solve",
            Op::Weighted(..) => "weighted",
            Op::Combine(..) => "combine",
            Op::Pulay(..) => "pulay",
            Op::TwoElectron(..) => "two_electron",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: DMatrix<f64>,
    aux: Option<DMatrix<f64>>,
}

/// A near-degenerate eigenvalue pair met during recording.
#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyFlag {
    pub op_index: usize,
    pub i: usize,
    pub j: usize,
    pub gap: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Recorded computation. The optional ERI tensor backs `two_electron`.
#[derive(Clone, Debug)]
pub struct Tape<'a> {
    nodes: Vec<Node>,
    eri: Option<&'a Eri>,
    flags: Vec<DegeneracyFlag>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), eri: None, flags: Vec::new() }
    }

    pub fn with_eri(eri: &'a Eri) -> Self {
        Tape { nodes: Vec::new(), eri: Some(eri), flags: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values; the gradient buffers of a backward
    /// pass need at most the same again.
    pub fn size_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| 8 * (n.value.len() + n.aux.as_ref().map_or(0, |a| a.len())))
            .sum()
    }

    pub fn degeneracy_flags(&self) -> &[DegeneracyFlag] {
        &self.flags
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn eval(&self, op: &Op) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        let v = |x: &Var| &self.nodes[x.0].value;
        let out = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => v(a) + v(b),
            Op::Sub(a, b) => v(a) - v(b),
            Op::Scale(a, c) => v(a) * *c,
            Op::MatMul(a, b) => v(a) * v(b),
            Op::Transpose(a) => v(a).transpose(),
            Op::Hadamard(a, b) => v(a).component_mul(v(b)),
            Op::AddRow(a, r) => {
                let mut m = v(a).clone();
                for mut row in m.row_iter_mut() {
                    row += v(r);
                }
                m
            }
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Silu(a) => v(a).map(|x| x * sigmoid(x)),
            Op::Abs(a) => v(a).map(f64::abs),
            Op::Sqrt(a) => v(a).map(f64::sqrt),
            Op::Sum(a) => DMatrix::from_element(1, 1, v(a).sum()),
            Op::Norm(a) => DMatrix::from_element(1, 1, v(a).norm()),
            Op::MulScalar(a, s) => v(a) * v(s)[(0, 0)],
            Op::Columns(a, idx) => {
                let src = v(a);
                DMatrix::from_fn(src.nrows(), idx.len(), |i, k| src[(i, idx[k])])
            }
            Op::Eigh { src, .. } => {
                let (w, u) = linalg::eigh(v(src))?;
                let n = w.len();
                return Ok((u, Some(DMatrix::from_column_slice(n, 1, w.as_slice()))));
            }
            Op::EigenValues(e) => self.nodes[e.0].aux.clone().expect("eigh node carries eigenvalues"),
            Op::Solve(a, b) => {
                let x = linalg::solve_guarded(v(a), b, crate::diis::MAX_CONDITION)
                    .ok_or_else(|| Error::Eigen("singular system on the tape".into()))?;
                DMatrix::from_column_slice(x.len(), 1, x.as_slice())
            }
            Op::Weighted(c, mats) => {
                let c = v(c);
                let mut out = DMatrix::zeros(mats[0].nrows(), mats[0].ncols());
                for (k, m) in mats.iter().enumerate() {
                    out += m * c[k];
                }
                out
            }
            Op::Combine(c, mats) => {
                let c = v(c);
                let mut out = DMatrix::zeros(v(&mats[0]).nrows(), v(&mats[0]).ncols());
                for (k, m) in mats.iter().enumerate() {
                    out += v(m) * c[k];
                }
                out
            }
            Op::Pulay(rs, scale) => {
                let t = rs.len();
                let mut b = DMatrix::zeros(t + 1, t + 1);
                for j in 0..t {
                    for k in 0..=j {
                        let d = linalg::dot(v(&rs[j]), v(&rs[k]));
                        b[(j, k)] = d;
                        b[(k, j)] = d;
                    }
                }
                for j in 0..t {
                    for k in 0..t {
                        b[(j, k)] /= scale;
                    }
                }
                for j in 0..t {
                    b[(j, t)] = -1.0;
                    b[(t, j)] = -1.0;
                }
                b
            }
            Op::TwoElectron(p, alpha) => {
                let eri = self.eri.ok_or_else(|| Error::Config("tape has no ERI tensor".into()))?;
                scf::two_electron_fock(v(p), eri, *alpha)
            }
        };
        Ok((out, None))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, aux) = self.eval(&op)?;
        if let (Op::Eigh { boundary: Some(k), .. }, Some(w)) = (&op, &aux) {
            // Only pairs straddling the occupation boundary can change a
            // gauge-invariant loss; degeneracies inside a subspace are benign.
            let k = *k;
            if k > 0 && k < w.nrows() {
                let gap = w[k] - w[k - 1];
                if gap.abs() < DEGENERACY_FLAG {
                    self.flags.push(DegeneracyFlag { op_index: self.nodes.len(), i: k - 1, j: k, gap });
                }
            }
        }
        self.nodes.push(Node { op, value, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_infallible(&mut self, op: Op) -> Var {
        self.push(op).expect("primitive cannot fail")
    }

    /// Parameter or constant input.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, aux: None });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push_infallible(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push_infallible(Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push_infallible(Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push_infallible(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push_infallible(Op::Transpose(a))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        self.push_infallible(Op::Hadamard(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.push_infallible(Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push_infallible(Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.push_infallible(Op::Silu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.push_infallible(Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push_infallible(Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push_infallible(Op::Sum(a))
    }

    pub fn norm(&mut self, a: Var) -> Var {
        self.push_infallible(Op::Norm(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        self.push_infallible(Op::MulScalar(a, s))
    }

    pub fn columns(&mut self, a: Var, idx: Vec<usize>) -> Var {
        self.push_infallible(Op::Columns(a, idx))
    }

    pub fn column_range(&mut self, a: Var, range: std::ops::Range<usize>) -> Var {
        self.columns(a, range.collect())
    }

    /// Symmetric eigendecomposition (ascending). Returns (eigenvectors,
    /// eigenvalues as a column). With `boundary = Some(k)`, a gap below
    /// [`DEGENERACY_FLAG`] between eigenvalues k−1 and k is flagged.
    pub fn eigh(&mut self, a: Var, boundary: Option<usize>) -> Result<(Var, Var)> {
        let u = self.push(Op::Eigh { src: a, boundary })?;
        let w = self.push(Op::EigenValues(u))?;
        Ok((u, w))
    }

    pub fn solve(&mut self, a: Var, b: DVector<f64>) -> Result<Var> {
        self.push(Op::Solve(a, b))
    }

    /// Σ_k c_k M_k over constant matrices, `c` indexed in column-major order.
    pub fn weighted(&mut self, c: Var, mats: Vec<DMatrix<f64>>) -> Var {
        self.push_infallible(Op::Weighted(c, mats))
    }

    /// Σ_k c_k M_k over recorded matrices.
    pub fn combine(&mut self, c: Var, mats: Vec<Var>) -> Var {
        self.push_infallible(Op::Combine(c, mats))
    }

    pub fn pulay(&mut self, residuals: Vec<Var>, scale: f64) -> Var {
        self.push_infallible(Op::Pulay(residuals, scale))
    }

    pub fn two_electron(&mut self, p: Var, alpha: f64) -> Result<Var> {
        self.push(Op::TwoElectron(p, alpha))
    }

    /// Recomputes every non-leaf value from the leaves, in recording order.
    pub fn replay(&self) -> Result<Tape<'a>> {
        let mut out = Tape { nodes: Vec::with_capacity(self.nodes.len()), eri: self.eri, flags: Vec::new() };
        for node in &self.nodes {
            match node.op {
                Op::Leaf => {
                    out.nodes.push(node.clone());
                }
                _ => {
                    out.push(node.op.clone())?;
                }
            }
        }
        Ok(out)
    }

    /// Whether every recorded value equals `other`'s bit for bit.
    pub fn bitwise_equal(&self, other: &Tape) -> bool {
        self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| {
                let same = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
                    x.shape() == y.shape() && x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
                };
                same(&a.value, &b.value)
                    && match (&a.aux, &b.aux) {
                        (Some(x), Some(y)) => same(x, y),
                        (None, None) => true,
                        _ => false,
                    }
            })
    }

    /// Adjoints of every recorded value with respect to the 1×1 `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; n];
        let mut aux_grads: Vec<Option<DMatrix<f64>>> = vec![None; n];
        grads[output.0] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(slot: &mut Option<DMatrix<f64>>, g: DMatrix<f64>) {
            match slot {
                Some(x) => *x += g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let gw = aux_grads[idx].take();
            let g = match (grads[idx].take(), &node.op, &gw) {
                (Some(g), _, _) => g,
                (None, Op::Eigh { .. }, Some(_)) => DMatrix::zeros(node.value.nrows(), node.value.ncols()),
                _ => continue,
            };
            let val = |x: &Var| &self.nodes[x.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], g.clone());
                    acc(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[a.0], g.clone());
                    acc(&mut grads[b.0], -g);
                }
                Op::Scale(a, c) => acc(&mut grads[a.0], g * *c),
                Op::MatMul(a, b) => {
                    acc(&mut grads[a.0], &g * val(b).transpose());
                    acc(&mut grads[b.0], val(a).transpose() * &g);
                }
                Op::Transpose(a) => acc(&mut grads[a.0], g.transpose()),
                Op::Hadamard(a, b) => {
                    acc(&mut grads[a.0], g.component_mul(val(b)));
                    acc(&mut grads[b.0], g.component_mul(val(a)));
                }
                Op::AddRow(a, r) => {
                    let mut gr = DMatrix::zeros(1, g.ncols());
                    for row in g.row_iter() {
                        gr += row;
                    }
                    acc(&mut grads[a.0], g);
                    acc(&mut grads[r.0], gr);
                }
                Op::Tanh(a) => acc(&mut grads[a.0], g.component_mul(&node.value.map(|t| 1.0 - t * t))),
                Op::Silu(a) => {
                    let d = val(a).map(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads[a.0], g.component_mul(&d));
                }
                Op::Abs(a) => acc(&mut grads[a.0], g.component_mul(&val(a).map(f64::signum))),
                Op::Sqrt(a) => acc(&mut grads[a.0], g.zip_map(&node.value, |gi, s| if s > 0.0 { gi * 0.5 / s } else { 0.0 })),
                Op::Sum(a) => {
                    let src = val(a);
                    acc(&mut grads[a.0], DMatrix::from_element(src.nrows(), src.ncols(), g[(0, 0)]));
                }
                Op::Norm(a) => {
                    let nrm = node.value[(0, 0)];
                    if nrm > 0.0 {
                        acc(&mut grads[a.0], val(a) * (g[(0, 0)] / nrm));
                    }
                }
                Op::MulScalar(a, s) => {
                    let sv = val(s)[(0, 0)];
                    acc(&mut grads[s.0], DMatrix::from_element(1, 1, linalg::dot(&g, val(a))));
                    acc(&mut grads[a.0], g * sv);
                }
                Op::Columns(a, cols) => {
                    let src = val(a);
                    let mut ga = DMatrix::zeros(src.nrows(), src.ncols());
                    for (k, &c) in cols.iter().enumerate() {
                        let mut col = ga.column_mut(c);
                        col += g.column(k);
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::Eigh { src, .. } => {
                    let w = node.aux.as_ref().expect("eigenvalues");
                    let ga = eig_backward(&node.value, &DVector::from_column_slice(w.as_slice()), &g, gw.as_ref());
                    acc(&mut grads[src.0], ga);
                }
                Op::EigenValues(e) => acc(&mut aux_grads[e.0], g),
                Op::Solve(a, _) => {
                    let x = &node.value;
                    let at = val(a).transpose();
                    let gb = at.full_piv_lu().solve(&g).ok_or(Error::NonFiniteGradient { op_index: idx, op: "solve" })?;
                    acc(&mut grads[a.0], -(&gb * x.transpose()));
                }
                Op::Weighted(c, mats) => {
                    let (r, cols) = val(c).shape();
                    let gc = DMatrix::from_fn(r, cols, |i, j| mats.get(j * r + i).map_or(0.0, |m| linalg::dot(&g, m)));
                    acc(&mut grads[c.0], gc);
                }
                Op::Combine(c, mats) => {
                    let cv = val(c);
                    let (r, cols) = cv.shape();
                    let gc = DMatrix::from_fn(r, cols, |i, j| mats.get(j * r + i).map_or(0.0, |m| linalg::dot(&g, val(m))));
                    acc(&mut grads[c.0], gc);
                    for (k, m) in mats.iter().enumerate() {
                        acc(&mut grads[m.0], &g * cv[k]);
                    }
                }
                Op::Pulay(rs, scale) => {
                    let t = rs.len();
                    for j in 0..t {
                        let mut gj = DMatrix::zeros(val(&rs[j]).nrows(), val(&rs[j]).ncols());
                        for k in 0..t {
                            gj += val(&rs[k]) * ((g[(j, k)] + g[(k, j)]) / scale);
                        }
                        acc(&mut grads[rs[j].0], gj);
                    }
                }
                Op::TwoElectron(p, alpha) => {
                    // The contraction is self-adjoint under the ERI permutational symmetry.
                    let eri = self.eri.ok_or_else(|| Error::Config("tape has no ERI tensor".into()))?;
                    acc(&mut grads[p.0], scf::two_electron_fock(&g, eri, *alpha));
                }
            }
            for p in node.op.inputs() {
                let bad = |s: &Option<DMatrix<f64>>| s.as_ref().is_some_and(|m| !linalg::all_finite(m));
                if bad(&grads[p.0]) || bad(&aux_grads[p.0]) {
                    return Err(Error::NonFiniteGradient { op_index: idx, op: node.op.name() });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adjoint of A = U diag(ε) Uᵀ for symmetric A.
///
/// Ā = sym(U (diag(ε̄) + F ∘ (UᵀŪ)) Uᵀ) with
/// F_ij = (ε_j − ε_i) / ((ε_j − ε_i)² + δ²), δ = [`EIG_BROADENING`].
pub fn eig_backward(
    u: &DMatrix<f64>,
    eps: &DVector<f64>,
    u_bar: &DMatrix<f64>,
    eps_bar: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let n = eps.len();
    let utg = u.transpose() * u_bar;
    let mut inner = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = eps[j] - eps[i];
                inner[(i, j)] = d / (d * d + EIG_BROADENING * EIG_BROADENING) * utg[(i, j)];
            }
        }
        if let Some(w) = eps_bar {
            inner[(i, i)] = w[i];
        }
    }
    linalg::symmetrize(&(u * inner * u.transpose()))
}

/// Adjoints from one backward pass. Unreached values have zero adjoint.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, zeros of `shape` when unreached.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> DMatrix<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
    }
}

/// Values recorded for a truncated SCF run: iterate t holds P^(t), F(P^(t))
/// and, for t ≥ 1, the orbitals that produced P^(t).
#[derive(Clone, Debug)]
pub struct RecordedTrajectory {
    pub densities: Vec<Var>,
    pub focks: Vec<Var>,
    pub orbitals: Vec<Option<Var>>,
    pub context: ContextVars,
    pub n_occ: usize,
    pub n_basis: usize,
}

impl RecordedTrajectory {
    /// Roothaan steps recorded (iterates minus one).
    pub fn steps(&self) -> usize {
        self.focks.len() - 1
    }
}

/// Records `steps` SCF iterations from `p0` with the same arithmetic, in the
/// same order, as [`scf::scf_run_steps`], so every recorded value matches the
/// plain run bit for bit. The DIIS window (and any eviction) is decided on
/// the values; that branch choice is not differentiated.
pub fn record_scf(
    tape: &mut Tape,
    p0: Var,
    c0: Option<Var>,
    cv: ContextVars,
    ctx: &BasisContext,
    options: &ScfOptions,
    steps: usize,
) -> Result<RecordedTrajectory> {
    let alpha = options.exchange_fraction;
    let n_occ = ctx.n_occ;
    let mut history: std::collections::VecDeque<(Var, Var)> = std::collections::VecDeque::new();
    let mut densities = vec![p0];
    let mut orbitals = vec![c0];
    let mut focks = Vec::with_capacity(steps + 1);
    let mut p = p0;
    for t in 0..=steps {
        let two = tape.two_electron(p, alpha)?;
        let f = tape.add(cv.hcore, two);
        focks.push(f);
        if t == steps {
            break;
        }
        let f_next = if options.diis_enabled {
            let fp = tape.matmul(f, p);
            let fps = tape.matmul(fp, cv.overlap);
            let fps_t = tape.transpose(fps);
            let comm = tape.sub(fps, fps_t);
            let xr = tape.matmul(cv.x_t, comm);
            let r = tape.matmul(xr, cv.x);
            if history.len() == options.diis_history.max(1) {
                history.pop_front();
            }
            history.push_back((f, r));
            let values: Vec<&DMatrix<f64>> = history.iter().map(|(_, r)| tape.value(*r)).collect();
            let (skip, _) = diis::pulay_coefficients(&values);
            for _ in 0..skip {
                history.pop_front();
            }
            let fs: Vec<Var> = history.iter().map(|(f, _)| *f).collect();
            if history.len() == 1 {
                let one = tape.leaf(DMatrix::from_element(1, 1, 1.0));
                tape.combine(one, fs)
            } else {
                let rs: Vec<Var> = history.iter().map(|(_, r)| *r).collect();
                let scale = rs.iter().map(|r| linalg::dot(tape.value(*r), tape.value(*r))).fold(0.0, f64::max);
                let b = tape.pulay(rs, scale);
                let coefficients = tape.solve(b, diis::bordered_rhs(fs.len()))?;
                tape.combine(coefficients, fs)
            }
        } else {
            f
        };
        let (c, p_next) = guess::record_roothaan(tape, f_next, &cv, n_occ)?;
        densities.push(p_next);
        orbitals.push(Some(c));
        p = p_next;
    }
    Ok(RecordedTrajectory { densities, focks, orbitals, context: cv, n_occ, n_basis: ctx.n_basis })
}

/// Result of one differentiated run.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub loss: f64,
    /// ∂loss/∂θ, shaped like the model parameters.
    pub gradients: Vec<DMatrix<f64>>,
    /// A near-degenerate occupation boundary was met during recording.
    pub flagged: bool,
    pub tape_nodes: usize,
    pub tape_bytes: usize,
}

/// Records the model guess and `steps` SCF iterations, evaluates `loss_fn` on
/// the recorded trajectory and back-propagates to the model parameters.
pub fn grad<F>(
    loss_fn: F,
    model: &GuessModel,
    inputs: &ModelInputs,
    ctx: &BasisContext,
    options: &ScfOptions,
    steps: usize,
) -> Result<GradResult>
where
    F: FnOnce(&mut Tape, &RecordedTrajectory) -> Result<Var>,
{
    if steps == 0 {
        return Err(Error::Config("at least one SCF step must be recorded".into()));
    }
    let mut tape = Tape::with_eri(&ctx.eri);
    let cv = ContextVars::record(&mut tape, ctx);
    let params: Vec<Var> = model.parameters.iter().map(|p| tape.leaf(p.clone())).collect();
    let g = guess::record_guess(&mut tape, &params, inputs, &cv, ctx.n_occ)?;
    let traj = record_scf(&mut tape, g.density, g.orbitals, cv, ctx, options, steps)?;
    let loss = loss_fn(&mut tape, &traj)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = tape.backward(loss)?;
    let gradients = params.iter().zip(&model.parameters).map(|(v, p)| grads.get_or_zeros(*v, p.shape())).collect();
    Ok(GradResult {
        loss: value,
        gradients,
        flagged: !tape.degeneracy_flags().is_empty(),
        tape_nodes: tape.len(),
        tape_bytes: tape.size_bytes(),
    })
}
