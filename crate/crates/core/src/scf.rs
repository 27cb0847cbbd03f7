//! Restricted closed-shell SCF with scaled exact exchange.
//!
//! Every call to [`fock_build`] increments the caller's [`FockCounter`]; that
//! count is the unit of cost behind ERIC.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diis::{self, DiisState};
use crate::error::{Error, Result};
use crate::integrals::{BasisContext, Eri};
use crate::linalg;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScfOptions {
    pub max_iterations: usize,
    /// Hartree.
    pub energy_threshold: f64,
    /// RMS of the occupied–virtual orbital gradient.
    pub gradient_threshold: f64,
    /// Fraction α of exact exchange; 1 is Hartree–Fock.
    pub exchange_fraction: f64,
    pub diis_enabled: bool,
    pub diis_history: usize,
    /// Charge guess-acquisition Fock builds to the trajectory.
    pub count_init_fock_builds: bool,
}

impl Default for ScfOptions {
    fn default() -> Self {
        ScfOptions {
            max_iterations: 100,
            energy_threshold: 1e-9,
            gradient_threshold: 1e-6,
            exchange_fraction: 1.0,
            diis_enabled: true,
            diis_history: diis::DEFAULT_HISTORY,
            count_init_fock_builds: true,
        }
    }
}

impl ScfOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy_threshold > 0.0 && self.gradient_threshold > 0.0) {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.exchange_fraction > 0.0 && self.exchange_fraction <= 1.0) {
            return Err(Error::Config("exchange_fraction must lie in (0, 1]".into()));
        }
        if self.diis_history == 0 {
            return Err(Error::Config("diis_history must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of Fock builds performed by one run (or one guess).
#[derive(Debug, Default)]
pub struct FockCounter(AtomicUsize);

impl FockCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub(crate) fn increment(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Shape(format!("{what} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
    }
    if !linalg::all_finite(m) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// J_{μν} = Σ (μν|λσ) P_{λσ}.
pub fn coulomb(p: &DMatrix<f64>, eri: &Eri) -> DMatrix<f64> {
    let n = eri.dim();
    let data = eri.as_slice();
    let pv: Vec<f64> = (0..n * n).map(|k| p[(k / n, k % n)]).collect();
    DMatrix::from_fn(n, n, |mu, nu| {
        let row = &data[(mu * n + nu) * n * n..(mu * n + nu + 1) * n * n];
        row.iter().zip(&pv).map(|(a, b)| a * b).sum()
    })
}

/// K_{μν} = Σ (μλ|νσ) P_{λσ}.
pub fn exchange(p: &DMatrix<f64>, eri: &Eri) -> DMatrix<f64> {
    let n = eri.dim();
    let data = eri.as_slice();
    let mut k = DMatrix::zeros(n, n);
    for mu in 0..n {
        for lam in 0..n {
            let block = &data[(mu * n + lam) * n * n..(mu * n + lam + 1) * n * n];
            for nu in 0..n {
                let row = &block[nu * n..(nu + 1) * n];
                let mut acc = 0.0;
                for sig in 0..n {
                    acc += row[sig] * p[(lam, sig)];
                }
                k[(mu, nu)] += acc;
            }
        }
    }
    k
}

/// Two-electron part G(P) = J(P) − (α/2) K(P); linear in P.
pub fn two_electron_fock(p: &DMatrix<f64>, eri: &Eri, alpha: f64) -> DMatrix<f64> {
    coulomb(p, eri) - exchange(p, eri) * (0.5 * alpha)
}

/// F = Hcore + J(P) − (α/2) K(P).
pub fn fock_build(p: &DMatrix<f64>, ctx: &BasisContext, alpha: f64, counter: &FockCounter) -> Result<DMatrix<f64>> {
    check_square(p, ctx.n_basis, "density")?;
    counter.increment();
    Ok(&ctx.hcore + two_electron_fock(p, &ctx.eri, alpha))
}

/// Solves F C = S C diag(ε) through the orthogonalizer, ε ascending.
pub fn solve_roothaan(f: &DMatrix<f64>, ctx: &BasisContext) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_square(f, ctx.n_basis, "Fock matrix")?;
    let fp = ctx.x.transpose() * f * &ctx.x;
    let (eps, u) = linalg::eigh(&fp)?;
    Ok((&ctx.x * u, eps))
}

/// P = 2 C_occ C_occᵀ.
pub fn density_from_orbitals(c: &DMatrix<f64>, n_occ: usize) -> Result<DMatrix<f64>> {
    if n_occ > c.ncols() {
        return Err(Error::OutOfRange(format!("n_occ = {n_occ} exceeds {} orbitals", c.ncols())));
    }
    let occ = c.columns(0, n_occ);
    Ok(occ * occ.transpose() * 2.0)
}

/// E = ½ Σ P∘(Hcore + F) + E_nuc. `f` must be the Fock matrix of `p`.
pub fn energy(p: &DMatrix<f64>, f: &DMatrix<f64>, ctx: &BasisContext) -> f64 {
    0.5 * (linalg::dot(p, &ctx.hcore) + linalg::dot(p, f)) + ctx.nuclear_repulsion
}

/// G = C_occᵀ F C_virt.
pub fn orbital_gradient(c: &DMatrix<f64>, f: &DMatrix<f64>, n_occ: usize) -> DMatrix<f64> {
    let n = c.ncols();
    c.columns(0, n_occ).transpose() * f * c.columns(n_occ, n - n_occ)
}

/// sqrt(mean |G_ia|²); zero when there are no virtual orbitals.
pub fn gradient_rms(c: &DMatrix<f64>, f: &DMatrix<f64>, n_occ: usize) -> f64 {
    let n_virt = c.ncols() - n_occ;
    if n_occ == 0 || n_virt == 0 {
        return 0.0;
    }
    let g = orbital_gradient(c, f, n_occ);
    (g.norm_squared() / (n_occ * n_virt) as f64).sqrt()
}

/// Natural orbitals of `p`: columns ordered by descending occupation, ties
/// by index. The returned occupations are the eigenvalues of S^{1/2} P S^{1/2}.
pub fn natural_orbitals(p: &DMatrix<f64>, ctx: &BasisContext) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let a = &ctx.s_half * p * &ctx.s_half;
    let (w, u) = linalg::eigh(&a)?;
    let order = descending_order(&w);
    let u_sorted = u.select_columns(order.iter());
    Ok((&ctx.x * u_sorted, DVector::from_iterator(w.len(), order.iter().map(|&i| w[i]))))
}

/// Indices of `w` by descending value, ties by index.
pub fn descending_order(w: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&i, &j| w[j].total_cmp(&w[i]).then(i.cmp(&j)));
    order
}

/// A starting point for the SCF.
#[derive(Clone, Debug)]
pub struct Guess {
    pub density: DMatrix<f64>,
    /// Orbitals whose occupied block spans `density`, when the guess has them.
    pub orbitals: Option<DMatrix<f64>>,
    /// Fock builds spent acquiring the guess.
    pub fock_builds_spent: usize,
    /// Set when the guess hit a degenerate or fallback path.
    pub flagged: bool,
}

impl Guess {
    pub fn from_density(density: DMatrix<f64>) -> Self {
        Guess { density, orbitals: None, fock_builds_spent: 0, flagged: false }
    }
}

#[derive(Clone, Debug)]
pub struct Iterate {
    pub density: DMatrix<f64>,
    pub fock: DMatrix<f64>,
    pub orbitals: DMatrix<f64>,
    pub orbital_energies: DVector<f64>,
    pub energy: f64,
    pub gradient_rms: f64,
    /// ‖R̃‖_F of (F, P).
    pub residual_norm: f64,
}

#[derive(Clone, Debug)]
pub struct ScfTrajectory {
    /// Iterate t holds P^(t), F(P^(t)) and the orbitals that produced P^(t).
    pub iterates: Vec<Iterate>,
    /// Fock builds of the loop plus, when counted, those of the guess.
    pub fock_build_count: usize,
    pub guess_fock_builds: usize,
    pub converged: bool,
    /// Loop iterations (= loop Fock builds) needed to converge.
    pub iterations_to_converge: Option<usize>,
    /// Set when |E| exceeded 1e6 Hartree.
    pub aborted: bool,
}

impl ScfTrajectory {
    /// Fock builds performed inside the SCF loop.
    pub fn loop_iterations(&self) -> usize {
        self.iterates.len()
    }

    pub fn final_iterate(&self) -> &Iterate {
        self.iterates.last().expect("trajectory has at least one iterate")
    }

    pub fn energy(&self) -> f64 {
        self.final_iterate().energy
    }

    /// Per-iteration E, G_rms and residual norm, plus the final P and C as
    /// row-major arrays.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Step {
            energy: f64,
            gradient_rms: f64,
            residual_norm: f64,
        }
        #[derive(Serialize)]
        struct Export {
            converged: bool,
            iterations: usize,
            fock_builds: usize,
            n_basis: usize,
            steps: Vec<Step>,
            density: Vec<f64>,
            orbitals: Vec<f64>,
        }
        let last = self.final_iterate();
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        let export = Export {
            converged: self.converged,
            iterations: self.loop_iterations(),
            fock_builds: self.fock_build_count,
            n_basis: last.density.nrows(),
            steps: self
                .iterates
                .iter()
                .map(|it| Step { energy: it.energy, gradient_rms: it.gradient_rms, residual_norm: it.residual_norm })
                .collect(),
            density: row_major(&last.density),
            orbitals: row_major(&last.orbitals),
        };
        Ok(serde_json::to_string_pretty(&export)?)
    }

    /// Soft diagnostic: energies non-increasing from iterate `from` on.
    pub fn energy_non_increasing_from(&self, from: usize, tol: f64) -> bool {
        self.iterates.windows(2).skip(from).all(|w| w[1].energy <= w[0].energy + tol)
    }
}

enum Stop {
    Converge,
    Steps(usize),
}

const DIVERGENCE_LIMIT: f64 = 1e6;

fn run(guess: &Guess, ctx: &BasisContext, options: &ScfOptions, stop: Stop) -> Result<ScfTrajectory> {
    options.validate()?;
    let n = ctx.n_basis;
    check_square(&guess.density, n, "initial density")?;
    let electrons = linalg::dot(&guess.density, &ctx.overlap);
    if (electrons - ctx.n_electrons as f64).abs() > 1e-6 {
        return Err(Error::OutOfRange(format!(
            "initial density holds {electrons:.8} electrons, expected {}",
            ctx.n_electrons
        )));
    }
    let counter = FockCounter::new();
    let mut diis_state = DiisState::new(options.diis_history);
    let mut p = guess.density.clone();
    let (mut c, mut eps) = match &guess.orbitals {
        Some(c) => (c.clone(), DVector::zeros(n)),
        None => natural_orbitals(&p, ctx)?,
    };
    let max_iter = match stop {
        Stop::Converge => options.max_iterations,
        Stop::Steps(t) => t + 1,
    };
    let mut iterates: Vec<Iterate> = Vec::new();
    let mut converged = false;
    let mut aborted = false;
    for it in 0..max_iter {
        let f = fock_build(&p, ctx, options.exchange_fraction, &counter)?;
        let e = energy(&p, &f, ctx);
        let g = gradient_rms(&c, &f, ctx.n_occ);
        let r = diis::diis_residual(&f, &p, ctx);
        let r_norm = r.norm();
        let prev_e = iterates.last().map(|x| x.energy);
        iterates.push(Iterate {
            density: p.clone(),
            fock: f.clone(),
            orbitals: c.clone(),
            orbital_energies: eps.clone(),
            energy: e,
            gradient_rms: g,
            residual_norm: r_norm,
        });
        if !e.is_finite() || e.abs() > DIVERGENCE_LIMIT {
            aborted = true;
            break;
        }
        if let (Stop::Converge, Some(pe)) = (&stop, prev_e) {
            if (e - pe).abs() < options.energy_threshold && g < options.gradient_threshold {
                converged = true;
                break;
            }
        }
        if it + 1 == max_iter {
            break;
        }
        let f_next = if options.diis_enabled {
            diis_state.push(f, r);
            diis::diis_extrapolate(&mut diis_state)
        } else {
            f
        };
        let (c_new, eps_new) = solve_roothaan(&f_next, ctx)?;
        p = density_from_orbitals(&c_new, ctx.n_occ)?;
        c = c_new;
        eps = eps_new;
    }
    let guess_builds = if options.count_init_fock_builds { guess.fock_builds_spent } else { 0 };
    let loops = iterates.len();
    Ok(ScfTrajectory {
        iterates,
        fock_build_count: counter.get() + guess_builds,
        guess_fock_builds: guess_builds,
        converged,
        iterations_to_converge: converged.then_some(loops),
        aborted,
    })
}

/// Runs the SCF to convergence from a bare density.
pub fn scf_run(p0: &DMatrix<f64>, ctx: &BasisContext, options: &ScfOptions) -> Result<ScfTrajectory> {
    run(&Guess::from_density(p0.clone()), ctx, options, Stop::Converge)
}

/// Runs the SCF to convergence from a guess, charging its Fock builds.
pub fn scf_run_guess(guess: &Guess, ctx: &BasisContext, options: &ScfOptions) -> Result<ScfTrajectory> {
    run(guess, ctx, options, Stop::Converge)
}

/// Exactly `steps` Roothaan steps with convergence checks disabled; the
/// trajectory holds iterates 0..=steps.
pub fn scf_run_steps(guess: &Guess, ctx: &BasisContext, options: &ScfOptions, steps: usize) -> Result<ScfTrajectory> {
    run(guess, ctx, options, Stop::Steps(steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem_io::{parse_xyz, BasisSet};

    fn h2() -> BasisContext {
        let m = parse_xyz("2\n\nH 0 0 0\nH 0 0 0.7408481486").unwrap();
        BasisContext::build(&m, &BasisSet::sto3g()).unwrap()
    }

    #[test]
    fn zero_density_gives_core_hamiltonian() {
        let ctx = h2();
        let counter = FockCounter::new();
        let f = fock_build(&DMatrix::zeros(2, 2), &ctx, 1.0, &counter).unwrap();
        assert_eq!(f, ctx.hcore);
        assert_eq!(counter.get(), 1);
        assert_eq!(energy(&DMatrix::zeros(2, 2), &f, &ctx), ctx.nuclear_repulsion);
    }

    #[test]
    fn fock_rejects_bad_input() {
        let ctx = h2();
        let c = FockCounter::new();
        assert!(matches!(fock_build(&DMatrix::zeros(3, 3), &ctx, 1.0, &c), Err(Error::Shape(_))));
        let mut p = DMatrix::zeros(2, 2);
        p[(0, 1)] = f64::NAN;
        assert!(matches!(fock_build(&p, &ctx, 1.0, &c), Err(Error::NonFinite(_))));
        assert_eq!(c.get(), 0);
    }

    #[test]
    fn density_simple_cases() {
        let p = density_from_orbitals(&DMatrix::from_element(1, 1, 1.0), 1).unwrap();
        assert_eq!(p[(0, 0)], 2.0);
        assert!(density_from_orbitals(&DMatrix::identity(2, 2), 3).is_err());
        let c = DMatrix::from_row_slice(2, 2, &[0.6, 0.8, 0.8, -0.6]);
        let mut flipped = c.clone();
        flipped.column_mut(0).neg_mut();
        assert_eq!(density_from_orbitals(&c, 1).unwrap(), density_from_orbitals(&flipped, 1).unwrap());
    }

    #[test]
    fn roothaan_on_identity_metric() {
        let mut ctx = h2();
        ctx.overlap = DMatrix::identity(2, 2);
        ctx.x = DMatrix::identity(2, 2);
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![0.7, -0.2]));
        let (c, e) = solve_roothaan(&f, &ctx).unwrap();
        assert_eq!(e.as_slice(), &[-0.2, 0.7]);
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn gradient_rms_single_entry() {
        let c = DMatrix::identity(2, 2);
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.3, 1.0]);
        assert!((gradient_rms(&c, &f, 1) - 0.3).abs() < 1e-15);
        assert_eq!(gradient_rms(&c, &f, 2), 0.0);
    }

    #[test]
    fn options_validation() {
        let mut o = ScfOptions::default();
        assert!(o.validate().is_ok());
        o.energy_threshold = 0.0;
        assert!(o.validate().is_err());
        let o = ScfOptions { max_iterations: 0, ..Default::default() };
        assert!(o.validate().is_err());
        let o = ScfOptions { exchange_fraction: 1.5, ..Default::default() };
        assert!(o.validate().is_err());
    }
}
