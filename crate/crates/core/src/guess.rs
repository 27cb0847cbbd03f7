//! Initial guesses: core, GWH and SAD, purification onto valid densities, and
//! the learned Δ-density / Δ-Fock block-scaling model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::chem_io::{self, Atom, BasisSet, Molecule};
use crate::diis::{self, DiisState};
use crate::error::{Error, Result};
use crate::integrals::{BasisContext, DEFAULT_ERI_CAP};
use crate::linalg;
use crate::scf::{self, FockCounter, Guess};

/// Wolfsberg–Helmholz constant.
pub const GWH_K: f64 = 1.75;

/// Natural-occupation gap below which purification reports a tie.
pub const PURIFY_GAP: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassicalKind {
    Core,
    Gwh,
    Sad,
}

impl ClassicalKind {
    pub const ALL: [ClassicalKind; 3] = [ClassicalKind::Core, ClassicalKind::Gwh, ClassicalKind::Sad];

    pub fn name(self) -> &'static str {
        match self {
            ClassicalKind::Core => "core",
            ClassicalKind::Gwh => "gwh",
            ClassicalKind::Sad => "sad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Spin- and spherically-averaged atomic densities, one per element, each in
/// the element's own basis functions.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomicDensityTable {
    pub exchange_fraction: f64,
    densities: BTreeMap<u32, DMatrix<f64>>,
}

/// Ground-state occupations (1s, 2s, 2p total) of a light atom.
fn shell_occupations(z: u32) -> (Vec<f64>, f64) {
    let z = z as f64;
    let s1 = z.min(2.0);
    let s2 = (z - 2.0).clamp(0.0, 2.0);
    let p = (z - 4.0).max(0.0);
    let s = if s2 > 0.0 { vec![s1, s2] } else { vec![s1] };
    (s, p)
}

/// Fractional-occupation SCF of a single atom.
pub fn atomic_density(z: u32, basis: &BasisSet, alpha: f64) -> Result<DMatrix<f64>> {
    let atom = Molecule { name: "atom".into(), atoms: vec![Atom { atomic_number: z, position: [0.0; 3] }], charge: 0 };
    let shells = basis.shells_for(&atom)?;
    let ctx = BasisContext::from_shells(&atom, &shells, DEFAULT_ERI_CAP)?;
    let n = ctx.n_basis;
    let (s_occ, p_total) = shell_occupations(z);
    let n_p = ctx.ao_l.iter().filter(|&&l| l == 1).count();
    if s_occ.len() > n - n_p || (p_total > 0.0 && n_p < 3) {
        return Err(Error::AtomicScf(z));
    }
    let occupy = |c: &DMatrix<f64>| {
        // Classify orbitals by their weight on s functions.
        let sc = &ctx.overlap * c;
        let mut s_orbs = Vec::new();
        let mut p_orbs = Vec::new();
        for i in 0..n {
            let w: f64 = (0..n).filter(|&mu| ctx.ao_l[mu] == 0).map(|mu| c[(mu, i)] * sc[(mu, i)]).sum();
            if w > 0.5 {
                s_orbs.push(i);
            } else {
                p_orbs.push(i);
            }
        }
        let mut p = DMatrix::zeros(n, n);
        for (&i, &occ) in s_orbs.iter().zip(&s_occ) {
            p += c.column(i) * c.column(i).transpose() * occ;
        }
        if p_total > 0.0 {
            for &i in p_orbs.iter().take(3) {
                p += c.column(i) * c.column(i).transpose() * (p_total / 3.0);
            }
        }
        p
    };
    let counter = FockCounter::new();
    let (c, _) = scf::solve_roothaan(&ctx.hcore, &ctx)?;
    let mut p = occupy(&c);
    let mut state = DiisState::new(diis::DEFAULT_HISTORY);
    let mut last_e = f64::INFINITY;
    for _ in 0..200 {
        let f = scf::fock_build(&p, &ctx, alpha, &counter)?;
        let e = scf::energy(&p, &f, &ctx);
        let r = diis::diis_residual(&f, &p, &ctx);
        if r.norm() < 1e-10 && (e - last_e).abs() < 1e-12 {
            return Ok(linalg::symmetrize(&p));
        }
        last_e = e;
        state.push(f, r);
        let f_next = diis::diis_extrapolate(&mut state);
        let (c, _) = scf::solve_roothaan(&f_next, &ctx)?;
        p = occupy(&c);
    }
    Err(Error::AtomicScf(z))
}

impl AtomicDensityTable {
    pub fn build(basis: &BasisSet, elements: &[u32], alpha: f64) -> Result<Self> {
        let mut densities = BTreeMap::new();
        for &z in elements {
            densities.insert(z, atomic_density(z, basis, alpha)?);
        }
        Ok(AtomicDensityTable { exchange_fraction: alpha, densities })
    }

    /// Table for every element of the bundled STO-3G set.
    pub fn sto3g(alpha: f64) -> Result<Self> {
        Self::build(&BasisSet::sto3g(), &SUPPORTED_ELEMENTS, alpha)
    }

    pub fn get(&self, z: u32) -> Result<&DMatrix<f64>> {
        self.densities.get(&z).ok_or(Error::MissingAtomicDensity(z))
    }

    pub fn elements(&self) -> impl Iterator<Item = u32> + '_ {
        self.densities.keys().copied()
    }
}

/// Elements the model's one-hot features and the bundled basis cover.
pub const SUPPORTED_ELEMENTS: [u32; 6] = [1, 3, 6, 7, 8, 9];

/// Block-diagonal superposition of atomic densities (before purification).
pub fn sad_density(ctx: &BasisContext, table: &AtomicDensityTable) -> Result<DMatrix<f64>> {
    let mut p = DMatrix::zeros(ctx.n_basis, ctx.n_basis);
    for (a, range) in ctx.atom_ranges().into_iter().enumerate() {
        let d = table.get(ctx.atomic_numbers[a])?;
        if d.nrows() != range.len() {
            return Err(Error::Shape(format!("atomic density for Z={} has the wrong size", ctx.atomic_numbers[a])));
        }
        p.view_mut((range.start, range.start), (range.len(), range.len())).copy_from(d);
    }
    Ok(p)
}

/// Occupied natural-orbital indices (descending occupation, ties by index)
/// and whether the occupation boundary is degenerate.
fn occupied_selection(w: &DVector<f64>, n_occ: usize) -> (Vec<usize>, bool) {
    let order = scf::descending_order(w);
    let tie = n_occ > 0 && n_occ < w.len() && (w[order[n_occ - 1]] - w[order[n_occ]]).abs() < PURIFY_GAP;
    (order[..n_occ].to_vec(), tie)
}

/// Projects a symmetric matrix onto the nearest valid closed-shell density by
/// doubly occupying its `n_occ` strongest natural orbitals. Returns the
/// density and whether the occupation boundary was degenerate.
pub fn purify(p_raw: &DMatrix<f64>, ctx: &BasisContext, n_occ: usize) -> Result<(DMatrix<f64>, bool)> {
    if n_occ > ctx.n_basis {
        return Err(Error::OutOfRange(format!("n_occ = {n_occ} exceeds basis size {}", ctx.n_basis)));
    }
    let a = &ctx.s_half * p_raw * &ctx.s_half;
    let (w, u) = linalg::eigh(&a)?;
    let (idx, tie) = occupied_selection(&w, n_occ);
    let c_occ = &ctx.x * u.select_columns(idx.iter());
    Ok((&c_occ * c_occ.transpose() * 2.0, tie))
}

/// Density from occupying the lowest eigenvectors of `h` in the metric S.
fn occupy_operator(h: &DMatrix<f64>, ctx: &BasisContext) -> Result<Guess> {
    let (c, _) = scf::solve_roothaan(h, ctx)?;
    let p = scf::density_from_orbitals(&c, ctx.n_occ)?;
    Ok(Guess { density: p, orbitals: Some(c), fock_builds_spent: 0, flagged: false })
}

/// H^gwh_μν = ½ K S_μν (H_μμ + H_νν) off the diagonal, H_μμ on it.
pub fn gwh_matrix(ctx: &BasisContext) -> DMatrix<f64> {
    let h = &ctx.hcore;
    DMatrix::from_fn(ctx.n_basis, ctx.n_basis, |i, j| {
        if i == j {
            h[(i, i)]
        } else {
            0.5 * GWH_K * ctx.overlap[(i, j)] * (h[(i, i)] + h[(j, j)])
        }
    })
}

pub fn classical_guess(kind: ClassicalKind, ctx: &BasisContext, table: &AtomicDensityTable) -> Result<Guess> {
    match kind {
        ClassicalKind::Core => occupy_operator(&ctx.hcore, ctx),
        ClassicalKind::Gwh => occupy_operator(&gwh_matrix(ctx), ctx),
        ClassicalKind::Sad => {
            let (p, flagged) = purify(&sad_density(ctx, table)?, ctx, ctx.n_occ)?;
            Ok(Guess { density: p, orbitals: None, fock_builds_spent: 0, flagged })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ansatz {
    DeltaDensity,
    DeltaFock,
}

impl Ansatz {
    pub fn name(self) -> &'static str {
        match self {
            Ansatz::DeltaDensity => "delta_density",
            Ansatz::DeltaFock => "delta_fock",
        }
    }

    /// Fock builds the guess itself costs.
    pub fn fock_builds(self) -> usize {
        match self {
            Ansatz::DeltaDensity => 0,
            Ansatz::DeltaFock => 1,
        }
    }
}

/// Invariant per-pair features: element one-hots, a self flag, radial basis
/// functions of the pair distance, and element-resolved radial environment
/// sums of both atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub elements: Vec<u32>,
    pub n_rbf: usize,
    /// Bohr.
    pub r_cut: f64,
    pub n_env_rbf: usize,
    pub hidden: Vec<usize>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { elements: SUPPORTED_ELEMENTS.to_vec(), n_rbf: 16, r_cut: 10.0, n_env_rbf: 8, hidden: vec![64, 64] }
    }
}

fn gaussian_rbf(r: f64, n: usize, r_cut: f64) -> impl Iterator<Item = f64> {
    let spacing = r_cut / (n.max(2) - 1) as f64;
    let gamma = 0.5 / (spacing * spacing);
    (0..n).map(move |k| (-gamma * (r - k as f64 * spacing).powi(2)).exp())
}

fn cosine_cutoff(r: f64, r_cut: f64) -> f64 {
    if r >= r_cut {
        0.0
    } else {
        0.5 * ((std::f64::consts::PI * r / r_cut).cos() + 1.0)
    }
}

impl FeatureSpec {
    pub fn n_features(&self) -> usize {
        let e = self.elements.len();
        e + 1 + self.n_rbf + e * self.n_env_rbf
    }

    fn element_index(&self, z: u32) -> Result<usize> {
        self.elements.iter().position(|&x| x == z).ok_or(Error::MissingAtomicDensity(z))
    }

    /// Unordered atom pairs (i ≤ j) in row-major order.
    pub fn pairs(n_atoms: usize) -> Vec<(usize, usize)> {
        (0..n_atoms).flat_map(|i| (i..n_atoms).map(move |j| (i, j))).collect()
    }

    /// One row of features per pair of [`FeatureSpec::pairs`].
    pub fn features(&self, molecule: &Molecule) -> Result<DMatrix<f64>> {
        let atoms = &molecule.atoms;
        let e = self.elements.len();
        let kinds: Vec<usize> = atoms.iter().map(|a| self.element_index(a.atomic_number)).collect::<Result<_>>()?;
        let mut env = vec![vec![0.0; e * self.n_env_rbf]; atoms.len()];
        for (a, atom) in atoms.iter().enumerate() {
            for (b, other) in atoms.iter().enumerate() {
                if a == b {
                    continue;
                }
                let r = chem_io::distance(&atom.position, &other.position);
                let fc = cosine_cutoff(r, self.r_cut);
                for (k, g) in gaussian_rbf(r, self.n_env_rbf, self.r_cut).enumerate() {
                    env[a][kinds[b] * self.n_env_rbf + k] += fc * g;
                }
            }
        }
        let pairs = Self::pairs(atoms.len());
        let mut x = DMatrix::zeros(pairs.len(), self.n_features());
        for (row, &(i, j)) in pairs.iter().enumerate() {
            x[(row, kinds[i])] += 1.0;
            x[(row, kinds[j])] += 1.0;
            if i == j {
                x[(row, e)] = 1.0;
            }
            let r = chem_io::distance(&atoms[i].position, &atoms[j].position);
            for (k, g) in gaussian_rbf(r, self.n_rbf, self.r_cut).enumerate() {
                x[(row, e + 1 + k)] = g;
            }
            for k in 0..e * self.n_env_rbf {
                x[(row, e + 1 + self.n_rbf + k)] = env[i][k] + env[j][k];
            }
        }
        Ok(x)
    }
}

/// Training provenance stored with a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelMetadata {
    pub exchange_fraction: f64,
    pub basis_hash: String,
    pub seed: u64,
    pub stages: Vec<String>,
}

/// Feed-forward map from pair features to block coefficients: for every atom
/// pair and angular block (ss, sp, pp), a gain and a shift.
#[derive(Clone, Debug, PartialEq)]
pub struct GuessModel {
    pub ansatz: Ansatz,
    pub feature_spec: FeatureSpec,
    /// Weights and biases, alternating: W₀ (in×h₀), b₀ (1×h₀), …, W_L (h×6), b_L (1×6).
    pub parameters: Vec<DMatrix<f64>>,
    pub metadata: ModelMetadata,
}

/// Bounds of the block coefficients: gain − 1 and additive shift.
pub const COEFFICIENT_RANGES: [f64; 2] = [0.5, 0.1];

/// Angular blocks per atom pair: l_μ + l_ν ∈ {0, 1, 2}.
pub const ANGULAR_BLOCKS: usize = 3;

pub const CHECKPOINT_FORMAT: &str = "sailscf-guess-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParameterArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    ansatz: Ansatz,
    feature_spec: FeatureSpec,
    parameters: Vec<ParameterArray>,
    metadata: ModelMetadata,
}

impl GuessModel {
    /// Glorot-initialised hidden layers and a zero output layer, so the fresh
    /// model reproduces its base guess exactly.
    pub fn new(ansatz: Ansatz, feature_spec: FeatureSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![feature_spec.n_features()];
        dims.extend(&feature_spec.hidden);
        dims.push(COEFFICIENT_RANGES.len() * ANGULAR_BLOCKS);
        let mut parameters = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l + 2 == dims.len();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            parameters.push(DMatrix::from_fn(fan_in, fan_out, |_, _| if last { 0.0 } else { rng.gen_range(-bound..bound) }));
            parameters.push(DMatrix::zeros(1, fan_out));
        }
        let metadata = ModelMetadata { exchange_fraction: 1.0, basis_hash: chem_io::basis_hash(chem_io::STO3G), seed, stages: Vec::new() };
        GuessModel { ansatz, feature_spec, parameters, metadata }
    }

    /// Replaces the output layer with uniform draws in [−scale, scale].
    pub fn randomize_output(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.parameters.len();
        for m in &mut self.parameters[k - 2..] {
            m.iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale));
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters.iter().map(|m| m.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let parameters = self
            .parameters
            .iter()
            .enumerate()
            .map(|(k, m)| ParameterArray {
                name: format!("{}{}", if k % 2 == 0 { "w" } else { "b" }, k / 2),
                rows: m.nrows(),
                cols: m.ncols(),
                data: (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect(),
            })
            .collect();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            ansatz: self.ansatz,
            feature_spec: self.feature_spec.clone(),
            parameters,
            metadata: self.metadata.clone(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let reference = GuessModel::new(ck.ansatz, ck.feature_spec.clone(), 0);
        if ck.parameters.len() != reference.parameters.len() {
            return Err(Error::Config("checkpoint layer count does not match its feature spec".into()));
        }
        let mut parameters = Vec::new();
        for (p, r) in ck.parameters.iter().zip(&reference.parameters) {
            if (p.rows, p.cols) != r.shape() || p.data.len() != p.rows * p.cols {
                return Err(Error::Config(format!("parameter {} has the wrong shape", p.name)));
            }
            parameters.push(DMatrix::from_row_slice(p.rows, p.cols, &p.data));
        }
        Ok(GuessModel { ansatz: ck.ansatz, feature_spec: ck.feature_spec, parameters, metadata: ck.metadata })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Per-molecule constants of the model: pair features and the base and
/// template matrices the per-pair scalars act on.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub ansatz: Ansatz,
    pub features: DMatrix<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// P_SAD (Δ-density) or F(P_SAD) (Δ-Fock).
    pub base: DMatrix<f64>,
    /// Template families acted on by the gain − 1 and the shift; each holds
    /// one matrix per (angular block, pair), block-major.
    pub templates: [Vec<DMatrix<f64>>; 2],
    /// Fock builds spent building the inputs.
    pub fock_builds: usize,
}

fn place_block(target: &mut DMatrix<f64>, src: &DMatrix<f64>, ri: &std::ops::Range<usize>, rj: &std::ops::Range<usize>) {
    let block = src.view((ri.start, rj.start), (ri.len(), rj.len())).into_owned();
    target.view_mut((ri.start, rj.start), (ri.len(), rj.len())).copy_from(&block);
    if ri != rj {
        target.view_mut((rj.start, ri.start), (rj.len(), ri.len())).copy_from(&block.transpose());
    }
}

/// Splits each pair template into its ss, sp and pp entries, block-major.
fn split_angular(templates: Vec<DMatrix<f64>>, ao_l: &[u32]) -> Vec<DMatrix<f64>> {
    let block = |mu: usize, nu: usize| ((ao_l[mu] + ao_l[nu]) as usize).min(ANGULAR_BLOCKS - 1);
    (0..ANGULAR_BLOCKS)
        .flat_map(|b| templates.iter().map(move |t| DMatrix::from_fn(t.nrows(), t.ncols(), |i, j| if block(i, j) == b { t[(i, j)] } else { 0.0 })))
        .collect()
}

impl ModelInputs {
    pub fn new(model: &GuessModel, molecule: &Molecule, ctx: &BasisContext, table: &AtomicDensityTable) -> Result<Self> {
        let ranges = ctx.atom_ranges();
        let pairs = FeatureSpec::pairs(ranges.len());
        let features = model.feature_spec.features(molecule)?;
        let p_sad = sad_density(ctx, table)?;
        let n = ctx.n_basis;
        let mut shift_templates = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            let mut t = DMatrix::zeros(n, n);
            if i == j {
                for k in ranges[i].clone() {
                    t[(k, k)] = 1.0;
                }
            } else {
                place_block(&mut t, &ctx.overlap, &ranges[i], &ranges[j]);
            }
            shift_templates.push(t);
        }
        let (base, gain_templates, fock_builds) = match model.ansatz {
            Ansatz::DeltaDensity => {
                // Diagonal blocks rescale the atomic densities; off-diagonal
                // blocks switch on the bonding template D_i S_ij D_j.
                let bond = &p_sad * &ctx.overlap * &p_sad;
                let templates = pairs
                    .iter()
                    .map(|&(i, j)| {
                        let mut t = DMatrix::zeros(n, n);
                        let src = if i == j { &p_sad } else { &bond };
                        place_block(&mut t, src, &ranges[i], &ranges[j]);
                        t
                    })
                    .collect();
                (p_sad, templates, 0)
            }
            Ansatz::DeltaFock => {
                let counter = FockCounter::new();
                let f = scf::fock_build(&p_sad, ctx, model.metadata.exchange_fraction, &counter)?;
                let templates = pairs
                    .iter()
                    .map(|&(i, j)| {
                        let mut t = DMatrix::zeros(n, n);
                        place_block(&mut t, &f, &ranges[i], &ranges[j]);
                        t
                    })
                    .collect();
                (f, templates, counter.get())
            }
        };
        let templates = [gain_templates, shift_templates].map(|t| split_angular(t, &ctx.ao_l));
        Ok(ModelInputs { ansatz: model.ansatz, features, pairs, base, templates, fock_builds })
    }
}

/// Constant matrices of a context, recorded once per tape.
#[derive(Clone, Copy, Debug)]
pub struct ContextVars {
    pub hcore: Var,
    pub overlap: Var,
    pub x: Var,
    pub x_t: Var,
    pub s_half: Var,
}

impl ContextVars {
    pub fn record(tape: &mut Tape, ctx: &BasisContext) -> Self {
        ContextVars {
            hcore: tape.leaf(ctx.hcore.clone()),
            overlap: tape.leaf(ctx.overlap.clone()),
            x: tape.leaf(ctx.x.clone()),
            x_t: tape.leaf(ctx.x.transpose()),
            s_half: tape.leaf(ctx.s_half.clone()),
        }
    }
}

/// Recorded model guess.
#[derive(Clone, Debug)]
pub struct RecordedGuess {
    /// P̂ before purification (Δ-density) or F^(−1) (Δ-Fock).
    pub raw: Var,
    pub density: Var,
    /// Roothaan orbitals of F^(−1) (Δ-Fock only).
    pub orbitals: Option<Var>,
    /// Raw model outputs, npairs × 6: gain and shift columns, three each.
    pub block_scalars: Var,
}

/// Records the model on `tape`; `params` are leaves holding the model parameters.
pub fn record_model(tape: &mut Tape, params: &[Var], inputs: &ModelInputs) -> Var {
    let mut h = tape.leaf(inputs.features.clone());
    let layers = params.len() / 2;
    for l in 0..layers {
        let z = tape.matmul(h, params[2 * l]);
        h = tape.add_row(z, params[2 * l + 1]);
        if l + 1 < layers {
            h = tape.silu(h);
        }
    }
    h
}

/// Records Roothaan + occupation: F → (C, P).
pub fn record_roothaan(tape: &mut Tape, f: Var, cv: &ContextVars, n_occ: usize) -> Result<(Var, Var)> {
    let xf = tape.matmul(cv.x_t, f);
    let fp = tape.matmul(xf, cv.x);
    let (u, _) = tape.eigh(fp, Some(n_occ))?;
    let c = tape.matmul(cv.x, u);
    let occ = tape.column_range(c, 0..n_occ);
    let occ_t = tape.transpose(occ);
    let pp = tape.matmul(occ, occ_t);
    Ok((c, tape.scale(pp, 2.0)))
}

/// Records natural-orbital purification of `p_raw`.
pub fn record_purify(tape: &mut Tape, p_raw: Var, cv: &ContextVars, n_occ: usize) -> Result<Var> {
    let sp = tape.matmul(cv.s_half, p_raw);
    let a = tape.matmul(sp, cv.s_half);
    let n = tape.value(a).nrows();
    let (u, w) = tape.eigh(a, Some(n - n_occ))?;
    let (idx, _) = occupied_selection(&DVector::from_column_slice(tape.value(w).as_slice()), n_occ);
    let u_occ = tape.columns(u, idx);
    let c_occ = tape.matmul(cv.x, u_occ);
    let c_t = tape.transpose(c_occ);
    let pp = tape.matmul(c_occ, c_t);
    Ok(tape.scale(pp, 2.0))
}

/// Records the model up to its raw matrix: P̂ before purification
/// (Δ-density) or F^(−1) (Δ-Fock). Returns (raw, block scalars).
pub fn record_raw(tape: &mut Tape, params: &[Var], inputs: &ModelInputs) -> (Var, Var) {
    let out = record_model(tape, params, inputs);
    let mut raw = tape.leaf(inputs.base.clone());
    for (k, (range, templates)) in COEFFICIENT_RANGES.iter().zip(&inputs.templates).enumerate() {
        let o = tape.column_range(out, k * ANGULAR_BLOCKS..(k + 1) * ANGULAR_BLOCKS);
        let t = tape.tanh(o);
        let c = tape.scale(t, *range);
        let delta = tape.weighted(c, templates.clone());
        raw = tape.add(raw, delta);
    }
    (raw, out)
}

/// Records the full model guess: block scalars, raw matrix and initial density.
pub fn record_guess(tape: &mut Tape, params: &[Var], inputs: &ModelInputs, cv: &ContextVars, n_occ: usize) -> Result<RecordedGuess> {
    let (raw, out) = record_raw(tape, params, inputs);
    let (density, orbitals) = match inputs.ansatz {
        Ansatz::DeltaDensity => (record_purify(tape, raw, cv, n_occ)?, None),
        Ansatz::DeltaFock => {
            let (c, p) = record_roothaan(tape, raw, cv, n_occ)?;
            (p, Some(c))
        }
    };
    Ok(RecordedGuess { raw, density, orbitals, block_scalars: out })
}

/// Model inference. A non-finite prediction falls back to plain SAD and is flagged.
pub fn model_guess(model: &GuessModel, molecule: &Molecule, ctx: &BasisContext, table: &AtomicDensityTable) -> Result<Guess> {
    let inputs = ModelInputs::new(model, molecule, ctx, table)?;
    let mut tape = Tape::new();
    let cv = ContextVars::record(&mut tape, ctx);
    let params: Vec<Var> = model.parameters.iter().map(|p| tape.leaf(p.clone())).collect();
    let recorded = match record_guess(&mut tape, &params, &inputs, &cv, ctx.n_occ) {
        Ok(r) if linalg::all_finite(tape.value(r.density)) => r,
        Ok(_) | Err(Error::NonFinite(_)) => {
            let mut g = classical_guess(ClassicalKind::Sad, ctx, table)?;
            g.fock_builds_spent = inputs.fock_builds;
            g.flagged = true;
            return Ok(g);
        }
        Err(e) => return Err(e),
    };
    let flagged = !tape.degeneracy_flags().is_empty();
    Ok(Guess {
        density: tape.value(recorded.density).clone(),
        orbitals: recorded.orbitals.map(|c| tape.value(c).clone()),
        fock_builds_spent: inputs.fock_builds,
        flagged,
    })
}

/// The model's matrix before purification or diagonalisation (the target of
/// surrogate pretraining).
pub fn model_raw_prediction(model: &GuessModel, inputs: &ModelInputs) -> DMatrix<f64> {
    let mut tape = Tape::new();
    let params: Vec<Var> = model.parameters.iter().map(|p| tape.leaf(p.clone())).collect();
    let (raw, _) = record_raw(&mut tape, &params, inputs);
    tape.value(raw).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem_io::parse_xyz;

    fn ctx_of(text: &str) -> (Molecule, BasisContext) {
        let m = parse_xyz(text).unwrap();
        let ctx = BasisContext::build(&m, &BasisSet::sto3g()).unwrap();
        (m, ctx)
    }

    fn h2() -> (Molecule, BasisContext) {
        ctx_of("2\nh2\nH 0 0 0\nH 0 0 0.74")
    }

    fn water() -> (Molecule, BasisContext) {
        ctx_of("3\nh2o\nO 0 0 0.1173\nH 0 0.7572 -0.4692\nH 0 -0.7572 -0.4692")
    }

    fn table() -> AtomicDensityTable {
        AtomicDensityTable::sto3g(1.0).unwrap()
    }

    #[test]
    fn hydrogen_density_is_one() {
        let t = table();
        assert!((t.get(1).unwrap()[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn atomic_densities_are_spherical_and_normalised() {
        let t = table();
        let basis = BasisSet::sto3g();
        for z in SUPPORTED_ELEMENTS {
            let d = t.get(z).unwrap();
            let atom = Molecule { name: "a".into(), atoms: vec![Atom { atomic_number: z, position: [0.0; 3] }], charge: 0 };
            let shells = basis.shells_for(&atom).unwrap();
            let s = crate::integrals::one_electron_integrals(&shells, &atom).overlap;
            assert!((linalg::dot(d, &s) - z as f64).abs() < 1e-8, "Z={z}");
            assert!((d - d.transpose()).abs().max() < 1e-14);
            if d.nrows() == 5 {
                assert!((d[(2, 2)] - d[(3, 3)]).abs() < 1e-8 && (d[(3, 3)] - d[(4, 4)]).abs() < 1e-8, "Z={z}\n{d}");
                assert!(d[(2, 3)].abs() < 1e-8);
            }
        }
        assert_ne!(t.get(8).unwrap(), t.get(9).unwrap());
    }

    #[test]
    fn missing_table_entry_is_an_error() {
        let (_, ctx) = water();
        let t = AtomicDensityTable::build(&BasisSet::sto3g(), &[1], 1.0).unwrap();
        assert!(matches!(classical_guess(ClassicalKind::Sad, &ctx, &t), Err(Error::MissingAtomicDensity(8))));
    }

    #[test]
    fn core_guess_on_h2() {
        let (_, ctx) = h2();
        let g = classical_guess(ClassicalKind::Core, &ctx, &table()).unwrap();
        assert!((linalg::dot(&g.density, &ctx.overlap) - 2.0).abs() < 1e-12);
        let (c, _) = scf::solve_roothaan(&ctx.hcore, &ctx).unwrap();
        assert_eq!(g.density, scf::density_from_orbitals(&c, 1).unwrap());
    }

    #[test]
    fn sad_on_h2_is_block_diagonal_ones() {
        let (_, ctx) = h2();
        let p = sad_density(&ctx, &table()).unwrap();
        assert_eq!(p, DMatrix::identity(2, 2));
    }

    fn assert_valid(p: &DMatrix<f64>, ctx: &BasisContext) {
        assert!((linalg::dot(p, &ctx.overlap) - ctx.n_electrons as f64).abs() < 1e-8);
        assert!((p * &ctx.overlap * p - p * 2.0).abs().max() < 1e-8);
    }

    #[test]
    fn purify_is_a_projection() {
        let (_, ctx) = water();
        let g = classical_guess(ClassicalKind::Core, &ctx, &table()).unwrap();
        let (p, flagged) = purify(&g.density, &ctx, ctx.n_occ).unwrap();
        assert!(!flagged);
        assert!((&p - &g.density).abs().max() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = linalg::symmetrize(&DMatrix::from_fn(7, 7, |_, _| rng.gen_range(-1e-3..1e-3)));
        let noisy = &g.density + noise;
        let (q, _) = purify(&noisy, &ctx, ctx.n_occ).unwrap();
        assert_valid(&q, &ctx);
        // Distance in the S-metric, the norm the projection is optimal in.
        let dist = |a: &DMatrix<f64>| (&ctx.s_half * (a - &noisy) * &ctx.s_half).norm();
        for k in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + k);
            let h = linalg::symmetrize(&DMatrix::from_fn(7, 7, |_, _| rng.gen_range(-1.0..1.0)));
            let (c, _) = scf::solve_roothaan(&(&ctx.hcore + h * 0.3), &ctx).unwrap();
            let other = scf::density_from_orbitals(&c, ctx.n_occ).unwrap();
            assert!(dist(&q) <= dist(&other));
        }
    }

    #[test]
    fn purify_zero_matrix_is_flagged_and_deterministic() {
        let (_, ctx) = water();
        let (p, flagged) = purify(&DMatrix::zeros(7, 7), &ctx, ctx.n_occ).unwrap();
        assert!(flagged);
        assert_valid(&p, &ctx);
        assert_eq!(p, purify(&DMatrix::zeros(7, 7), &ctx, ctx.n_occ).unwrap().0);
    }

    #[test]
    fn classical_guesses_are_valid_and_sad_wins_on_water() {
        let (_, ctx) = water();
        let t = table();
        let mut counts = Vec::new();
        for kind in ClassicalKind::ALL {
            let g = classical_guess(kind, &ctx, &t).unwrap();
            assert_valid(&g.density, &ctx);
            let traj = scf::scf_run_guess(&g, &ctx, &scf::ScfOptions::default()).unwrap();
            assert!(traj.converged);
            counts.push(traj.loop_iterations());
        }
        assert!(counts[2] <= counts[1] && counts[1] <= counts[0], "core/gwh/sad iterations {counts:?}");
    }

    #[test]
    fn identity_delta_density_model_reproduces_sad() {
        let (m, ctx) = water();
        let t = table();
        let model = GuessModel::new(Ansatz::DeltaDensity, FeatureSpec::default(), 1);
        let g = model_guess(&model, &m, &ctx, &t).unwrap();
        let sad = classical_guess(ClassicalKind::Sad, &ctx, &t).unwrap();
        assert_eq!(g.density, sad.density);
        assert_eq!(g.fock_builds_spent, 0);
    }

    #[test]
    fn identity_delta_fock_model_is_one_roothaan_step() {
        let (m, ctx) = water();
        let t = table();
        let model = GuessModel::new(Ansatz::DeltaFock, FeatureSpec::default(), 1);
        let g = model_guess(&model, &m, &ctx, &t).unwrap();
        let f = scf::fock_build(&sad_density(&ctx, &t).unwrap(), &ctx, 1.0, &FockCounter::new()).unwrap();
        let (c, _) = scf::solve_roothaan(&f, &ctx).unwrap();
        assert!((g.density - scf::density_from_orbitals(&c, ctx.n_occ).unwrap()).abs().max() < 1e-12);
        assert_eq!(g.fock_builds_spent, 1);
    }

    #[test]
    fn features_have_the_documented_width_and_are_invariant() {
        let (m, _) = water();
        let spec = FeatureSpec::default();
        assert_eq!(spec.n_features(), 71);
        let x = spec.features(&m).unwrap();
        assert_eq!(x.shape(), (6, 71));
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let y = spec.features(&m.rotated(r.matrix()).translated([1.0, -2.0, 0.5])).unwrap();
        assert!((x - y).abs().max() < 1e-12);
        let model = GuessModel::new(Ansatz::DeltaDensity, spec, 0);
        assert!(model.n_parameters() > 8000 && model.n_parameters() < 12000);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = GuessModel::new(Ansatz::DeltaFock, FeatureSpec::default(), 4);
        model.randomize_output(5, 0.1);
        let back = GuessModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        assert!(GuessModel::from_json("{}").is_err());
    }
}
