//! Iteration-count ratios, guess-quality surrogates, dataset labelling and
//! the benchmark runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chem_io::{self, BasisSet, Molecule};
use crate::corpus::{self, CorpusConfig, Split};
use crate::error::{Error, Result};
use crate::guess::{self, AtomicDensityTable, ClassicalKind, GuessModel};
use crate::integrals::BasisContext;
use crate::linalg;
use crate::scf::{self, FockCounter, Guess, ScfOptions, ScfTrajectory};
use crate::train::Sample;

/// Ratio of SCF iteration counts, learned over reference.
pub fn ric(n_learned: usize, n_reference: usize) -> Result<f64> {
    if n_reference == 0 {
        return Err(Error::OutOfRange("reference iteration count is zero".into()));
    }
    Ok(n_learned as f64 / n_reference as f64)
}

/// Ratio of all Fock builds, guess acquisition included, over the reference.
pub fn eric(fock_builds_total: usize, fock_builds_reference: usize) -> Result<f64> {
    ric(fock_builds_total, fock_builds_reference)
}

/// Guess-quality measures of P̂ against a converged reference.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Surrogates {
    /// |E(P̂) − E(P*)|, Hartree.
    pub delta_e: f64,
    /// |E_MF(P̂) − E_MF(P*)| with E_MF = tr(H P) + ½ tr(J(P) P), Hartree.
    pub e_mf_delta: f64,
    /// ‖μ_el(P̂) − μ_el(P*)‖, atomic units.
    pub dipole_delta: f64,
    /// ½ tr(P̂ S P* S); equals N_e at P̂ = P*.
    pub q: f64,
    /// ‖F(P̂) P̂ S − S P̂ F(P̂)‖_F.
    pub r_diis: f64,
    /// Σ_ia G_ia² with G from the natural orbitals of P̂.
    pub g_norm: f64,
    pub frob_p: f64,
    /// ‖F(P̂) − F*‖_F.
    pub frob_f: f64,
}

/// Electronic dipole −tr(P D_α), atomic units.
pub fn electronic_dipole(p: &DMatrix<f64>, ctx: &BasisContext) -> [f64; 3] {
    let mut mu = [0.0; 3];
    for (a, d) in ctx.dipole.iter().enumerate() {
        mu[a] = -linalg::dot(p, d);
    }
    mu
}

/// Q = ½ tr(P̂ S P* S).
pub fn projection(p_hat: &DMatrix<f64>, p_star: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    0.5 * (p_hat * s * p_star * s).trace()
}

fn mean_field_energy(p: &DMatrix<f64>, ctx: &BasisContext) -> f64 {
    linalg::dot(p, &ctx.hcore) + 0.5 * linalg::dot(&scf::coulomb(p, &ctx.eri), p)
}

/// All surrogate metrics of `p_hat` against the converged `reference`.
/// `counter` is charged for every two-electron contraction performed.
pub fn surrogate_metrics(
    p_hat: &DMatrix<f64>,
    reference: &ScfTrajectory,
    ctx: &BasisContext,
    alpha: f64,
    counter: &FockCounter,
) -> Result<Surrogates> {
    if !reference.converged {
        return Err(Error::NotConverged("surrogate reference".into()));
    }
    let star = reference.final_iterate();
    let f_hat = scf::fock_build(p_hat, ctx, alpha, counter)?;
    let e_hat = scf::energy(p_hat, &f_hat, ctx);
    // Coulomb-only contractions are charged like full builds.
    counter.increment();
    counter.increment();
    let e_mf = (mean_field_energy(p_hat, ctx) - mean_field_energy(&star.density, ctx)).abs();
    let (mu_hat, mu_star) = (electronic_dipole(p_hat, ctx), electronic_dipole(&star.density, ctx));
    let dipole_delta = (0..3).map(|a| (mu_hat[a] - mu_star[a]).powi(2)).sum::<f64>().sqrt();
    let fps = &f_hat * p_hat * &ctx.overlap;
    let (c, _) = scf::natural_orbitals(p_hat, ctx)?;
    let g = scf::orbital_gradient(&c, &f_hat, ctx.n_occ);
    Ok(Surrogates {
        delta_e: (e_hat - star.energy).abs(),
        e_mf_delta: e_mf,
        dipole_delta,
        q: projection(p_hat, &star.density, &ctx.overlap),
        r_diis: (&fps - fps.transpose()).norm(),
        g_norm: g.norm_squared(),
        frob_p: (p_hat - &star.density).norm(),
        frob_f: (&f_hat - &star.fock).norm(),
    })
}

/// Converged reference data of one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    pub name: String,
    pub density: DMatrix<f64>,
    pub fock: DMatrix<f64>,
    pub energy: f64,
    /// Loop iterations from the SAD guess: the RIC/ERIC denominator.
    pub reference_iterations: usize,
    pub metadata_hash: String,
}

/// Hash of everything that makes labels comparable: basis, exchange fraction
/// and convergence thresholds.
pub fn label_metadata_hash(basis_text: &str, options: &ScfOptions) -> String {
    let mut h = Sha256::new();
    h.update(chem_io::basis_hash(basis_text).as_bytes());
    h.update(options.exchange_fraction.to_le_bytes());
    h.update(options.energy_threshold.to_le_bytes());
    h.update(options.gradient_threshold.to_le_bytes());
    h.update((options.max_iterations as u64).to_le_bytes());
    h.update([options.diis_enabled as u8]);
    h.update((options.diis_history as u64).to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    name: String,
    metadata_hash: String,
    energy: f64,
    reference_iterations: usize,
    n_basis: usize,
    density: Vec<f64>,
    fock: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Label {
    pub fn to_json(&self) -> Result<String> {
        let f = LabelFile {
            name: self.name.clone(),
            metadata_hash: self.metadata_hash.clone(),
            energy: self.energy,
            reference_iterations: self.reference_iterations,
            n_basis: self.density.nrows(),
            density: row_major(&self.density),
            fock: row_major(&self.fock),
        };
        Ok(serde_json::to_string(&f)?)
    }

    /// Parses a label, refusing one produced under different metadata.
    pub fn from_json(text: &str, expected_hash: &str) -> Result<Self> {
        let f: LabelFile = serde_json::from_str(text)?;
        if f.metadata_hash != expected_hash {
            return Err(Error::LabelMismatch { expected: expected_hash.into(), found: f.metadata_hash });
        }
        let n = f.n_basis;
        if f.density.len() != n * n || f.fock.len() != n * n {
            return Err(Error::Cache(format!("label {} has inconsistent matrix sizes", f.name)));
        }
        Ok(Label {
            name: f.name,
            density: DMatrix::from_row_slice(n, n, &f.density),
            fock: DMatrix::from_row_slice(n, n, &f.fock),
            energy: f.energy,
            reference_iterations: f.reference_iterations,
            metadata_hash: f.metadata_hash,
        })
    }
}

/// SAD-started reference run.
pub fn reference_run(ctx: &BasisContext, table: &AtomicDensityTable, options: &ScfOptions) -> Result<ScfTrajectory> {
    let g = guess::classical_guess(ClassicalKind::Sad, ctx, table)?;
    scf::scf_run_guess(&g, ctx, options)
}

pub fn label_from_run(name: &str, traj: &ScfTrajectory, hash: &str) -> Result<Label> {
    if !traj.converged {
        return Err(Error::NotConverged(name.into()));
    }
    let last = traj.final_iterate();
    Ok(Label {
        name: name.into(),
        density: last.density.clone(),
        fock: last.fock.clone(),
        energy: last.energy,
        reference_iterations: traj.loop_iterations(),
        metadata_hash: hash.into(),
    })
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub labels: Vec<Label>,
    /// Molecules that did not converge from SAD.
    pub excluded: Vec<String>,
}

/// Converged labels for every molecule; non-convergent ones are listed in
/// `excluded`.
pub fn label_dataset(
    molecules: &[Molecule],
    basis: &BasisSet,
    basis_text: &str,
    table: &AtomicDensityTable,
    options: &ScfOptions,
) -> Result<LabeledDataset> {
    let hash = label_metadata_hash(basis_text, options);
    let results: Vec<Result<Option<Label>>> = molecules
        .par_iter()
        .map(|m| {
            let ctx = BasisContext::build(m, basis)?;
            let traj = reference_run(&ctx, table, options)?;
            if traj.converged {
                Ok(Some(label_from_run(&m.name, &traj, &hash)?))
            } else {
                Ok(None)
            }
        })
        .collect();
    let mut labels = Vec::new();
    let mut excluded = Vec::new();
    for (m, r) in molecules.iter().zip(results) {
        match r? {
            Some(l) => labels.push(l),
            None => excluded.push(m.name.clone()),
        }
    }
    Ok(LabeledDataset { labels, excluded })
}

pub fn write_labels(dir: &Path, labels: &[Label]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for l in labels {
        std::fs::write(dir.join(format!("{}.json", l.name)), l.to_json()?)?;
    }
    Ok(())
}

pub fn read_label(dir: &Path, name: &str, expected_hash: &str) -> Result<Label> {
    let path = dir.join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
    Label::from_json(&text, expected_hash)
}

/// Builds training samples, labelled when `with_labels` is set. Molecules that
/// fail to converge from SAD are dropped from labelled sets.
pub fn prepare_samples(
    molecules: &[Molecule],
    basis: &BasisSet,
    table: &AtomicDensityTable,
    options: &ScfOptions,
    with_labels: bool,
) -> Result<Vec<Sample>> {
    let hash = label_metadata_hash(chem_io::STO3G, options);
    let out: Vec<Result<Option<Sample>>> = molecules
        .par_iter()
        .map(|m| {
            let ctx = BasisContext::build(m, basis)?;
            if !with_labels {
                return Ok(Some(Sample::new(m.clone(), ctx, None)));
            }
            let traj = reference_run(&ctx, table, options)?;
            if !traj.converged {
                return Ok(None);
            }
            let label = label_from_run(&m.name, &traj, &hash)?;
            Ok(Some(Sample::new(m.clone(), ctx, Some(label))))
        })
        .collect();
    Ok(out.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// Mean ERIC of a model over samples, each run to convergence.
pub fn mean_eric(model: &GuessModel, samples: &[Sample], table: &AtomicDensityTable, options: &ScfOptions) -> Result<f64> {
    let erics: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let reference = match &s.label {
                Some(l) => l.reference_iterations,
                None => reference_run(&s.ctx, table, options)?.loop_iterations(),
            };
            let g = guess::model_guess(model, &s.molecule, &s.ctx, table)?;
            let traj = scf::scf_run_guess(&g, &s.ctx, options)?;
            eric(traj.fock_build_count, reference)
        })
        .collect();
    let erics = erics.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(erics.iter().sum::<f64>() / erics.len().max(1) as f64)
}

/// Where a benchmarked guess comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuessSpec {
    pub name: String,
    #[serde(default)]
    pub kind: Option<ClassicalKind>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl GuessSpec {
    /// `core`, `gwh` or `sad`, else a checkpoint path.
    pub fn parse(s: &str) -> Self {
        match ClassicalKind::parse(s) {
            Some(k) => GuessSpec { name: s.into(), kind: Some(k), checkpoint: None },
            None => {
                let name = Path::new(s).file_stem().map_or_else(|| s.to_string(), |x| x.to_string_lossy().into_owned());
                GuessSpec { name, kind: None, checkpoint: Some(PathBuf::from(s)) }
            }
        }
    }
}

/// A guess ready to evaluate.
#[derive(Clone, Debug)]
pub enum GuessSource {
    Classical(ClassicalKind),
    Model(Box<GuessModel>),
}

impl GuessSource {
    pub fn load(spec: &GuessSpec, base: &Path) -> Result<Self> {
        match (&spec.kind, &spec.checkpoint) {
            (Some(k), _) => Ok(GuessSource::Classical(*k)),
            (None, Some(p)) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                if !path.exists() {
                    return Err(Error::Config(format!("missing checkpoint {}", path.display())));
                }
                let model = GuessModel::load(&path)?;
                if model.metadata.basis_hash != chem_io::basis_hash(chem_io::STO3G) {
                    return Err(Error::LabelMismatch {
                        expected: chem_io::basis_hash(chem_io::STO3G),
                        found: model.metadata.basis_hash.clone(),
                    });
                }
                Ok(GuessSource::Model(Box::new(model)))
            }
            (None, None) => Err(Error::Config(format!("guess `{}` names neither a kind nor a checkpoint", spec.name))),
        }
    }

    pub fn guess(&self, molecule: &Molecule, ctx: &BasisContext, table: &AtomicDensityTable) -> Result<Guess> {
        match self {
            GuessSource::Classical(k) => guess::classical_guess(*k, ctx, table),
            GuessSource::Model(m) => guess::model_guess(m, molecule, ctx, table),
        }
    }
}

/// One benchmark row. Columns are written in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub molecule: String,
    pub guess: String,
    pub heavy_atoms: usize,
    pub ric: f64,
    pub eric: f64,
    pub converged: bool,
    /// Loop iterations (= loop Fock builds).
    pub iterations: usize,
    pub guess_fock_builds: usize,
    pub measurement_fock_builds: usize,
    /// iterations + guess + measurement.
    pub fock_builds: usize,
    pub reference_iterations: usize,
    pub flagged: bool,
    pub energy: f64,
    pub delta_e: f64,
    pub e_mf_delta: f64,
    pub dipole_delta: f64,
    pub q: f64,
    pub r_diis: f64,
    pub g_norm: f64,
    pub frob_p: f64,
    pub frob_f: f64,
}

impl MetricsRecord {
    pub fn ledger_closes(&self) -> bool {
        self.fock_builds == self.iterations + self.guess_fock_builds + self.measurement_fock_builds
    }
}

/// Benchmarks one guess on one molecule against its SAD reference run.
pub fn evaluate(
    source: &GuessSource,
    guess_name: &str,
    molecule: &Molecule,
    ctx: &BasisContext,
    reference: &ScfTrajectory,
    table: &AtomicDensityTable,
    options: &ScfOptions,
) -> Result<MetricsRecord> {
    let g = source.guess(molecule, ctx, table)?;
    let traj = scf::scf_run_guess(&g, ctx, options)?;
    let measurement = FockCounter::new();
    let s = surrogate_metrics(&g.density, reference, ctx, options.exchange_fraction, &measurement)?;
    let n_ref = reference.loop_iterations();
    let iterations = traj.loop_iterations();
    Ok(MetricsRecord {
        molecule: molecule.name.clone(),
        guess: guess_name.into(),
        heavy_atoms: molecule.n_heavy_atoms(),
        ric: ric(iterations, n_ref)?,
        eric: eric(iterations + g.fock_builds_spent, n_ref)?,
        converged: traj.converged,
        iterations,
        guess_fock_builds: g.fock_builds_spent,
        measurement_fock_builds: measurement.get(),
        fock_builds: iterations + g.fock_builds_spent + measurement.get(),
        reference_iterations: n_ref,
        flagged: g.flagged,
        energy: traj.energy(),
        delta_e: s.delta_e,
        e_mf_delta: s.e_mf_delta,
        dipole_delta: s.dipole_delta,
        q: s.q,
        r_diis: s.r_diis,
        g_norm: s.g_norm,
        frob_p: s.frob_p,
        frob_f: s.frob_f,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct BenchThresholds {
    /// Per guess name: the mean ERIC must stay below this value.
    pub max_mean_eric: BTreeMap<String, f64>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Directory of `.xyz` files; the generated corpus when absent.
    pub corpus_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    /// Restrict to one split.
    pub split: Option<Split>,
    pub guesses: Vec<GuessSpec>,
    pub scf: ScfOptions,
    /// Label directory; references are recomputed when absent.
    pub labels_dir: Option<PathBuf>,
    pub thresholds: BenchThresholds,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            corpus_dir: None,
            corpus: CorpusConfig::default(),
            split: None,
            guesses: ClassicalKind::ALL.iter().map(|k| GuessSpec::parse(k.name())).collect(),
            scf: ScfOptions::default(),
            labels_dir: None,
            thresholds: BenchThresholds::default(),
        }
    }
}

/// Mean metrics of one (guess, heavy-atom count) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub guess: String,
    pub heavy_atoms: usize,
    pub count: usize,
    pub converged: usize,
    pub mean_ric: f64,
    pub mean_eric: f64,
    pub mean_iterations: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuessSummary {
    pub guess: String,
    pub count: usize,
    pub mean_ric: f64,
    pub mean_eric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<MetricsRecord>,
    pub groups: Vec<GroupSummary>,
    pub overall: Vec<GuessSummary>,
    /// Failed assertions; empty when every check holds.
    pub failures: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Per-group and per-guess means, in sorted order.
pub fn aggregate(rows: &[MetricsRecord]) -> (Vec<GroupSummary>, Vec<GuessSummary>) {
    let mut groups: BTreeMap<(String, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    let mut guesses: BTreeMap<String, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.guess.clone(), r.heavy_atoms)).or_default().push(r);
        guesses.entry(r.guess.clone()).or_default().push(r);
    }
    let g = groups
        .into_iter()
        .map(|((guess, heavy_atoms), rs)| GroupSummary {
            guess,
            heavy_atoms,
            count: rs.len(),
            converged: rs.iter().filter(|r| r.converged).count(),
            mean_ric: mean(rs.iter().map(|r| r.ric)),
            mean_eric: mean(rs.iter().map(|r| r.eric)),
            mean_iterations: mean(rs.iter().map(|r| r.iterations as f64)),
        })
        .collect();
    let o = guesses
        .into_iter()
        .map(|(guess, rs)| GuessSummary {
            guess,
            count: rs.len(),
            mean_ric: mean(rs.iter().map(|r| r.ric)),
            mean_eric: mean(rs.iter().map(|r| r.eric)),
        })
        .collect();
    (g, o)
}

/// Structural checks plus the configured thresholds.
pub fn check(rows: &[MetricsRecord], overall: &[GuessSummary], thresholds: &BenchThresholds) -> Vec<String> {
    let mut failures = Vec::new();
    let mut reference: BTreeMap<&str, usize> = BTreeMap::new();
    for r in rows {
        if !r.ledger_closes() {
            failures.push(format!("{} / {}: Fock-build ledger does not close", r.molecule, r.guess));
        }
        if *reference.entry(&r.molecule).or_insert(r.reference_iterations) != r.reference_iterations {
            failures.push(format!("{}: reference iterations differ between guesses", r.molecule));
        }
    }
    for (name, limit) in &thresholds.max_mean_eric {
        match overall.iter().find(|s| &s.guess == name) {
            Some(s) if s.mean_eric < *limit => {}
            Some(s) => failures.push(format!("{name}: mean ERIC {:.4} is not below {limit}", s.mean_eric)),
            None => failures.push(format!("{name}: no rows")),
        }
    }
    failures
}

fn load_molecules(config: &BenchConfig, base: &Path) -> Result<Vec<Molecule>> {
    let ms = match &config.corpus_dir {
        Some(d) => corpus::load_dir(&if d.is_absolute() { d.clone() } else { base.join(d) })?,
        None => corpus::generate(&config.corpus)?,
    };
    Ok(match config.split {
        Some(s) => corpus::split(&ms, s),
        None => ms,
    })
}

/// Runs every (molecule, guess) pair. Relative paths in the config resolve
/// against `base`.
pub fn bench_run(config: &BenchConfig, base: &Path) -> Result<BenchReport> {
    config.scf.validate()?;
    let molecules = load_molecules(config, base)?;
    let sources: Vec<(String, GuessSource)> =
        config.guesses.iter().map(|g| Ok((g.name.clone(), GuessSource::load(g, base)?))).collect::<Result<_>>()?;
    let table = AtomicDensityTable::sto3g(config.scf.exchange_fraction)?;
    let basis = BasisSet::sto3g();
    let hash = label_metadata_hash(chem_io::STO3G, &config.scf);
    let per_molecule: Vec<Result<Vec<MetricsRecord>>> = molecules
        .par_iter()
        .map(|m| {
            let ctx = BasisContext::build(m, &basis)?;
            let reference = reference_run(&ctx, &table, &config.scf)?;
            if let Some(dir) = &config.labels_dir {
                let dir = if dir.is_absolute() { dir.clone() } else { base.join(dir) };
                let label = read_label(&dir, &m.name, &hash)?;
                if label.reference_iterations != reference.loop_iterations() {
                    return Err(Error::Cache(format!("label {} disagrees with the reference run", m.name)));
                }
            }
            if !reference.converged {
                return Err(Error::NotConverged(m.name.clone()));
            }
            sources.iter().map(|(name, s)| evaluate(s, name, m, &ctx, &reference, &table, &config.scf)).collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_molecule {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| a.molecule.cmp(&b.molecule).then_with(|| a.guess.cmp(&b.guess)));
    let (groups, overall) = aggregate(&rows);
    let failures = check(&rows, &overall, &config.thresholds);
    Ok(BenchReport { rows, groups, overall, failures })
}

/// Writes `rows.csv`, `groups.csv` and `summary.json` into `out`.
pub fn write_report(report: &BenchReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("rows.csv"))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("groups.csv"))?;
    for g in &report.groups {
        w.serialize(g)?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Summary<'a> {
        groups: &'a [GroupSummary],
        overall: &'a [GuessSummary],
        failures: &'a [String],
    }
    let s = Summary { groups: &report.groups, overall: &report.overall, failures: &report.failures };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
    Ok(())
}
