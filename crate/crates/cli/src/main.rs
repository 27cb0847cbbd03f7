use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sailscf::chem_io::{self, BasisSet, Molecule};
use sailscf::corpus::{self, CorpusConfig, Split};
use sailscf::guess::{Ansatz, AtomicDensityTable, FeatureSpec, GuessModel};
use sailscf::integrals::BasisContext;
use sailscf::metrics::{self, BenchConfig, GuessSource, GuessSpec};
use sailscf::scf::{self, ScfOptions};
use sailscf::train::{self, Sample, TrainConfig, TrainOutcome};
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// Worker threads for the parallel parts (labelling, benchmarking).
const THREADS_VAR: &str = "SAILSCF_THREADS";

#[derive(Parser)]
#[command(name = "sailscf", version, about = "Minimal-basis SCF with learned initial guesses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an SCF calculation and print the trajectory as JSON.
    Scf {
        #[arg(long)]
        molecule: PathBuf,
        /// `core`, `gwh`, `sad` or a model checkpoint.
        #[arg(long, default_value = "sad")]
        guess: String,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        no_diis: bool,
    },
    /// Write the generated corpus as `.xyz` files.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        copies: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Converge every molecule of a corpus from SAD and store the labels.
    Label {
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to `<corpus>/labels`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Surrogate pretraining against converged labels.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetuning through unrolled SCF iterations.
    Sail {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark guesses on a corpus and write CSV and JSON reports.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Exit with a failure status when a threshold is violated.
        #[arg(long)]
        assert: bool,
    },
    /// Metrics of one guess on one molecule, as JSON.
    Metrics {
        #[arg(long)]
        guess: String,
        #[arg(long)]
        molecule: PathBuf,
    },
}

/// Training job read by `pretrain` and `sail`. `train` overrides the stage
/// defaults key by key.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    /// Directory of `.xyz` files; the generated corpus when absent.
    #[serde(default)]
    corpus_dir: Option<PathBuf>,
    #[serde(default)]
    corpus: CorpusConfig,
    #[serde(default = "default_ansatz")]
    ansatz: Ansatz,
    /// Starting checkpoint; a fresh identity model when absent.
    #[serde(default)]
    init: Option<PathBuf>,
    #[serde(default)]
    train: serde_json::Value,
}

fn default_ansatz() -> Ansatz {
    Ansatz::DeltaDensity
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_VAR}={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn read_molecule(path: &Path) -> Result<Molecule> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut m = chem_io::parse_xyz(&text)?;
    if m.name.is_empty() {
        m.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    Ok(m)
}

fn scf_options(alpha: f64) -> ScfOptions {
    ScfOptions { exchange_fraction: alpha, ..ScfOptions::default() }
}

fn run_scf(molecule: &Path, guess: &str, alpha: f64, no_diis: bool) -> Result<()> {
    let m = read_molecule(molecule)?;
    let options = ScfOptions { diis_enabled: !no_diis, ..scf_options(alpha) };
    let ctx = BasisContext::build(&m, &BasisSet::sto3g())?;
    let table = AtomicDensityTable::sto3g(alpha)?;
    let source = GuessSource::load(&GuessSpec::parse(guess), Path::new("."))?;
    let g = source.guess(&m, &ctx, &table)?;
    let traj = scf::scf_run_guess(&g, &ctx, &options)?;
    println!("{}", traj.to_json()?);
    Ok(())
}

fn run_label(dir: &Path, out: Option<PathBuf>, alpha: f64) -> Result<()> {
    let molecules = corpus::load_dir(dir)?;
    let options = scf_options(alpha);
    let table = AtomicDensityTable::sto3g(alpha)?;
    let data = metrics::label_dataset(&molecules, &BasisSet::sto3g(), chem_io::STO3G, &table, &options)?;
    let out = out.unwrap_or_else(|| dir.join("labels"));
    metrics::write_labels(&out, &data.labels)?;
    println!("labelled {} molecules into {}", data.labels.len(), out.display());
    for name in &data.excluded {
        println!("excluded (no convergence from SAD): {name}");
    }
    Ok(())
}

/// Stage defaults with the job's `train` object laid over them.
fn train_config(defaults: TrainConfig, overrides: &serde_json::Value) -> Result<TrainConfig> {
    let mut merged = serde_json::to_value(defaults)?;
    match overrides {
        serde_json::Value::Null => {}
        serde_json::Value::Object(o) => {
            let target = merged.as_object_mut().expect("config serializes to an object");
            for (k, v) in o {
                if !target.contains_key(k) {
                    bail!("unknown training option `{k}`");
                }
                target.insert(k.clone(), v.clone());
            }
        }
        _ => bail!("`train` must be an object"),
    }
    Ok(serde_json::from_value(merged)?)
}

fn run_training(config_path: &Path, out: &Path, sail: bool) -> Result<()> {
    let text = std::fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let job: TrainJob = serde_json::from_str(&text)?;
    let defaults = if sail { TrainConfig::sail() } else { TrainConfig::pretrain() };
    let config = train_config(defaults, &job.train)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let molecules = match &job.corpus_dir {
        Some(d) => corpus::load_dir(&base.join(d))?,
        None => corpus::generate(&job.corpus)?,
    };
    let model = match &job.init {
        Some(p) => GuessModel::load(&base.join(p))?,
        None => GuessModel::new(job.ansatz, FeatureSpec::default(), config.seed),
    };
    let table = AtomicDensityTable::sto3g(config.scf.exchange_fraction)?;
    let basis = BasisSet::sto3g();
    let prepare = |split: Split, labels: bool| -> Result<Vec<Sample>> {
        Ok(metrics::prepare_samples(&corpus::split(&molecules, split), &basis, &table, &config.scf, labels)?)
    };
    // SAIL needs no labels for training; validation ERIC reuses the reference counts.
    let train_set = prepare(Split::Train, !sail)?;
    let val_set = prepare(Split::Val, true)?;
    if train_set.is_empty() {
        bail!("the corpus has no training molecules");
    }
    let outcome: TrainOutcome = if sail {
        train::sail_finetune(&train_set, &val_set, &model, &table, &config, false)?
    } else {
        train::pretrain(&train_set, &val_set, &model, &table, &config, false)?
    };
    std::fs::create_dir_all(out)?;
    outcome.model.save(&out.join("model.json"))?;
    train::write_history(&out.join("history.csv"), &outcome.history)?;
    if let Some(last) = outcome.history.last() {
        println!("epoch {} loss {:.6e}", last.epoch, last.loss);
    }
    Ok(())
}

fn run_bench(config_path: &Path, out: &Path, assert: bool) -> Result<()> {
    let text = std::fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let config: BenchConfig = serde_json::from_str(&text)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let report = metrics::bench_run(&config, base)?;
    metrics::write_report(&report, out)?;
    for g in &report.overall {
        println!("{:<16} n={:<4} mean RIC {:.4}  mean ERIC {:.4}", g.guess, g.count, g.mean_ric, g.mean_eric);
    }
    for f in &report.failures {
        eprintln!("FAIL: {f}");
    }
    if assert && !report.failures.is_empty() {
        std::process::exit(2);
    }
    Ok(())
}

fn run_metrics(guess: &str, molecule: &Path) -> Result<()> {
    let m = read_molecule(molecule)?;
    let options = ScfOptions::default();
    let ctx = BasisContext::build(&m, &BasisSet::sto3g())?;
    let table = AtomicDensityTable::sto3g(options.exchange_fraction)?;
    let spec = GuessSpec::parse(guess);
    let source = GuessSource::load(&spec, Path::new("."))?;
    let reference = metrics::reference_run(&ctx, &table, &options)?;
    let record = metrics::evaluate(&source, &spec.name, &m, &ctx, &reference, &table, &options)?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    match cli.command {
        Command::Scf { molecule, guess, alpha, no_diis } => run_scf(&molecule, &guess, alpha, no_diis),
        Command::Corpus { out, copies, seed } => {
            let ms = corpus::generate(&CorpusConfig { copies, seed, ..CorpusConfig::default() })?;
            corpus::write_dir(&out, &ms)?;
            println!("wrote {} molecules to {}", ms.len(), out.display());
            Ok(())
        }
        Command::Label { corpus, out, alpha } => run_label(&corpus, out, alpha),
        Command::Pretrain { config, out } => run_training(&config, &out, false),
        Command::Sail { config, out } => run_training(&config, &out, true),
        Command::Bench { config, out, assert } => run_bench(&config, &out, assert),
        Command::Metrics { guess, molecule } => run_metrics(&guess, &molecule),
    }
}
