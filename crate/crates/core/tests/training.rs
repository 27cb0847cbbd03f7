//! Training-loop contracts: determinism, no-op runs, loss decrease and the
//! exported EMA weights.

use nalgebra::DMatrix;
use sailscf::chem_io::BasisSet;
use sailscf::corpus::{self, CorpusConfig, Split};
use sailscf::guess::{Ansatz, AtomicDensityTable, FeatureSpec, GuessModel};
use sailscf::metrics;
use sailscf::scf::ScfOptions;
use sailscf::train::{self, Sample, TrainConfig};
use std::sync::OnceLock;

fn table() -> &'static AtomicDensityTable {
    static T: OnceLock<AtomicDensityTable> = OnceLock::new();
    T.get_or_init(|| AtomicDensityTable::sto3g(1.0).unwrap())
}

/// 32 labelled molecules with at most two heavy atoms.
fn toy_set() -> &'static [Sample] {
    static S: OnceLock<Vec<Sample>> = OnceLock::new();
    S.get_or_init(|| {
        let ms = corpus::generate(&CorpusConfig { copies: 3, ..CorpusConfig::default() }).unwrap();
        let train: Vec<_> = corpus::split(&ms, Split::Train).into_iter().take(32).collect();
        let s = metrics::prepare_samples(&train, &BasisSet::sto3g(), table(), &ScfOptions::default(), true).unwrap();
        assert_eq!(s.len(), 32);
        s
    })
}

fn fresh(ansatz: Ansatz) -> GuessModel {
    GuessModel::new(ansatz, FeatureSpec::default(), 17)
}

fn pretrain_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, warmup_steps: 1, ..TrainConfig::pretrain() }
}

#[test]
fn pretraining_is_deterministic() {
    let data = &toy_set()[..8];
    let cfg = pretrain_config(3);
    let a = train::pretrain(data, &[], &fresh(Ansatz::DeltaDensity), table(), &cfg, false).unwrap();
    let b = train::pretrain(data, &[], &fresh(Ansatz::DeltaDensity), table(), &cfg, false).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.parameters, b.model.parameters);
    assert_ne!(a.model.parameters, fresh(Ansatz::DeltaDensity).parameters);
}

#[test]
fn sail_is_deterministic() {
    let data = &toy_set()[..4];
    let cfg = TrainConfig { epochs: 1, steps: 3, warmup_steps: 1, ..TrainConfig::sail() };
    let m = fresh(Ansatz::DeltaFock);
    let a = train::sail_finetune(data, &[], &m, table(), &cfg, false).unwrap();
    let b = train::sail_finetune(data, &[], &m, table(), &cfg, false).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.parameters, b.model.parameters);
}

#[test]
fn zero_epochs_return_the_input_model() {
    let data = &toy_set()[..4];
    let m = fresh(Ansatz::DeltaDensity);
    let p = train::pretrain(data, &[], &m, table(), &pretrain_config(0), false).unwrap();
    assert_eq!(p.model, m);
    assert_eq!(p.history.len(), 1);
    let s = train::sail_finetune(data, &[], &m, table(), &TrainConfig { epochs: 0, ..TrainConfig::sail() }, false).unwrap();
    assert_eq!(s.model, m);
}

#[test]
fn zero_learning_rate_leaves_the_model_unchanged() {
    let data = &toy_set()[..4];
    let mut m = fresh(Ansatz::DeltaDensity);
    m.randomize_output(3, 0.1);
    let cfg = TrainConfig { epochs: 1, steps: 2, warmup_steps: 1, learning_rate: 0.0, min_learning_rate: 0.0, ..TrainConfig::sail() };
    let out = train::sail_finetune(data, &[], &m, table(), &cfg, false).unwrap();
    assert_eq!(out.model.parameters, m.parameters);
    assert_eq!(out.raw_model.parameters, m.parameters);
    let cfg = TrainConfig { learning_rate: 0.0, min_learning_rate: 0.0, ..pretrain_config(1) };
    let out = train::pretrain(data, &[], &m, table(), &cfg, false).unwrap();
    assert_eq!(out.model.parameters, m.parameters);
}

#[test]
fn fifty_pretraining_epochs_lower_the_training_loss() {
    let cfg = TrainConfig { epochs: 50, warmup_steps: 100, ..TrainConfig::pretrain() };
    let out = train::pretrain(toy_set(), &[], &fresh(Ansatz::DeltaDensity), table(), &cfg, false).unwrap();
    let first = out.history.first().unwrap().loss;
    let last = out.history.last().unwrap().loss;
    assert_eq!(out.history.len(), 51);
    assert!(last < first, "{first} -> {last}");
    let exported = train::mean_surrogate_loss(&out.model, toy_set(), table()).unwrap();
    assert!(exported < first, "{first} -> {exported}");
}

#[test]
fn ema_matches_the_unrolled_average_of_snapshots() {
    let data = &toy_set()[..5];
    let m = fresh(Ansatz::DeltaDensity);
    let cfg = TrainConfig { epochs: 1, steps: 2, warmup_steps: 1, ..TrainConfig::sail() };
    let out = train::sail_finetune(data, &[], &m, table(), &cfg, true).unwrap();
    assert_eq!(out.snapshots.len(), 5);
    assert_eq!(out.snapshots.last().unwrap(), &out.raw_model.parameters);

    // e_k = d^k θ_0 + (1 - d) Σ_j d^(k-j) θ_j
    let d = cfg.ema_decay;
    let k = out.snapshots.len() as i32;
    for (idx, p0) in m.parameters.iter().enumerate() {
        let mut expected: DMatrix<f64> = p0 * d.powi(k);
        for (j, snap) in out.snapshots.iter().enumerate() {
            expected += &snap[idx] * ((1.0 - d) * d.powi(k - 1 - j as i32));
        }
        let err = (&expected - &out.model.parameters[idx]).amax();
        assert!(err < 1e-10, "tensor {idx}: {err:e}");
    }
}

#[test]
fn history_is_written_as_csv() {
    let data = &toy_set()[..2];
    let out = train::pretrain(data, &[], &fresh(Ansatz::DeltaDensity), table(), &pretrain_config(2), false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    train::write_history(&path, &out.history).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("epoch,loss,val_eric,grad_norm,tape_peak"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn checkpoints_round_trip_after_training() {
    let data = &toy_set()[..3];
    let out = train::pretrain(data, &[], &fresh(Ansatz::DeltaFock), table(), &pretrain_config(1), false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    out.model.save(&path).unwrap();
    assert_eq!(GuessModel::load(&path).unwrap(), out.model);
}
