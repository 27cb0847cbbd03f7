//! Losses, the surrogate pretraining stage and SAIL finetuning through the
//! unrolled solver.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, RecordedTrajectory, Tape, Var};
use crate::chem_io::Molecule;
use crate::error::{Error, Result};
use crate::guess::{self, Ansatz, AtomicDensityTable, GuessModel, ModelInputs};
use crate::integrals::BasisContext;
use crate::metrics::{self, Label};
use crate::scf::{self, Guess, ScfOptions, ScfTrajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// RMS of the occupied–virtual orbital gradient.
    #[default]
    GradientRms,
    /// (1/B) ‖F P S − S P F‖_F.
    Commutator,
}

/// RMS of G = C_occᵀ F C_virt; zero without virtual orbitals.
pub fn loss_gradient_rms(c: &DMatrix<f64>, f: &DMatrix<f64>, n_occ: usize) -> f64 {
    scf::gradient_rms(c, f, n_occ)
}

pub fn loss_commutator(f: &DMatrix<f64>, p: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let fps = f * p * s;
    (&fps - fps.transpose()).norm() / f.nrows() as f64
}

/// (1/(2B)) (‖ΔX‖_F + Σ|ΔX|).
pub fn loss_surrogate(x_hat: &DMatrix<f64>, x_star: &DMatrix<f64>) -> Result<f64> {
    if x_hat.shape() != x_star.shape() {
        return Err(Error::Shape(format!("surrogate loss on {:?} vs {:?}", x_hat.shape(), x_star.shape())));
    }
    let d = x_hat - x_star;
    Ok((d.norm() + d.abs().sum()) / (2.0 * d.nrows() as f64))
}

/// Mean of the per-step losses over iterates 1..=steps.
pub fn loss_trajectory(kind: LossKind, traj: &ScfTrajectory, steps: usize, ctx: &BasisContext) -> Result<f64> {
    if steps == 0 || traj.iterates.len() <= steps {
        return Err(Error::OutOfRange(format!("trajectory has {} iterates, {steps} steps requested", traj.iterates.len())));
    }
    let total: f64 = traj.iterates[1..=steps]
        .iter()
        .map(|it| match kind {
            LossKind::GradientRms => loss_gradient_rms(&it.orbitals, &it.fock, ctx.n_occ),
            LossKind::Commutator => loss_commutator(&it.fock, &it.density, &ctx.overlap),
        })
        .sum();
    Ok(total / steps as f64)
}

/// sqrt of a recorded non-negative 1×1, with a zero subgradient at 0.
fn record_sqrt(tape: &mut Tape, x: Var) -> Var {
    if tape.scalar(x) == 0.0 {
        tape.leaf(DMatrix::zeros(1, 1))
    } else {
        tape.sqrt(x)
    }
}

fn record_norm(tape: &mut Tape, x: Var) -> Var {
    if tape.value(x).iter().all(|&v| v == 0.0) {
        tape.leaf(DMatrix::zeros(1, 1))
    } else {
        tape.norm(x)
    }
}

/// Records the loss of iterate `t ≥ 1` of a recorded trajectory.
pub fn record_step_loss(kind: LossKind, tape: &mut Tape, traj: &RecordedTrajectory, t: usize) -> Result<Var> {
    let f = traj.focks[t];
    match kind {
        LossKind::GradientRms => {
            let c = traj.orbitals[t].ok_or_else(|| Error::OutOfRange(format!("iterate {t} has no orbitals")))?;
            let (n, no) = (traj.n_basis, traj.n_occ);
            if no == 0 || no == n {
                return Ok(tape.leaf(DMatrix::zeros(1, 1)));
            }
            let occ = tape.column_range(c, 0..no);
            let virt = tape.column_range(c, no..n);
            let occ_t = tape.transpose(occ);
            let of = tape.matmul(occ_t, f);
            let g = tape.matmul(of, virt);
            let g2 = tape.hadamard(g, g);
            let s = tape.sum(g2);
            let mean = tape.scale(s, 1.0 / (no * (n - no)) as f64);
            Ok(record_sqrt(tape, mean))
        }
        LossKind::Commutator => {
            let fp = tape.matmul(f, traj.densities[t]);
            let fps = tape.matmul(fp, traj.context.overlap);
            let fps_t = tape.transpose(fps);
            let comm = tape.sub(fps, fps_t);
            let norm = record_norm(tape, comm);
            Ok(tape.scale(norm, 1.0 / traj.n_basis as f64))
        }
    }
}

/// Records the uniform mean of the per-step losses over t = 1..=T.
pub fn record_trajectory_loss(kind: LossKind, tape: &mut Tape, traj: &RecordedTrajectory) -> Result<Var> {
    let steps = traj.steps();
    let mut total = record_step_loss(kind, tape, traj, 1)?;
    for t in 2..=steps {
        let l = record_step_loss(kind, tape, traj, t)?;
        total = tape.add(total, l);
    }
    Ok(tape.scale(total, 1.0 / steps as f64))
}

/// Records the surrogate loss of a prediction against a constant label.
pub fn record_surrogate(tape: &mut Tape, x_hat: Var, x_star: &DMatrix<f64>) -> Var {
    let target = tape.leaf(x_star.clone());
    let d = tape.sub(x_hat, target);
    let norm = record_norm(tape, d);
    let a = tape.abs(d);
    let l1 = tape.sum(a);
    let both = tape.add(norm, l1);
    tape.scale(both, 0.5 / x_star.nrows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// SCF steps recorded per SAIL sample.
    pub steps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub ema_decay: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Validation ERIC every this many SAIL epochs (and after the last).
    pub val_every: usize,
    pub scf: ScfOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::sail()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 10,
            epochs: 10,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            warmup_steps: 100,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            ema_decay: 0.995,
            grad_clip_norm: 10.0,
            batch_size: 1,
            seed: 0,
            loss: LossKind::GradientRms,
            val_every: 1,
            scf: ScfOptions::default(),
        }
    }

    pub fn sail() -> Self {
        TrainConfig {
            stage: Stage::Sail,
            learning_rate: 1e-3,
            min_learning_rate: 2e-6,
            warmup_steps: 50,
            grad_clip_norm: 1.0,
            ..Self::pretrain()
        }
    }

    /// Checks the configuration for a run of `total_steps` optimizer steps.
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size != 1 {
            return bad("only batch_size = 1 is supported");
        }
        if !(self.learning_rate >= 0.0 && self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate) {
            return bad("learning rates must satisfy 0 <= min_learning_rate <= learning_rate");
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(self.grad_clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return bad("grad_clip_norm must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if total_steps > 0 && self.warmup_steps >= total_steps {
            return bad("warmup_steps must be smaller than the number of optimizer steps");
        }
        self.scf.validate()
    }

    /// Learning rate at optimizer step `step` (0-based) of `total`: linear
    /// warmup, then cosine decay to the minimum.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_learning_rate + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales `grads` in place to a global norm of at most `max_norm`; returns the raw norm.
pub fn clip_gradients(grads: &mut [DMatrix<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(params: &[DMatrix<f64>], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect();
        AdamW { beta1, beta2, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut [DMatrix<f64>], grads: &[DMatrix<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS) + self.weight_decay * p[i];
                p[i] -= lr * update;
            }
        }
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    pub params: Vec<DMatrix<f64>>,
}

impl Ema {
    pub fn new(params: &[DMatrix<f64>], decay: f64) -> Self {
        Ema { decay, params: params.to_vec() }
    }

    /// ema ← ema + (1 − d)(θ − ema); an unchanged θ leaves ema bitwise unchanged.
    pub fn update(&mut self, params: &[DMatrix<f64>]) {
        let w = 1.0 - self.decay;
        for (e, p) in self.params.iter_mut().zip(params) {
            for i in 0..e.len() {
                e[i] += w * (p[i] - e[i]);
            }
        }
    }
}

/// One molecule prepared for training or validation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub molecule: Molecule,
    pub ctx: BasisContext,
    pub label: Option<Label>,
}

impl Sample {
    pub fn new(molecule: Molecule, ctx: BasisContext, label: Option<Label>) -> Self {
        Sample { molecule, ctx, label }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 0 is the untrained model, evaluated before any update.
    pub epoch: usize,
    /// Mean training loss.
    pub loss: f64,
    pub val_eric: Option<f64>,
    /// Mean raw (pre-clipping) gradient norm.
    pub grad_norm: f64,
    /// Largest tape seen in the epoch, bytes.
    pub tape_peak: usize,
    pub val_loss: Option<f64>,
    /// Samples skipped for a degenerate occupation boundary.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// EMA weights, the exported model.
    pub model: GuessModel,
    /// Raw optimizer weights after the last step.
    pub raw_model: GuessModel,
    pub history: Vec<HistoryRow>,
    /// Raw parameters after every optimizer step, when requested.
    pub snapshots: Vec<Vec<DMatrix<f64>>>,
}

pub fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

struct Prepared<'s> {
    sample: &'s Sample,
    inputs: ModelInputs,
}

fn prepare<'s>(model: &GuessModel, samples: &'s [Sample], table: &AtomicDensityTable) -> Result<Vec<Prepared<'s>>> {
    samples
        .iter()
        .map(|s| Ok(Prepared { sample: s, inputs: ModelInputs::new(model, &s.molecule, &s.ctx, table)? }))
        .collect()
}

fn surrogate_target(ansatz: Ansatz, label: &Label) -> &DMatrix<f64> {
    match ansatz {
        Ansatz::DeltaDensity => &label.density,
        Ansatz::DeltaFock => &label.fock,
    }
}

fn require_label(s: &Sample) -> Result<&Label> {
    s.label.as_ref().ok_or_else(|| Error::Config(format!("sample {} has no label", s.molecule.name)))
}

/// Surrogate loss of the model's raw prediction on one labelled sample.
pub fn surrogate_loss(model: &GuessModel, inputs: &ModelInputs, label: &Label) -> Result<f64> {
    loss_surrogate(&guess::model_raw_prediction(model, inputs), surrogate_target(model.ansatz, label))
}

fn surrogate_grad(model: &GuessModel, inputs: &ModelInputs, label: &Label) -> Result<(f64, Vec<DMatrix<f64>>, usize)> {
    let mut tape = Tape::new();
    let params: Vec<Var> = model.parameters.iter().map(|p| tape.leaf(p.clone())).collect();
    let (raw, _) = guess::record_raw(&mut tape, &params, inputs);
    let loss = record_surrogate(&mut tape, raw, surrogate_target(model.ansatz, label));
    let value = tape.scalar(loss);
    let g = tape.backward(loss)?;
    let grads = params.iter().zip(&model.parameters).map(|(v, p)| g.get_or_zeros(*v, p.shape())).collect();
    Ok((value, grads, tape.size_bytes()))
}

/// Plain (unrecorded) trajectory loss of the model's guess.
pub fn sail_loss(model: &GuessModel, sample: &Sample, table: &AtomicDensityTable, config: &TrainConfig) -> Result<f64> {
    let g: Guess = guess::model_guess(model, &sample.molecule, &sample.ctx, table)?;
    let traj = scf::scf_run_steps(&g, &sample.ctx, &config.scf, config.steps)?;
    loss_trajectory(config.loss, &traj, config.steps, &sample.ctx)
}

/// Mean surrogate loss over labelled samples.
pub fn mean_surrogate_loss(model: &GuessModel, samples: &[Sample], table: &AtomicDensityTable) -> Result<f64> {
    let prepared = prepare(model, samples, table)?;
    let mut total = 0.0;
    for p in &prepared {
        total += surrogate_loss(model, &p.inputs, require_label(p.sample)?)?;
    }
    Ok(total / prepared.len().max(1) as f64)
}

fn with_params(model: &GuessModel, params: &[DMatrix<f64>], stage: &str) -> GuessModel {
    let mut m = model.clone();
    m.parameters = params.to_vec();
    m.metadata.stages.push(stage.into());
    m
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

struct Loop<'a> {
    config: &'a TrainConfig,
    opt: AdamW,
    ema: Ema,
    params: Vec<DMatrix<f64>>,
    step: usize,
    total: usize,
    snapshots: Option<Vec<Vec<DMatrix<f64>>>>,
}

impl<'a> Loop<'a> {
    fn new(model: &GuessModel, config: &'a TrainConfig, total: usize, keep_snapshots: bool) -> Self {
        Loop {
            config,
            opt: AdamW::new(&model.parameters, config.beta1, config.beta2, config.weight_decay),
            ema: Ema::new(&model.parameters, config.ema_decay),
            params: model.parameters.clone(),
            step: 0,
            total,
            snapshots: keep_snapshots.then(Vec::new),
        }
    }

    /// Clips and applies one gradient; returns the raw gradient norm.
    fn apply(&mut self, mut grads: Vec<DMatrix<f64>>) -> f64 {
        let norm = clip_gradients(&mut grads, self.config.grad_clip_norm);
        let lr = self.config.learning_rate_at(self.step, self.total);
        self.opt.step(&mut self.params, &grads, lr);
        self.ema.update(&self.params);
        self.step += 1;
        if let Some(s) = &mut self.snapshots {
            s.push(self.params.clone());
        }
        norm
    }
}

/// Surrogate pretraining against converged labels.
pub fn pretrain(
    train: &[Sample],
    val: &[Sample],
    model: &GuessModel,
    table: &AtomicDensityTable,
    config: &TrainConfig,
    keep_snapshots: bool,
) -> Result<TrainOutcome> {
    let total = config.epochs * train.len();
    config.validate(total)?;
    let prepared = prepare(model, train, table)?;
    let mut lp = Loop::new(model, config, total, keep_snapshots);
    let mut history = Vec::new();
    let evaluate = |m: &GuessModel| -> Result<(f64, Option<f64>)> {
        let l = mean_surrogate_loss(m, train, table)?;
        let v = if val.is_empty() { None } else { Some(mean_surrogate_loss(m, val, table)?) };
        Ok((l, v))
    };
    let (l0, v0) = evaluate(model)?;
    history.push(HistoryRow { epoch: 0, loss: l0, val_eric: None, grad_norm: 0.0, tape_peak: 0, val_loss: v0, skipped: 0 });
    let mut current = model.clone();
    for epoch in 1..=config.epochs {
        let (mut loss_sum, mut norm_sum, mut peak) = (0.0, 0.0, 0);
        for (k, &i) in epoch_order(prepared.len(), config.seed, epoch).iter().enumerate() {
            let p = &prepared[i];
            current.parameters.clone_from(&lp.params);
            let (loss, grads, bytes) = surrogate_grad(&current, &p.inputs, require_label(p.sample)?)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, sample: k });
            }
            loss_sum += loss;
            norm_sum += lp.apply(grads);
            peak = peak.max(bytes);
        }
        let ema_model = with_params(model, &lp.ema.params, "pretrain");
        let val_loss = if val.is_empty() { None } else { Some(mean_surrogate_loss(&ema_model, val, table)?) };
        let n = prepared.len().max(1) as f64;
        history.push(HistoryRow {
            epoch,
            loss: loss_sum / n,
            val_eric: None,
            grad_norm: norm_sum / n,
            tape_peak: peak,
            val_loss,
            skipped: 0,
        });
    }
    let stage = "pretrain";
    Ok(TrainOutcome {
        model: if config.epochs == 0 { model.clone() } else { with_params(model, &lp.ema.params, stage) },
        raw_model: with_params(model, &lp.params, stage),
        history,
        snapshots: lp.snapshots.unwrap_or_default(),
    })
}

/// Label-free finetuning through `config.steps` recorded SCF iterations.
pub fn sail_finetune(
    train: &[Sample],
    val: &[Sample],
    model: &GuessModel,
    table: &AtomicDensityTable,
    config: &TrainConfig,
    keep_snapshots: bool,
) -> Result<TrainOutcome> {
    let total = config.epochs * train.len();
    config.validate(total)?;
    let prepared = prepare(model, train, table)?;
    let mut lp = Loop::new(model, config, total, keep_snapshots);
    let val_eric = |m: &GuessModel| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        Ok(Some(metrics::mean_eric(m, val, table, &config.scf)?))
    };
    let mut initial = 0.0;
    for s in train {
        initial += sail_loss(model, s, table, config)?;
    }
    let mut history = vec![HistoryRow {
        epoch: 0,
        loss: initial / train.len().max(1) as f64,
        val_eric: val_eric(model)?,
        grad_norm: 0.0,
        tape_peak: 0,
        val_loss: None,
        skipped: 0,
    }];
    let mut current = model.clone();
    for epoch in 1..=config.epochs {
        let (mut loss_sum, mut norm_sum, mut peak, mut skipped, mut used) = (0.0, 0.0, 0, 0, 0);
        for (k, &i) in epoch_order(prepared.len(), config.seed, epoch).iter().enumerate() {
            let p = &prepared[i];
            current.parameters.clone_from(&lp.params);
            let kind = config.loss;
            let r = autodiff::grad(
                |tape, traj| record_trajectory_loss(kind, tape, traj),
                &current,
                &p.inputs,
                &p.sample.ctx,
                &config.scf,
                config.steps,
            );
            let r = match r {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::NanLoss { epoch, sample: k }),
                Err(e) => return Err(e),
            };
            peak = peak.max(r.tape_bytes);
            if r.flagged {
                skipped += 1;
                continue;
            }
            loss_sum += r.loss;
            norm_sum += lp.apply(r.gradients);
            used += 1;
        }
        let ema_model = with_params(model, &lp.ema.params, "sail");
        let evaluate = epoch == config.epochs || (config.val_every > 0 && epoch % config.val_every == 0);
        let n = used.max(1) as f64;
        history.push(HistoryRow {
            epoch,
            loss: loss_sum / n,
            val_eric: if evaluate { val_eric(&ema_model)? } else { None },
            grad_norm: norm_sum / n,
            tape_peak: peak,
            val_loss: None,
            skipped,
        });
    }
    Ok(TrainOutcome {
        model: if config.epochs == 0 { model.clone() } else { with_params(model, &lp.ema.params, "sail") },
        raw_model: with_params(model, &lp.params, "sail"),
        history,
        snapshots: lp.snapshots.unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem_io::{parse_xyz, BasisSet};
    use rand::Rng;

    fn water() -> BasisContext {
        let m = parse_xyz("3\n\nO 0 0 0.1173\nH 0 0.7572 -0.4692\nH 0 -0.7572 -0.4692").unwrap();
        BasisContext::build(&m, &BasisSet::sto3g()).unwrap()
    }

    fn random(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gradient_rms_single_ov_entry() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.3, 1.0]);
        assert!((loss_gradient_rms(&DMatrix::identity(2, 2), &f, 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn gradient_rms_matches_loops() {
        let (c, f) = (random(5, 5, 1), random(5, 5, 2));
        let (no, nv) = (2, 3);
        let mut s = 0.0;
        for i in 0..no {
            for a in 0..nv {
                let mut g = 0.0;
                for mu in 0..5 {
                    for nu in 0..5 {
                        g += c[(mu, i)] * f[(mu, nu)] * c[(nu, no + a)];
                    }
                }
                s += g * g;
            }
        }
        assert!((loss_gradient_rms(&c, &f, no) - (s / 6.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn commutator_cases() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let i = DMatrix::identity(3, 3);
        assert_eq!(loss_commutator(&d, &(&d * 2.0), &i), 0.0);
        let (f, p, s) = (random(3, 3, 3), random(3, 3, 4), random(3, 3, 5));
        let mut acc = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let mut x = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        x += f[(a, k)] * p[(k, l)] * s[(l, b)] - s[(a, k)] * p[(k, l)] * f[(l, b)];
                    }
                }
                acc += x * x;
            }
        }
        let fsym = crate::linalg::symmetrize(&f);
        let psym = crate::linalg::symmetrize(&p);
        let ssym = crate::linalg::symmetrize(&s);
        let mut acc_sym = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let mut x = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        x += fsym[(a, k)] * psym[(k, l)] * ssym[(l, b)] - ssym[(a, k)] * psym[(k, l)] * fsym[(l, b)];
                    }
                }
                acc_sym += x * x;
            }
        }
        assert!(acc > 0.0);
        assert!((loss_commutator(&fsym, &psym, &ssym) - acc_sym.sqrt() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_cases() {
        let a = random(3, 3, 6);
        assert_eq!(loss_surrogate(&a, &a).unwrap(), 0.0);
        let two = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(loss_surrogate(&two, &DMatrix::zeros(1, 1)).unwrap(), 2.0);
        let b = random(3, 3, 7);
        let d = &a - &b;
        let expected = (d.iter().map(|x| x * x).sum::<f64>().sqrt() + d.iter().map(|x| x.abs()).sum::<f64>()) / 6.0;
        assert!((loss_surrogate(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!(loss_surrogate(&a, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn trajectory_loss_is_the_mean_of_recorded_steps() {
        let ctx = water();
        let (c, _) = scf::solve_roothaan(&ctx.hcore, &ctx).unwrap();
        let g = Guess::from_density(scf::density_from_orbitals(&c, ctx.n_occ).unwrap());
        let traj = scf::scf_run_steps(&g, &ctx, &ScfOptions::default(), 4).unwrap();
        assert_eq!(traj.iterates.len(), 5);
        for kind in [LossKind::GradientRms, LossKind::Commutator] {
            let per: Vec<f64> = (1..=4).map(|t| loss_trajectory(kind, &traj, t, &ctx).unwrap() * t as f64).collect();
            let steps: Vec<f64> = traj.iterates[1..]
                .iter()
                .map(|it| match kind {
                    LossKind::GradientRms => it.gradient_rms,
                    LossKind::Commutator => loss_commutator(&it.fock, &it.density, &ctx.overlap),
                })
                .collect();
            assert!((loss_trajectory(kind, &traj, 1, &ctx).unwrap() - steps[0]).abs() < 1e-15);
            assert!((per[3] / 4.0 - steps.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        }
        assert!(loss_trajectory(LossKind::GradientRms, &traj, 5, &ctx).is_err());
    }

    #[test]
    fn converged_iterate_has_small_losses() {
        let ctx = water();
        let (c, _) = scf::solve_roothaan(&ctx.hcore, &ctx).unwrap();
        let traj = scf::scf_run(&scf::density_from_orbitals(&c, ctx.n_occ).unwrap(), &ctx, &ScfOptions::default()).unwrap();
        let last = traj.final_iterate();
        assert!(loss_gradient_rms(&last.orbitals, &last.fock, ctx.n_occ) < 1e-6);
        assert!(loss_commutator(&last.fock, &last.density, &ctx.overlap) < 1e-4);
    }

    #[test]
    fn clipping_scales_to_the_threshold() {
        let mut g = vec![random(3, 2, 8) * 10.0, random(1, 2, 9) * 10.0];
        let raw = clip_gradients(&mut g, 1.0);
        assert!(raw > 1.0);
        let after = g.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-10);
        let mut small = vec![DMatrix::from_element(1, 1, 0.5)];
        assert_eq!(clip_gradients(&mut small, 1.0), 0.5);
        assert_eq!(small[0][(0, 0)], 0.5);
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let cfg = TrainConfig { learning_rate: 1.0, min_learning_rate: 0.1, warmup_steps: 4, ..TrainConfig::sail() };
        assert!((cfg.learning_rate_at(0, 20) - 0.25).abs() < 1e-15);
        assert!((cfg.learning_rate_at(3, 20) - 1.0).abs() < 1e-15);
        assert!((cfg.learning_rate_at(4, 20) - 1.0).abs() < 1e-15);
        assert!((cfg.learning_rate_at(20, 20) - 0.1).abs() < 1e-15);
        assert!(cfg.validate(4).is_err());
        assert!(cfg.validate(5).is_ok());
    }

    #[test]
    fn ema_unrolls_to_exponential_average() {
        let snaps: Vec<Vec<DMatrix<f64>>> = (0..6).map(|k| vec![random(2, 2, 20 + k)]).collect();
        let d = 0.9;
        let mut ema = Ema::new(&snaps[0], d);
        for s in &snaps[1..] {
            ema.update(s);
        }
        let mut expected = &snaps[0][0] * d.powi(5);
        for (k, s) in snaps[1..].iter().enumerate() {
            expected += &s[0] * ((1.0 - d) * d.powi(4 - k as i32));
        }
        assert!((&ema.params[0] - expected).abs().max() < 1e-12);
    }
}
