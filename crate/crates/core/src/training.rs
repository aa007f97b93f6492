//! Loss, Adam, and the mini-batch training loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{Normalizer, Sample};
use crate::model::{forecast_on_tape, BoundParams, Feed, Hyper, ModelParams};
use crate::tensor::{Tape, Tensor, Var};

/// Early stopping on the chronological tail of the training samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    /// Fraction of training samples held out, taken from the end.
    pub holdout_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.1,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub teacher_forcing: bool,
    pub shuffle: bool,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
    pub early_stopping: Option<EarlyStopping>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop once a batch loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 200,
            seed: 0,
            teacher_forcing: true,
            shuffle: true,
            checkpoint_every: 0,
            clip_norm: None,
            early_stopping: None,
            max_steps: None,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        if let Some(es) = self.early_stopping {
            if !(es.holdout_fraction > 0.0 && es.holdout_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "early-stopping holdout fraction must lie in (0, 1), got {}",
                    es.holdout_fraction
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sum over forecast steps of the squared error norm, averaged over the
/// batch. Accepts `(tau, N, d)` or `(B, tau, N, d)`.
pub fn sequence_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let ps = tape.shape(pred).to_vec();
    if ps != tape.shape(truth) {
        return Err(Error::Dimension(format!(
            "loss operands differ: prediction {ps:?}, truth {:?}",
            tape.shape(truth)
        )));
    }
    let diff = tape.sub(pred, truth)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq, None)?;
    match ps.len() {
        3 => Ok(total),
        4 => tape.scale(total, 1.0 / ps[0] as f64),
        _ => Err(Error::Dimension(format!(
            "loss expects (tau, N, d) or (B, tau, N, d), got {ps:?}"
        ))),
    }
}

/// Value-level [`sequence_loss`].
pub fn sequence_loss_value(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(truth.clone());
    let l = sequence_loss(&mut tape, p, t)?;
    tape.value(l).item()
}

/// Adam moments keyed like the parameters they track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &BTreeMap<String, Tensor>) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} at flat index {i} of parameter `{name}`",
                g.data()[i]
            )));
        }
        let m = state
            .m
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no Adam state for parameter `{name}`")))?;
        if m.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "Adam state for `{name}` has the wrong shape"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        let (pd, gd) = (p.data_mut(), g.data());
        for (((x, &gi), mi), vi) in pd
            .iter_mut()
            .zip(gd)
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient tensor.
pub fn gradient_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor, Tensor)> {
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.input.clone()).collect();
    let targets: Vec<Tensor> = samples.iter().map(|s| s.targets.clone()).collect();
    let feats: Vec<Tensor> = samples.iter().map(|s| s.target_features.clone()).collect();
    Ok((
        Tensor::stack(&inputs)?,
        Tensor::stack(&targets)?,
        Tensor::stack(&feats)?,
    ))
}

/// Batch loss and, when `with_grads`, the gradient of every parameter.
pub fn batch_loss_and_gradients(
    params: &ModelParams,
    propagation: &Tensor,
    batch: &[&Sample],
    teacher_forcing: bool,
    with_grads: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let (x, y, e) = stack_batch(batch)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, with_grads)?;
    let prop = tape.constant(propagation.clone());
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let ev = tape.constant(e);
    let feed = if teacher_forcing {
        Feed::TeacherForced(yv)
    } else {
        Feed::FreeRunning
    };
    let out = forecast_on_tape(&mut tape, &bound, prop, xv, ev, feed)?;
    let loss = sequence_loss(&mut tape, out.predictions, yv)?;
    let value = tape.value(loss).item()?;
    let mut grads = BTreeMap::new();
    if with_grads {
        let mut g = tape.backward(loss)?;
        for (name, &v) in &bound.vars {
            let t = g
                .take(v)
                .ok_or_else(|| Error::Contract(format!("no gradient recorded for `{name}`")))?;
            grads.insert(name.clone(), t);
        }
    }
    Ok((value, grads))
}

/// Mean per-sample loss over `samples`, evaluated in batches.
pub fn mean_loss(
    params: &ModelParams,
    propagation: &Tensor,
    samples: &[Sample],
    teacher_forcing: bool,
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input(
            "cannot evaluate a loss over zero samples".into(),
        ));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let (l, _) = batch_loss_and_gradients(params, propagation, chunk, teacher_forcing, false)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Hex SHA-256 of a byte string, used for data provenance in manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Everything needed to reproduce a run, written beside each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub hyper: Hyper,
    pub graph_epsilon: f64,
    pub seed: u64,
    /// Input name to SHA-256 hex digest.
    pub data_hashes: BTreeMap<String, String>,
    pub normalizer: Option<Normalizer>,
    pub epochs_completed: usize,
    pub steps_completed: usize,
    pub loss_history: Vec<f64>,
    pub validation_history: Vec<f64>,
    /// Seconds since the Unix epoch when the manifest was written.
    pub written_at_unix: u64,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, hyper: &Hyper, graph_epsilon: f64) -> Self {
        Self {
            config: config.clone(),
            hyper: hyper.clone(),
            graph_epsilon,
            seed: config.seed,
            data_hashes: BTreeMap::new(),
            normalizer: None,
            epochs_completed: 0,
            steps_completed: 0,
            loss_history: Vec::new(),
            validation_history: Vec::new(),
            written_at_unix: 0,
        }
    }
}

/// Manifest path for a checkpoint path: `model.json` -> `model.manifest.json`.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    checkpoint.with_file_name(format!("{stem}.manifest.json"))
}

/// Where and how checkpoints are persisted during training.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

impl CheckpointSink {
    fn write(&self, params: &ModelParams, report: &TrainReport) -> Result<()> {
        params.save(&self.path)?;
        let mut m = self.manifest.clone();
        m.epochs_completed = report.epochs;
        m.steps_completed = report.steps;
        m.loss_history = report.loss_history.clone();
        m.validation_history = report.validation_history.clone();
        m.written_at_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = manifest_path(&self.path);
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each completed epoch.
    pub loss_history: Vec<f64>,
    /// Loss of every optimizer step, before its update.
    pub step_losses: Vec<f64>,
    /// Held-out loss after each epoch when early stopping is on.
    pub validation_history: Vec<f64>,
    pub epochs: usize,
    pub steps: usize,
    pub stopped_early: bool,
    pub reached_target: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: TrainReport,
}

fn numerical_abort(
    err: Error,
    sink: Option<&CheckpointSink>,
    last_good: &ModelParams,
    report: &TrainReport,
) -> Error {
    match err {
        Error::Numerical(msg) => {
            let saved = sink.map(|s| (s.write(last_good, report), s.path.display().to_string()));
            match saved {
                Some((Ok(()), p)) => Error::Numerical(format!(
                    "{msg}; training aborted at step {}, last good parameters saved to {p}",
                    report.steps
                )),
                Some((Err(e), p)) => Error::Numerical(format!(
                    "{msg}; training aborted at step {}, saving last good parameters to {p} failed: {e}",
                    report.steps
                )),
                None => Error::Numerical(format!(
                    "{msg}; training aborted at step {}",
                    report.steps
                )),
            }
        }
        other => other,
    }
}

/// Trains `params` on normalized samples.
///
/// Each epoch shuffles the sample order with the seeded generator, splits it
/// into batches, and takes one Adam step per batch on the batch-mean loss.
pub fn train(
    params: ModelParams,
    samples: &[Sample],
    propagation: &Tensor,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let hp = &params.hyper;
    if let Some(s) = samples.iter().find(|s| s.horizon() != hp.horizon) {
        return Err(Error::Input(format!(
            "sample at anchor {} has horizon {}, model expects {}",
            s.anchor,
            s.horizon(),
            hp.horizon
        )));
    }
    let (fit, holdout) = match cfg.early_stopping {
        Some(es) => {
            let n_hold = ((samples.len() as f64) * es.holdout_fraction).ceil() as usize;
            if n_hold == 0 || n_hold >= samples.len() {
                return Err(Error::Config(format!(
                    "early stopping needs at least 2 training samples, got {}",
                    samples.len()
                )));
            }
            samples.split_at(samples.len() - n_hold)
        }
        None => (samples, &samples[..0]),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params;
    let mut state = AdamState::new(&params.tensors);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..fit.len()).collect();

    'epochs: for epoch in 0..cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_total = 0.0;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &fit[i]).collect();
            let (loss, mut grads) = match batch_loss_and_gradients(
                &params,
                propagation,
                &batch,
                cfg.teacher_forcing,
                true,
            ) {
                Ok(r) => r,
                Err(e) => return Err(numerical_abort(e, sink, &params, &report)),
            };
            if let Some(limit) = cfg.clip_norm {
                let norm = gradient_norm(&grads);
                if norm > limit {
                    let f = limit / norm;
                    for g in grads.values_mut() {
                        g.data_mut().iter_mut().for_each(|v| *v *= f);
                    }
                }
            }
            let before = params.clone();
            if let Err(e) = adam_step(&mut params.tensors, &grads, &mut state, cfg) {
                return Err(numerical_abort(e, sink, &before, &report));
            }
            if let Some((name, _)) = params.tensors.iter().find(|(_, t)| !t.is_finite()) {
                let e = Error::Numerical(format!("parameter `{name}` diverged"));
                return Err(numerical_abort(e, sink, &before, &report));
            }
            report.steps += 1;
            report.step_losses.push(loss);
            epoch_total += loss * batch.len() as f64;
            epoch_count += batch.len();
            let hit_target = cfg.target_loss.is_some_and(|t| loss < t);
            let hit_steps = cfg.max_steps.is_some_and(|m| report.steps >= m);
            if hit_target || hit_steps {
                report.reached_target = hit_target;
                report.loss_history.push(epoch_total / epoch_count as f64);
                report.epochs = epoch + 1;
                break 'epochs;
            }
        }
        report.loss_history.push(epoch_total / epoch_count as f64);
        report.epochs = epoch + 1;

        if !holdout.is_empty() {
            let val = mean_loss(&params, propagation, holdout, false, cfg.batch_size)
                .map_err(|e| numerical_abort(e, sink, &params, &report))?;
            report.validation_history.push(val);
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                let patience = cfg.early_stopping.map_or(usize::MAX, |es| es.patience);
                if since_best >= patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
        if let Some(s) = sink {
            if cfg.checkpoint_every > 0 && report.epochs % cfg.checkpoint_every == 0 {
                s.write(&params, &report)?;
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    if let Some(s) = sink {
        s.write(&params, &report)?;
    }
    Ok(TrainOutcome { params, report })
}
