//! Training: the aggregate-plus-symptomwise Huber objective, AdamW with
//! linear warmup and cosine decay, global gradient clipping, early stopping
//! on validation loss, and fully seeded runs.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ModelConfig, TrainConfig};
use crate::data::{
    fit_feature_stats, sessions_with_history, Corpus, DataError, FeatureStats, Split,
    SplitManifest,
};
use crate::model::{prepare_session, ForwardPass, Mode, Model, PreparedSession};
use crate::params::ParamStore;
use crate::rng::SeqRng;
use crate::tape::BufId;
use crate::tensor::{clip_global_norm, huber};

#[derive(Debug)]
pub enum TrainError {
    Data(DataError),
    Config(ConfigError),
    EmptySplit(Split),
    MissingLabels { context: String },
    NanGradient { step: u64, param: String },
    ZeroTotalSteps,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::EmptySplit(s) => write!(f, "split {s:?} has no sessions"),
            TrainError::MissingLabels { context } => {
                write!(f, "{context}: labels required for training")
            }
            TrainError::NanGradient { step, param } => {
                write!(f, "non-finite gradient for `{param}` at step {step}; aborting run")
            }
            TrainError::ZeroTotalSteps => write!(f, "schedule requires total_steps > 0"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e)
    }
}

/// Attach the training objective to a finished forward pass:
/// `Huber(Ŷ, Σy) + λ_sym · (1/J) · Σ_j Huber(ŷ_j, y_j)`.
pub fn attach_loss(
    pass: &mut ForwardPass,
    label_items: &[f64],
    lambda_sym: f64,
    delta: f64,
) -> BufId {
    let j = label_items.len();
    let label_total: f64 = label_items.iter().sum();
    let agg = pass.fwd.tape.huber_vec(pass.total, vec![label_total], delta);
    let sym = pass.fwd.tape.huber_vec(pass.items, label_items.to_vec(), delta);
    let sym_sum = pass.fwd.tape.sum_all(sym);
    let sym_term = pass.fwd.tape.scale(sym_sum, lambda_sym / j as f64);
    pass.fwd.tape.add(agg, sym_term)
}

/// Loss value without a tape (validation and reporting).
pub fn loss_value(pred_items: &[f64], label_items: &[f64], lambda_sym: f64, delta: f64) -> f64 {
    assert_eq!(pred_items.len(), label_items.len());
    let j = pred_items.len() as f64;
    let pred_total: f64 = pred_items.iter().sum();
    let label_total: f64 = label_items.iter().sum();
    let agg = huber(pred_total, label_total, delta);
    let sym: f64 = pred_items
        .iter()
        .zip(label_items.iter())
        .map(|(&p, &y)| huber(p, y, delta))
        .sum::<f64>()
        / j;
    agg + lambda_sym * sym
}

/// Learning rate at `step`: linear warmup over `ceil(warmup_ratio ·
/// total_steps)` steps, then cosine decay to zero.
pub fn lr_at(
    step: usize,
    total_steps: usize,
    warmup_ratio: f64,
    base_lr: f64,
) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::ZeroTotalSteps);
    }
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(base_lr * (step + 1) as f64 / warmup as f64);
    }
    if total_steps == warmup {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Decoupled AdamW with bias correction. Every parameter decays unless
/// its name starts with an entry of the exclusion list.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decayed: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self::with_exclusions(store, weight_decay, &[])
    }

    pub fn with_exclusions(store: &ParamStore, weight_decay: f64, exclude: &[String]) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            decayed: store
                .iter()
                .map(|(name, _)| !exclude.iter().any(|p| name.starts_with(p.as_str())))
                .collect(),
            t: 0,
        }
    }

    /// One update. Gradients must already be clipped; non-finite gradients
    /// abort with the offending parameter name.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Vec<f64>],
        lr: f64,
        global_step: u64,
    ) -> Result<(), TrainError> {
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                let name = store.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
                return Err(TrainError::NanGradient { step: global_step, param: name });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, tensor) in store.tensors_mut().iter_mut().enumerate() {
            let wd = if self.decayed[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in tensor.data.iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *p);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub stats: FeatureStats,
    pub log: Vec<TrainLogEntry>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn prepare_split(
    corpus: &Corpus,
    manifest: &SplitManifest,
    split: Split,
    stats: &FeatureStats,
    cfg: &ModelConfig,
    require_labels: bool,
) -> Result<Vec<PreparedSession>, TrainError> {
    let pairs = sessions_with_history(corpus, manifest, split);
    if pairs.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (current, prev) in pairs {
        let prepared = prepare_session(current, prev, stats, cfg)?;
        if require_labels && prepared.label.is_none() {
            return Err(TrainError::MissingLabels {
                context: format!("session {}#{}", current.client_id, current.session_index),
            });
        }
        out.push(prepared);
    }
    Ok(out)
}

/// Train on the manifest's train split with early stopping on validation
/// loss; returns the parameters of the best validation epoch.
pub fn train(
    corpus: &Corpus,
    manifest: &SplitManifest,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate()?;
    cfg.validate()?;

    let train_pairs = sessions_with_history(corpus, manifest, Split::Train);
    if train_pairs.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let train_sessions: Vec<_> = train_pairs.iter().map(|(s, _)| *s).collect();
    let stats = fit_feature_stats(&train_sessions)?;

    let train_set = prepare_split(corpus, manifest, Split::Train, &stats, model_cfg, true)?;
    let val_set = prepare_split(corpus, manifest, Split::Val, &stats, model_cfg, true)?;

    let mut model = Model::new(model_cfg.clone(), cfg.seed);
    let mut optimizer =
        AdamW::with_exclusions(&model.store, cfg.weight_decay, &cfg.decay_exclude);

    let n_train = train_set.len();
    let batches_per_epoch = n_train.div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * batches_per_epoch;

    let mut log = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<ParamStore> = None;
    let mut epochs_since_best = 0usize;
    let mut global_step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n_train).collect();
        SeqRng::new(cfg.seed, &format!("shuffle/epoch{epoch}")).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f64>> =
                model.store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            let inv = 1.0 / batch.len() as f64;
            for (pos, &idx) in batch.iter().enumerate() {
                let uid = (epoch as u64 - 1) * n_train as u64
                    + (batch_idx * cfg.batch_size + pos) as u64;
                let input = &train_set[idx];
                let mode = Mode::Train { seed: cfg.seed, uid, p_hist: cfg.p_hist };
                let mut pass = model.forward(input, mode);
                let (label_items, _) = input.label.as_ref().unwrap();
                let loss = attach_loss(&mut pass, label_items, cfg.lambda_sym, cfg.huber_delta);
                epoch_loss += pass.fwd.tape.value(loss)[0] * inv;
                pass.fwd.tape.backward(loss);
                let sample_grads = pass.fwd.binding.collect_grads(&pass.fwd.tape, &model.store);
                for (acc, g) in grads.iter_mut().zip(sample_grads.iter()) {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        *a += b * inv;
                    }
                }
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = lr_at(global_step, total_steps, cfg.warmup_ratio, cfg.lr)?;
            last_lr = lr;
            optimizer.step(&mut model.store, &grads, lr, global_step as u64)?;
            global_step += 1;
        }
        let train_loss = epoch_loss / batches_per_epoch as f64;

        let mut val_loss = 0.0;
        let mut val_mae = 0.0;
        for input in &val_set {
            let (items, total) = model.predict(input);
            let (label_items, _) = input.label.as_ref().unwrap();
            let label_total: f64 = label_items.iter().sum();
            val_loss += loss_value(&items, label_items, cfg.lambda_sym, cfg.huber_delta);
            val_mae += (total - label_total).abs();
        }
        val_loss /= val_set.len() as f64;
        val_mae /= val_set.len() as f64;

        log.push(TrainLogEntry {
            epoch,
            train_loss,
            val_loss,
            val_mae,
            lr: last_lr,
            seconds: start.elapsed().as_secs_f64(),
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = Some(model.store.clone());
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        model.store = best;
    }
    Ok(TrainOutcome { model, stats, log, best_epoch, best_val_loss: best_val })
}
