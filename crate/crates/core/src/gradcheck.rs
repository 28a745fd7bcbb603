//! Finite-difference verification of the reverse-mode gradients on a full
//! model loss.
//!
//! The oracle perturbs each parameter element by ±step and compares the
//! central difference of forward-only loss evaluations against the tape's
//! analytic gradient. Relative error uses `max(|analytic|, |fd|, 1e-8)` as
//! the denominator.

use crate::model::{Mode, Model, PreparedSession};
use crate::train::attach_loss;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub n_failed: usize,
    pub tolerance: f64,
    pub worst: GradCheckEntry,
    /// Backward corruption installed for negative-control runs, if any.
    pub corrupted_op: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.n_failed == 0
    }
}

pub struct GradCheckSettings {
    pub step: f64,
    pub tolerance: f64,
    pub lambda_sym: f64,
    pub huber_delta: f64,
    pub mode: Mode,
    /// Corrupt the named op's backward rule (negative control).
    pub corrupt_op: Option<String>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-5,
            tolerance: 1e-4,
            lambda_sym: 0.5,
            huber_delta: 1.0,
            mode: Mode::Eval,
            corrupt_op: None,
        }
    }
}

/// Check every parameter of `model` on the mean objective over `inputs`.
pub fn check_model(
    model: &mut Model,
    inputs: &[PreparedSession],
    settings: &GradCheckSettings,
) -> GradCheckReport {
    assert!(!inputs.is_empty());
    let labels: Vec<Vec<f64>> = inputs
        .iter()
        .map(|i| i.label.clone().expect("gradcheck input needs labels").0)
        .collect();
    let inv = 1.0 / inputs.len() as f64;

    // Analytic gradients accumulated over the batch.
    let mut analytic: Vec<Vec<f64>> =
        model.store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for (input, label_items) in inputs.iter().zip(labels.iter()) {
        let mut pass = model.forward(input, settings.mode);
        let loss = attach_loss(&mut pass, label_items, settings.lambda_sym, settings.huber_delta);
        if let Some(op) = &settings.corrupt_op {
            pass.fwd.tape.corrupt_backward_of(op);
        }
        pass.fwd.tape.backward(loss);
        let grads = pass.fwd.binding.collect_grads(&pass.fwd.tape, &model.store);
        for (acc, g) in analytic.iter_mut().zip(grads.iter()) {
            for (a, b) in acc.iter_mut().zip(g.iter()) {
                *a += b * inv;
            }
        }
    }

    let loss_only = |model: &Model| -> f64 {
        let mut sum = 0.0;
        for (input, label_items) in inputs.iter().zip(labels.iter()) {
            let mut pass = model.forward(input, settings.mode);
            let loss =
                attach_loss(&mut pass, label_items, settings.lambda_sym, settings.huber_delta);
            sum += pass.fwd.tape.value(loss)[0] * inv;
        }
        sum
    };

    let mut n_params = 0usize;
    let mut n_failed = 0usize;
    let mut worst = GradCheckEntry {
        param: String::new(),
        index: 0,
        analytic: 0.0,
        fd: 0.0,
        rel_err: 0.0,
    };
    let h = settings.step;
    for pi in 0..model.store.len() {
        let numel = model.store.tensors()[pi].numel();
        for k in 0..numel {
            let orig = model.store.tensors()[pi].data[k];
            model.store.tensors_mut()[pi].data[k] = orig + h;
            let up = loss_only(model);
            model.store.tensors_mut()[pi].data[k] = orig - h;
            let down = loss_only(model);
            model.store.tensors_mut()[pi].data[k] = orig;

            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi][k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            n_params += 1;
            if rel > settings.tolerance {
                n_failed += 1;
            }
            if rel > worst.rel_err {
                let name = model.store.iter().nth(pi).map(|(n, _)| n.to_string()).unwrap();
                worst = GradCheckEntry { param: name, index: k, analytic: a, fd, rel_err: rel };
            }
        }
    }
    GradCheckReport {
        n_params,
        n_failed,
        tolerance: settings.tolerance,
        worst,
        corrupted_op: settings.corrupt_op.clone(),
    }
}

/// The standard tiny configuration for gradient checking: d=8, h=2, F=4,
/// N=6, J=8, S=4, one encoder and one decoder layer, memory on.
pub fn tiny_check_config(d_e: usize) -> crate::config::ModelConfig {
    let mut cfg = crate::config::ModelConfig::defaults(d_e);
    cfg.d = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.l_enc = 1;
    cfg.l_dec = 1;
    cfg.n_features = 4;
    cfg.group_map = crate::config::default_group_map(4);
    cfg.memory_slots = 4;
    cfg.n_max = 6;
    cfg.score_mlp_hidden = 4;
    cfg
}

/// A deterministic random session (with history) for the tiny config.
pub fn tiny_check_input(cfg: &crate::config::ModelConfig, seed: u64) -> PreparedSession {
    let r = crate::rng::StreamRng::new(seed, "gradcheck_input");
    let turn = |s: u64| -> Vec<f64> {
        (0..cfg.d_e).map(|i| r.normal(s, i as u64)).collect()
    };
    let turns: Vec<Vec<f64>> = (0..6).map(|t| turn(t as u64)).collect();
    let prev: Vec<Vec<f64>> = (0..5).map(|t| turn(50 + t as u64)).collect();
    let items: Vec<f64> = (0..8).map(|k| (3.0 * r.uniform(99, k)).floor().min(3.0)).collect();
    let total = items.iter().sum();
    PreparedSession {
        run_id: "gradcheck".into(),
        session_index: 2,
        z: (0..cfg.n_features).map(|i| r.normal(98, i as u64)).collect(),
        n_real: turns.len(),
        turns,
        prev_n_real: prev.len(),
        prev_turns: Some(prev),
        label: Some((items, total)),
        latent: None,
    }
}

/// Move parameters off the symmetric init point. Freshly initialized slot
/// and symptom queries are nearly identical, which makes attention over
/// them almost query-independent and the corresponding q/k gradients
/// vanish below the finite-difference noise floor; a generic point keeps
/// every parameter's gradient resolvable. Query-style embeddings get a
/// larger kick so the attention keys they produce genuinely differ.
pub fn jitter_params(model: &mut Model, seed: u64, scale: f64) {
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    for (pi, name) in names.iter().enumerate() {
        let r = crate::rng::StreamRng::new(seed, &format!("jitter/{name}"));
        let s = if name == "queries" || name == "memory.slots" { 6.0 * scale } else { scale };
        for (k, v) in model.store.tensors_mut()[pi].data.iter_mut().enumerate() {
            *v += s * r.normal(0, k as u64);
        }
    }
}

/// Replace each input's labels with values adjacent to the model's own
/// predictions (alternating ±0.1 residuals). The check loss then stays
/// small, which keeps the finite-difference cancellation noise orders of
/// magnitude below the 1e-4 tolerance even for parameters whose true
/// gradient is tiny. The linear Huber branch has its own exact gradient
/// tests at the tape level.
pub fn prediction_adjacent_labels(model: &Model, inputs: &mut [PreparedSession]) {
    for input in inputs.iter_mut() {
        let (pred, _) = model.predict(input);
        let items: Vec<f64> = pred
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                (p + sign * 0.05).clamp(0.0, 3.0)
            })
            .collect();
        let total = items.iter().sum();
        input.label = Some((items, total));
    }
}

/// The standard full-model check: tiny config, memory on, two sessions,
/// parameters jittered to a generic point, labels prediction-adjacent.
pub fn run_standard_check(
    d_e: usize,
    seed: u64,
    mode: Mode,
    corrupt_op: Option<String>,
) -> GradCheckReport {
    let cfg = tiny_check_config(d_e);
    let mut model = Model::new(cfg.clone(), seed);
    jitter_params(&mut model, seed ^ 0x9e3779b9, 0.1);
    let mut inputs: Vec<PreparedSession> =
        (0..2).map(|i| tiny_check_input(&cfg, seed.wrapping_add(i))).collect();
    prediction_adjacent_labels(&model, &mut inputs);
    let settings = GradCheckSettings { mode, corrupt_op, ..Default::default() };
    check_model(&mut model, &inputs, &settings)
}
