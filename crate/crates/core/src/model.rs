//! The severity predictor: clinical-feature tokenizer, dialogue tokenizer,
//! pre-norm transformer encoder, symptom-query decoder, and the
//! linear-plus-sigmoid prediction head.
//!
//! One forward pass handles one session (plus its optional previous
//! session) on its own tape. Dropout and the history-dropout coin draw from
//! labeled counter-based streams keyed by `(seed, site, uid)`, so identical
//! inputs and seeds give bitwise-identical outputs and padded positions
//! never influence the random draws of real ones.

use crate::config::{InputSource, MemoryMode, ModelConfig, Readout};
use crate::data::{
    filter_turns, truncate_turns, z_normalize, DataError, FeatureStats, SessionRecord,
};
use crate::memory::{history_gate, MemoryLayout};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;

/// Forward mode: training draws dropout masks and the history coin; eval is
/// deterministic with history always used when present.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train {
        seed: u64,
        /// Unique id of this forward pass (e.g. a global sample counter).
        uid: u64,
        p_hist: f64,
    },
    Eval,
}

/// Attention projections. Keys carry no bias: a shared key offset shifts
/// every score of a query row equally, which softmax cancels, so the
/// parameter would be a permanent no-op.
#[derive(Debug, Clone, Copy)]
pub struct MhaLayout {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl MhaLayout {
    pub fn build(store: &mut ParamStore, init: &Init, prefix: &str, d: usize) -> Self {
        let g = |s: &mut ParamStore, name: String| {
            let t = init.glorot(&name, d, d);
            s.add(name, t)
        };
        let z = |s: &mut ParamStore, name: String| s.add(name, init.zeros_vec(d));
        MhaLayout {
            wq: g(store, format!("{prefix}.wq")),
            bq: z(store, format!("{prefix}.bq")),
            wk: g(store, format!("{prefix}.wk")),
            wv: g(store, format!("{prefix}.wv")),
            bv: z(store, format!("{prefix}.bv")),
            wo: g(store, format!("{prefix}.wo")),
            bo: z(store, format!("{prefix}.bo")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LnLayout {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnLayout {
    fn build(store: &mut ParamStore, init: &Init, prefix: &str, d: usize) -> Self {
        LnLayout {
            gamma: store.add(format!("{prefix}.gamma"), init.ones_vec(d)),
            beta: store.add(format!("{prefix}.beta"), init.zeros_vec(d)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfLayout {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfLayout {
    fn build(store: &mut ParamStore, init: &Init, prefix: &str, d: usize, d_ff: usize) -> Self {
        FfLayout {
            w1: store.add(format!("{prefix}.w1"), init.glorot(&format!("{prefix}.w1"), d, d_ff)),
            b1: store.add(format!("{prefix}.b1"), init.zeros_vec(d_ff)),
            w2: store.add(format!("{prefix}.w2"), init.glorot(&format!("{prefix}.w2"), d_ff, d)),
            b2: store.add(format!("{prefix}.b2"), init.zeros_vec(d)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderBlockLayout {
    pub ln1: LnLayout,
    pub attn: MhaLayout,
    pub ln2: LnLayout,
    pub ff: FfLayout,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderBlockLayout {
    pub self_ln: Option<LnLayout>,
    pub self_attn: Option<MhaLayout>,
    pub cross_ln: LnLayout,
    pub cross_attn: MhaLayout,
    pub ff_ln: LnLayout,
    pub ff: FfLayout,
}

#[derive(Debug, Clone, Copy)]
pub struct ClinicalLayout {
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub e_feat: ParamId,
    pub e_group: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct DialogueLayout {
    pub w_proj: ParamId,
    pub b_proj: ParamId,
    pub ln: LnLayout,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub w: ParamId,
    pub b: ParamId,
}

/// The predictor: configuration, parameter store, and layout handles.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub clinical: Option<ClinicalLayout>,
    pub dialogue: Option<DialogueLayout>,
    pub encoder: Vec<EncoderBlockLayout>,
    pub queries: Option<ParamId>,
    pub decoder: Vec<DecoderBlockLayout>,
    pub head: HeadLayout,
    pub memory: Option<MemoryLayout>,
}

pub const LN_EPS: f64 = 1e-5;

impl Model {
    /// Build a model with deterministic, name-keyed initialization.
    pub fn new(config: ModelConfig, init_seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut store = ParamStore::new();
        let init = Init::new(init_seed);
        let d = config.d;

        let clinical = (config.input_source != InputSource::EmbeddingsOnly).then(|| {
            let h = config.score_mlp_hidden;
            ClinicalLayout {
                mlp_w1: store.add("clinical.mlp.w1", init.glorot("clinical.mlp.w1", 1, h)),
                mlp_b1: store.add("clinical.mlp.b1", init.zeros_vec(h)),
                mlp_w2: store.add("clinical.mlp.w2", init.glorot("clinical.mlp.w2", h, d)),
                mlp_b2: store.add("clinical.mlp.b2", init.zeros_vec(d)),
                e_feat: store.add(
                    "clinical.e_feat",
                    init.embedding("clinical.e_feat", config.n_features, d),
                ),
                e_group: store.add("clinical.e_group", init.embedding("clinical.e_group", 3, d)),
            }
        });

        let dialogue = (config.input_source != InputSource::FeaturesOnly).then(|| DialogueLayout {
            w_proj: store.add("dialogue.w_proj", init.glorot("dialogue.w_proj", config.d_e, d)),
            b_proj: store.add("dialogue.b_proj", init.zeros_vec(d)),
            ln: LnLayout::build(&mut store, &init, "dialogue.ln", d),
        });

        let encoder = (0..config.l_enc)
            .map(|i| EncoderBlockLayout {
                ln1: LnLayout::build(&mut store, &init, &format!("enc{i}.ln1"), d),
                attn: MhaLayout::build(&mut store, &init, &format!("enc{i}.attn"), d),
                ln2: LnLayout::build(&mut store, &init, &format!("enc{i}.ln2"), d),
                ff: FfLayout::build(&mut store, &init, &format!("enc{i}.ff"), d, config.d_ff),
            })
            .collect();

        let queries = (config.readout == Readout::SymptomQuery).then(|| {
            store.add("queries", init.embedding("queries", config.n_symptoms, d))
        });

        let decoder = if config.readout == Readout::SymptomQuery {
            (0..config.l_dec)
                .map(|i| DecoderBlockLayout {
                    self_ln: config
                        .decoder_self_attention
                        .then(|| LnLayout::build(&mut store, &init, &format!("dec{i}.self_ln"), d)),
                    self_attn: config.decoder_self_attention.then(|| {
                        MhaLayout::build(&mut store, &init, &format!("dec{i}.self_attn"), d)
                    }),
                    cross_ln: LnLayout::build(&mut store, &init, &format!("dec{i}.cross_ln"), d),
                    cross_attn: MhaLayout::build(
                        &mut store,
                        &init,
                        &format!("dec{i}.cross_attn"),
                        d,
                    ),
                    ff_ln: LnLayout::build(&mut store, &init, &format!("dec{i}.ff_ln"), d),
                    ff: FfLayout::build(&mut store, &init, &format!("dec{i}.ff"), d, config.d_ff),
                })
                .collect()
        } else {
            Vec::new()
        };

        let head = HeadLayout {
            w: store.add("head.w", {
                // Each symptom row is its own d -> 1 readout.
                let mut data = Vec::with_capacity(config.n_symptoms * d);
                for j in 0..config.n_symptoms {
                    data.extend_from_slice(&init.glorot(&format!("head.w{j}"), d, 1).data);
                }
                Tensor::new(vec![config.n_symptoms, d], data)
            }),
            b: store.add("head.b", init.zeros_vec(config.n_symptoms)),
        };

        let memory = (config.memory_mode != MemoryMode::None)
            .then(|| MemoryLayout::build(&mut store, &init, &config));

        Model { config, store, clinical, dialogue, encoder, queries, decoder, head, memory }
    }

    pub fn param_count(&self) -> usize {
        self.store.total_len()
    }
}

/// A session prepared for the model: z-scored features, filtered and
/// truncated turn embeddings, optional previous-session turns, targets.
#[derive(Debug, Clone)]
pub struct PreparedSession {
    pub run_id: String,
    pub session_index: u32,
    pub z: Vec<f64>,
    pub turns: Vec<Vec<f64>>,
    /// Leading rows of `turns` that are real; the rest are padding.
    pub n_real: usize,
    pub prev_turns: Option<Vec<Vec<f64>>>,
    pub prev_n_real: usize,
    pub label: Option<(Vec<f64>, f64)>,
    pub latent: Option<(Vec<f64>, f64)>,
}

impl PreparedSession {
    /// Append padding rows to the current-session turns (test rigs and
    /// padded batching); padded rows are masked out of attention.
    pub fn pad_turns_to(&mut self, len: usize, fill: f64) {
        let d_e = self.turns.first().map_or(0, |t| t.len());
        while self.turns.len() < len {
            self.turns.push(vec![fill; d_e]);
        }
    }
}

/// Filter, truncate, and z-normalize one session (and its optional
/// predecessor) for the model.
pub fn prepare_session(
    current: &SessionRecord,
    prev: Option<&SessionRecord>,
    stats: &FeatureStats,
    config: &ModelConfig,
) -> Result<PreparedSession, DataError> {
    let ctx = format!("session {}#{}", current.client_id, current.session_index);
    if current.features.len() != config.n_features {
        return Err(DataError::Invalid {
            context: ctx.clone(),
            msg: format!(
                "feature count {} does not match model F {}",
                current.features.len(),
                config.n_features
            ),
        });
    }
    let gather = |s: &SessionRecord| -> Result<Vec<Vec<f64>>, DataError> {
        let kept = truncate_turns(filter_turns(s, config.speaker_view)?, config.n_max);
        let mut rows = Vec::with_capacity(kept.len());
        for t in kept {
            if t.embedding.len() != config.d_e {
                return Err(DataError::Invalid {
                    context: format!("session {}#{}", s.client_id, s.session_index),
                    msg: format!(
                        "turn embedding dim {} does not match model d_e {}",
                        t.embedding.len(),
                        config.d_e
                    ),
                });
            }
            rows.push(t.embedding.clone());
        }
        Ok(rows)
    };
    let turns = gather(current)?;
    let prev_turns = match prev {
        Some(p) => Some(gather(p)?),
        None => None,
    };
    let n_real = turns.len();
    let prev_n_real = prev_turns.as_ref().map_or(0, |t| t.len());
    Ok(PreparedSession {
        run_id: current.client_id.clone(),
        session_index: current.session_index,
        z: z_normalize(&current.features, stats),
        turns,
        n_real,
        prev_turns,
        prev_n_real,
        label: current.labels.as_ref().map(|l| (l.items.clone(), l.total)),
        latent: current
            .latent_items
            .as_ref()
            .map(|items| (items.clone(), items.iter().sum())),
    })
}

/// Per-forward state: the tape plus lazy parameter bindings.
pub struct Fwd<'m> {
    pub tape: Tape,
    pub binding: Binding,
    model: &'m Model,
    mode: Mode,
}

impl<'m> Fwd<'m> {
    pub fn new(model: &'m Model, mode: Mode) -> Self {
        Fwd { tape: Tape::new(), binding: Binding::new(&model.store), model, mode }
    }

    pub fn p(&mut self, id: ParamId) -> BufId {
        self.binding.bind(&mut self.tape, &self.model.store, id)
    }

    fn dropout_rate(&self) -> f64 {
        match self.mode {
            Mode::Train { .. } => self.model.config.dropout,
            Mode::Eval => 0.0,
        }
    }

    /// Inverted-dropout factors for `len` elements of the labeled site, or
    /// `None` when dropout is inactive.
    fn drop_factors(&self, site: &str, len: usize) -> Option<Vec<f64>> {
        let rate = self.dropout_rate();
        if rate == 0.0 {
            return None;
        }
        let Mode::Train { seed, uid, .. } = self.mode else { return None };
        let stream = StreamRng::new(seed, site);
        let keep = 1.0 - rate;
        Some(
            (0..len)
                .map(|k| if stream.uniform(uid, k as u64) < rate { 0.0 } else { 1.0 / keep })
                .collect(),
        )
    }

    pub fn dropout(&mut self, x: BufId, site: &str) -> BufId {
        match self.drop_factors(site, self.tape.value(x).len()) {
            Some(f) => self.tape.mul_const(x, f),
            None => x,
        }
    }

    /// Multi-head attention with projections and output map; probability
    /// dropout keyed by `site`.
    pub fn mha(
        &mut self,
        layout: &MhaLayout,
        x_q: BufId,
        x_kv: BufId,
        key_valid: &[bool],
        site: &str,
    ) -> BufId {
        let heads = self.model.config.heads;
        let (wq, bq) = (self.p(layout.wq), self.p(layout.bq));
        let wk = self.p(layout.wk);
        let (wv, bv) = (self.p(layout.wv), self.p(layout.bv));
        let (wo, bo) = (self.p(layout.wo), self.p(layout.bo));
        let q = self.tape.matmul(x_q, wq);
        let q = self.tape.add_row(q, bq);
        let k = self.tape.matmul(x_kv, wk);
        let v = self.tape.matmul(x_kv, wv);
        let v = self.tape.add_row(v, bv);
        let nq = self.tape.shape(q)[0];
        let drop = self.drop_factors(site, heads * nq * key_valid.len());
        let ctx = self.tape.attention(q, k, v, heads, key_valid, drop);
        let out = self.tape.matmul(ctx, wo);
        self.tape.add_row(out, bo)
    }

    pub fn layer_norm(&mut self, x: BufId, ln: &LnLayout) -> BufId {
        let g = self.p(ln.gamma);
        let b = self.p(ln.beta);
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn feed_forward(&mut self, x: BufId, ff: &FfLayout, site: &str) -> BufId {
        let w1 = self.p(ff.w1);
        let b1 = self.p(ff.b1);
        let w2 = self.p(ff.w2);
        let b2 = self.p(ff.b2);
        let h = self.tape.matmul(x, w1);
        let h = self.tape.add_row(h, b1);
        let h = self.tape.gelu(h);
        let out = self.tape.matmul(h, w2);
        let out = self.tape.add_row(out, b2);
        self.dropout(out, site)
    }
}

/// Sinusoidal positional encoding rows for `n` positions.
pub fn positional_encoding(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Result of one forward pass: the tape (for backward), bindings, and the
/// prediction buffers.
pub struct ForwardPass<'m> {
    pub fwd: Fwd<'m>,
    pub items: BufId,
    pub total: BufId,
    pub used_history: bool,
}

impl<'m> ForwardPass<'m> {
    pub fn item_values(&self) -> Vec<f64> {
        self.fwd.tape.value(self.items).to_vec()
    }

    pub fn total_value(&self) -> f64 {
        self.fwd.tape.value(self.total)[0]
    }
}

impl Model {
    /// Clinical-feature tokens: score MLP + feature identity + group
    /// embedding, one row per feature.
    pub fn clinical_tokens(&self, fwd: &mut Fwd, z: &[f64]) -> BufId {
        let layout = self.clinical.as_ref().expect("clinical branch disabled");
        assert_eq!(z.len(), self.config.n_features, "feature vector length mismatch");
        let f = self.config.n_features;
        let z_col = fwd.tape.leaf_from(z.to_vec(), vec![f, 1]);
        let w1 = fwd.p(layout.mlp_w1);
        let b1 = fwd.p(layout.mlp_b1);
        let w2 = fwd.p(layout.mlp_w2);
        let b2 = fwd.p(layout.mlp_b2);
        let h = fwd.tape.matmul(z_col, w1);
        let h = fwd.tape.add_row(h, b1);
        let h = fwd.tape.gelu(h);
        let scored = fwd.tape.matmul(h, w2);
        let scored = fwd.tape.add_row(scored, b2);
        let e_feat = fwd.p(layout.e_feat);
        let sum = fwd.tape.add(scored, e_feat);
        // Group-embedding lookup as a 0/1 selection matrix times the table.
        let mut sel = vec![0.0; f * 3];
        for (i, &g) in self.config.group_map.iter().enumerate() {
            sel[i * 3 + (g as usize - 1)] = 1.0;
        }
        let sel = fwd.tape.leaf_from(sel, vec![f, 3]);
        let e_group = fwd.p(layout.e_group);
        let grouped = fwd.tape.matmul(sel, e_group);
        fwd.tape.add(sum, grouped)
    }

    /// Dialogue tokens: projection, layer norm, positional encoding.
    pub fn dialogue_tokens(&self, fwd: &mut Fwd, turns: &[Vec<f64>]) -> BufId {
        let layout = self.dialogue.as_ref().expect("dialogue branch disabled");
        let n = turns.len();
        assert!(n >= 1, "dialogue branch requires at least one turn");
        let d_e = self.config.d_e;
        let mut flat = Vec::with_capacity(n * d_e);
        for t in turns {
            assert_eq!(t.len(), d_e, "turn embedding width mismatch");
            flat.extend_from_slice(t);
        }
        let u = fwd.tape.leaf_from(flat, vec![n, d_e]);
        let w = fwd.p(layout.w_proj);
        let b = fwd.p(layout.b_proj);
        let proj = fwd.tape.matmul(u, w);
        let proj = fwd.tape.add_row(proj, b);
        let normed = fwd.layer_norm(proj, &layout.ln);
        let pe = positional_encoding(n, self.config.d);
        fwd.tape.add_const(normed, &pe)
    }

    /// Pre-norm encoder stack over the concatenated token sequence.
    pub fn encode(&self, fwd: &mut Fwd, x: BufId, valid: &[bool]) -> BufId {
        let mut x = x;
        for (i, block) in self.encoder.iter().enumerate() {
            let h = fwd.layer_norm(x, &block.ln1);
            let attn = fwd.mha(&block.attn, h, h, valid, &format!("drop/enc{i}/probs"));
            x = fwd.tape.add(x, attn);
            let h2 = fwd.layer_norm(x, &block.ln2);
            let ff = fwd.feed_forward(h2, &block.ff, &format!("drop/enc{i}/ff"));
            x = fwd.tape.add(x, ff);
        }
        x
    }

    /// Symptom readout: query decoder or mean-pooled head.
    pub fn decode(&self, fwd: &mut Fwd, enc: BufId, valid: &[bool]) -> BufId {
        match self.config.readout {
            Readout::MeanPooled => {
                let pooled = fwd.tape.mean_rows_masked(enc, valid.to_vec());
                fwd.tape.repeat_row(pooled, self.config.n_symptoms)
            }
            Readout::SymptomQuery => {
                let mut d = fwd.p(self.queries.expect("symptom queries"));
                let j = self.config.n_symptoms;
                for (i, block) in self.decoder.iter().enumerate() {
                    if let (Some(ln), Some(attn)) = (&block.self_ln, &block.self_attn) {
                        let h = fwd.layer_norm(d, ln);
                        let sa =
                            fwd.mha(attn, h, h, &vec![true; j], &format!("drop/dec{i}/self"));
                        d = fwd.tape.add(d, sa);
                    }
                    let h = fwd.layer_norm(d, &block.cross_ln);
                    let ca =
                        fwd.mha(&block.cross_attn, h, enc, valid, &format!("drop/dec{i}/cross"));
                    d = fwd.tape.add(d, ca);
                    let h2 = fwd.layer_norm(d, &block.ff_ln);
                    let ff = fwd.feed_forward(h2, &block.ff, &format!("drop/dec{i}/ff"));
                    d = fwd.tape.add(d, ff);
                }
                d
            }
        }
    }

    /// Per-symptom severities `3·σ(w_j·d_j + b_j)` and their sum.
    pub fn predict_items(&self, fwd: &mut Fwd, d: BufId) -> (BufId, BufId) {
        let w = fwd.p(self.head.w);
        let b = fwd.p(self.head.b);
        let prod = fwd.tape.mul(d, w);
        let logits = fwd.tape.sum_rows(prod);
        let logits = fwd.tape.add(logits, b);
        let s = fwd.tape.sigmoid(logits);
        let items = fwd.tape.scale(s, 3.0);
        let total = fwd.tape.sum_all(items);
        (items, total)
    }

    /// Full forward pass for one prepared session.
    pub fn forward(&self, input: &PreparedSession, mode: Mode) -> ForwardPass<'_> {
        let mut fwd = Fwd::new(self, mode);

        let mut parts: Vec<(BufId, Vec<bool>)> = Vec::new();
        if self.clinical.is_some() {
            let tokens = self.clinical_tokens(&mut fwd, &input.z);
            parts.push((tokens, vec![true; self.config.n_features]));
        }
        if self.dialogue.is_some() {
            let tokens = self.dialogue_tokens(&mut fwd, &input.turns);
            let mut valid = vec![true; input.turns.len()];
            for v in valid.iter_mut().skip(input.n_real) {
                *v = false;
            }
            parts.push((tokens, valid));
        }
        assert!(!parts.is_empty(), "model has no input branch");
        let (mut x, mut valid) = parts.remove(0);
        for (tokens, v) in parts {
            x = fwd.tape.concat_rows(x, tokens);
            valid.extend(v);
        }
        x = fwd.dropout(x, "drop/tokens");

        let enc = self.encode(&mut fwd, x, &valid);
        let mut d = self.decode(&mut fwd, enc, &valid);

        let mut used_history = false;
        if let (Some(mem), Some(prev)) = (&self.memory, &input.prev_turns) {
            let use_hist = match mode {
                Mode::Eval => true,
                Mode::Train { seed, uid, p_hist } => {
                    history_gate(true, p_hist, true, seed, uid)
                }
            };
            if use_hist {
                let mut prev_valid = vec![true; prev.len()];
                for v in prev_valid.iter_mut().skip(input.prev_n_real) {
                    *v = false;
                }
                d = mem.refine(self, &mut fwd, d, prev, &prev_valid);
                used_history = true;
            }
        }

        let (items, total) = self.predict_items(&mut fwd, d);
        ForwardPass { fwd, items, total, used_history }
    }

    /// Eval-mode prediction: per-item severities and the total.
    pub fn predict(&self, input: &PreparedSession) -> (Vec<f64>, f64) {
        let pass = self.forward(input, Mode::Eval);
        (pass.item_values(), pass.total_value())
    }
}
