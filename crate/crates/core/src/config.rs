//! Model, training, and generator configuration, plus the flat key-value
//! config file format used by the CLI.
//!
//! File grammar: one `key = value` pair per line, `#` starts a comment,
//! blank lines ignored. Keys are dot-namespaced (`model.d`, `train.lr`,
//! `gen.n_clients`). Unknown keys in a consumed namespace are errors.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::SpeakerView;
use crate::rng::hash_fields;

#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.msg)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError { key: key.to_string(), msg: msg.into() }
}

/// Which token sources feed the current-session encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSource {
    Both,
    FeaturesOnly,
    EmbeddingsOnly,
}

impl std::str::FromStr for InputSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(InputSource::Both),
            "features-only" => Ok(InputSource::FeaturesOnly),
            "embeddings-only" => Ok(InputSource::EmbeddingsOnly),
            other => Err(format!("unknown input source `{other}`")),
        }
    }
}

/// Previous-session memory mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryMode {
    None,
    Summary,
    SummaryRetrieval,
}

impl std::str::FromStr for MemoryMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(MemoryMode::None),
            "summary" => Ok(MemoryMode::Summary),
            "summary+retrieval" | "summary-retrieval" => Ok(MemoryMode::SummaryRetrieval),
            other => Err(format!("unknown memory mode `{other}`")),
        }
    }
}

/// Symptom readout head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    SymptomQuery,
    MeanPooled,
}

impl std::str::FromStr for Readout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "symptom-query" => Ok(Readout::SymptomQuery),
            "mean-pooled" => Ok(Readout::MeanPooled),
            other => Err(format!("unknown readout `{other}`")),
        }
    }
}

/// Architecture hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub l_enc: usize,
    pub l_dec: usize,
    pub n_features: usize,
    pub n_symptoms: usize,
    pub memory_slots: usize,
    pub n_max: usize,
    pub d_e: usize,
    pub score_mlp_hidden: usize,
    pub dropout: f64,
    /// Feature index -> clinical group in {1, 2, 3}.
    pub group_map: Vec<u8>,
    pub input_source: InputSource,
    pub speaker_view: SpeakerView,
    pub memory_mode: MemoryMode,
    pub readout: Readout,
    pub decoder_self_attention: bool,
}

/// Group sizes 8/5/10 at the default 23 features; proportional otherwise.
pub fn default_group_map(n_features: usize) -> Vec<u8> {
    if n_features == 23 {
        let mut g = vec![1u8; 8];
        g.extend(vec![2u8; 5]);
        g.extend(vec![3u8; 10]);
        return g;
    }
    let g1 = ((n_features as f64 * 8.0 / 23.0).round() as usize).max(1).min(n_features);
    let g2 = ((n_features as f64 * 5.0 / 23.0).round() as usize).max(1).min(n_features - g1);
    let mut g = vec![1u8; g1];
    g.extend(vec![2u8; g2]);
    g.extend(vec![3u8; n_features - g1 - g2]);
    g
}

impl ModelConfig {
    /// Table-default architecture for a corpus with the given input width.
    pub fn defaults(d_e: usize) -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            d_ff: 256,
            l_enc: 2,
            l_dec: 4,
            n_features: 23,
            n_symptoms: 8,
            memory_slots: 16,
            n_max: 80,
            d_e,
            score_mlp_hidden: 32,
            dropout: 0.1,
            group_map: default_group_map(23),
            input_source: InputSource::Both,
            speaker_view: SpeakerView::Client,
            memory_mode: MemoryMode::SummaryRetrieval,
            readout: Readout::SymptomQuery,
            decoder_self_attention: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.heads == 0 {
            return Err(cfg_err("model.d", "model dim and heads must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(cfg_err(
                "model.heads",
                format!("model dim {} not divisible by heads {}", self.d, self.heads),
            ));
        }
        if self.n_symptoms != 8 {
            return Err(cfg_err("model.j", "the predictor is defined for 8 symptoms"));
        }
        if self.n_max < 1 {
            return Err(cfg_err("model.n_max", "must be at least 1"));
        }
        if self.d_e == 0 {
            return Err(cfg_err("model.d_e", "input embedding dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(cfg_err("model.dropout", "must lie in [0, 1)"));
        }
        if self.group_map.len() != self.n_features {
            return Err(cfg_err(
                "model.group_map",
                format!("length {} != F {}", self.group_map.len(), self.n_features),
            ));
        }
        if self.group_map.iter().any(|&g| !(1..=3).contains(&g)) {
            return Err(cfg_err("model.group_map", "groups must be 1, 2, or 3"));
        }
        if self.n_features == 23 {
            let counts = [1u8, 2, 3]
                .map(|g| self.group_map.iter().filter(|&&x| x == g).count());
            if counts != [8, 5, 10] {
                return Err(cfg_err(
                    "model.group_map",
                    format!("expected 8/5/10 features per group at F=23, got {counts:?}"),
                ));
            }
        }
        if self.memory_mode != MemoryMode::None && self.memory_slots == 0 {
            return Err(cfg_err("model.memory_slots", "must be positive when memory is on"));
        }
        Ok(())
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub lambda_sym: f64,
    pub p_hist: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub huber_delta: f64,
    /// Parameter-name prefixes excluded from weight decay.
    pub decay_exclude: Vec<String>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            batch_size: 32,
            warmup_ratio: 0.05,
            lambda_sym: 0.5,
            p_hist: 0.1,
            max_epochs: 100,
            patience: 8,
            clip_norm: 1.0,
            huber_delta: 1.0,
            decay_exclude: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lr <= 0.0 {
            return Err(cfg_err("train.lr", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(cfg_err("train.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("train.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(cfg_err("train.warmup_ratio", "must lie in [0, 1]"));
        }
        if self.lambda_sym < 0.0 {
            return Err(cfg_err("train.lambda_sym", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_hist) {
            return Err(cfg_err("train.p_hist", "must lie in [0, 1]"));
        }
        if self.max_epochs == 0 {
            return Err(cfg_err("train.max_epochs", "must be positive"));
        }
        if self.clip_norm <= 0.0 {
            return Err(cfg_err("train.clip_norm", "must be positive"));
        }
        if self.huber_delta <= 0.0 {
            return Err(cfg_err("train.huber_delta", "must be positive"));
        }
        Ok(())
    }
}

/// Fixture generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_clients: usize,
    /// Client turns per session (counselor turns are interleaved 1:1).
    pub turns_per_session: usize,
    pub d_e: usize,
    pub n_features: usize,
    /// Fraction of the 8 symptoms expressed only in the previous session.
    pub hist_fraction: f64,
    pub sigma_embed: f64,
    pub sigma_feature: f64,
    pub p_flip: f64,
    pub report_passes: usize,
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_clients: 200,
            turns_per_session: 10,
            d_e: 32,
            n_features: 23,
            hist_fraction: 0.0,
            sigma_embed: 2.0,
            sigma_feature: 1.5,
            p_flip: 0.1,
            report_passes: 5,
            split_ratios: [0.7, 0.1, 0.2],
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_clients == 0 {
            return Err(cfg_err("gen.n_clients", "must be positive"));
        }
        if self.turns_per_session == 0 {
            return Err(cfg_err("gen.turns_per_session", "must be positive"));
        }
        if self.d_e < crate::data::PHQ_ITEMS {
            return Err(cfg_err("gen.d_e", "must be at least 8 to carry the symptom basis"));
        }
        if !(0.0..=1.0).contains(&self.hist_fraction) {
            return Err(cfg_err("gen.hist_fraction", "must lie in [0, 1]"));
        }
        if self.sigma_embed < 0.0 || self.sigma_feature < 0.0 {
            return Err(cfg_err("gen.sigma_embed", "noise scales must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_flip) {
            return Err(cfg_err("gen.p_flip", "must lie in [0, 1]"));
        }
        if self.report_passes == 0 {
            return Err(cfg_err("gen.report_passes", "must be at least 1"));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(cfg_err("gen.split_ratios", format!("must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Symptom indices expressed only in the previous session.
    pub fn hist_mask(&self) -> [bool; 8] {
        let k = (8.0 * self.hist_fraction).round() as usize;
        let mut mask = [false; 8];
        for m in mask.iter_mut().take(k) {
            *m = true;
        }
        mask
    }
}

// ---- flat key-value files ----

/// Parsed key-value config file with consumption tracking.
pub struct KvFile {
    pairs: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvFile {
    pub fn empty() -> Self {
        KvFile { pairs: BTreeMap::new(), consumed: Default::default() }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(cfg_err(
                    &format!("line {}", i + 1),
                    format!("expected `key = value`, got `{raw}`"),
                ));
            };
            let key = k.trim().to_string();
            if pairs.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(cfg_err(&key, "duplicate key"));
            }
        }
        Ok(KvFile { pairs, consumed: Default::default() })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.pairs.insert(key.to_string(), value.to_string());
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.pairs.get(key)?;
        self.consumed.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| cfg_err(key, format!("not a number: `{v}`"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| cfg_err(key, format!("not an integer: `{v}`"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| cfg_err(key, format!("not an integer: `{v}`"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(cfg_err(key, format!("expected true/false, got `{v}`"))),
        }
    }

    pub fn get_parsed<T: std::str::FromStr<Err = String>>(
        &self,
        key: &str,
        default: T,
    ) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: String| cfg_err(key, e)),
        }
    }

    pub fn get_ratios(&self, key: &str, default: [f64; 3]) -> Result<[f64; 3], ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(cfg_err(key, format!("expected three ratios, got `{v}`")));
                }
                let mut out = [0.0; 3];
                for (o, p) in out.iter_mut().zip(parts.iter()) {
                    *o = p.parse().map_err(|_| cfg_err(key, format!("not a number: `{p}`")))?;
                }
                Ok(out)
            }
        }
    }

    /// Error if any key in `namespace.` was present but never consumed.
    pub fn reject_unknown(&self, namespace: &str) -> Result<(), ConfigError> {
        let prefix = format!("{namespace}.");
        let consumed = self.consumed.borrow();
        for key in self.pairs.keys() {
            if key.starts_with(&prefix) && !consumed.contains(key) {
                return Err(cfg_err(key, "unrecognized key"));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

pub fn model_config_from_kv(kv: &KvFile, d_e: usize) -> Result<ModelConfig, ConfigError> {
    let base = ModelConfig::defaults(d_e);
    let n_features = kv.get_usize("model.f", base.n_features)?;
    let cfg = ModelConfig {
        d: kv.get_usize("model.d", base.d)?,
        heads: kv.get_usize("model.heads", base.heads)?,
        d_ff: kv.get_usize("model.d_ff", base.d_ff)?,
        l_enc: kv.get_usize("model.l_enc", base.l_enc)?,
        l_dec: kv.get_usize("model.l_dec", base.l_dec)?,
        n_features,
        n_symptoms: 8,
        memory_slots: kv.get_usize("model.memory_slots", base.memory_slots)?,
        n_max: kv.get_usize("model.n_max", base.n_max)?,
        d_e: kv.get_usize("model.d_e", d_e)?,
        score_mlp_hidden: kv.get_usize("model.score_mlp_hidden", base.score_mlp_hidden)?,
        dropout: kv.get_f64("model.dropout", base.dropout)?,
        group_map: default_group_map(n_features),
        input_source: kv.get_parsed("model.input_source", base.input_source)?,
        speaker_view: {
            let s = kv.get_str("model.speaker_view", "client");
            s.parse().map_err(|e: String| cfg_err("model.speaker_view", e))?
        },
        memory_mode: kv.get_parsed("model.memory_mode", base.memory_mode)?,
        readout: kv.get_parsed("model.readout", base.readout)?,
        decoder_self_attention: kv.get_bool("model.decoder_self_attention", true)?,
    };
    kv.reject_unknown("model")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config_from_kv(kv: &KvFile) -> Result<TrainConfig, ConfigError> {
    let base = TrainConfig::default();
    let cfg = TrainConfig {
        lr: kv.get_f64("train.lr", base.lr)?,
        weight_decay: kv.get_f64("train.weight_decay", base.weight_decay)?,
        batch_size: kv.get_usize("train.batch_size", base.batch_size)?,
        warmup_ratio: kv.get_f64("train.warmup_ratio", base.warmup_ratio)?,
        lambda_sym: kv.get_f64("train.lambda_sym", base.lambda_sym)?,
        p_hist: kv.get_f64("train.p_hist", base.p_hist)?,
        max_epochs: kv.get_usize("train.max_epochs", base.max_epochs)?,
        patience: kv.get_usize("train.patience", base.patience)?,
        clip_norm: kv.get_f64("train.clip_norm", base.clip_norm)?,
        huber_delta: kv.get_f64("train.huber_delta", base.huber_delta)?,
        decay_exclude: {
            let raw = kv.get_str("train.decay_exclude", "");
            raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
        },
        seed: kv.get_u64("train.seed", base.seed)?,
    };
    kv.reject_unknown("train")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn generator_config_from_kv(kv: &KvFile) -> Result<GeneratorConfig, ConfigError> {
    let base = GeneratorConfig::default();
    let cfg = GeneratorConfig {
        n_clients: kv.get_usize("gen.n_clients", base.n_clients)?,
        turns_per_session: kv.get_usize("gen.turns_per_session", base.turns_per_session)?,
        d_e: kv.get_usize("gen.d_e", base.d_e)?,
        n_features: kv.get_usize("gen.f", base.n_features)?,
        hist_fraction: kv.get_f64("gen.hist_fraction", base.hist_fraction)?,
        sigma_embed: kv.get_f64("gen.sigma_embed", base.sigma_embed)?,
        sigma_feature: kv.get_f64("gen.sigma_feature", base.sigma_feature)?,
        p_flip: kv.get_f64("gen.p_flip", base.p_flip)?,
        report_passes: kv.get_usize("gen.report_passes", base.report_passes)?,
        split_ratios: kv.get_ratios("gen.split_ratios", base.split_ratios)?,
        seed: kv.get_u64("gen.seed", base.seed)?,
    };
    kv.reject_unknown("gen")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Stable fingerprint of a canonical config snapshot.
pub fn config_fingerprint(canonical: &str) -> String {
    let h = hash_fields(&[crate::rng::fnv1a(canonical.as_bytes())]);
    format!("{h:016x}")
}
