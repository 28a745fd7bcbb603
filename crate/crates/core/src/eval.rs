//! Metrics, multi-seed aggregation, and the ablation harness.
//!
//! Synthetic corpora are evaluated against the latent symptom state when
//! every session carries one (the labels models train on are noisy
//! self-reports); otherwise evaluation falls back to the labels.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{
    sessions_with_history, Corpus, DataError, FeatureStats, Split, SplitManifest, PHQ_ITEMS,
};
use crate::model::{prepare_session, Model};
use crate::train::{train, TrainError};

#[derive(Debug)]
pub enum EvalError {
    LengthMismatch { predictions: usize, targets: usize },
    Empty(String),
    TooFewSeeds(usize),
    UnknownAxis(String),
    BadGridPoint { axis: String, point: String, msg: String },
    NoTargets,
    Train(TrainError),
    Data(DataError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::LengthMismatch { predictions, targets } => {
                write!(f, "{predictions} predictions vs {targets} targets")
            }
            EvalError::Empty(what) => write!(f, "{what} is empty"),
            EvalError::TooFewSeeds(n) => {
                write!(f, "aggregation needs at least 2 per-seed values, got {n}")
            }
            EvalError::UnknownAxis(a) => write!(f, "unknown ablation axis `{a}`"),
            EvalError::BadGridPoint { axis, point, msg } => {
                write!(f, "axis {axis}, grid point `{point}`: {msg}")
            }
            EvalError::NoTargets => {
                write!(f, "evaluation split has neither latent items nor labels throughout")
            }
            EvalError::Train(e) => write!(f, "{e}"),
            EvalError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(e)
    }
}

impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        EvalError::Data(e)
    }
}

/// Mean absolute error.
pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    if predictions.len() != targets.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty("prediction list".into()));
    }
    Ok(predictions
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / predictions.len() as f64)
}

/// MAE grouped by session index; empty groups are simply absent.
pub fn per_session_mae(results: &[(u32, f64, f64)]) -> BTreeMap<u32, f64> {
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for &(index, pred, target) in results {
        let e = sums.entry(index).or_insert((0.0, 0));
        e.0 += (pred - target).abs();
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Mean and sample (n−1) standard deviation across per-seed values.
pub fn aggregate_seeds(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewSeeds(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Latent,
    Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub run_id: String,
    pub session_index: u32,
    pub predicted_total: f64,
    pub target_total: f64,
    pub predicted_items: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_items: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub n_sessions: usize,
    pub overall_mae: f64,
    pub per_session_mae: BTreeMap<u32, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_symptom_mae: Option<Vec<f64>>,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: TargetKind,
    pub config_fingerprint: String,
    pub mean_mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_mae: Option<f64>,
    pub seeds: Vec<SeedEval>,
}

impl EvalReport {
    /// Assemble from per-seed results; std is absent with a single seed.
    pub fn from_seeds(
        target: TargetKind,
        config_fingerprint: String,
        mut seeds: Vec<SeedEval>,
    ) -> Result<Self, EvalError> {
        if seeds.is_empty() {
            return Err(EvalError::Empty("seed evaluations".into()));
        }
        seeds.sort_by_key(|s| s.seed);
        let values: Vec<f64> = seeds.iter().map(|s| s.overall_mae).collect();
        let (mean_mae, std_mae) = if values.len() >= 2 {
            let (m, s) = aggregate_seeds(&values)?;
            (m, Some(s))
        } else {
            (values[0], None)
        };
        Ok(EvalReport { target, config_fingerprint, mean_mae, std_mae, seeds })
    }
}

/// Evaluate one trained model on a split. Targets are latent totals when
/// the whole split carries them, else label totals.
pub fn evaluate_split(
    model: &Model,
    stats: &FeatureStats,
    corpus: &Corpus,
    manifest: &SplitManifest,
    split: Split,
    seed: u64,
) -> Result<SeedEval, EvalError> {
    let pairs = sessions_with_history(corpus, manifest, split);
    if pairs.is_empty() {
        return Err(EvalError::Empty(format!("{split:?} split")));
    }
    let all_latent = pairs.iter().all(|(s, _)| s.latent_items.is_some());
    let all_labeled = pairs.iter().all(|(s, _)| s.labels.is_some());
    let target = if all_latent {
        TargetKind::Latent
    } else if all_labeled {
        TargetKind::Label
    } else {
        return Err(EvalError::NoTargets);
    };

    let mut predictions = Vec::with_capacity(pairs.len());
    let mut tagged = Vec::with_capacity(pairs.len());
    let mut symptom_abs = vec![0.0f64; PHQ_ITEMS];
    let mut symptom_rows = 0usize;
    for (session, prev) in pairs {
        let input = prepare_session(session, prev, stats, &model.config)?;
        let (items, total) = model.predict(&input);
        let (target_items, target_total): (Option<Vec<f64>>, f64) = match target {
            TargetKind::Latent => {
                let latent = session.latent_items.clone().unwrap();
                let sum = latent.iter().sum();
                (Some(latent), sum)
            }
            TargetKind::Label => {
                let labels = session.labels.as_ref().unwrap();
                (Some(labels.items.clone()), labels.total)
            }
        };
        if let Some(ti) = &target_items {
            for (acc, (p, t)) in symptom_abs.iter_mut().zip(items.iter().zip(ti.iter())) {
                *acc += (p - t).abs();
            }
            symptom_rows += 1;
        }
        tagged.push((session.session_index, total, target_total));
        predictions.push(PredictionRecord {
            run_id: session.client_id.clone(),
            session_index: session.session_index,
            predicted_total: total,
            target_total,
            predicted_items: items,
            target_items,
        });
    }

    let preds: Vec<f64> = predictions.iter().map(|p| p.predicted_total).collect();
    let targets: Vec<f64> = predictions.iter().map(|p| p.target_total).collect();
    let overall = mae(&preds, &targets)?;
    let per_session = per_session_mae(&tagged);
    let per_symptom = (symptom_rows > 0)
        .then(|| symptom_abs.iter().map(|a| a / symptom_rows as f64).collect());

    Ok(SeedEval {
        seed,
        n_sessions: predictions.len(),
        overall_mae: overall,
        per_session_mae: per_session,
        per_symptom_mae: per_symptom,
        predictions,
    })
}

// ---- ablation harness ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    InputSource,
    SpeakerView,
    EncDecLayers,
    HistoryDropout,
    NMax,
    MemoryMechanism,
    MemorySlots,
    LambdaSym,
    Readout,
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::InputSource => "input-source",
            AblationAxis::SpeakerView => "speaker-view",
            AblationAxis::EncDecLayers => "enc-dec-layers",
            AblationAxis::HistoryDropout => "history-dropout",
            AblationAxis::NMax => "n-max",
            AblationAxis::MemoryMechanism => "memory-mechanism",
            AblationAxis::MemorySlots => "memory-slots",
            AblationAxis::LambdaSym => "lambda-sym",
            AblationAxis::Readout => "readout",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input-source" => Ok(AblationAxis::InputSource),
            "speaker-view" => Ok(AblationAxis::SpeakerView),
            "enc-dec-layers" => Ok(AblationAxis::EncDecLayers),
            "history-dropout" => Ok(AblationAxis::HistoryDropout),
            "n-max" => Ok(AblationAxis::NMax),
            "memory-mechanism" => Ok(AblationAxis::MemoryMechanism),
            "memory-slots" => Ok(AblationAxis::MemorySlots),
            "lambda-sym" => Ok(AblationAxis::LambdaSym),
            "readout" => Ok(AblationAxis::Readout),
            other => Err(EvalError::UnknownAxis(other.to_string())),
        }
    }
}

/// Apply one grid point to copies of the base configs.
pub fn apply_axis(
    model_cfg: &mut ModelConfig,
    train_cfg: &mut TrainConfig,
    axis: AblationAxis,
    point: &str,
) -> Result<(), EvalError> {
    let bad = |msg: String| EvalError::BadGridPoint {
        axis: axis.name().to_string(),
        point: point.to_string(),
        msg,
    };
    match axis {
        AblationAxis::InputSource => model_cfg.input_source = point.parse().map_err(bad)?,
        AblationAxis::SpeakerView => model_cfg.speaker_view = point.parse().map_err(bad)?,
        AblationAxis::EncDecLayers => {
            let (enc, dec) = point
                .split_once('-')
                .ok_or_else(|| bad("expected `<enc>-<dec>`".into()))?;
            model_cfg.l_enc =
                enc.parse().map_err(|_| bad(format!("bad encoder depth `{enc}`")))?;
            model_cfg.l_dec =
                dec.parse().map_err(|_| bad(format!("bad decoder depth `{dec}`")))?;
        }
        AblationAxis::HistoryDropout => {
            train_cfg.p_hist = point.parse().map_err(|_| bad("not a number".into()))?;
        }
        AblationAxis::NMax => {
            model_cfg.n_max = point.parse().map_err(|_| bad("not an integer".into()))?;
        }
        AblationAxis::MemoryMechanism => model_cfg.memory_mode = point.parse().map_err(bad)?,
        AblationAxis::MemorySlots => {
            model_cfg.memory_slots = point.parse().map_err(|_| bad("not an integer".into()))?;
        }
        AblationAxis::LambdaSym => {
            train_cfg.lambda_sym = point.parse().map_err(|_| bad("not a number".into()))?;
        }
        AblationAxis::Readout => model_cfg.readout = point.parse().map_err(bad)?,
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub point: String,
    pub mean_mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_mae: Option<f64>,
    pub per_seed: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("point,mean_mae,std_mae");
        for s in &self.seeds {
            out.push_str(&format!(",seed{s}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.point);
            out.push_str(&format!(",{}", row.mean_mae));
            match row.std_mae {
                Some(s) => out.push_str(&format!(",{s}")),
                None => out.push(','),
            }
            for (_, v) in &row.per_seed {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Train and evaluate one configuration for one seed (test split).
pub fn train_and_eval(
    corpus: &Corpus,
    manifest: &SplitManifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<SeedEval, EvalError> {
    let mut cfg = train_cfg.clone();
    cfg.seed = seed;
    let outcome = train(corpus, manifest, model_cfg, &cfg)?;
    evaluate_split(&outcome.model, &outcome.stats, corpus, manifest, Split::Test, seed)
}

/// One model per grid point per seed, base config otherwise unchanged.
/// `jobs` bounds worker threads; results merge deterministically.
pub fn run_ablation(
    corpus: &Corpus,
    manifest: &SplitManifest,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    axis: AblationAxis,
    grid: &[String],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationTable, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::Empty("ablation grid".into()));
    }
    if seeds.is_empty() {
        return Err(EvalError::Empty("seed list".into()));
    }
    // Validate every grid point before any training starts.
    let mut configs = Vec::with_capacity(grid.len());
    for point in grid {
        let mut model_cfg = base_model.clone();
        let mut train_cfg = base_train.clone();
        apply_axis(&mut model_cfg, &mut train_cfg, axis, point)?;
        model_cfg.validate().map_err(|e| EvalError::BadGridPoint {
            axis: axis.name().to_string(),
            point: point.clone(),
            msg: e.to_string(),
        })?;
        configs.push((point.clone(), model_cfg, train_cfg));
    }

    let mut tasks: Vec<(usize, u64)> = Vec::new();
    for gi in 0..configs.len() {
        for &seed in seeds {
            tasks.push((gi, seed));
        }
    }
    let results = run_tasks(jobs.max(1), &tasks, |&(gi, seed)| {
        let (_, model_cfg, train_cfg) = &configs[gi];
        train_and_eval(corpus, manifest, model_cfg, train_cfg, seed)
    });

    let mut rows = Vec::with_capacity(configs.len());
    let mut it = results.into_iter();
    for (point, _, _) in &configs {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let eval = it.next().unwrap()?;
            per_seed.push((seed, eval.overall_mae));
        }
        per_seed.sort_by_key(|&(s, _)| s);
        let values: Vec<f64> = per_seed.iter().map(|&(_, v)| v).collect();
        let (mean_mae, std_mae) = if values.len() >= 2 {
            let (m, s) = aggregate_seeds(&values)?;
            (m, Some(s))
        } else {
            (values[0], None)
        };
        rows.push(AblationRow { point: point.clone(), mean_mae, std_mae, per_seed });
    }
    Ok(AblationTable { axis: axis.name().to_string(), seeds: seeds.to_vec(), rows })
}

/// Run tasks on up to `jobs` scoped worker threads; output order matches
/// input order.
pub fn run_tasks<T, R, F>(jobs: usize, tasks: &[T], work: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if jobs <= 1 || tasks.len() <= 1 {
        return tasks.iter().map(&work).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..tasks.len()).map(|_| None).collect();
    let slots_ref = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let r = work(&tasks[i]);
                slots_ref.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert_eq!(mae(&[3.0, 3.0], &[3.0, 3.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0], &[24.0]).unwrap(), 24.0);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn per_session_grouping_and_recombination() {
        let r = StreamRng::new(4, "psm");
        for case in 0..50 {
            let n = 5 + (r.at(case, 0) % 40) as usize;
            let results: Vec<(u32, f64, f64)> = (0..n)
                .map(|k| {
                    let idx = 1 + (r.at(case, k as u64 + 1) % 5) as u32;
                    let pred = 24.0 * r.uniform(case, 100 + k as u64);
                    let target = 24.0 * r.uniform(case, 200 + k as u64);
                    (idx, pred, target)
                })
                .collect();
            let grouped = per_session_mae(&results);
            // Session-count-weighted recombination equals the overall MAE.
            let mut weighted = 0.0;
            for (&idx, &m) in &grouped {
                let count = results.iter().filter(|r| r.0 == idx).count();
                weighted += m * count as f64;
            }
            weighted /= n as f64;
            let overall = results.iter().map(|r| (r.1 - r.2).abs()).sum::<f64>() / n as f64;
            assert!((weighted - overall).abs() < 1e-9);
        }
    }

    #[test]
    fn per_session_single_index() {
        let grouped = per_session_mae(&[(1, 2.0, 4.0), (1, 6.0, 2.0)]);
        assert_eq!(grouped.len(), 1);
        assert_eq!(grouped[&1], 3.0);
    }

    #[test]
    fn aggregate_examples() {
        let (m, s) = aggregate_seeds(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        let (m, s) = aggregate_seeds(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(m, 5.0);
        assert_eq!(s, 0.0);
        let (m, s) = aggregate_seeds(&[2.3, 2.5]).unwrap();
        assert!((m - 2.4).abs() < 1e-12);
        assert!((s - 0.2f64 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((s - 0.1414).abs() < 1e-4);
        assert!(aggregate_seeds(&[1.0]).is_err());
    }

    #[test]
    fn axis_parsing_and_application() {
        let mut m = ModelConfig::defaults(32);
        let mut t = TrainConfig::default();
        apply_axis(&mut m, &mut t, "enc-dec-layers".parse().unwrap(), "3-6").unwrap();
        assert_eq!((m.l_enc, m.l_dec), (3, 6));
        apply_axis(&mut m, &mut t, "memory-mechanism".parse().unwrap(), "none").unwrap();
        assert_eq!(m.memory_mode, crate::config::MemoryMode::None);
        apply_axis(&mut m, &mut t, "lambda-sym".parse().unwrap(), "0.3").unwrap();
        assert_eq!(t.lambda_sym, 0.3);
        apply_axis(&mut m, &mut t, "readout".parse().unwrap(), "mean-pooled").unwrap();
        assert_eq!(m.readout, crate::config::Readout::MeanPooled);
        assert!("bogus".parse::<AblationAxis>().is_err());
        assert!(apply_axis(&mut m, &mut t, "n-max".parse().unwrap(), "xyz").is_err());
    }

    #[test]
    fn csv_shape() {
        let table = AblationTable {
            axis: "memory-mechanism".into(),
            seeds: vec![0, 1],
            rows: vec![AblationRow {
                point: "none".into(),
                mean_mae: 2.5,
                std_mae: Some(0.1),
                per_seed: vec![(0, 2.4), (1, 2.6)],
            }],
        };
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "point,mean_mae,std_mae,seed0,seed1");
        assert!(lines[1].starts_with("none,2.5,0.1,2.4,2.6"));
    }

    #[test]
    fn single_point_grid_equals_plain_evaluation() {
        let gen_cfg = crate::config::GeneratorConfig {
            n_clients: 12,
            turns_per_session: 3,
            d_e: 8,
            n_features: 4,
            ..Default::default()
        };
        let (corpus, manifest) = crate::synth::generate_corpus(&gen_cfg).unwrap();
        let mut model_cfg = ModelConfig::defaults(corpus.d_e);
        model_cfg.d = 8;
        model_cfg.heads = 2;
        model_cfg.d_ff = 16;
        model_cfg.l_enc = 1;
        model_cfg.l_dec = 1;
        model_cfg.n_features = 4;
        model_cfg.group_map = crate::config::default_group_map(4);
        model_cfg.memory_slots = 4;
        model_cfg.score_mlp_hidden = 4;
        let mut train_cfg = TrainConfig::default();
        train_cfg.max_epochs = 2;
        train_cfg.batch_size = 8;

        let table = run_ablation(
            &corpus,
            &manifest,
            &model_cfg,
            &train_cfg,
            AblationAxis::MemorySlots,
            &["4".to_string()],
            &[0],
            1,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(table.rows[0].std_mae.is_none(), "single seed has no std");
        let direct = train_and_eval(&corpus, &manifest, &model_cfg, &train_cfg, 0).unwrap();
        assert_eq!(table.rows[0].mean_mae, direct.overall_mae);
    }

    #[test]
    fn run_tasks_preserves_order_and_parallelizes() {
        let tasks: Vec<usize> = (0..17).collect();
        let seq = run_tasks(1, &tasks, |&t| t * 2);
        let par = run_tasks(4, &tasks, |&t| t * 2);
        assert_eq!(seq, par);
        assert_eq!(par[16], 32);
    }
}
