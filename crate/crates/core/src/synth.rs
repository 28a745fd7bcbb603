//! Deterministic desk-scale fixture generator: latent five-visit severity
//! trajectories, hash-selected symptom decompositions, signal-planted turn
//! embeddings and feature scores, averaged self-report labels, and a split
//! manifest.
//!
//! Everything is a pure function of `(GeneratorConfig, seed)`. Symptoms
//! marked history-dependent are zeroed out of a session's own embeddings
//! and planted into the previous session's embeddings instead, so models
//! must read session t−1 to recover them.

use std::fmt;

use crate::config::GeneratorConfig;
use crate::data::{
    build_split_manifest, Corpus, DataError, Labels, SessionRecord, Speaker, SplitManifest,
    TrajectoryRecord, Turn, PHQ_ITEMS,
};
use crate::rng::{fnv1a, hash_fields, SeqRng, StreamRng};

#[derive(Debug)]
pub enum SynthError {
    Config(crate::config::ConfigError),
    Score { what: String },
    EmptyBucket { total: u8 },
    Data(DataError),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::Config(e) => write!(f, "{e}"),
            SynthError::Score { what } => write!(f, "score out of range: {what}"),
            SynthError::EmptyBucket { total } => {
                write!(f, "no decomposition candidates for total {total}")
            }
            SynthError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SynthError {}

impl From<DataError> for SynthError {
    fn from(e: DataError) -> Self {
        SynthError::Data(e)
    }
}

impl From<crate::config::ConfigError> for SynthError {
    fn from(e: crate::config::ConfigError) -> Self {
        SynthError::Config(e)
    }
}

pub const VISITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendClass {
    Stable,
    Improving,
    Worsening,
    Fluctuating,
}

impl TrendClass {
    pub fn all() -> [TrendClass; 4] {
        [TrendClass::Stable, TrendClass::Improving, TrendClass::Worsening, TrendClass::Fluctuating]
    }
}

/// Severity-course class from anchor deltas. Improving if last − first
/// ≤ −3, worsening if ≥ +3, fluctuating if the range spans ≥ 5 without a
/// monotone direction, else stable.
pub fn classify_anchors(anchors: &[u8; VISITS]) -> TrendClass {
    let first = anchors[0] as i32;
    let last = anchors[VISITS - 1] as i32;
    let min = *anchors.iter().min().unwrap() as i32;
    let max = *anchors.iter().max().unwrap() as i32;
    if last - first <= -3 {
        TrendClass::Improving
    } else if last - first >= 3 {
        TrendClass::Worsening
    } else if max - min >= 5 {
        TrendClass::Fluctuating
    } else {
        TrendClass::Stable
    }
}

/// Chain four quarterly (start, end) score windows into five visit anchors.
/// Anchor 1 is the first start; anchors 2–5 are quarter-end values, with a
/// disagreeing shared boundary replaced by the round-half-up mean of the
/// two readings.
pub fn reconstruct_anchor_chain(windows: &[(u8, u8); 4]) -> Result<[u8; VISITS], SynthError> {
    for (i, &(s, e)) in windows.iter().enumerate() {
        if s > 24 || e > 24 {
            return Err(SynthError::Score { what: format!("window {i} = ({s}, {e})") });
        }
    }
    let mut anchors = [0u8; VISITS];
    anchors[0] = windows[0].0;
    for i in 0..3 {
        let end = windows[i].1;
        let next_start = windows[i + 1].0;
        anchors[i + 1] = if end == next_start {
            end
        } else {
            // round-half-up of the mean of two integers
            (end as u16 + next_start as u16).div_ceil(2) as u8
        };
    }
    anchors[4] = windows[3].1;
    Ok(anchors)
}

/// Per-total candidate item vectors for symptom decomposition: a seeded
/// sample (at most `BUCKET_CAP` entries) of the full enumeration of
/// {0..3}^8 vectors with the given sum.
pub struct DecompositionBuckets {
    per_total: Vec<Vec<[u8; PHQ_ITEMS]>>,
}

const BUCKET_CAP: usize = 256;

impl DecompositionBuckets {
    pub fn build(seed: u64) -> Self {
        let mut per_total: Vec<Vec<[u8; PHQ_ITEMS]>> = vec![Vec::new(); 25];
        // 4^8 = 65536 candidate vectors in lexicographic order.
        for code in 0u32..4u32.pow(PHQ_ITEMS as u32) {
            let mut items = [0u8; PHQ_ITEMS];
            let mut c = code;
            let mut sum = 0u8;
            for item in items.iter_mut() {
                *item = (c % 4) as u8;
                sum += *item;
                c /= 4;
            }
            per_total[sum as usize].push(items);
        }
        for (total, bucket) in per_total.iter_mut().enumerate() {
            let mut rng = SeqRng::new(seed, &format!("bucket_sample/{total}"));
            rng.shuffle(bucket);
            bucket.truncate(BUCKET_CAP);
            // Keys must be order-stable regardless of the shuffle draw.
            bucket.sort_unstable();
        }
        Self { per_total }
    }

    pub fn candidates(&self, total: u8) -> &[[u8; PHQ_ITEMS]] {
        &self.per_total[total as usize]
    }
}

/// Pick the 8-item decomposition of a visit anchor: all-zero and all-max
/// totals are deterministic boundary cases; otherwise a hash of
/// (seed, participant, visit, total) indexes the candidate bucket.
pub fn decompose_total(
    total: u8,
    buckets: &DecompositionBuckets,
    global_seed: u64,
    participant_id: &str,
    visit_index: u32,
) -> Result<[u8; PHQ_ITEMS], SynthError> {
    if total > 24 {
        return Err(SynthError::Score { what: format!("total {total}") });
    }
    if total == 0 {
        return Ok([0; PHQ_ITEMS]);
    }
    if total == 24 {
        return Ok([3; PHQ_ITEMS]);
    }
    let bucket = buckets.candidates(total);
    if bucket.is_empty() {
        return Err(SynthError::EmptyBucket { total });
    }
    let h = hash_fields(&[
        global_seed,
        fnv1a(participant_id.as_bytes()),
        visit_index as u64,
        total as u64,
    ]);
    Ok(bucket[(h % bucket.len() as u64) as usize])
}

/// One client's latent course: five anchors and their item decompositions.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub run_id: String,
    pub anchors: [u8; VISITS],
    pub items: [[u8; PHQ_ITEMS]; VISITS],
    pub trend: TrendClass,
}

fn sample_windows(rng: &mut SeqRng, target: TrendClass) -> [(u8, u8); 4] {
    let clamp24 = |v: i64| v.clamp(0, 24) as u8;
    let jitter = |rng: &mut SeqRng| rng.bounded(3) as i64 - 1;
    let mut windows = [(0u8, 0u8); 4];
    match target {
        TrendClass::Stable => {
            let base = 4 + rng.bounded(14) as i64;
            let mut s = base;
            for w in windows.iter_mut() {
                let e = base + jitter(rng);
                *w = (clamp24(s), clamp24(e));
                s = e + jitter(rng);
            }
        }
        TrendClass::Improving => {
            let start = 12 + rng.bounded(11) as i64;
            let drop = 1 + rng.bounded(3) as i64;
            let mut s = start;
            for w in windows.iter_mut() {
                let e = s - drop;
                *w = (clamp24(s), clamp24(e));
                s = e + jitter(rng);
            }
        }
        TrendClass::Worsening => {
            let start = 1 + rng.bounded(10) as i64;
            let rise = 1 + rng.bounded(3) as i64;
            let mut s = start;
            for w in windows.iter_mut() {
                let e = s + rise;
                *w = (clamp24(s), clamp24(e));
                s = e + jitter(rng);
            }
        }
        TrendClass::Fluctuating => {
            let base = 8 + rng.bounded(8) as i64;
            let swing = 3 + rng.bounded(3) as i64;
            let mut s = base;
            for (i, w) in windows.iter_mut().enumerate() {
                let dir = if i % 2 == 0 { 1 } else { -1 };
                let e = base + dir * swing + jitter(rng);
                *w = (clamp24(s), clamp24(e));
                s = e + jitter(rng);
            }
        }
    }
    windows
}

/// Build one client's latent trajectory; retries window draws until the
/// reconstructed anchors classify as the target trend.
pub fn latent_trajectory(
    run_id: &str,
    target: TrendClass,
    buckets: &DecompositionBuckets,
    seed: u64,
) -> Result<LatentTrajectory, SynthError> {
    for attempt in 0..10_000u32 {
        let mut rng = SeqRng::new(seed, &format!("traj/{run_id}/{attempt}"));
        let windows = sample_windows(&mut rng, target);
        let anchors = reconstruct_anchor_chain(&windows)?;
        if classify_anchors(&anchors) != target {
            continue;
        }
        let mut items = [[0u8; PHQ_ITEMS]; VISITS];
        for (v, item_row) in items.iter_mut().enumerate() {
            *item_row = decompose_total(anchors[v], buckets, seed, run_id, v as u32 + 1)?;
        }
        return Ok(LatentTrajectory { run_id: run_id.to_string(), anchors, items, trend: target });
    }
    unreachable!("trend-class rejection sampling failed for {run_id} ({target:?})");
}

/// Simulated self-report: each pass perturbs each item by ±1 with
/// probability `p_flip` (clipped to [0, 3]); labels are symptomwise means.
pub fn simulate_self_report(
    latent: &[u8; PHQ_ITEMS],
    passes: usize,
    p_flip: f64,
    stream: &StreamRng,
) -> Labels {
    assert!(passes >= 1);
    let mut sums = [0.0f64; PHQ_ITEMS];
    for pass in 0..passes {
        for (j, sum) in sums.iter_mut().enumerate() {
            let mut v = latent[j] as i32;
            if stream.uniform(pass as u64, j as u64) < p_flip {
                let up = stream.uniform(pass as u64, (PHQ_ITEMS + j) as u64) < 0.5;
                v += if up { 1 } else { -1 };
            }
            *sum += v.clamp(0, 3) as f64;
        }
    }
    let items: Vec<f64> = sums.iter().map(|s| s / passes as f64).collect();
    let total = items.iter().sum();
    Labels { items, total }
}

/// Per-corpus fixed signal maps: the symptom basis for embeddings and
/// per-feature score coefficients.
pub struct SignalMaps {
    /// d_e×8 basis, row-major by embedding coordinate.
    pub basis: Vec<f64>,
    /// Per feature: 8 symptom weights and an offset.
    pub feature_w: Vec<[f64; PHQ_ITEMS]>,
    pub feature_b: Vec<f64>,
    d_e: usize,
}

impl SignalMaps {
    pub fn build(cfg: &GeneratorConfig) -> Self {
        let basis_rng = StreamRng::new(cfg.seed, "signal/basis");
        let scale = 1.0 / (PHQ_ITEMS as f64).sqrt();
        let basis: Vec<f64> = (0..cfg.d_e * PHQ_ITEMS)
            .map(|i| scale * basis_rng.normal(0, i as u64))
            .collect();
        let mut feature_w = Vec::with_capacity(cfg.n_features);
        let mut feature_b = Vec::with_capacity(cfg.n_features);
        for i in 0..cfg.n_features {
            let r = StreamRng::new(cfg.seed, &format!("signal/feature{i}"));
            let mut w = [0.0; PHQ_ITEMS];
            for (j, wj) in w.iter_mut().enumerate() {
                let u = r.uniform(0, j as u64);
                *wj = u * u;
            }
            feature_w.push(w);
            feature_b.push(2.0 * r.uniform(1, 0) - 1.0);
        }
        SignalMaps { basis, feature_w, feature_b, d_e: cfg.d_e }
    }

    fn embed_signal(&self, s_eff: &[f64; PHQ_ITEMS]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_e];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.basis[r * PHQ_ITEMS..(r + 1) * PHQ_ITEMS];
            *o = row.iter().zip(s_eff.iter()).map(|(b, s)| b * s).sum();
        }
        out
    }
}

/// Synthesize one session record. The effective signal vector carries the
/// visible components of this visit's items plus — planted here because
/// they are expressed one session early — the history-dependent components
/// of the next visit's items.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_session(
    cfg: &GeneratorConfig,
    maps: &SignalMaps,
    run_id: &str,
    visit: u32,
    items: &[u8; PHQ_ITEMS],
    next_items: Option<&[u8; PHQ_ITEMS]>,
) -> SessionRecord {
    let hist = cfg.hist_mask();
    let mut s_eff = [0.0f64; PHQ_ITEMS];
    for j in 0..PHQ_ITEMS {
        if !hist[j] {
            s_eff[j] = items[j] as f64;
        } else if let Some(next) = next_items {
            s_eff[j] = next[j] as f64;
        }
    }
    let signal = maps.embed_signal(&s_eff);

    let client_noise = StreamRng::new(cfg.seed, &format!("emb/{run_id}/{visit}/client"));
    let counselor_noise = StreamRng::new(cfg.seed, &format!("emb/{run_id}/{visit}/counselor"));
    let mut turns = Vec::with_capacity(2 * cfg.turns_per_session);
    for n in 0..cfg.turns_per_session {
        let counselor_emb: Vec<f64> = (0..cfg.d_e)
            .map(|i| cfg.sigma_embed * counselor_noise.normal(n as u64, i as u64))
            .collect();
        turns.push(Turn { speaker: Speaker::Counselor, embedding: counselor_emb, text: None });
        let client_emb: Vec<f64> = (0..cfg.d_e)
            .map(|i| signal[i] + cfg.sigma_embed * client_noise.normal(n as u64, i as u64))
            .collect();
        turns.push(Turn { speaker: Speaker::Client, embedding: client_emb, text: None });
    }

    // Feature scores reflect only the currently visible symptom components.
    let feat_noise = StreamRng::new(cfg.seed, &format!("feat/{run_id}/{visit}"));
    let mut vis_items = [0.0f64; PHQ_ITEMS];
    for j in 0..PHQ_ITEMS {
        if !hist[j] {
            vis_items[j] = items[j] as f64;
        }
    }
    let features: Vec<f64> = (0..cfg.n_features)
        .map(|i| {
            let w = &maps.feature_w[i];
            let wsum: f64 = w.iter().sum();
            let raw: f64 = w.iter().zip(vis_items.iter()).map(|(a, b)| a * b).sum();
            let scaled = 10.0 * raw / (3.0 * wsum).max(1e-9);
            (scaled + maps.feature_b[i] + cfg.sigma_feature * feat_noise.normal(0, i as u64))
                .clamp(0.0, 10.0)
        })
        .collect();

    let report_stream = StreamRng::new(cfg.seed, &format!("report/{run_id}/{visit}"));
    let labels = simulate_self_report(items, cfg.report_passes, cfg.p_flip, &report_stream);

    SessionRecord {
        client_id: run_id.to_string(),
        session_index: visit,
        turns,
        features,
        labels: Some(labels),
        latent_items: Some(items.iter().map(|&v| v as f64).collect()),
    }
}

/// Generate the full corpus plus its trajectory-level split manifest.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<(Corpus, SplitManifest), SynthError> {
    cfg.validate()?;
    let buckets = DecompositionBuckets::build(cfg.seed);
    let maps = SignalMaps::build(cfg);

    let mut trajectories = Vec::with_capacity(cfg.n_clients);
    for c in 0..cfg.n_clients {
        let run_id = format!("run{c:05}");
        let trend = TrendClass::all()[c % 4];
        let latent = latent_trajectory(&run_id, trend, &buckets, cfg.seed)?;
        let mut sessions = Vec::with_capacity(VISITS);
        for v in 0..VISITS {
            let next = if v + 1 < VISITS { Some(&latent.items[v + 1]) } else { None };
            sessions.push(synthesize_session(
                cfg,
                &maps,
                &run_id,
                v as u32 + 1,
                &latent.items[v],
                next,
            ));
        }
        trajectories.push(TrajectoryRecord { run_id, sessions });
    }

    let ids: Vec<String> = trajectories.iter().map(|t| t.run_id.clone()).collect();
    let manifest = build_split_manifest(&ids, cfg.seed, cfg.split_ratios)?;
    Ok((Corpus { d_e: cfg.d_e, n_features: cfg.n_features, trajectories }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_chain_agreeing_boundaries_pass_through() {
        let anchors =
            reconstruct_anchor_chain(&[(5, 5), (5, 5), (5, 5), (5, 5)]).unwrap();
        assert_eq!(anchors, [5, 5, 5, 5, 5]);
    }

    #[test]
    fn anchor_chain_disagreeing_boundary_rounds_half_up() {
        // window 1 ends at 7, window 2 starts at 8: mean 7.5 -> 8.
        let anchors =
            reconstruct_anchor_chain(&[(3, 7), (8, 9), (9, 10), (10, 12)]).unwrap();
        assert_eq!(anchors, [3, 8, 9, 10, 12]);
    }

    #[test]
    fn anchor_chain_monotone_in_monotone_out() {
        let anchors =
            reconstruct_anchor_chain(&[(20, 17), (17, 14), (14, 11), (11, 8)]).unwrap();
        assert_eq!(anchors, [20, 17, 14, 11, 8]);
        assert!(anchors.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn anchor_chain_rejects_out_of_range() {
        assert!(reconstruct_anchor_chain(&[(25, 5), (5, 5), (5, 5), (5, 5)]).is_err());
    }

    #[test]
    fn decompose_boundary_cases_and_determinism() {
        let buckets = DecompositionBuckets::build(42);
        assert_eq!(decompose_total(0, &buckets, 42, "p1", 1).unwrap(), [0; 8]);
        assert_eq!(decompose_total(24, &buckets, 42, "p1", 1).unwrap(), [3; 8]);
        let a = decompose_total(13, &buckets, 42, "p1", 2).unwrap();
        let b = decompose_total(13, &buckets, 42, "p1", 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|&v| v as u32).sum::<u32>(), 13);
        // Different visit or participant picks (generally) different vectors.
        let c = decompose_total(13, &buckets, 42, "p1", 3).unwrap();
        let d = decompose_total(13, &buckets, 42, "p2", 2).unwrap();
        assert!(a != c || a != d, "hash shows no sensitivity to id fields");
    }

    #[test]
    fn decompose_all_interior_totals_have_candidates() {
        let buckets = DecompositionBuckets::build(7);
        for total in 1..24u8 {
            let items = decompose_total(total, &buckets, 7, "p", 1).unwrap();
            assert_eq!(items.iter().map(|&v| v as u32).sum::<u32>(), total as u32);
            assert!(items.iter().all(|&v| v <= 3));
        }
    }

    #[test]
    fn self_report_zero_noise_reproduces_latent() {
        let stream = StreamRng::new(1, "report_test");
        let latent = [0, 1, 2, 3, 1, 0, 2, 1];
        let labels = simulate_self_report(&latent, 5, 0.0, &stream);
        for (l, &v) in labels.items.iter().zip(latent.iter()) {
            assert_eq!(*l, v as f64);
        }
        assert_eq!(labels.total, 10.0);
    }

    #[test]
    fn self_report_total_is_sum_of_items() {
        let stream = StreamRng::new(2, "report_sum");
        for seed in 0..50u64 {
            let stream2 = StreamRng::new(seed, "report_sum_inner");
            let latent = [
                (stream.at(seed, 0) % 4) as u8,
                (stream.at(seed, 1) % 4) as u8,
                (stream.at(seed, 2) % 4) as u8,
                (stream.at(seed, 3) % 4) as u8,
                (stream.at(seed, 4) % 4) as u8,
                (stream.at(seed, 5) % 4) as u8,
                (stream.at(seed, 6) % 4) as u8,
                (stream.at(seed, 7) % 4) as u8,
            ];
            let labels = simulate_self_report(&latent, 5, 0.2, &stream2);
            let sum: f64 = labels.items.iter().sum();
            assert!((labels.total - sum).abs() <= 1e-12);
            assert!(labels.items.iter().all(|&v| (0.0..=3.0).contains(&v)));
        }
    }

    #[test]
    fn mean_of_passes_matches_arithmetic() {
        // Mean of pass values [1,1,2,2,2] is 1.6.
        let passes: [f64; 5] = [1.0, 1.0, 2.0, 2.0, 2.0];
        let mean = passes.iter().sum::<f64>() / 5.0;
        assert!((mean - 1.6).abs() < 1e-15);
    }

    /// Exact expectation of |mean(5 passes) − latent| for one item by
    /// enumerating all 3^passes pass outcomes with clipping.
    fn expected_abs_error(latent: u8, passes: usize, p_flip: f64) -> f64 {
        let outcomes = 3usize.pow(passes as u32);
        let mut expectation = 0.0;
        for code in 0..outcomes {
            let mut c = code;
            let mut prob = 1.0;
            let mut sum = 0.0;
            for _ in 0..passes {
                let delta = c % 3;
                c /= 3;
                let (d, p): (i32, f64) = match delta {
                    0 => (0, 1.0 - p_flip),
                    1 => (1, p_flip / 2.0),
                    _ => (-1, p_flip / 2.0),
                };
                prob *= p;
                sum += ((latent as i32 + d).clamp(0, 3)) as f64;
            }
            expectation += prob * (sum / passes as f64 - latent as f64).abs();
        }
        expectation
    }

    #[test]
    fn label_fidelity_matches_enumerated_expectation_and_bound() {
        let cfg = GeneratorConfig { n_clients: 200, ..Default::default() };
        let (corpus, _) = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.n_sessions(), 1000);

        let mut total_err = 0.0;
        let mut n_items = 0usize;
        let mut latent_counts = [0usize; 4];
        for traj in &corpus.trajectories {
            for s in &traj.sessions {
                let latent = s.latent_items.as_ref().unwrap();
                let labels = s.labels.as_ref().unwrap();
                for (l, y) in labels.items.iter().zip(latent.iter()) {
                    total_err += (l - y).abs();
                    n_items += 1;
                    latent_counts[*y as usize] += 1;
                }
            }
        }
        let empirical = total_err / n_items as f64;

        let mut expected = 0.0;
        for v in 0..4u8 {
            let weight = latent_counts[v as usize] as f64 / n_items as f64;
            expected += weight * expected_abs_error(v, cfg.report_passes, cfg.p_flip);
        }
        assert!(
            (empirical - expected).abs() < 0.01,
            "empirical {empirical:.4} vs enumerated {expected:.4}"
        );
        assert!(empirical < 0.15, "label noise too high: {empirical:.4}");
    }

    #[test]
    fn corpus_is_deterministic_and_latent_sums_are_anchors() {
        let cfg = GeneratorConfig { n_clients: 12, ..Default::default() };
        let (a, ma) = generate_corpus(&cfg).unwrap();
        let (b, mb) = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);

        let buckets = DecompositionBuckets::build(cfg.seed);
        for (c, traj) in a.trajectories.iter().enumerate() {
            let trend = TrendClass::all()[c % 4];
            let latent = latent_trajectory(&traj.run_id, trend, &buckets, cfg.seed).unwrap();
            assert_eq!(latent.trend, classify_anchors(&latent.anchors));
            for (v, s) in traj.sessions.iter().enumerate() {
                let sum: f64 = s.latent_items.as_ref().unwrap().iter().sum();
                assert_eq!(sum, latent.anchors[v] as f64);
            }
        }
    }

    #[test]
    fn corpus_split_counts_follow_ratios() {
        let cfg = GeneratorConfig { n_clients: 200, ..Default::default() };
        let (_, manifest) = generate_corpus(&cfg).unwrap();
        assert_eq!(manifest.counts(), (140, 20, 40));
    }

    #[test]
    fn trend_classes_are_balanced() {
        let cfg = GeneratorConfig { n_clients: 40, ..Default::default() };
        let (corpus, _) = generate_corpus(&cfg).unwrap();
        let mut counts = [0usize; 4];
        for traj in &corpus.trajectories {
            let mut anchors = [0u8; VISITS];
            for (v, s) in traj.sessions.iter().enumerate() {
                let sum: f64 = s.latent_items.as_ref().unwrap().iter().sum();
                anchors[v] = sum as u8;
            }
            let class = classify_anchors(&anchors);
            let idx = TrendClass::all().iter().position(|&c| c == class).unwrap();
            counts[idx] += 1;
        }
        assert_eq!(counts, [10, 10, 10, 10], "{counts:?}");
    }

    #[test]
    fn zero_noise_embeddings_are_pure_functions_of_items() {
        let cfg = GeneratorConfig {
            n_clients: 2,
            sigma_embed: 0.0,
            sigma_feature: 0.0,
            p_flip: 0.0,
            ..Default::default()
        };
        let maps = SignalMaps::build(&cfg);
        let items = [1, 0, 2, 3, 0, 1, 2, 0];
        let a = synthesize_session(&cfg, &maps, "r0", 1, &items, None);
        let b = synthesize_session(&cfg, &maps, "r0", 1, &items, None);
        assert_eq!(a, b);
        // All client turns carry the identical noise-free signal.
        let client_rows: Vec<&Turn> =
            a.turns.iter().filter(|t| t.speaker == Speaker::Client).collect();
        for t in &client_rows[1..] {
            assert_eq!(t.embedding, client_rows[0].embedding);
        }
        // Counselor rows are zero without noise.
        for t in a.turns.iter().filter(|t| t.speaker == Speaker::Counselor) {
            assert!(t.embedding.iter().all(|&v| v == 0.0));
        }
        // Labels equal latent items at zero flip probability.
        assert_eq!(a.labels.as_ref().unwrap().items, vec![1.0, 0.0, 2.0, 3.0, 0.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn hist_fraction_zero_plants_all_symptoms_in_current_session() {
        let cfg = GeneratorConfig {
            sigma_embed: 0.0,
            hist_fraction: 0.0,
            ..Default::default()
        };
        let maps = SignalMaps::build(&cfg);
        let items = [0, 1, 2, 3, 1, 2, 0, 1];
        let next = [3, 3, 3, 3, 3, 3, 3, 3];
        let s = synthesize_session(&cfg, &maps, "r0", 1, &items, Some(&next));
        let expect = maps.embed_signal(&[0.0, 1.0, 2.0, 3.0, 1.0, 2.0, 0.0, 1.0]);
        let first_client =
            s.turns.iter().find(|t| t.speaker == Speaker::Client).unwrap();
        assert_eq!(first_client.embedding, expect);
    }

    #[test]
    fn hist_symptoms_are_planted_one_session_early() {
        let cfg = GeneratorConfig {
            sigma_embed: 0.0,
            hist_fraction: 0.5,
            ..Default::default()
        };
        let hist = cfg.hist_mask();
        assert_eq!(hist.iter().filter(|&&h| h).count(), 4);
        let maps = SignalMaps::build(&cfg);
        let items = [2, 2, 2, 2, 2, 2, 2, 2];
        let next = [3, 1, 3, 1, 3, 1, 3, 1];
        let s = synthesize_session(&cfg, &maps, "r0", 1, &items, Some(&next));
        // Effective signal: next's values on hist symptoms, own on the rest.
        let mut s_eff = [0.0; 8];
        for j in 0..8 {
            s_eff[j] = if hist[j] { next[j] as f64 } else { items[j] as f64 };
        }
        let expect = maps.embed_signal(&s_eff);
        let first_client = s.turns.iter().find(|t| t.speaker == Speaker::Client).unwrap();
        assert_eq!(first_client.embedding, expect);
    }
}
