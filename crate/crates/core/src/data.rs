//! Dataset model: sessions, trajectories, JSONL ingestion, feature
//! normalization, turn filtering/truncation, and split manifests.
//!
//! On-disk formats:
//!
//! * Session JSONL — first line is a header `{"d_e": int, "F": int}`, then
//!   one session object per line. Turn embeddings are inline arrays or
//!   `{"embedding_ref": row}` references into a binary sidecar.
//! * Binary embedding sidecar — magic `EMOT`, version u32, rows u32,
//!   cols u32, then rows×cols little-endian f32, row-major. Looked up next
//!   to the JSONL as `<stem>.emb`.
//! * Split manifest JSON — `{"seed", "ratios", "assignments"}` with
//!   trajectory-level assignments.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::SeqRng;

pub const PHQ_ITEMS: usize = 8;

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: std::io::Error },
    Parse { line: usize, msg: String },
    Invalid { context: String, msg: String },
    Sidecar { msg: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::Parse { line, msg } => write!(f, "line {line}: {msg}"),
            DataError::Invalid { context, msg } => write!(f, "{context}: {msg}"),
            DataError::Sidecar { msg } => write!(f, "embedding sidecar: {msg}"),
        }
    }
}

impl std::error::Error for DataError {}

fn invalid(context: impl Into<String>, msg: impl Into<String>) -> DataError {
    DataError::Invalid { context: context.into(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Client,
    Counselor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub speaker: Speaker,
    pub embedding: Vec<f64>,
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub items: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub client_id: String,
    pub session_index: u32,
    pub turns: Vec<Turn>,
    pub features: Vec<f64>,
    pub labels: Option<Labels>,
    pub latent_items: Option<Vec<f64>>,
}

impl SessionRecord {
    pub fn label_total(&self) -> Option<f64> {
        self.labels.as_ref().map(|l| l.total)
    }

    pub fn latent_total(&self) -> Option<f64> {
        self.latent_items.as_ref().map(|v| v.iter().sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub sessions: Vec<SessionRecord>,
}

/// A loaded corpus: declared dimensions plus all trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub d_e: usize,
    pub n_features: usize,
    pub trajectories: Vec<TrajectoryRecord>,
}

impl Corpus {
    pub fn n_sessions(&self) -> usize {
        self.trajectories.iter().map(|t| t.sessions.len()).sum()
    }

    pub fn trajectory(&self, run_id: &str) -> Option<&TrajectoryRecord> {
        self.trajectories.iter().find(|t| t.run_id == run_id)
    }
}

/// Which speaker's turns feed the dialogue branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerView {
    Client,
    Counselor,
    Both,
}

impl std::str::FromStr for SpeakerView {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "client" => Ok(SpeakerView::Client),
            "counselor" => Ok(SpeakerView::Counselor),
            "both" => Ok(SpeakerView::Both),
            other => Err(format!("unknown speaker view `{other}`")),
        }
    }
}

/// Keep turns matching the view, dropping empty-text turns; order preserved.
/// A session with zero remaining turns is unusable for the dialogue branch.
pub fn filter_turns<'a>(
    session: &'a SessionRecord,
    view: SpeakerView,
) -> Result<Vec<&'a Turn>, DataError> {
    let kept: Vec<&Turn> = session
        .turns
        .iter()
        .filter(|t| match view {
            SpeakerView::Client => t.speaker == Speaker::Client,
            SpeakerView::Counselor => t.speaker == Speaker::Counselor,
            SpeakerView::Both => true,
        })
        .filter(|t| t.text.as_deref().map_or(true, |s| !s.trim().is_empty()))
        .collect();
    if kept.is_empty() {
        return Err(invalid(
            format!("session {}#{}", session.client_id, session.session_index),
            format!("no usable turns remain under the {view:?} view"),
        ));
    }
    Ok(kept)
}

/// First `n_max` turns in chronological order.
pub fn truncate_turns<'a>(turns: Vec<&'a Turn>, n_max: usize) -> Vec<&'a Turn> {
    assert!(n_max >= 1, "n_max must be at least 1");
    let keep = turns.len().min(n_max);
    turns.into_iter().take(keep).collect()
}

/// Per-feature mean and (floored) population standard deviation fitted on
/// the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

pub fn fit_feature_stats(sessions: &[&SessionRecord]) -> Result<FeatureStats, DataError> {
    if sessions.is_empty() {
        return Err(invalid("feature stats", "no training sessions"));
    }
    let f = sessions[0].features.len();
    let n = sessions.len() as f64;
    let mut mean = vec![0.0; f];
    for s in sessions {
        for (m, x) in mean.iter_mut().zip(s.features.iter()) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; f];
    for s in sessions {
        for (i, x) in s.features.iter().enumerate() {
            let d = x - mean[i];
            var[i] += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(FeatureStats { mean, std })
}

pub fn z_normalize(features: &[f64], stats: &FeatureStats) -> Vec<f64> {
    assert_eq!(features.len(), stats.mean.len(), "feature length mismatch");
    features
        .iter()
        .zip(stats.mean.iter().zip(stats.std.iter()))
        .map(|(x, (m, s))| (x - m) / s)
        .collect()
}

/// Sum of the eight item scores; each item must lie in [0, 3].
pub fn total_score(items: &[f64]) -> Result<f64, DataError> {
    if items.len() != PHQ_ITEMS {
        return Err(invalid("items", format!("expected {PHQ_ITEMS} items, got {}", items.len())));
    }
    for (j, &v) in items.iter().enumerate() {
        if !(0.0..=3.0).contains(&v) || !v.is_finite() {
            return Err(invalid("items", format!("item {j} = {v} outside [0, 3]")));
        }
    }
    Ok(items.iter().sum())
}

// ---- split manifest ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignments: BTreeMap<String, Split>,
}

impl SplitManifest {
    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in self.assignments.values() {
            match s {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n")
            .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)
            .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse { line: 1, msg: e.to_string() })
    }
}

/// Trajectory-level split: sort ids, Fisher-Yates shuffle with the seeded
/// sequential generator, then cut at cumulative-floor boundaries.
pub fn build_split_manifest(
    run_ids: &[String],
    seed: u64,
    ratios: [f64; 3],
) -> Result<SplitManifest, DataError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid("ratios", format!("must sum to 1, got {sum}")));
    }
    let mut seen = HashSet::new();
    for id in run_ids {
        if !seen.insert(id.as_str()) {
            return Err(invalid("run_ids", format!("duplicate id `{id}`")));
        }
    }
    let mut ids: Vec<String> = run_ids.to_vec();
    ids.sort_unstable();
    SeqRng::new(seed, "split_shuffle").shuffle(&mut ids);

    let n = ids.len();
    // Epsilon absorbs representation error in the decimal ratios so the
    // boundaries match exact-arithmetic floors.
    let cut = |r: f64| -> usize { ((r * n as f64) + 1e-9).floor() as usize };
    let train_end = cut(ratios[0]);
    let val_end = cut(ratios[0] + ratios[1]);

    let mut assignments = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let split = if i < train_end {
            Split::Train
        } else if i < val_end {
            Split::Val
        } else {
            Split::Test
        };
        assignments.insert(id, split);
    }
    Ok(SplitManifest { seed, ratios, assignments })
}

/// Sessions of one split paired with their immediately previous session
/// (the memory source), in corpus order.
pub fn sessions_with_history<'c>(
    corpus: &'c Corpus,
    manifest: &SplitManifest,
    split: Split,
) -> Vec<(&'c SessionRecord, Option<&'c SessionRecord>)> {
    let mut out = Vec::new();
    for traj in &corpus.trajectories {
        if manifest.assignments.get(&traj.run_id) != Some(&split) {
            continue;
        }
        for (i, session) in traj.sessions.iter().enumerate() {
            let prev = if i > 0 { Some(&traj.sessions[i - 1]) } else { None };
            out.push((session, prev));
        }
    }
    out
}

// ---- JSONL serialization ----

#[derive(Serialize, Deserialize)]
struct HeaderJson {
    d_e: usize,
    #[serde(rename = "F")]
    f: usize,
}

#[derive(Serialize, Deserialize)]
struct TurnJson {
    speaker: Speaker,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding_ref: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SessionJson {
    client_id: String,
    session_index: u32,
    turns: Vec<TurnJson>,
    features: Vec<f64>,
    labels: Option<Labels>,
    latent_items: Option<Vec<f64>>,
}

/// Sidecar path convention: `<data stem>.emb` next to the JSONL file.
pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("emb")
}

const SIDECAR_MAGIC: &[u8; 4] = b"EMOT";
const SIDECAR_VERSION: u32 = 1;

/// Write an embedding matrix sidecar (rows×cols little-endian f32).
pub fn write_sidecar(path: &Path, rows: &[Vec<f32>]) -> Result<(), DataError> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut buf = Vec::with_capacity(16 + rows.len() * cols * 4);
    buf.extend_from_slice(SIDECAR_MAGIC);
    buf.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for row in rows {
        assert_eq!(row.len(), cols, "ragged sidecar rows");
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
}

fn read_sidecar(path: &Path) -> Result<(usize, usize, Vec<f32>), DataError> {
    let file =
        fs::File::open(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let mut reader = BufReader::new(file);
    let mut head = [0u8; 16];
    reader
        .read_exact(&mut head)
        .map_err(|_| DataError::Sidecar { msg: format!("{}: truncated header", path.display()) })?;
    if &head[0..4] != SIDECAR_MAGIC {
        return Err(DataError::Sidecar { msg: format!("{}: bad magic", path.display()) });
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != SIDECAR_VERSION {
        return Err(DataError::Sidecar {
            msg: format!("{}: unsupported version {version}", path.display()),
        });
    }
    let rows = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; rows * cols * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| DataError::Sidecar { msg: format!("{}: truncated data", path.display()) })?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((rows, cols, data))
}

struct SidecarCache {
    path: PathBuf,
    loaded: Option<(usize, usize, Vec<f32>)>,
}

impl SidecarCache {
    fn lookup(&mut self, row: u32, line: usize) -> Result<Vec<f64>, DataError> {
        if self.loaded.is_none() {
            self.loaded = Some(read_sidecar(&self.path)?);
        }
        let (rows, cols, data) = self.loaded.as_ref().unwrap();
        let r = row as usize;
        if r >= *rows {
            return Err(DataError::Parse {
                line,
                msg: format!("embedding_ref {row} out of range (sidecar has {rows} rows)"),
            });
        }
        Ok(data[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).collect())
    }
}

fn validate_session(s: &SessionRecord, d_e: usize, n_features: usize) -> Result<(), DataError> {
    let ctx = format!("session {}#{}", s.client_id, s.session_index);
    if s.session_index < 1 {
        return Err(invalid(ctx, "session_index must be >= 1"));
    }
    if s.turns.is_empty() {
        return Err(invalid(ctx, "session has no turns"));
    }
    for (i, t) in s.turns.iter().enumerate() {
        if t.embedding.len() != d_e {
            return Err(invalid(
                ctx,
                format!("turn {i} embedding length {} != declared d_e {d_e}", t.embedding.len()),
            ));
        }
        if t.embedding.iter().any(|v| !v.is_finite()) {
            return Err(invalid(ctx, format!("turn {i} embedding has non-finite values")));
        }
    }
    if s.features.len() != n_features {
        return Err(invalid(
            ctx,
            format!("features length {} != declared F {n_features}", s.features.len()),
        ));
    }
    for (i, &v) in s.features.iter().enumerate() {
        if !(0.0..=10.0).contains(&v) || !v.is_finite() {
            return Err(invalid(ctx, format!("features[{i}] = {v} outside [0, 10]")));
        }
    }
    if let Some(labels) = &s.labels {
        if labels.items.len() != PHQ_ITEMS {
            return Err(invalid(
                ctx,
                format!("labels.items has {} entries, expected {PHQ_ITEMS}", labels.items.len()),
            ));
        }
        for (j, &v) in labels.items.iter().enumerate() {
            if !(0.0..=3.0).contains(&v) {
                return Err(invalid(ctx, format!("labels.items[{j}] = {v} outside [0, 3]")));
            }
        }
        let sum: f64 = labels.items.iter().sum();
        if (labels.total - sum).abs() > 1e-9 {
            return Err(invalid(
                ctx,
                format!("labels.total {} != sum of items {sum}", labels.total),
            ));
        }
    }
    if let Some(latent) = &s.latent_items {
        if latent.len() != PHQ_ITEMS {
            return Err(invalid(
                ctx,
                format!("latent_items has {} entries, expected {PHQ_ITEMS}", latent.len()),
            ));
        }
        for (j, &v) in latent.iter().enumerate() {
            if !(0.0..=3.0).contains(&v) {
                return Err(invalid(ctx, format!("latent_items[{j}] = {v} outside [0, 3]")));
            }
        }
    }
    Ok(())
}

/// Load and validate a session JSONL corpus. Sessions are grouped into
/// trajectories by client id (first-seen order) and must form contiguous
/// 1..T indices per client.
pub fn load_dataset(path: &Path) -> Result<Corpus, DataError> {
    let file =
        fs::File::open(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let reader = BufReader::new(file);
    let mut sidecar = SidecarCache { path: sidecar_path(path), loaded: None };

    let mut header: Option<HeaderJson> = None;
    let mut order: Vec<String> = Vec::new();
    let mut by_client: BTreeMap<String, Vec<SessionRecord>> = BTreeMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: HeaderJson = serde_json::from_str(&line)
                .map_err(|e| DataError::Parse { line: line_no, msg: format!("header: {e}") })?;
            if h.d_e == 0 || h.f == 0 {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: "header d_e and F must be positive".into(),
                });
            }
            header = Some(h);
            continue;
        }
        let h = header.as_ref().unwrap();
        let sj: SessionJson = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        let mut turns = Vec::with_capacity(sj.turns.len());
        for (ti, tj) in sj.turns.into_iter().enumerate() {
            let embedding = match (tj.embedding, tj.embedding_ref) {
                (Some(e), None) => e,
                (None, Some(row)) => sidecar.lookup(row, line_no)?,
                (Some(_), Some(_)) => {
                    return Err(DataError::Parse {
                        line: line_no,
                        msg: format!("turn {ti}: both embedding and embedding_ref present"),
                    })
                }
                (None, None) => {
                    return Err(DataError::Parse {
                        line: line_no,
                        msg: format!("turn {ti}: missing embedding"),
                    })
                }
            };
            turns.push(Turn { speaker: tj.speaker, embedding, text: tj.text });
        }
        let record = SessionRecord {
            client_id: sj.client_id,
            session_index: sj.session_index,
            turns,
            features: sj.features,
            labels: sj.labels,
            latent_items: sj.latent_items,
        };
        validate_session(&record, h.d_e, h.f)?;
        if !by_client.contains_key(&record.client_id) {
            order.push(record.client_id.clone());
        }
        by_client.entry(record.client_id.clone()).or_default().push(record);
    }

    let header = match header {
        Some(h) => h,
        None => return Ok(Corpus { d_e: 0, n_features: 0, trajectories: Vec::new() }),
    };

    let mut trajectories = Vec::with_capacity(order.len());
    for run_id in order {
        let mut sessions = by_client.remove(&run_id).unwrap();
        sessions.sort_by_key(|s| s.session_index);
        for (i, s) in sessions.iter().enumerate() {
            if s.session_index as usize != i + 1 {
                return Err(invalid(
                    format!("trajectory {run_id}"),
                    format!(
                        "non-contiguous session indices: expected {} at position {i}, got {}",
                        i + 1,
                        s.session_index
                    ),
                ));
            }
        }
        trajectories.push(TrajectoryRecord { run_id, sessions });
    }
    Ok(Corpus { d_e: header.d_e, n_features: header.f, trajectories })
}

/// Serialize a corpus to session JSONL (inline embeddings).
pub fn save_dataset(corpus: &Corpus, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path)
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let mut w = std::io::BufWriter::new(file);
    let header = HeaderJson { d_e: corpus.d_e, f: corpus.n_features };
    let io_err = |e: std::io::Error| DataError::Io { path: path.to_path_buf(), source: e };
    writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io_err)?;
    for traj in &corpus.trajectories {
        for s in &traj.sessions {
            let sj = SessionJson {
                client_id: s.client_id.clone(),
                session_index: s.session_index,
                turns: s
                    .turns
                    .iter()
                    .map(|t| TurnJson {
                        speaker: t.speaker,
                        embedding: Some(t.embedding.clone()),
                        embedding_ref: None,
                        text: t.text.clone(),
                    })
                    .collect(),
                features: s.features.clone(),
                labels: s.labels.clone(),
                latent_items: s.latent_items.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&sj).unwrap()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(speaker: Speaker, emb: Vec<f64>, text: Option<&str>) -> Turn {
        Turn { speaker, embedding: emb, text: text.map(str::to_string) }
    }

    fn session(client: &str, index: u32, turns: Vec<Turn>) -> SessionRecord {
        SessionRecord {
            client_id: client.into(),
            session_index: index,
            turns,
            features: vec![5.0, 5.0],
            labels: None,
            latent_items: None,
        }
    }

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("phqtrack-data-{name}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn filter_keeps_client_turns_in_order() {
        let s = session(
            "a",
            1,
            vec![
                turn(Speaker::Client, vec![1.0], Some("hi")),
                turn(Speaker::Counselor, vec![2.0], Some("hello")),
                turn(Speaker::Client, vec![3.0], Some("ok")),
            ],
        );
        let kept = filter_turns(&s, SpeakerView::Client).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].embedding, vec![1.0]);
        assert_eq!(kept[1].embedding, vec![3.0]);
        assert_eq!(filter_turns(&s, SpeakerView::Both).unwrap().len(), 3);
    }

    #[test]
    fn filter_all_counselor_session_is_unusable() {
        let s = session("a", 1, vec![turn(Speaker::Counselor, vec![1.0], Some("x"))]);
        let err = filter_turns(&s, SpeakerView::Client).unwrap_err();
        assert!(err.to_string().contains("no usable turns"), "{err}");
    }

    #[test]
    fn filter_drops_empty_text_turns() {
        let s = session(
            "a",
            1,
            vec![
                turn(Speaker::Client, vec![1.0], Some("   ")),
                turn(Speaker::Client, vec![2.0], Some("real")),
                turn(Speaker::Client, vec![3.0], None),
            ],
        );
        let kept = filter_turns(&s, SpeakerView::Client).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn truncate_boundaries() {
        let turns: Vec<Turn> =
            (0..100).map(|i| turn(Speaker::Client, vec![i as f64], None)).collect();
        let refs: Vec<&Turn> = turns.iter().collect();
        assert_eq!(truncate_turns(refs.clone(), 80).len(), 80);
        assert_eq!(truncate_turns(refs.clone(), 80)[79].embedding, vec![79.0]);
        let five: Vec<&Turn> = turns.iter().take(5).collect();
        assert_eq!(truncate_turns(five, 80).len(), 5);
        let eighty: Vec<&Turn> = turns.iter().take(80).collect();
        assert_eq!(truncate_turns(eighty, 80).len(), 80);
    }

    #[test]
    fn z_normalization_closed_form() {
        let mut sessions = Vec::new();
        for v in [0.0, 5.0, 10.0] {
            let mut s = session("a", 1, vec![turn(Speaker::Client, vec![0.0], None)]);
            s.features = vec![v];
            sessions.push(s);
        }
        let refs: Vec<&SessionRecord> = sessions.iter().collect();
        let stats = fit_feature_stats(&refs).unwrap();
        assert_eq!(z_normalize(&[5.0], &stats), vec![0.0]);
        // population std = sqrt(50/3); z(10) = 5 / sqrt(50/3)
        let z = z_normalize(&[10.0], &stats)[0];
        assert!((z - 5.0 / (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((z - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn z_normalization_constant_feature_floors_std() {
        let mut sessions = Vec::new();
        for _ in 0..4 {
            let mut s = session("a", 1, vec![turn(Speaker::Client, vec![0.0], None)]);
            s.features = vec![7.0];
            sessions.push(s);
        }
        let refs: Vec<&SessionRecord> = sessions.iter().collect();
        let stats = fit_feature_stats(&refs).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        assert_eq!(z_normalize(&[7.0], &stats), vec![0.0]);
    }

    #[test]
    fn stats_ignore_val_and_test_edits() {
        let mut train = session("a", 1, vec![turn(Speaker::Client, vec![0.0], None)]);
        train.features = vec![3.0, 8.0];
        let refs = vec![&train];
        let s1 = fit_feature_stats(&refs).unwrap();
        // "Editing" other splits cannot change stats: they are simply not inputs.
        let s2 = fit_feature_stats(&refs).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn total_score_examples() {
        assert_eq!(total_score(&[3.0; 8]).unwrap(), 24.0);
        assert_eq!(total_score(&[0.0; 8]).unwrap(), 0.0);
        assert_eq!(total_score(&[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 1.0, 1.0]).unwrap(), 8.0);
        assert!(total_score(&[4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(total_score(&[1.0; 7]).is_err());
    }

    #[test]
    fn split_counts_match_cumulative_floor_scheme() {
        let ids: Vec<String> = (0..3599).map(|i| format!("run{i:05}")).collect();
        let m = build_split_manifest(&ids, 42, [0.7, 0.1, 0.2]).unwrap();
        assert_eq!(m.counts(), (2519, 360, 720));

        let ids10: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let m10 = build_split_manifest(&ids10, 42, [0.7, 0.1, 0.2]).unwrap();
        assert_eq!(m10.counts(), (7, 1, 2));
    }

    #[test]
    fn split_manifest_is_deterministic_and_disjoint() {
        let ids: Vec<String> = (0..97).map(|i| format!("c{i:03}")).collect();
        let a = build_split_manifest(&ids, 7, [0.7, 0.1, 0.2]).unwrap();
        let b = build_split_manifest(&ids, 7, [0.7, 0.1, 0.2]).unwrap();
        assert_eq!(a, b);
        // Different seed: different membership with overwhelming probability.
        let c = build_split_manifest(&ids, 8, [0.7, 0.1, 0.2]).unwrap();
        assert_ne!(a.assignments, c.assignments);
        // Covers all ids exactly once (BTreeMap key-uniqueness + count).
        assert_eq!(a.assignments.len(), ids.len());
        // Pure function of sorted ids: shuffled input order changes nothing.
        let mut rev = ids.clone();
        rev.reverse();
        let d = build_split_manifest(&rev, 7, [0.7, 0.1, 0.2]).unwrap();
        assert_eq!(a, d);
    }

    #[test]
    fn split_rejects_duplicates_and_bad_ratios() {
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(build_split_manifest(&dup, 1, [0.7, 0.1, 0.2]).is_err());
        let ids = vec!["a".to_string(), "b".to_string()];
        assert!(build_split_manifest(&ids, 1, [0.7, 0.1, 0.3]).is_err());
    }

    fn write_lines(path: &Path, lines: &[&str]) {
        fs::write(path, lines.join("\n") + "\n").unwrap();
    }

    #[test]
    fn load_empty_file_gives_empty_corpus() {
        let dir = tmpdir("empty");
        let p = dir.join("empty.jsonl");
        fs::write(&p, "").unwrap();
        let corpus = load_dataset(&p).unwrap();
        assert!(corpus.trajectories.is_empty());
    }

    #[test]
    fn load_single_session_line() {
        let dir = tmpdir("single");
        let p = dir.join("one.jsonl");
        write_lines(
            &p,
            &[
                r#"{"d_e": 2, "F": 3}"#,
                r#"{"client_id":"c1","session_index":1,"turns":[{"speaker":"client","embedding":[0.5,-1.5]}],"features":[1.0,2.0,3.0],"labels":null,"latent_items":null}"#,
            ],
        );
        let corpus = load_dataset(&p).unwrap();
        assert_eq!(corpus.d_e, 2);
        assert_eq!(corpus.n_features, 3);
        assert_eq!(corpus.trajectories.len(), 1);
        assert_eq!(corpus.trajectories[0].sessions.len(), 1);
    }

    #[test]
    fn load_rejects_short_label_items_naming_field() {
        let dir = tmpdir("labels");
        let p = dir.join("bad.jsonl");
        write_lines(
            &p,
            &[
                r#"{"d_e": 1, "F": 1}"#,
                r#"{"client_id":"c1","session_index":1,"turns":[{"speaker":"client","embedding":[0.0]}],"features":[1.0],"labels":{"items":[1,1,1,1,1,1,1],"total":7},"latent_items":null}"#,
            ],
        );
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("labels.items"), "{err}");
    }

    #[test]
    fn load_rejects_embedding_length_mismatch_naming_session() {
        let dir = tmpdir("emb");
        let p = dir.join("bad.jsonl");
        write_lines(
            &p,
            &[
                r#"{"d_e": 3, "F": 1}"#,
                r#"{"client_id":"c9","session_index":1,"turns":[{"speaker":"client","embedding":[0.0,1.0]}],"features":[1.0],"labels":null,"latent_items":null}"#,
            ],
        );
        let err = load_dataset(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("c9") && msg.contains("d_e"), "{msg}");
    }

    #[test]
    fn load_rejects_noncontiguous_indices() {
        let dir = tmpdir("contig");
        let p = dir.join("bad.jsonl");
        let line = |idx: u32| {
            format!(
                r#"{{"client_id":"c1","session_index":{idx},"turns":[{{"speaker":"client","embedding":[0.0]}}],"features":[1.0],"labels":null,"latent_items":null}}"#
            )
        };
        write_lines(&p, &[r#"{"d_e": 1, "F": 1}"#, &line(1), &line(3)]);
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("non-contiguous"), "{err}");
    }

    #[test]
    fn load_reports_malformed_line_number() {
        let dir = tmpdir("malformed");
        let p = dir.join("bad.jsonl");
        write_lines(&p, &[r#"{"d_e": 1, "F": 1}"#, "{not json"]);
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().starts_with("line 2"), "{err}");
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tmpdir("roundtrip");
        let p = dir.join("rt.jsonl");
        let corpus = Corpus {
            d_e: 2,
            n_features: 2,
            trajectories: vec![TrajectoryRecord {
                run_id: "c1".into(),
                sessions: vec![SessionRecord {
                    client_id: "c1".into(),
                    session_index: 1,
                    turns: vec![
                        turn(Speaker::Client, vec![0.1, -0.25], Some("hello")),
                        turn(Speaker::Counselor, vec![1.0 / 3.0, 2.0f64.sqrt()], None),
                    ],
                    features: vec![3.25, 9.999999],
                    labels: Some(Labels {
                        items: vec![0.2, 1.4, 0.0, 3.0, 2.6, 0.8, 1.0, 0.4],
                        total: 0.2 + 1.4 + 0.0 + 3.0 + 2.6 + 0.8 + 1.0 + 0.4,
                    }),
                    latent_items: Some(vec![0.0, 1.0, 0.0, 3.0, 3.0, 1.0, 1.0, 0.0]),
                }],
            }],
        };
        save_dataset(&corpus, &p).unwrap();
        let loaded = load_dataset(&p).unwrap();
        assert_eq!(corpus, loaded);
        // And a second save is byte-identical.
        let p2 = dir.join("rt2.jsonl");
        save_dataset(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn sidecar_references_resolve() {
        let dir = tmpdir("sidecar");
        let p = dir.join("refs.jsonl");
        write_sidecar(&sidecar_path(&p), &[vec![1.5f32, -2.0], vec![0.25, 8.0]]).unwrap();
        write_lines(
            &p,
            &[
                r#"{"d_e": 2, "F": 1}"#,
                r#"{"client_id":"c1","session_index":1,"turns":[{"speaker":"client","embedding_ref":1},{"speaker":"client","embedding_ref":0}],"features":[1.0],"labels":null,"latent_items":null}"#,
            ],
        );
        let corpus = load_dataset(&p).unwrap();
        let turns = &corpus.trajectories[0].sessions[0].turns;
        assert_eq!(turns[0].embedding, vec![0.25, 8.0]);
        assert_eq!(turns[1].embedding, vec![1.5, -2.0]);
    }

    #[test]
    fn sidecar_out_of_range_ref_fails() {
        let dir = tmpdir("sidecar-oob");
        let p = dir.join("refs.jsonl");
        write_sidecar(&sidecar_path(&p), &[vec![1.0f32, 2.0]]).unwrap();
        write_lines(
            &p,
            &[
                r#"{"d_e": 2, "F": 1}"#,
                r#"{"client_id":"c1","session_index":1,"turns":[{"speaker":"client","embedding_ref":5}],"features":[1.0],"labels":null,"latent_items":null}"#,
            ],
        );
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }
}
