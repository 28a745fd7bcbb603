//! Self-describing binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"PQT1"
//! version  u32
//! seed     u64           training seed
//! cfg_len  u32           then cfg_len bytes of ModelConfig JSON
//! stat_len u32           then stat_len bytes of FeatureStats JSON
//! n_params u32
//! per parameter:
//!   name_len u32, name bytes, rank u32, dims u32×rank, f64×numel data
//! ```

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::data::FeatureStats;
use crate::model::Model;

const MAGIC: &[u8; 4] = b"PQT1";
const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io { path: PathBuf, source: std::io::Error },
    Format { msg: String },
    ParamMismatch { name: String, msg: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CheckpointError::Format { msg } => write!(f, "checkpoint format: {msg}"),
            CheckpointError::ParamMismatch { name, msg } => {
                write!(f, "checkpoint parameter `{name}`: {msg}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    stats: &FeatureStats,
    seed: u64,
) -> Result<(), CheckpointError> {
    let io_err = |e: std::io::Error| CheckpointError::Io { path: path.to_path_buf(), source: e };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&seed.to_le_bytes()).map_err(io_err)?;
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&cfg).map_err(io_err)?;
    let st = serde_json::to_vec(stats).expect("stats serialize");
    w.write_all(&(st.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&st).map_err(io_err)?;
    w.write_all(&(model.store.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in model.store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &dim in &tensor.shape {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
        }
        for v in &tensor.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub stats: FeatureStats,
    pub seed: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let io_err = |e: std::io::Error| CheckpointError::Io { path: path.to_path_buf(), source: e };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |r: &mut BufReader<fs::File>| -> Result<u32, CheckpointError> {
        r.read_exact(&mut u32buf)
            .map_err(|_| CheckpointError::Format { msg: "truncated".into() })?;
        Ok(u32::from_le_bytes(u32buf))
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format { msg: "bad magic".into() });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Format { msg: format!("unsupported version {version}") });
    }
    r.read_exact(&mut u64buf).map_err(io_err)?;
    let seed = u64::from_le_bytes(u64buf);

    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(io_err)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| CheckpointError::Format { msg: format!("config: {e}") })?;

    let stat_len = read_u32(&mut r)? as usize;
    let mut stat_bytes = vec![0u8; stat_len];
    r.read_exact(&mut stat_bytes).map_err(io_err)?;
    let stats: FeatureStats = serde_json::from_slice(&stat_bytes)
        .map_err(|e| CheckpointError::Format { msg: format!("stats: {e}") })?;

    let mut model = Model::new(config, seed);
    let n_params = read_u32(&mut r)? as usize;
    if n_params != model.store.len() {
        return Err(CheckpointError::Format {
            msg: format!(
                "parameter count {n_params} does not match the config's layout ({})",
                model.store.len()
            ),
        });
    }
    for pi in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Format { msg: "non-utf8 parameter name".into() })?;
        let expected_name = model.store.iter().nth(pi).unwrap().0.to_string();
        if name != expected_name {
            return Err(CheckpointError::ParamMismatch {
                name,
                msg: format!("expected `{expected_name}` at position {pi}"),
            });
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let tensor = model.store.tensors_mut().get_mut(pi).unwrap();
        if shape != tensor.shape {
            return Err(CheckpointError::ParamMismatch {
                name,
                msg: format!("shape {shape:?} does not match layout {:?}", tensor.shape),
            });
        }
        let mut bytes = vec![0u8; tensor.numel() * 8];
        r.read_exact(&mut bytes).map_err(io_err)?;
        for (v, chunk) in tensor.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(LoadedCheckpoint { model, stats, seed })
}
