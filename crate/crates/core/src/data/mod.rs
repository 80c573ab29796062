//! Expert interaction streams, their on-disk format and the slot loader.

mod format;
mod loader;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::maze::{self, generate_maze, next_goal, Action, MazeEnv, MazeError, Observation};

pub use format::{read_dataset, write_dataset, FORMAT_VERSION, MAGIC};
pub use loader::{Loader, SegmentBatch};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("decode failure at byte {pos}: {detail}")]
    Decode { pos: usize, detail: String },
    #[error("format version {found}, expected {expected}")]
    Version { found: u16, expected: u16 },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("data config: {0}")]
    Config(String),
    #[error(transparent)]
    Maze(#[from] MazeError),
}

impl DataError {
    fn io(path: &Path, e: impl std::fmt::Display) -> DataError {
        DataError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    }
}

/// Maze and stream parameters shared by generation and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataConfig {
    pub n_envs: usize,
    pub stream_length: usize,
    pub master_seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_objects: usize,
    pub window_radius: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_envs: 128,
            stream_length: 2000,
            master_seed: 0,
            width: maze::DEFAULT_SIZE,
            height: maze::DEFAULT_SIZE,
            n_objects: maze::DEFAULT_OBJECTS,
            window_radius: maze::DEFAULT_RADIUS,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.stream_length == 0 {
            return Err(DataError::Config("stream_length must be >= 1".into()));
        }
        if self.n_envs == 0 {
            return Err(DataError::Config("n_envs must be >= 1".into()));
        }
        if self.n_objects < 2 {
            return Err(DataError::Config("goal scheduling needs n_objects >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRecord {
    pub t: u32,
    pub goal_id: u8,
    pub window: Vec<u8>,
    pub prev_action: u8,
    pub expert_action: u8,
    pub reached_goal: bool,
    pub new_task: bool,
}

impl StreamRecord {
    pub fn observation(&self) -> Observation {
        Observation {
            window: self.window.clone(),
            goal_id: self.goal_id,
            prev_action: self.prev_action,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u16,
    /// Canonical serialization of the environment at generation time.
    pub env: Vec<u8>,
    pub length: u32,
    pub window_radius: u8,
    pub n_objects: u8,
    pub master_seed: u64,
    pub env_index: u64,
    pub goal_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamDataset {
    pub header: StreamHeader,
    pub records: Vec<StreamRecord>,
}

impl StreamDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn env(&self) -> Result<MazeEnv, DataError> {
        Ok(MazeEnv::from_canonical_bytes(&self.header.env, self.header.window_radius as usize)?)
    }

    pub fn env_hash(&self) -> String {
        hex::encode(Sha256::digest(&self.header.env))
    }

    /// Re-run the environment with the recorded goals and expert actions
    /// and compare every observation.
    pub fn verify_replay(&self) -> Result<(), DataError> {
        let mut env = self.env()?;
        for (i, r) in self.records.iter().enumerate() {
            if r.new_task {
                env.set_goal(r.goal_id)?;
            }
            if env.observe() != r.observation() {
                return Err(DataError::Integrity(format!("observation mismatch at record {i}")));
            }
            let a = Action::from_index(r.expert_action as usize)
                .ok_or_else(|| DataError::Integrity(format!("bad action at record {i}")))?;
            if env.step(a).reached_goal != r.reached_goal {
                return Err(DataError::Integrity(format!("reached flag mismatch at record {i}")));
            }
        }
        Ok(())
    }
}

pub const ENV_STREAM: &str = "train-env";
pub const GOAL_STREAM: &str = "train-goal";

/// Expert-driven interaction stream of exactly `cfg.stream_length`
/// records in one persistent maze. A new goal is issued on the step after
/// each arrival; the stream may end mid-task.
pub fn generate_stream(cfg: &DataConfig, env_index: u64) -> Result<StreamDataset, DataError> {
    cfg.validate()?;
    let env_seed = maze::derive_seed(cfg.master_seed, ENV_STREAM, env_index);
    let goal_seed = maze::derive_seed(cfg.master_seed, GOAL_STREAM, env_index);
    let env = generate_maze(env_seed, cfg.width, cfg.height, cfg.n_objects)?.with_radius(cfg.window_radius);
    let header = StreamHeader {
        version: FORMAT_VERSION,
        env: env.canonical_bytes(),
        length: cfg.stream_length as u32,
        window_radius: cfg.window_radius as u8,
        n_objects: cfg.n_objects as u8,
        master_seed: cfg.master_seed,
        env_index,
        goal_seed,
    };
    let records = expert_stream(env, goal_seed, cfg.stream_length)?;
    Ok(StreamDataset { header, records })
}

fn expert_stream(mut env: MazeEnv, goal_seed: u64, length: usize) -> Result<Vec<StreamRecord>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(goal_seed);
    let mut goal = next_goal(&mut rng, env.n_objects(), None)?;
    env.set_goal(goal)?;
    let mut new_task = true;
    let mut records = Vec::with_capacity(length);
    for t in 0..length {
        let obs = env.observe();
        let action = env.expert_action(goal)?;
        let out = env.step(action);
        records.push(StreamRecord {
            t: t as u32,
            goal_id: goal,
            window: obs.window,
            prev_action: obs.prev_action,
            expert_action: action as u8,
            reached_goal: out.reached_goal,
            new_task,
        });
        new_task = false;
        if out.reached_goal {
            goal = next_goal(&mut rng, env.n_objects(), Some(goal))?;
            env.set_goal(goal)?;
            new_task = true;
        }
    }
    Ok(records)
}

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub env_index: u64,
    pub env_seed: u64,
    pub length: u32,
    pub env_hash: String,
    pub file_sha256: String,
}

pub fn stream_file_name(env_index: u64) -> String {
    format!("stream_{env_index:05}.cons")
}

pub fn write_index(dir: &Path, entries: &[IndexEntry]) -> Result<(), DataError> {
    let path = dir.join(INDEX_FILE);
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(&path)
        .map_err(|e| DataError::io(&path, e))?;
    for e in entries {
        w.serialize(e).map_err(|e| DataError::io(&path, e))?;
    }
    w.flush().map_err(|e| DataError::io(&path, e))
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>, DataError> {
    let path = dir.join(INDEX_FILE);
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(&path)
        .map_err(|e| DataError::io(&path, e))?;
    r.deserialize()
        .collect::<Result<Vec<IndexEntry>, _>>()
        .map_err(|e| DataError::io(&path, e))
}

/// Generate every stream of `cfg` into `dir` and write the index.
///
/// Refuses to touch a directory that already holds dataset files unless
/// `force` is set. Output bytes depend only on `cfg`.
pub fn generate_dataset(cfg: &DataConfig, dir: &Path, force: bool) -> Result<Vec<IndexEntry>, DataError> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let existing: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().is_some_and(|n| n == INDEX_FILE)
                || p.extension().is_some_and(|x| x == "cons")
        })
        .collect();
    if !existing.is_empty() {
        if !force {
            return Err(DataError::Config(format!(
                "{} already holds {} dataset files; pass --force to overwrite",
                dir.display(),
                existing.len()
            )));
        }
        for p in existing {
            std::fs::remove_file(&p).map_err(|e| DataError::io(&p, e))?;
        }
    }
    let entries = (0..cfg.n_envs as u64)
        .into_par_iter()
        .map(|i| -> Result<IndexEntry, DataError> {
            let ds = generate_stream(cfg, i)?;
            let file = stream_file_name(i);
            let bytes = format::encode(&ds);
            let path = dir.join(&file);
            std::fs::write(&path, &bytes).map_err(|e| DataError::io(&path, e))?;
            Ok(IndexEntry {
                file,
                env_index: i,
                env_seed: maze::derive_seed(cfg.master_seed, ENV_STREAM, i),
                length: ds.header.length,
                env_hash: ds.env_hash(),
                file_sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_index(dir, &entries)?;
    Ok(entries)
}

/// Load every stream listed in the index, checking file hashes.
pub fn load_dataset(dir: &Path) -> Result<Vec<StreamDataset>, DataError> {
    let index = read_index(dir)?;
    if index.is_empty() {
        return Err(DataError::Integrity(format!("{} lists no streams", dir.join(INDEX_FILE).display())));
    }
    index
        .par_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let bytes = std::fs::read(&path).map_err(|err| DataError::io(&path, err))?;
            if hex::encode(Sha256::digest(&bytes)) != e.file_sha256 {
                return Err(DataError::Integrity(format!("{} does not match its index hash", e.file)));
            }
            let ds = format::decode(&bytes)?;
            if ds.header.length != e.length {
                return Err(DataError::Integrity(format!("{} length differs from index", e.file)));
            }
            Ok(ds)
        })
        .collect()
}

/// SHA-256 of the index file.
pub fn index_hash(dir: &Path) -> Result<String, DataError> {
    let path = dir.join(INDEX_FILE);
    let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests;
