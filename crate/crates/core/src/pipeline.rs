//! End-to-end steps driven by a [`RunConfig`]: dataset generation,
//! training, evaluation, and the stateful/stateless twin experiment.

use std::path::{Path, PathBuf};

use crate::config::text::ConfigError;
use crate::config::RunConfig;
use crate::data::{self, DataConfig, DataError, IndexEntry, StreamDataset, INDEX_FILE};
use crate::eval::{self, EvalError, EvalReport, NetPolicy, ReportMeta, Rollout};
use crate::model::{Checkpoint, ModelError, PolicyNet};
use crate::numerics::{DType, Scalar};
use crate::train::{self, Mode, RunControl, TrainError, TrainOutcome};

pub const RUN_CONFIG_FILE: &str = "run_config.txt";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

fn io(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<Vec<IndexEntry>, PipelineError> {
    Ok(data::generate_dataset(&cfg.data, &cfg.paths.data_dir, force)?)
}

/// Check that loaded streams are exactly what `cfg` would generate.
pub fn check_dataset(streams: &[StreamDataset], cfg: &DataConfig) -> Result<(), PipelineError> {
    if streams.len() != cfg.n_envs {
        return Err(PipelineError::Mismatch(format!(
            "dataset has {} streams, config asks for {}",
            streams.len(),
            cfg.n_envs
        )));
    }
    for (i, s) in streams.iter().enumerate() {
        let h = &s.header;
        let env = s.env()?;
        let same = h.env_index == i as u64
            && h.master_seed == cfg.master_seed
            && h.length as usize == cfg.stream_length
            && h.window_radius as usize == cfg.window_radius
            && h.n_objects as usize == cfg.n_objects
            && env.width() == cfg.width
            && env.height() == cfg.height;
        if !same {
            return Err(PipelineError::Mismatch(format!(
                "stream {i} was generated with different maze or data settings"
            )));
        }
    }
    Ok(())
}

pub fn load_data(cfg: &RunConfig) -> Result<Vec<StreamDataset>, PipelineError> {
    let streams = data::load_dataset(&cfg.paths.data_dir)?;
    check_dataset(&streams, &cfg.data)?;
    Ok(streams)
}

pub fn train(cfg: &RunConfig, control: RunControl) -> Result<TrainOutcome, PipelineError> {
    let streams = load_data(cfg)?;
    train_on(cfg, &streams, control)
}

pub fn train_on(cfg: &RunConfig, streams: &[StreamDataset], control: RunControl) -> Result<TrainOutcome, PipelineError> {
    let dir = &cfg.paths.run_dir;
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let text = cfg.to_text();
    let p = dir.join(RUN_CONFIG_FILE);
    std::fs::write(&p, &text).map_err(|e| io(&p, e))?;
    Ok(train::run_training(&cfg.train, &cfg.model, streams, dir, &text, control)?)
}

/// Training protocol recorded in a checkpoint's embedded run config.
pub fn checkpoint_mode(ck: &Checkpoint) -> String {
    RunConfig::from_text(&ck.run_config)
        .map(|c| c.train.mode.name().to_string())
        .unwrap_or_else(|_| "unknown".into())
}

/// Roll the checkpoint out in the evaluation mazes and write the report
/// and CSVs into `cfg.paths.eval_dir`.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<(EvalReport, Rollout), PipelineError> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.model != cfg.model {
        return Err(PipelineError::Mismatch(format!(
            "checkpoint model config (hash {}) differs from the eval config's (hash {})",
            &ck.model.hash()[..12],
            &cfg.model.hash()[..12]
        )));
    }
    let envs = eval::eval_envs(&cfg.data, &cfg.eval)?;
    let index_path = cfg.paths.data_dir.join(INDEX_FILE);
    if index_path.exists() {
        eval::check_disjoint(&envs, &data::read_index(&cfg.paths.data_dir)?)?;
    } else {
        log::warn!("no training index at {}; skipping the disjointness check", index_path.display());
    }
    let meta = ReportMeta {
        policy: "greedy".into(),
        train_mode: checkpoint_mode(&ck),
        checkpoint: String::new(),
        config: cfg.to_text(),
        config_hash: cfg.hash(),
    };
    let (report, ro) = match cfg.train.precision {
        DType::F32 => run_eval::<f32>(&ck, envs, cfg, meta)?,
        DType::F64 => run_eval::<f64>(&ck, envs, cfg, meta)?,
    };
    eval::write_outputs(&cfg.paths.eval_dir, &report, &ro)?;
    Ok((report, ro))
}

fn run_eval<F: Scalar>(
    ck: &Checkpoint,
    envs: Vec<crate::maze::MazeEnv>,
    cfg: &RunConfig,
    mut meta: ReportMeta,
) -> Result<(EvalReport, Rollout), PipelineError> {
    let net: PolicyNet<F> = ck.to_net()?;
    meta.checkpoint = net.param_hash();
    let ro = eval::rollout(&mut NetPolicy::new(&net), envs, &cfg.eval)?;
    Ok((EvalReport::build(&ro, &cfg.eval, meta)?, ro))
}

/// Stateful and stateless twins over several training seeds, sharing one
/// dataset. Every stage is cached under `root` and resumed when rerun.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub root: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub mode: Mode,
    pub seed: u64,
    pub report: EvalReport,
}

impl Experiment {
    pub fn arm_config(&self, mode: Mode, seed: u64) -> RunConfig {
        let mut c = self.base.clone();
        c.train.mode = mode;
        c.train.seed = seed;
        c.paths.data_dir = self.root.join("data");
        c.paths.run_dir = self.root.join(format!("seed{seed}-{}", mode.name()));
        c.paths.eval_dir = c.paths.run_dir.join("eval");
        c
    }

    fn data(&self) -> Result<Vec<StreamDataset>, PipelineError> {
        let cfg = self.arm_config(Mode::Stateful, 0);
        if cfg.paths.data_dir.join(INDEX_FILE).exists() {
            if let Ok(s) = load_data(&cfg) {
                return Ok(s);
            }
            log::warn!("cached dataset is unusable; regenerating");
        }
        log::info!("generating {} streams into {}", cfg.data.n_envs, cfg.paths.data_dir.display());
        gen_data(&cfg, true)?;
        load_data(&cfg)
    }

    /// Whether `text` describes the same run as `cfg`, wherever its
    /// outputs were written.
    fn same_run(text: &str, cfg: &RunConfig) -> bool {
        RunConfig::from_text(text).is_ok_and(|mut c| {
            c.paths = cfg.paths.clone();
            c == *cfg
        })
    }

    fn cached_report(cfg: &RunConfig, final_ckpt: &Path) -> Option<EvalReport> {
        let report = EvalReport::load(&cfg.paths.eval_dir.join(eval::REPORT_FILE)).ok()?;
        let net: PolicyNet<f32> = Checkpoint::load(final_ckpt).ok()?.to_net().ok()?;
        (Self::same_run(&report.config, cfg) && report.checkpoint == net.param_hash()).then_some(report)
    }

    pub fn run(&self) -> Result<Vec<ArmResult>, PipelineError> {
        let streams = self.data()?;
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for mode in [Mode::Stateful, Mode::Stateless] {
                let cfg = self.arm_config(mode, seed);
                let final_ckpt = cfg.paths.run_dir.join(train::FINAL);
                let trained = Checkpoint::load(&final_ckpt).is_ok_and(|c| Self::same_run(&c.run_config, &cfg));
                if !trained {
                    log::info!("training seed {seed} {}", mode.name());
                    let started = std::time::Instant::now();
                    train_on(
                        &cfg,
                        &streams,
                        RunControl {
                            resume: true,
                            stop_after: None,
                        },
                    )?;
                    log::info!("trained in {:.1} min", started.elapsed().as_secs_f64() / 60.0);
                }
                let report = match Self::cached_report(&cfg, &final_ckpt) {
                    Some(r) => r,
                    None => evaluate(&cfg, &final_ckpt)?.0,
                };
                out.push(ArmResult { mode, seed, report });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_key_ignores_output_paths() {
        let cfg = RunConfig::default();
        let mut moved = cfg.clone();
        moved.paths.run_dir = "/elsewhere/run".into();
        moved.paths.data_dir = "/elsewhere/data".into();
        assert!(Experiment::same_run(&moved.to_text(), &cfg));
        let mut other = cfg.clone();
        other.train.lr = 2e-4;
        assert!(!Experiment::same_run(&other.to_text(), &cfg));
        assert!(!Experiment::same_run("not a config", &cfg));
    }
}
