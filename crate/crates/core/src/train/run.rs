use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::{train_step, Adam, Mode, SlotStateRegistry, TrainError, TrainerConfig};
use crate::data::{Loader, StreamDataset};
use crate::lin_attn::MemoryState;
use crate::maze::derive_seed;
use crate::model::{Checkpoint, ModelConfig, PolicyNet, Progress};
use crate::numerics::{DType, Scalar};

pub const LOG_FILE: &str = "train_log.csv";
pub const LATEST: &str = "latest.ckpt";
pub const FINAL: &str = "final.ckpt";

pub const LOG_HEADER: [&str; 11] = [
    "step",
    "epoch",
    "batch",
    "loss",
    "lr",
    "grad_norm",
    "clipped_norm",
    "graph_nodes",
    "slot_norm_mean",
    "slot_norms",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub epoch: u32,
    pub batch: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub graph_nodes: usize,
    pub slot_norms: Vec<f64>,
    pub wall_ms: f64,
}

impl TrainLogRow {
    fn record(&self) -> Vec<String> {
        let mean = self.slot_norms.iter().sum::<f64>() / self.slot_norms.len().max(1) as f64;
        vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.batch.to_string(),
            format!("{:.9}", self.loss),
            format!("{:e}", self.lr),
            format!("{:.6e}", self.grad_norm),
            format!("{:.6e}", self.clipped_norm),
            self.graph_nodes.to_string(),
            format!("{mean:.6e}"),
            self.slot_norms
                .iter()
                .map(|n| format!("{n:.4e}"))
                .collect::<Vec<_>>()
                .join(";"),
            format!("{:.1}", self.wall_ms),
        ]
    }
}

/// Interrupt and resume controls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunControl {
    /// Continue from `latest.ckpt` when it exists.
    pub resume: bool,
    /// Stop (after checkpointing) once this many optimizer steps are done.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: Option<PathBuf>,
    pub param_hash: String,
    pub total_steps: u64,
    pub global_step: u64,
    /// Loss of every step run by this invocation.
    pub losses: Vec<f64>,
    /// Mean loss of each epoch completed by this invocation.
    pub epoch_losses: Vec<f64>,
    pub completed: bool,
}

/// Fingerprint of the trainer, model and dataset.
pub fn run_identity(cfg: &TrainerConfig, model: &ModelConfig, streams: &[StreamDataset]) -> String {
    let mut t = cfg.to_owned();
    t.checkpoint_every = 0;
    let mut text = model.to_text();
    t.write(&mut text);
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for s in streams {
        h.update(s.env_hash().as_bytes());
        h.update(s.header.goal_seed.to_le_bytes());
        h.update((s.len() as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Train from scratch (or resume) and write checkpoints and the log into
/// `out_dir`.
pub fn run_training(
    cfg: &TrainerConfig,
    model: &ModelConfig,
    streams: &[StreamDataset],
    out_dir: &Path,
    run_config: &str,
    control: RunControl,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    match cfg.precision {
        DType::F32 => run_typed::<f32>(cfg, model, streams, out_dir, run_config, control),
        DType::F64 => run_typed::<f64>(cfg, model, streams, out_dir, run_config, control),
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

struct LogWriter {
    path: PathBuf,
    w: csv::Writer<std::fs::File>,
}

impl LogWriter {
    /// Open the log, keeping only the first `keep` rows of an existing one.
    fn open(path: &Path, keep: Option<u64>) -> Result<LogWriter, TrainError> {
        let kept: Vec<csv::StringRecord> = match keep {
            Some(n) if path.exists() => {
                let mut r = csv::Reader::from_path(path).map_err(|e| io(path, e))?;
                r.records()
                    .take(n as usize)
                    .collect::<Result<_, _>>()
                    .map_err(|e| io(path, e))?
            }
            _ => Vec::new(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
        w.write_record(LOG_HEADER).map_err(|e| io(path, e))?;
        for r in &kept {
            w.write_record(r).map_err(|e| io(path, e))?;
        }
        Ok(LogWriter {
            path: path.to_path_buf(),
            w,
        })
    }

    fn push(&mut self, row: &TrainLogRow) -> Result<(), TrainError> {
        self.w.write_record(row.record()).map_err(|e| io(&self.path, e))
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        self.w.flush().map_err(|e| io(&self.path, e))
    }
}

struct RunState<F> {
    net: PolicyNet<F>,
    opt: Adam<F>,
    registry: SlotStateRegistry<F>,
    progress: Progress,
}

impl<F: Scalar> RunState<F> {
    fn checkpoint(&self, run_config: &str, identity: &str) -> Checkpoint {
        let mut ck = Checkpoint::from_net(&self.net, run_config);
        ck.identity = identity.to_string();
        ck.moments = Some(self.opt.to_moments());
        ck.slots = Some(self.registry.states.iter().map(|s| Some(cast_state(s))).collect());
        ck.progress = Some(self.progress);
        ck
    }

    fn restore(ck: &Checkpoint, slots: usize) -> Result<RunState<F>, TrainError> {
        let net: PolicyNet<F> = ck.to_net()?;
        let opt = match &ck.moments {
            Some(m) => Adam::from_moments(m),
            None => return Err(TrainError::Mismatch("checkpoint holds no optimizer state".into())),
        };
        let states = match &ck.slots {
            Some(s) if s.len() == slots => s
                .iter()
                .map(|x| x.as_ref().map(cast_state).unwrap_or_else(|| net.zero_state()))
                .collect(),
            _ => return Err(TrainError::Mismatch("checkpoint slot registry does not match".into())),
        };
        let progress = ck
            .progress
            .ok_or_else(|| TrainError::Mismatch("checkpoint holds no progress".into()))?;
        Ok(RunState {
            net,
            opt,
            registry: SlotStateRegistry { states },
            progress,
        })
    }
}

fn cast_state<F: Scalar, G: Scalar>(s: &MemoryState<F>) -> MemoryState<G> {
    MemoryState {
        layers: s
            .layers
            .iter()
            .map(|l| crate::lin_attn::LayerMemory {
                memory: l.memory.cast(),
                normalizer: l.normalizer.as_ref().map(|z| z.cast()),
            })
            .collect(),
        step_count: s.step_count,
    }
}

fn run_typed<F: Scalar>(
    cfg: &TrainerConfig,
    model: &ModelConfig,
    streams: &[StreamDataset],
    out_dir: &Path,
    run_config: &str,
    control: RunControl,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let loader = Loader::new(streams, cfg.slots, cfg.seg_len, derive_seed(cfg.seed, "loader", 0))?;
    let per_epoch: Vec<u64> = (0..cfg.epochs).map(|e| loader.batches_in_epoch(e)).collect();
    let total: u64 = per_epoch.iter().sum();
    let identity = run_identity(cfg, model, streams);
    let latest = out_dir.join(LATEST);

    let resumed = control.resume && latest.exists();
    let mut st: RunState<F> = if resumed {
        let ck = Checkpoint::load(&latest)?;
        if ck.identity != identity {
            return Err(TrainError::Mismatch(format!(
                "{} was written by a run with a different config or dataset",
                latest.display()
            )));
        }
        log::info!("resuming at epoch {} batch {}", ck.progress.map_or(0, |p| p.epoch), ck.progress.map_or(0, |p| p.batch));
        RunState::restore(&ck, cfg.slots)?
    } else {
        let net = PolicyNet::<F>::new(*model, derive_seed(cfg.seed, "init", 0))?;
        RunState {
            opt: Adam::new(net.params()),
            registry: SlotStateRegistry::zeros(&net, cfg.slots),
            net,
            progress: Progress {
                epoch: 0,
                batch: 0,
                global_step: 0,
            },
        }
    };
    let mut log = LogWriter::open(&out_dir.join(LOG_FILE), resumed.then_some(st.progress.global_step))?;
    let mut losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let save = |st: &RunState<F>, path: &Path| -> Result<(), TrainError> {
        st.checkpoint(run_config, &identity).save(path).map_err(|e| io(path, e))
    };

    while st.progress.epoch < cfg.epochs {
        let epoch = st.progress.epoch;
        if st.progress.batch == 0 {
            // every stream restarts at an epoch boundary
            st.registry.reset();
            log::info!("epoch {epoch}: {} batches, states reset", per_epoch[epoch as usize]);
        }
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for batch in loader.epoch(epoch).skip(st.progress.batch as usize) {
            let started = Instant::now();
            let lr = super::lr_at(st.progress.global_step, total, cfg.lr);
            let rep = train_step(&mut st.net, &mut st.opt, &mut st.registry, &batch, cfg.mode, cfg.clip, lr)?;
            if cfg.mode == Mode::Stateless {
                debug_assert!(st.registry.all_zero());
            }
            log.push(&TrainLogRow {
                step: st.progress.global_step,
                epoch,
                batch: batch.index,
                loss: rep.loss,
                lr,
                grad_norm: rep.grad_norm,
                clipped_norm: rep.clipped_norm,
                graph_nodes: rep.graph_nodes,
                slot_norms: rep.slot_norms,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            })?;
            losses.push(rep.loss);
            epoch_sum += rep.loss;
            epoch_n += 1;
            st.progress.global_step += 1;
            st.progress.batch = batch.index + 1;
            if st.progress.global_step.is_multiple_of(50) {
                log::info!("step {}/{} loss {:.4}", st.progress.global_step, total, rep.loss);
            }
            let stop = control.stop_after == Some(st.progress.global_step);
            if stop || (cfg.checkpoint_every > 0 && st.progress.global_step.is_multiple_of(cfg.checkpoint_every)) {
                log.flush()?;
                save(&st, &latest)?;
            }
            if stop {
                return Ok(TrainOutcome {
                    final_checkpoint: None,
                    param_hash: st.net.param_hash(),
                    total_steps: total,
                    global_step: st.progress.global_step,
                    losses,
                    epoch_losses,
                    completed: false,
                });
            }
        }
        if epoch_n > 0 {
            epoch_losses.push(epoch_sum / epoch_n as f64);
        }
        st.progress.epoch += 1;
        st.progress.batch = 0;
        log.flush()?;
        save(&st, &out_dir.join(format!("epoch_{:03}.ckpt", epoch)))?;
        save(&st, &latest)?;
    }
    log.flush()?;
    let final_path = out_dir.join(FINAL);
    Checkpoint::from_net(&st.net, run_config)
        .save(&final_path)
        .map_err(|e| io(&final_path, e))?;
    Ok(TrainOutcome {
        final_checkpoint: Some(final_path),
        param_hash: st.net.param_hash(),
        total_steps: total,
        global_step: st.progress.global_step,
        losses,
        epoch_losses,
        completed: true,
    })
}
