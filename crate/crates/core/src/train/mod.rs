//! Stateful and stateless training over slot-affine segment batches.
//!
//! Both protocols run the same step: bind the incoming per-slot states as
//! constants, run the segment, take the masked NLL, backpropagate within
//! the segment only, clip and apply Adam. They differ only in what the
//! incoming state is: the previous segment's final state (stateful) or
//! zero (stateless).

mod optim;
mod run;

use crate::config::text::{write_section, ConfigError, Section};
use crate::data::{DataError, SegmentBatch};
use crate::lin_attn::MemoryState;
use crate::model::{ModelError, PolicyNet};
use crate::numerics::{log_softmax_at, DType, Graph, NumericsError, Scalar, Tensor};

pub use optim::{clip_global_norm, global_norm, lr_at, Adam};
pub use run::{run_identity, run_training, RunControl, TrainLogRow, TrainOutcome, FINAL, LATEST, LOG_FILE, LOG_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("trainer config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}: {detail}")]
    Numeric {
        what: &'static str,
        epoch: u32,
        batch: u64,
        detail: String,
    },
    #[error("refusing to resume: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Stateful,
    Stateless,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Stateful => "stateful",
            Mode::Stateless => "stateless",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "stateful" => Some(Mode::Stateful),
            "stateless" => Some(Mode::Stateless),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub seg_len: usize,
    pub slots: usize,
    pub epochs: u32,
    pub lr: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub seed: u64,
    pub precision: DType,
    /// Mid-epoch checkpoint interval in optimizer steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mode: Mode::Stateful,
            seg_len: 64,
            slots: 8,
            epochs: 10,
            lr: 1e-4,
            clip: Some(1.0),
            seed: 0,
            precision: DType::F32,
            checkpoint_every: 0,
        }
    }
}

pub fn parse_dtype(s: &str) -> Option<DType> {
    match s {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.seg_len == 0 || self.slots == 0 || self.epochs == 0 {
            return Err(TrainError::Config("seg_len, slots and epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::Config(format!("clip {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn read(s: &mut Section) -> Result<TrainerConfig, ConfigError> {
        let d = TrainerConfig::default();
        let clip: f64 = s.get("clip", d.clip.unwrap_or(0.0))?;
        Ok(TrainerConfig {
            mode: s.get_with("mode", d.mode, Mode::parse)?,
            seg_len: s.get("segment_length", d.seg_len)?,
            slots: s.get("slots", d.slots)?,
            epochs: s.get("epochs", d.epochs)?,
            lr: s.get("lr", d.lr)?,
            clip: (clip > 0.0).then_some(clip),
            seed: s.get("seed", d.seed)?,
            precision: s.get_with("precision", d.precision, parse_dtype)?,
            checkpoint_every: s.get("checkpoint_every", d.checkpoint_every)?,
        })
    }

    pub fn write(&self, out: &mut String) {
        write_section(
            out,
            "train",
            &[
                ("mode", self.mode.name().into()),
                ("segment_length", self.seg_len.to_string()),
                ("slots", self.slots.to_string()),
                ("epochs", self.epochs.to_string()),
                ("lr", format!("{:e}", self.lr)),
                ("clip", self.clip.unwrap_or(0.0).to_string()),
                ("seed", self.seed.to_string()),
                ("precision", self.precision.name().into()),
                ("checkpoint_every", self.checkpoint_every.to_string()),
            ],
        );
    }
}

/// Mean over unmasked rows of `-log softmax(logits)[target]`.
pub fn nll_loss<F: Scalar>(logits: &Tensor<F>, targets: &[u8], mask: &[bool]) -> Result<f64, NumericsError> {
    let s = logits.shape();
    if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
        return Err(NumericsError::Shape {
            op: "nll_loss",
            detail: format!("logits {s:?}, {} targets, {} mask", targets.len(), mask.len()),
        });
    }
    let c = s[1];
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, row) in logits.data().chunks(c).enumerate() {
        if mask[i] {
            total -= log_softmax_at(row, targets[i] as usize).as_f64();
            n += 1;
        }
    }
    if n == 0 {
        return Err(NumericsError::Contract("nll over an all-masked batch".into()));
    }
    Ok(total / n as f64)
}

/// Per-slot carried state between batches. Holds values only.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotStateRegistry<F> {
    pub states: Vec<MemoryState<F>>,
}

impl<F: Scalar> SlotStateRegistry<F> {
    pub fn zeros(net: &PolicyNet<F>, slots: usize) -> Self {
        SlotStateRegistry {
            states: vec![net.zero_state(); slots],
        }
    }

    pub fn reset(&mut self) {
        for s in &mut self.states {
            *s = MemoryState {
                layers: s
                    .layers
                    .iter()
                    .map(|l| crate::lin_attn::LayerMemory {
                        memory: Tensor::zeros(l.memory.shape()),
                        normalizer: l.normalizer.as_ref().map(|z| Tensor::zeros(z.shape())),
                    })
                    .collect(),
                step_count: 0,
            };
        }
    }

    pub fn all_zero(&self) -> bool {
        self.states.iter().all(|s| s.is_zero())
    }

    /// Incoming states for `batch` under `mode`.
    pub fn incoming(&self, net: &PolicyNet<F>, batch: &SegmentBatch, mode: Mode) -> Vec<MemoryState<F>> {
        (0..batch.slots())
            .map(|s| {
                let carry = mode == Mode::Stateful && !batch.fresh_stream[s] && batch.streams[s].is_some();
                if carry {
                    self.states[s].clone()
                } else {
                    net.zero_state()
                }
            })
            .collect()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.norm_sum_of_heads()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm after clipping.
    pub clipped_norm: f64,
    pub lr: f64,
    pub graph_nodes: usize,
    pub slot_norms: Vec<f64>,
}

/// Loss and parameter gradients of one batch under `mode`, leaving the
/// network untouched. Returns the outgoing states too.
pub fn batch_gradients<F: Scalar>(
    net: &PolicyNet<F>,
    batch: &SegmentBatch,
    incoming: &[MemoryState<F>],
) -> Result<(f64, Vec<Tensor<F>>, Vec<MemoryState<F>>, usize), ModelError> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g, true);
    let refs: Vec<&MemoryState<F>> = incoming.iter().collect();
    let states = net.bind_states(&mut g, &refs)?;
    let (logits, out) = net.forward_graph(&mut g, &vars, &batch.inputs, &states, true)?;
    let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
    let loss = g.masked_nll(logits, &targets, &batch.mask)?;
    let mut grads = g.backward(loss)?;
    let gs = vars
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let next = net.collect_states(&g, &out, &refs, batch.steps())?;
    Ok((g.value(loss).item().as_f64(), gs, next, g.len()))
}

/// One optimizer step on `batch`.
pub fn train_step<F: Scalar>(
    net: &mut PolicyNet<F>,
    opt: &mut Adam<F>,
    registry: &mut SlotStateRegistry<F>,
    batch: &SegmentBatch,
    mode: Mode,
    clip: Option<f64>,
    lr: f64,
) -> Result<StepReport, TrainError> {
    let numeric = |what: &'static str, detail: String| TrainError::Numeric {
        what,
        epoch: batch.epoch,
        batch: batch.index,
        detail,
    };
    let incoming = registry.incoming(net, batch, mode);
    let (loss, mut grads, outgoing, nodes) = batch_gradients(net, batch, &incoming).map_err(|e| match e {
        ModelError::Numeric { layer, detail } => {
            numeric("activation", format!("layer {layer}: {detail}; slots {:?}", batch.streams))
        }
        ModelError::Numerics(NumericsError::NonFinite { op }) => numeric("value", op),
        other => TrainError::Model(other),
    })?;
    if !loss.is_finite() {
        return Err(numeric("loss", format!("{loss}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(numeric("gradient", format!("parameter {}", net.specs()[i].name)));
    }
    let grad_norm = global_norm(&grads);
    let clipped_norm = match clip {
        Some(c) => clip_global_norm(&mut grads, c),
        None => grad_norm,
    };
    opt.update(net.params_mut(), &grads, lr);
    if !net.is_finite() {
        return Err(numeric("parameter", "after update".into()));
    }
    match mode {
        Mode::Stateful => {
            for (s, st) in outgoing.into_iter().enumerate() {
                if batch.streams[s].is_some() {
                    registry.states[s] = st;
                }
            }
        }
        Mode::Stateless => registry.reset(),
    }
    Ok(StepReport {
        loss,
        grad_norm,
        clipped_norm,
        lr,
        graph_nodes: nodes,
        slot_norms: registry.norms(),
    })
}

/// Loss of each active slot of `batch` at fixed weights.
pub fn slot_losses<F: Scalar>(
    net: &PolicyNet<F>,
    batch: &SegmentBatch,
    incoming: &[MemoryState<F>],
) -> Result<(Vec<Option<f64>>, Vec<MemoryState<F>>), ModelError> {
    let refs: Vec<&MemoryState<F>> = incoming.iter().collect();
    let (logits, next) = net.forward_segment(&refs, &batch.inputs, true)?;
    let b = batch.slots();
    let losses = (0..b)
        .map(|s| {
            let rows: Vec<usize> = (0..batch.steps()).map(|t| t * b + s).filter(|&r| batch.mask[r]).collect();
            if rows.is_empty() {
                return None;
            }
            let total: f64 = rows
                .iter()
                .map(|&r| -log_softmax_at(&logits.data()[r * 4..r * 4 + 4], batch.targets[r] as usize).as_f64())
                .sum();
            Some(total / rows.len() as f64)
        })
        .collect();
    Ok((losses, next))
}
