//! Kernelized linear attention with an explicit, caller-owned memory state.
//!
//! The cell never resets or detaches its state on its own. Callers pass the
//! incoming state into [`LinearAttentionCell::forward_chunk`] and receive the
//! outgoing state back, which is what makes chunked execution with carryover
//! exact: running a sequence in pieces and threading the state through gives
//! the same outputs as running it whole.

pub mod kernel;

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::numerics::{ElemFn, Graph, NumericsError, Scalar, StatePart, Tensor, Var};
pub use kernel::CellGeometry;

/// Floor for the normalizer denominator.
pub const NORMALIZER_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureMap {
    /// Sign-indefinite; only for hand-checkable tests.
    Identity,
    EluPlusOne,
}

impl FeatureMap {
    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            FeatureMap::Identity => x,
            FeatureMap::EluPlusOne => ElemFn::EluPlusOne.apply(x),
        }
    }

    /// Derivative at `x`, given `y = apply(x)`.
    #[inline]
    pub fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            FeatureMap::Identity => F::one(),
            FeatureMap::EluPlusOne => ElemFn::EluPlusOne.derivative(x, y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::Identity => "identity",
            FeatureMap::EluPlusOne => "elu_plus_one",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(FeatureMap::Identity),
            "elu_plus_one" => Some(FeatureMap::EluPlusOne),
            _ => None,
        }
    }
}

/// Elementwise feature map applied to a vector.
pub fn feature_map<F: Scalar>(x: &[F], kind: FeatureMap) -> Vec<F> {
    x.iter().map(|&v| kind.apply(v)).collect()
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LinAttnError {
    #[error("attention config: {0}")]
    Config(String),
    #[error("state geometry mismatch: {0}")]
    Geometry(String),
    #[error("non-finite output in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("state decode: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub feature_map: FeatureMap,
    pub decay_enabled: bool,
    pub normalized: bool,
    /// Permits [`FeatureMap::Identity`].
    pub test_mode: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            n_heads: 4,
            d_key: 32,
            d_value: 32,
            feature_map: FeatureMap::EluPlusOne,
            decay_enabled: true,
            normalized: false,
            test_mode: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), LinAttnError> {
        if self.n_heads == 0 || self.d_key == 0 || self.d_value == 0 {
            return Err(LinAttnError::Config(format!(
                "n_heads, d_key, d_value must be >= 1 (got {}, {}, {})",
                self.n_heads, self.d_key, self.d_value
            )));
        }
        if self.feature_map == FeatureMap::Identity && !self.test_mode {
            return Err(LinAttnError::Config(
                "identity feature map is sign-indefinite and only allowed in test mode".into(),
            ));
        }
        Ok(())
    }

    pub fn geometry(&self, batch: usize) -> CellGeometry {
        CellGeometry {
            batch,
            heads: self.n_heads,
            d_key: self.d_key,
            d_value: self.d_value,
            feature_map: self.feature_map,
            normalized: self.normalized,
            eps: NORMALIZER_EPS,
        }
    }

    fn flags(&self) -> u8 {
        (self.decay_enabled as u8)
            | (self.normalized as u8) << 1
            | ((self.feature_map == FeatureMap::EluPlusOne) as u8) << 2
    }
}

/// Per-head diagonal decay, stored as logits and mapped through a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayGate<F> {
    pub logits: Tensor<F>,
}

impl<F: Scalar> DecayGate<F> {
    /// Logit 3 gives λ ≈ 0.95.
    pub const INIT_LOGIT: f64 = 3.0;

    pub fn new(n_heads: usize, d_key: usize) -> Self {
        DecayGate {
            logits: Tensor::full(&[n_heads, d_key], F::of(Self::INIT_LOGIT)),
        }
    }

    /// Values strictly inside (0, 1) for finite logits.
    pub fn factors(&self) -> Vec<F> {
        kernel::decay_factors(self.logits.data())
    }
}

/// Carried state of one layer: `memory` is `[H, dk, dv]`, `normalizer`
/// `[H, dk]` in normalized mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory<F> {
    pub memory: Tensor<F>,
    pub normalizer: Option<Tensor<F>>,
}

impl<F: Scalar> LayerMemory<F> {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        LayerMemory {
            memory: Tensor::zeros(&[cfg.n_heads, cfg.d_key, cfg.d_value]),
            normalizer: cfg.normalized.then(|| Tensor::zeros(&[cfg.n_heads, cfg.d_key])),
        }
    }

    /// Frobenius norm of each head's memory matrix.
    pub fn head_norms(&self) -> Vec<f64> {
        let s = self.memory.shape();
        let per = s[1] * s[2];
        self.memory
            .data()
            .chunks(per)
            .map(|c| c.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

/// Carried state of a whole stack, for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<F> {
    pub layers: Vec<LayerMemory<F>>,
    pub step_count: u64,
}

impl<F: Scalar> MemoryState<F> {
    pub fn zeros(n_layers: usize, cfg: &AttentionConfig) -> Self {
        MemoryState {
            layers: (0..n_layers).map(|_| LayerMemory::zeros(cfg)).collect(),
            step_count: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.step_count == 0
            && self.layers.iter().all(|l| {
                l.memory.data().iter().all(|x| x.is_zero())
                    && l.normalizer
                        .as_ref()
                        .is_none_or(|z| z.data().iter().all(|x| x.is_zero()))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.memory.is_finite() && l.normalizer.as_ref().is_none_or(|z| z.is_finite()))
    }

    /// Sum over layers and heads of each head's Frobenius norm.
    pub fn norm_sum_of_heads(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.head_norms()).sum()
    }

    /// Frobenius norm of every memory entry taken together.
    pub fn norm_global(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.memory.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_geometry(&self, n_layers: usize, cfg: &AttentionConfig) -> Result<(), LinAttnError> {
        if self.layers.len() != n_layers {
            return Err(LinAttnError::Geometry(format!(
                "state has {} layers, network has {n_layers}",
                self.layers.len()
            )));
        }
        let want = [cfg.n_heads, cfg.d_key, cfg.d_value];
        for (i, l) in self.layers.iter().enumerate() {
            if l.memory.shape() != want || l.normalizer.is_some() != cfg.normalized {
                return Err(LinAttnError::Geometry(format!(
                    "layer {i}: memory {:?}, expected {want:?} (normalized={})",
                    l.memory.shape(),
                    cfg.normalized
                )));
            }
        }
        Ok(())
    }

    /// Layer-major, head-major, row-major f32 values after a config echo.
    pub fn write_to<W: Write>(&self, cfg: &AttentionConfig, w: &mut W) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        w.write_u32::<LittleEndian>(cfg.n_heads as u32)?;
        w.write_u32::<LittleEndian>(cfg.d_key as u32)?;
        w.write_u32::<LittleEndian>(cfg.d_value as u32)?;
        w.write_u8(cfg.flags())?;
        w.write_u64::<LittleEndian>(self.step_count)?;
        for l in &self.layers {
            for &x in l.memory.data() {
                w.write_f32::<LittleEndian>(x.as_f64() as f32)?;
            }
            if let Some(z) = &l.normalizer {
                for &x in z.data() {
                    w.write_f32::<LittleEndian>(x.as_f64() as f32)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(
        n_layers: usize,
        cfg: &AttentionConfig,
        r: &mut R,
    ) -> Result<Self, LinAttnError> {
        let dec = |e: std::io::Error| LinAttnError::Decode(e.to_string());
        let echo = [
            r.read_u32::<LittleEndian>().map_err(dec)? as usize,
            r.read_u32::<LittleEndian>().map_err(dec)? as usize,
            r.read_u32::<LittleEndian>().map_err(dec)? as usize,
            r.read_u32::<LittleEndian>().map_err(dec)? as usize,
        ];
        let flags = r.read_u8().map_err(dec)?;
        let want = [n_layers, cfg.n_heads, cfg.d_key, cfg.d_value];
        if echo != want || flags != cfg.flags() {
            return Err(LinAttnError::Geometry(format!(
                "stored state {echo:?}/flags {flags:#04b}, expected {want:?}/flags {:#04b}",
                cfg.flags()
            )));
        }
        let step_count = r.read_u64::<LittleEndian>().map_err(dec)?;
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor<F>, LinAttnError> {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(F::of(r.read_f32::<LittleEndian>().map_err(dec)? as f64));
            }
            Ok(Tensor::new(shape, data)?)
        };
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let memory = read_tensor(&[cfg.n_heads, cfg.d_key, cfg.d_value])?;
            let normalizer = if cfg.normalized {
                Some(read_tensor(&[cfg.n_heads, cfg.d_key])?)
            } else {
                None
            };
            layers.push(LayerMemory { memory, normalizer });
        }
        Ok(MemoryState { layers, step_count })
    }
}

/// Graph handles for a batched carried state of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellState {
    /// `[B, H, dk, dv]`
    pub memory: Var,
    /// `[B, H, dk]`
    pub normalizer: Option<Var>,
}

impl CellState {
    /// Insert per-slot layer states as constant leaves stacked along a
    /// leading batch axis.
    pub fn constant<F: Scalar>(g: &mut Graph<F>, slots: &[&LayerMemory<F>]) -> Result<Self, LinAttnError> {
        let first = slots
            .first()
            .ok_or_else(|| LinAttnError::Geometry("empty slot list".into()))?;
        let mshape = first.memory.shape().to_vec();
        let mut mdata = Vec::with_capacity(slots.len() * first.memory.numel());
        for s in slots {
            if s.memory.shape() != mshape {
                return Err(LinAttnError::Geometry("slot states disagree in shape".into()));
            }
            mdata.extend_from_slice(s.memory.data());
        }
        let mut shape = vec![slots.len()];
        shape.extend_from_slice(&mshape);
        let memory = g.constant(Tensor::new(&shape, mdata)?);
        let normalizer = match &first.normalizer {
            Some(z0) => {
                let mut zdata = Vec::with_capacity(slots.len() * z0.numel());
                for s in slots {
                    let z = s
                        .normalizer
                        .as_ref()
                        .ok_or_else(|| LinAttnError::Geometry("missing normalizer".into()))?;
                    zdata.extend_from_slice(z.data());
                }
                let mut zshape = vec![slots.len()];
                zshape.extend_from_slice(z0.shape());
                Some(g.constant(Tensor::new(&zshape, zdata)?))
            }
            None => None,
        };
        Ok(CellState { memory, normalizer })
    }

    /// Split the batched values back into per-slot layer states.
    pub fn to_slots<F: Scalar>(&self, g: &Graph<F>) -> Result<Vec<LayerMemory<F>>, LinAttnError> {
        let m = g.value(self.memory);
        let b = m.shape()[0];
        let per = m.numel() / b;
        let mshape = &m.shape()[1..];
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let memory = Tensor::new(mshape, m.data()[i * per..(i + 1) * per].to_vec())?;
            let normalizer = match self.normalizer {
                Some(zv) => {
                    let z = g.value(zv);
                    let zper = z.numel() / b;
                    Some(Tensor::new(&z.shape()[1..], z.data()[i * zper..(i + 1) * zper].to_vec())?)
                }
                None => None,
            };
            out.push(LayerMemory { memory, normalizer });
        }
        Ok(out)
    }
}

/// One linear-attention cell. Its only weight is the optional decay gate,
/// which callers bind as a graph variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearAttentionCell {
    pub config: AttentionConfig,
}

impl LinearAttentionCell {
    pub fn new(config: AttentionConfig) -> Result<Self, LinAttnError> {
        config.validate()?;
        Ok(LinearAttentionCell { config })
    }

    /// Run `T = rows / batch` steps over time-major `q`, `k`, `v`.
    ///
    /// With `detach_incoming` the incoming state enters as a detached leaf:
    /// its values flow, its gradient stops. The returned state is live on
    /// the graph.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_chunk<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        q: Var,
        k: Var,
        v: Var,
        decay_logits: Option<Var>,
        state: CellState,
        batch: usize,
        detach_incoming: bool,
    ) -> Result<(Var, CellState), LinAttnError> {
        if self.config.decay_enabled != decay_logits.is_some() {
            return Err(LinAttnError::Config(
                "decay logits must be bound exactly when decay is enabled".into(),
            ));
        }
        let state = if detach_incoming {
            CellState {
                memory: g.detach(state.memory),
                normalizer: state.normalizer.map(|z| g.detach(z)),
            }
        } else {
            state
        };
        let geometry = self.config.geometry(batch);
        let h = g.linear_attention(q, k, v, decay_logits, state.memory, state.normalizer, geometry)?;
        let memory = g.cell_state(h, StatePart::Memory)?;
        let normalizer = if self.config.normalized {
            Some(g.cell_state(h, StatePart::Normalizer)?)
        } else {
            None
        };
        Ok((h, CellState { memory, normalizer }))
    }

    /// Single step on plain values: per-head `q`, `k` (`H*dk`) and `v`
    /// (`H*dv`). Returns `h` (`H*dv`) and the advanced state.
    pub fn step<F: Scalar>(
        &self,
        state: &LayerMemory<F>,
        decay: Option<&DecayGate<F>>,
        q: &[F],
        k: &[F],
        v: &[F],
    ) -> Result<(Vec<F>, LayerMemory<F>), LinAttnError> {
        let c = &self.config;
        if q.len() != c.n_heads * c.d_key || k.len() != q.len() || v.len() != c.n_heads * c.d_value {
            return Err(LinAttnError::Geometry(format!(
                "q/k/v widths {}/{}/{} do not match {} heads × ({}, {})",
                q.len(),
                k.len(),
                v.len(),
                c.n_heads,
                c.d_key,
                c.d_value
            )));
        }
        if c.decay_enabled != decay.is_some() {
            return Err(LinAttnError::Config(
                "decay gate must be supplied exactly when decay is enabled".into(),
            ));
        }
        let lam = decay.map(|d| d.factors());
        let (h, saved) = kernel::forward(
            &c.geometry(1),
            1,
            q,
            k,
            v,
            lam.as_deref(),
            state.memory.data(),
            state.normalizer.as_ref().map(|z| z.data()),
            false,
        );
        if let Some((_, head, _)) = kernel::first_non_finite(&h, &c.geometry(1)) {
            return Err(LinAttnError::Numeric {
                layer: 0,
                detail: format!("head {head}"),
            });
        }
        let next = LayerMemory {
            memory: Tensor::new(state.memory.shape(), saved.final_memory)?,
            normalizer: match (saved.final_normalizer, &state.normalizer) {
                (Some(z), Some(old)) => Some(Tensor::new(old.shape(), z)?),
                _ => None,
            },
        };
        Ok((h, next))
    }
}

#[cfg(test)]
mod tests;
