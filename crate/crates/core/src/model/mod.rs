//! Navigation policy: window/goal/action encoders, a stack of pre-norm
//! linear-attention blocks and a four-way action head.
//!
//! All computation runs on a [`Graph`]. Inputs are time-major: row
//! `t * batch + b` is step `t` of slot `b`.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::text::{write_section, ConfigError, Document, Section};
use crate::lin_attn::{
    AttentionConfig, CellState, FeatureMap, LayerMemory, LinAttnError, LinearAttentionCell,
    MemoryState,
};
use crate::maze::{Action, Category, Observation};
use crate::numerics::{softmax_in_place, Graph, NumericsError, Scalar, Tensor, Var};

pub use checkpoint::{AdamMoments, Checkpoint, Progress};

pub const RMS_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;
/// Four moves plus the start token.
pub const ACTION_VOCAB: usize = Action::COUNT + 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("{field} id {id} outside vocabulary of size {vocab}")]
    Vocabulary {
        field: &'static str,
        id: usize,
        vocab: usize,
    },
    #[error("non-finite value in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },
    #[error(transparent)]
    Attention(#[from] LinAttnError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<ConfigError> for ModelError {
    fn from(e: ConfigError) -> Self {
        ModelError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub attention: AttentionConfig,
    pub window_radius: usize,
    pub n_objects: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            attention: AttentionConfig::default(),
            window_radius: crate::maze::DEFAULT_RADIUS,
            n_objects: crate::maze::DEFAULT_OBJECTS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_layers == 0 {
            return Err(ModelError::Config("d_model and n_layers must be >= 1".into()));
        }
        if self.n_objects == 0 || self.n_objects > 254 {
            return Err(ModelError::Config(format!("n_objects {} out of range", self.n_objects)));
        }
        self.attention.validate()?;
        Ok(())
    }

    pub fn window_cells(&self) -> usize {
        (2 * self.window_radius + 1).pow(2)
    }

    pub fn cell_vocab(&self) -> usize {
        Category::vocab_size(self.n_objects)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let dm = self.d_model;
        let a = &self.attention;
        let (h, dk, dv) = (a.n_heads, a.d_key, a.d_value);
        let embed = (self.cell_vocab() + self.n_objects + ACTION_VOCAB) * dm;
        let window = self.window_cells() * dm * dm;
        let decay = if a.decay_enabled { h * dk } else { 0 };
        let block = 2 * dm + 2 * dm * h * dk + 2 * dm * h * dv + decay + 2 * MLP_RATIO * dm * dm;
        embed + window + self.n_layers * block + dm + dm * Action::COUNT
    }

    pub fn to_text(&self) -> String {
        let mut entries = self.dim_entries();
        entries.push(("window_radius", self.window_radius.to_string()));
        entries.push(("n_objects", self.n_objects.to_string()));
        let mut out = String::new();
        write_section(&mut out, "model", &entries);
        out
    }

    /// Network dimensions only; the window radius and object count belong
    /// to the environment.
    pub fn dim_entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.attention;
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", a.n_heads.to_string()),
            ("d_key", a.d_key.to_string()),
            ("d_value", a.d_value.to_string()),
            ("feature_map", a.feature_map.name().to_string()),
            ("decay", a.decay_enabled.to_string()),
            ("normalized", a.normalized.to_string()),
            ("test_mode", a.test_mode.to_string()),
        ]
    }

    /// Read the keys of [`ModelConfig::dim_entries`], defaulting to `base`.
    pub fn read_dims(s: &mut Section, base: ModelConfig) -> Result<ModelConfig, ConfigError> {
        let da = base.attention;
        Ok(ModelConfig {
            d_model: s.get("d_model", base.d_model)?,
            n_layers: s.get("n_layers", base.n_layers)?,
            attention: AttentionConfig {
                n_heads: s.get("n_heads", da.n_heads)?,
                d_key: s.get("d_key", da.d_key)?,
                d_value: s.get("d_value", da.d_value)?,
                feature_map: s.get_with("feature_map", da.feature_map, FeatureMap::parse)?,
                decay_enabled: s.get("decay", da.decay_enabled)?,
                normalized: s.get("normalized", da.normalized)?,
                test_mode: s.get("test_mode", da.test_mode)?,
            },
            ..base
        })
    }

    pub fn from_text(text: &str) -> Result<ModelConfig, ModelError> {
        let mut doc = Document::parse(text)?;
        let mut s = doc.take("model");
        let d = ModelConfig::default();
        let base = ModelConfig {
            window_radius: s.get("window_radius", d.window_radius)?,
            n_objects: s.get("n_objects", d.n_objects)?,
            ..d
        };
        let cfg = ModelConfig::read_dims(&mut s, base)?;
        s.finish()?;
        doc.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockIdx {
    norm1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    decay: Option<usize>,
    norm2: usize,
    mlp_in: usize,
    mlp_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    specs: Vec<ParamSpec>,
    cell: usize,
    goal: usize,
    action: usize,
    window: usize,
    blocks: Vec<BlockIdx>,
    final_norm: usize,
    head: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Layout {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };
        let dm = cfg.d_model;
        let a = &cfg.attention;
        let cell = add("embed.cell".into(), vec![cfg.cell_vocab(), dm], Init::Normal);
        let goal = add("embed.goal".into(), vec![cfg.n_objects, dm], Init::Normal);
        let action = add("embed.action".into(), vec![ACTION_VOCAB, dm], Init::Normal);
        let window = add("embed.window_proj".into(), vec![cfg.window_cells() * dm, dm], Init::Normal);
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockIdx {
                norm1: add(format!("block{l}.norm1"), vec![dm], Init::Ones),
                wq: add(format!("block{l}.wq"), vec![dm, a.n_heads * a.d_key], Init::Normal),
                wk: add(format!("block{l}.wk"), vec![dm, a.n_heads * a.d_key], Init::Normal),
                wv: add(format!("block{l}.wv"), vec![dm, a.n_heads * a.d_value], Init::Normal),
                wo: add(format!("block{l}.wo"), vec![a.n_heads * a.d_value, dm], Init::Normal),
                decay: a.decay_enabled.then(|| {
                    add(
                        format!("block{l}.decay"),
                        vec![a.n_heads, a.d_key],
                        Init::Const(crate::lin_attn::DecayGate::<f64>::INIT_LOGIT),
                    )
                }),
                norm2: add(format!("block{l}.norm2"), vec![dm], Init::Ones),
                mlp_in: add(format!("block{l}.mlp_in"), vec![dm, MLP_RATIO * dm], Init::Normal),
                mlp_out: add(format!("block{l}.mlp_out"), vec![MLP_RATIO * dm, dm], Init::Normal),
            })
            .collect();
        let final_norm = add("final_norm".into(), vec![dm], Init::Ones);
        let head = add("head".into(), vec![dm, Action::COUNT], Init::Normal);
        Layout {
            specs,
            cell,
            goal,
            action,
            window,
            blocks,
            final_norm,
            head,
        }
    }
}

/// Time-major inputs for `steps` steps of `batch` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInputs {
    pub batch: usize,
    pub steps: usize,
    /// `rows × window_cells` category codes.
    pub windows: Vec<u8>,
    pub goals: Vec<u8>,
    pub prev_actions: Vec<u8>,
}

impl SegmentInputs {
    pub fn rows(&self) -> usize {
        self.batch * self.steps
    }

    /// One step for each observation, one slot per observation.
    pub fn from_observations(obs: &[&Observation]) -> SegmentInputs {
        SegmentInputs {
            batch: obs.len(),
            steps: 1,
            windows: obs.iter().flat_map(|o| o.window.iter().copied()).collect(),
            goals: obs.iter().map(|o| o.goal_id).collect(),
            prev_actions: obs.iter().map(|o| o.prev_action).collect(),
        }
    }

    /// A single slot following `obs` in order.
    pub fn from_sequence(obs: &[Observation]) -> SegmentInputs {
        SegmentInputs {
            batch: 1,
            steps: obs.len(),
            windows: obs.iter().flat_map(|o| o.window.iter().copied()).collect(),
            goals: obs.iter().map(|o| o.goal_id).collect(),
            prev_actions: obs.iter().map(|o| o.prev_action).collect(),
        }
    }

    /// Rows `[t0, t1)` in time, all slots.
    pub fn time_slice(&self, t0: usize, t1: usize) -> SegmentInputs {
        let w = self.windows.len() / self.rows().max(1);
        let (r0, r1) = (t0 * self.batch, t1 * self.batch);
        SegmentInputs {
            batch: self.batch,
            steps: t1 - t0,
            windows: self.windows[r0 * w..r1 * w].to_vec(),
            goals: self.goals[r0..r1].to_vec(),
            prev_actions: self.prev_actions[r0..r1].to_vec(),
        }
    }
}

/// Action logits and their softmax, ordered N, E, S, W.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub logits: [f64; 4],
    pub probs: [f64; 4],
}

impl ActionDistribution {
    pub fn from_logits<F: Scalar>(row: &[F]) -> ActionDistribution {
        let mut logits = [0.0; 4];
        for (l, &x) in logits.iter_mut().zip(row) {
            *l = x.as_f64();
        }
        let mut probs = logits;
        softmax_in_place(&mut probs);
        ActionDistribution { logits, probs }
    }

    /// Highest logit; the first one wins ties.
    pub fn greedy(&self) -> Action {
        let mut best = 0;
        for i in 1..4 {
            if self.logits[i] > self.logits[best] {
                best = i;
            }
        }
        Action::from_index(best).expect("four actions")
    }
}

fn tag(layer: usize) -> impl Fn(LinAttnError) -> ModelError {
    move |e| match e {
        LinAttnError::Numerics(NumericsError::NonFinite { op }) => ModelError::Numeric { layer, detail: op },
        LinAttnError::Numeric { detail, .. } => ModelError::Numeric { layer, detail },
        other => ModelError::Attention(other),
    }
}

fn tag_num(layer: usize) -> impl Fn(NumericsError) -> ModelError {
    move |e| tag(layer)(LinAttnError::Numerics(e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet<F> {
    config: ModelConfig,
    layout: Layout,
    cell: LinearAttentionCell,
    params: Vec<Tensor<F>>,
}

impl<F: Scalar> PolicyNet<F> {
    /// Truncated-normal init (std 0.02), unit norm gains, decay logits at +3.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Normal => Tensor::trunc_normal(&s.shape, INIT_STD, &mut rng),
                Init::Ones => Tensor::ones(&s.shape),
                Init::Const(c) => Tensor::full(&s.shape, F::of(c)),
            })
            .collect();
        Ok(PolicyNet {
            cell: LinearAttentionCell::new(config.attention)?,
            config,
            layout,
            params,
        })
    }

    /// Build from named tensors, checking names and shapes against the layout.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if named.len() != layout.specs.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors stored, network has {}",
                named.len(),
                layout.specs.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}` {:?} where `{}` {:?} was expected",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            params.push(t.with_grad(false));
        }
        Ok(PolicyNet {
            cell: LinearAttentionCell::new(config.attention)?,
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.layout.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// SHA-256 over every parameter as little-endian f32, in layout order.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for &x in p.data() {
                h.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn zero_state(&self) -> MemoryState<F> {
        MemoryState::zeros(self.config.n_layers, &self.config.attention)
    }

    pub fn cast<G: Scalar>(&self) -> PolicyNet<G> {
        PolicyNet {
            config: self.config,
            layout: self.layout.clone(),
            cell: self.cell,
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Put every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    fn check_inputs(&self, inputs: &SegmentInputs) -> Result<(), ModelError> {
        let rows = inputs.rows();
        let wc = self.config.window_cells();
        if rows == 0
            || inputs.windows.len() != rows * wc
            || inputs.goals.len() != rows
            || inputs.prev_actions.len() != rows
        {
            return Err(ModelError::Config(format!(
                "segment of {} × {} needs {} window codes and {rows} goals/actions, got {}/{}/{}",
                inputs.steps,
                inputs.batch,
                rows * wc,
                inputs.windows.len(),
                inputs.goals.len(),
                inputs.prev_actions.len()
            )));
        }
        let checks: [(&'static str, &[u8], usize); 3] = [
            ("cell category", &inputs.windows, self.config.cell_vocab()),
            ("goal", &inputs.goals, self.config.n_objects),
            ("previous action", &inputs.prev_actions, ACTION_VOCAB),
        ];
        for (field, ids, vocab) in checks {
            if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
                return Err(ModelError::Vocabulary {
                    field,
                    id: bad as usize,
                    vocab,
                });
            }
        }
        Ok(())
    }

    /// Fused input rows `[rows, d_model]`: projected window embedding plus
    /// goal and previous-action embeddings.
    pub fn encode_graph(&self, g: &mut Graph<F>, vars: &[Var], inputs: &SegmentInputs) -> Result<Var, ModelError> {
        self.check_inputs(inputs)?;
        let l = &self.layout;
        let rows = inputs.rows();
        let dm = self.config.d_model;
        let ids = |xs: &[u8]| xs.iter().map(|&x| x as usize).collect::<Vec<_>>();
        let cells = g.embedding(vars[l.cell], &ids(&inputs.windows))?;
        let flat = g.reshape(cells, &[rows, self.config.window_cells() * dm])?;
        let window = g.matmul(flat, vars[l.window])?;
        let goal = g.embedding(vars[l.goal], &ids(&inputs.goals))?;
        let action = g.embedding(vars[l.action], &ids(&inputs.prev_actions))?;
        let x = g.add(window, goal)?;
        Ok(g.add(x, action)?)
    }

    /// Logits `[rows, 4]` and the outgoing per-layer states.
    pub fn forward_graph(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        inputs: &SegmentInputs,
        states: &[CellState],
        detach_incoming: bool,
    ) -> Result<(Var, Vec<CellState>), ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        if states.len() != self.config.n_layers {
            return Err(ModelError::Attention(LinAttnError::Geometry(format!(
                "{} layer states for {} layers",
                states.len(),
                self.config.n_layers
            ))));
        }
        let mut x = self.encode_graph(g, vars, inputs)?;
        let mut out_states = Vec::with_capacity(states.len());
        for (li, (b, st)) in self.layout.blocks.iter().zip(states).enumerate() {
            let tn = tag_num(li);
            let n = g.rms_norm(x, vars[b.norm1], RMS_EPS).map_err(&tn)?;
            let q = g.matmul(n, vars[b.wq]).map_err(&tn)?;
            let k = g.matmul(n, vars[b.wk]).map_err(&tn)?;
            let v = g.matmul(n, vars[b.wv]).map_err(&tn)?;
            let (h, next) = self
                .cell
                .forward_chunk(g, q, k, v, b.decay.map(|i| vars[i]), *st, inputs.batch, detach_incoming)
                .map_err(tag(li))?;
            let o = g.matmul(h, vars[b.wo]).map_err(&tn)?;
            x = g.add(x, o).map_err(&tn)?;
            let n2 = g.rms_norm(x, vars[b.norm2], RMS_EPS).map_err(&tn)?;
            let u = g.matmul(n2, vars[b.mlp_in]).map_err(&tn)?;
            let u = g.relu(u).map_err(&tn)?;
            let u = g.matmul(u, vars[b.mlp_out]).map_err(&tn)?;
            x = g.add(x, u).map_err(&tn)?;
            out_states.push(next);
        }
        let last = self.config.n_layers;
        let n = g.rms_norm(x, vars[self.layout.final_norm], RMS_EPS).map_err(tag_num(last))?;
        let logits = g.matmul(n, vars[self.layout.head]).map_err(tag_num(last))?;
        Ok((logits, out_states))
    }

    /// Stack per-slot states into per-layer constant leaves.
    pub fn bind_states(&self, g: &mut Graph<F>, slots: &[&MemoryState<F>]) -> Result<Vec<CellState>, ModelError> {
        for s in slots {
            s.check_geometry(self.config.n_layers, &self.config.attention)
                .map_err(|e| ModelError::Config(e.to_string()))?;
        }
        (0..self.config.n_layers)
            .map(|l| {
                let layer: Vec<&LayerMemory<F>> = slots.iter().map(|s| &s.layers[l]).collect();
                Ok(CellState::constant(g, &layer)?)
            })
            .collect()
    }

    /// Read per-slot states back out of the graph, advancing step counts.
    pub fn collect_states(
        &self,
        g: &Graph<F>,
        states: &[CellState],
        incoming: &[&MemoryState<F>],
        steps: usize,
    ) -> Result<Vec<MemoryState<F>>, ModelError> {
        let per_layer: Vec<Vec<LayerMemory<F>>> =
            states.iter().map(|s| s.to_slots(g)).collect::<Result<_, _>>()?;
        let mut out: Vec<MemoryState<F>> = incoming
            .iter()
            .map(|s| MemoryState {
                layers: Vec::with_capacity(self.config.n_layers),
                step_count: s.step_count + steps as u64,
            })
            .collect();
        for layer in per_layer {
            for (slot, lm) in out.iter_mut().zip(layer) {
                slot.layers.push(lm);
            }
        }
        Ok(out)
    }

    /// Run a segment for every slot without recording gradients.
    pub fn forward_segment(
        &self,
        states: &[&MemoryState<F>],
        inputs: &SegmentInputs,
        detach_incoming: bool,
    ) -> Result<(Tensor<F>, Vec<MemoryState<F>>), ModelError> {
        if states.len() != inputs.batch {
            return Err(ModelError::Config(format!(
                "{} states for a batch of {}",
                states.len(),
                inputs.batch
            )));
        }
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, false);
        let cs = self.bind_states(&mut g, states)?;
        let (logits, out) = self.forward_graph(&mut g, &vars, inputs, &cs, detach_incoming)?;
        let next = self.collect_states(&g, &out, states, inputs.steps)?;
        Ok((g.value(logits).clone(), next))
    }

    /// One step for each slot; purely a function of its arguments.
    pub fn policy_step_batch(
        &self,
        states: &[&MemoryState<F>],
        obs: &[&Observation],
    ) -> Result<(Vec<ActionDistribution>, Vec<MemoryState<F>>), ModelError> {
        let inputs = SegmentInputs::from_observations(obs);
        let (logits, next) = self.forward_segment(states, &inputs, false)?;
        let dists = logits.data().chunks(Action::COUNT).map(ActionDistribution::from_logits).collect();
        Ok((dists, next))
    }

    pub fn policy_step(
        &self,
        state: &MemoryState<F>,
        obs: &Observation,
    ) -> Result<(ActionDistribution, MemoryState<F>), ModelError> {
        let (mut d, mut s) = self.policy_step_batch(&[state], &[obs])?;
        Ok((d.remove(0), s.remove(0)))
    }

    /// The fused input vector for one observation.
    pub fn encode_observation(&self, window: &[u8], goal_id: u8, prev_action: u8) -> Result<Vec<F>, ModelError> {
        let inputs = SegmentInputs {
            batch: 1,
            steps: 1,
            windows: window.to_vec(),
            goals: vec![goal_id],
            prev_actions: vec![prev_action],
        };
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, false);
        let x = self.encode_graph(&mut g, &vars, &inputs)?;
        Ok(g.value(x).data().to_vec())
    }
}

#[cfg(test)]
mod tests;
