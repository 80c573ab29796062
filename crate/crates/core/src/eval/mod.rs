//! Closed-loop evaluation in unseen mazes under continual goal scheduling,
//! and the metrics computed over the resulting task records.

mod analyze;
mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::text::{write_section, ConfigError, Section};
use crate::data::{DataConfig, IndexEntry};
use crate::lin_attn::MemoryState;
use crate::maze::{derive_seed, generate_maze, next_goal, Action, MazeEnv, MazeError, Observation};
use crate::model::{ModelError, PolicyNet};
use crate::numerics::Scalar;

pub use analyze::{analyze, Analysis, ProtocolSummary};
pub use report::{
    write_outputs, BucketRow, EvalReport, IclSummary, MemorySummary, ReportMeta, ICL_FILE, NORMS_FILE, REPORT_FILE,
    TASKS_FILE,
};

pub const EVAL_ENV_STREAM: &str = "eval-env";
pub const EVAL_GOAL_STREAM: &str = "eval-goal";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("eval config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("eval env {env} (hash {hash}) also appears in the training index")]
    NotDisjoint { env: usize, hash: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Maze(#[from] MazeError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateMode {
    Continuous,
    ResetPerTask,
}

impl StateMode {
    pub fn name(self) -> &'static str {
        match self {
            StateMode::Continuous => "continuous",
            StateMode::ResetPerTask => "reset-per-task",
        }
    }

    pub fn parse(s: &str) -> Option<StateMode> {
        match s {
            "continuous" => Some(StateMode::Continuous),
            "reset-per-task" => Some(StateMode::ResetPerTask),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub n_envs: usize,
    pub max_steps: usize,
    pub task_cap: usize,
    pub seed: u64,
    pub state_mode: StateMode,
    pub bucket_width: usize,
    pub burn_in: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_envs: 16,
            max_steps: 5000,
            task_cap: 500,
            seed: 1,
            state_mode: StateMode::Continuous,
            bucket_width: 500,
            burn_in: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_envs == 0 || self.max_steps == 0 || self.task_cap == 0 || self.bucket_width == 0 {
            return Err(EvalError::Config(
                "n_envs, max_steps, task_cap and bucket_width must be >= 1".into(),
            ));
        }
        if self.task_cap > self.max_steps {
            return Err(EvalError::Config(format!(
                "task_cap {} exceeds max_steps {}",
                self.task_cap, self.max_steps
            )));
        }
        Ok(())
    }

    pub fn read(s: &mut Section) -> Result<EvalConfig, ConfigError> {
        let d = EvalConfig::default();
        Ok(EvalConfig {
            n_envs: s.get("n_envs", d.n_envs)?,
            max_steps: s.get("max_steps", d.max_steps)?,
            task_cap: s.get("task_cap", d.task_cap)?,
            seed: s.get("seed", d.seed)?,
            state_mode: s.get_with("state_mode", d.state_mode, StateMode::parse)?,
            bucket_width: s.get("bucket_width", d.bucket_width)?,
            burn_in: s.get("burn_in", d.burn_in)?,
        })
    }

    pub fn write(&self, out: &mut String) {
        write_section(
            out,
            "eval",
            &[
                ("n_envs", self.n_envs.to_string()),
                ("max_steps", self.max_steps.to_string()),
                ("task_cap", self.task_cap.to_string()),
                ("seed", self.seed.to_string()),
                ("state_mode", self.state_mode.name().into()),
                ("bucket_width", self.bucket_width.to_string()),
                ("burn_in", self.burn_in.to_string()),
            ],
        );
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct TaskResult {
    pub env: usize,
    pub ordinal: usize,
    pub goal_id: u8,
    /// Steps elapsed in the stream when the task was issued.
    pub start_step: usize,
    pub steps: usize,
    pub success: bool,
    /// Cut short by the end of the stream rather than the cap.
    pub truncated: bool,
    pub shortest: usize,
}

/// Something that acts in a batch of environments in lockstep.
pub trait Policy {
    fn begin(&mut self, n_envs: usize);
    /// Forget everything about environment `env`.
    fn reset(&mut self, env: usize);
    /// Norm of the memory the next action will be conditioned on.
    fn memory_norm(&self, env: usize) -> f64;
    fn act(&mut self, envs: &[MazeEnv], obs: &[Observation]) -> Result<Vec<Action>, EvalError>;
}

/// Greedy policy network with one memory state per environment.
pub struct NetPolicy<'a, F> {
    net: &'a PolicyNet<F>,
    states: Vec<MemoryState<F>>,
}

impl<'a, F: Scalar> NetPolicy<'a, F> {
    pub fn new(net: &'a PolicyNet<F>) -> Self {
        NetPolicy {
            net,
            states: Vec::new(),
        }
    }
}

impl<F: Scalar> Policy for NetPolicy<'_, F> {
    fn begin(&mut self, n_envs: usize) {
        self.states = vec![self.net.zero_state(); n_envs];
    }

    fn reset(&mut self, env: usize) {
        self.states[env] = self.net.zero_state();
    }

    fn memory_norm(&self, env: usize) -> f64 {
        self.states[env].norm_sum_of_heads()
    }

    fn act(&mut self, _envs: &[MazeEnv], obs: &[Observation]) -> Result<Vec<Action>, EvalError> {
        let refs: Vec<&MemoryState<F>> = self.states.iter().collect();
        let orefs: Vec<&Observation> = obs.iter().collect();
        let (dists, next) = self.net.policy_step_batch(&refs, &orefs)?;
        if let Some(i) = next.iter().position(|s| !s.is_finite()) {
            return Err(ModelError::Numeric {
                layer: 0,
                detail: format!("memory state of env {i} became non-finite"),
            }
            .into());
        }
        self.states = next;
        Ok(dists.iter().map(|d| d.greedy()).collect())
    }
}

/// The shortest-path expert, as an upper reference.
#[derive(Debug, Default)]
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn begin(&mut self, _: usize) {}
    fn reset(&mut self, _: usize) {}
    fn memory_norm(&self, _: usize) -> f64 {
        0.0
    }
    fn act(&mut self, envs: &[MazeEnv], _: &[Observation]) -> Result<Vec<Action>, EvalError> {
        envs.iter()
            .map(|e| {
                let goal = e.goal().ok_or_else(|| EvalError::Contract("no goal set".into()))?;
                Ok(e.expert_action(goal)?)
            })
            .collect()
    }
}

/// Uniformly random actions.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn begin(&mut self, _: usize) {}
    fn reset(&mut self, _: usize) {}
    fn memory_norm(&self, _: usize) -> f64 {
        0.0
    }
    fn act(&mut self, envs: &[MazeEnv], _: &[Observation]) -> Result<Vec<Action>, EvalError> {
        Ok(envs.iter().map(|_| Action::ALL[self.rng.gen_range(0..Action::COUNT)]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tasks: Vec<TaskResult>,
    /// Per environment, the memory norm before each step.
    pub norms: Vec<Vec<f64>>,
}

struct OpenTask {
    ordinal: usize,
    goal: u8,
    start: usize,
    used: usize,
    shortest: usize,
}

struct Track {
    env: MazeEnv,
    goal_rng: ChaCha8Rng,
    open: OpenTask,
    issued: usize,
}

/// Evaluation mazes, disjoint in seed stream from the training ones.
pub fn eval_envs(maze_cfg: &DataConfig, cfg: &EvalConfig) -> Result<Vec<MazeEnv>, EvalError> {
    (0..cfg.n_envs as u64)
        .map(|i| {
            let seed = derive_seed(cfg.seed, EVAL_ENV_STREAM, i);
            Ok(generate_maze(seed, maze_cfg.width, maze_cfg.height, maze_cfg.n_objects)?
                .with_radius(maze_cfg.window_radius))
        })
        .collect()
}

/// Fail if any evaluation maze also occurs in the training index.
pub fn check_disjoint(envs: &[MazeEnv], index: &[IndexEntry]) -> Result<(), EvalError> {
    let train: std::collections::HashSet<&str> = index.iter().map(|e| e.env_hash.as_str()).collect();
    for (i, e) in envs.iter().enumerate() {
        let h = e.canonical_hash();
        if train.contains(h.as_str()) {
            return Err(EvalError::NotDisjoint { env: i, hash: h });
        }
    }
    Ok(())
}

/// Issue the next goal in `tr`, recording tasks that are already solved
/// because the agent stands on the new goal object.
fn issue<P: Policy>(
    tr: &mut Track,
    e: usize,
    previous: Option<u8>,
    now: usize,
    mode: StateMode,
    policy: &mut P,
    out: &mut Vec<TaskResult>,
) -> Result<(), EvalError> {
    let mut previous = previous;
    loop {
        let goal = next_goal(&mut tr.goal_rng, tr.env.n_objects(), previous)?;
        tr.env.set_goal(goal)?;
        if mode == StateMode::ResetPerTask {
            policy.reset(e);
        }
        let target = tr.env.object_cell(goal).expect("goal was just set");
        let shortest = tr.env.shortest_path_len(tr.env.agent(), target)?;
        let ordinal = tr.issued;
        tr.issued += 1;
        if shortest == 0 {
            out.push(TaskResult {
                env: e,
                ordinal,
                goal_id: goal,
                start_step: now,
                steps: 0,
                success: true,
                truncated: false,
                shortest: 0,
            });
            previous = Some(goal);
            continue;
        }
        tr.open = OpenTask {
            ordinal,
            goal,
            start: now,
            used: 0,
            shortest,
        };
        return Ok(());
    }
}

/// Run every environment for `cfg.max_steps` steps. Tasks end on arrival
/// or at the cap, and the next goal follows immediately.
pub fn rollout<P: Policy>(policy: &mut P, envs: Vec<MazeEnv>, cfg: &EvalConfig) -> Result<Rollout, EvalError> {
    cfg.validate()?;
    let n = envs.len();
    policy.begin(n);
    let mut tasks = Vec::new();
    let mut tracks = Vec::with_capacity(n);
    for (e, env) in envs.into_iter().enumerate() {
        let seed = derive_seed(cfg.seed, EVAL_GOAL_STREAM, e as u64);
        let mut tr = Track {
            env,
            goal_rng: ChaCha8Rng::seed_from_u64(seed),
            open: OpenTask {
                ordinal: 0,
                goal: 0,
                start: 0,
                used: 0,
                shortest: 0,
            },
            issued: 0,
        };
        let mut found = Vec::new();
        issue(&mut tr, e, None, 0, cfg.state_mode, policy, &mut found)?;
        tasks.extend(found);
        tracks.push(tr);
    }
    let mut norms = vec![Vec::with_capacity(cfg.max_steps); n];
    let mut per_env: Vec<Vec<TaskResult>> = vec![Vec::new(); n];
    for step in 0..cfg.max_steps {
        for (e, trace) in norms.iter_mut().enumerate() {
            trace.push(policy.memory_norm(e));
        }
        let obs: Vec<Observation> = tracks.iter().map(|t| t.env.observe()).collect();
        let snapshot: Vec<MazeEnv> = tracks.iter().map(|t| t.env.clone()).collect();
        let actions = policy.act(&snapshot, &obs)?;
        for (e, (tr, a)) in tracks.iter_mut().zip(actions).enumerate() {
            let out = tr.env.step(a);
            tr.open.used += 1;
            let done = out.reached_goal || tr.open.used == cfg.task_cap;
            if done {
                per_env[e].push(TaskResult {
                    env: e,
                    ordinal: tr.open.ordinal,
                    goal_id: tr.open.goal,
                    start_step: tr.open.start,
                    steps: tr.open.used,
                    success: out.reached_goal,
                    truncated: false,
                    shortest: tr.open.shortest,
                });
                let prev = tr.open.goal;
                tr.open.used = 0;
                if step + 1 == cfg.max_steps {
                    continue;
                }
                issue(tr, e, Some(prev), step + 1, cfg.state_mode, policy, &mut per_env[e])?;
            }
        }
    }
    for (e, tr) in tracks.iter().enumerate() {
        if tr.open.used > 0 {
            per_env[e].push(TaskResult {
                env: e,
                ordinal: tr.open.ordinal,
                goal_id: tr.open.goal,
                start_step: tr.open.start,
                steps: tr.open.used,
                success: false,
                truncated: true,
                shortest: tr.open.shortest,
            });
        }
    }
    // order by env, then ordinal
    let mut by_env: Vec<Vec<TaskResult>> = vec![Vec::new(); n];
    for t in tasks.into_iter().chain(per_env.into_iter().flatten()) {
        by_env[t.env].push(t);
    }
    let tasks = by_env
        .into_iter()
        .flat_map(|mut v| {
            v.sort_by_key(|t| t.ordinal);
            v
        })
        .collect();
    Ok(Rollout { tasks, norms })
}

pub fn success_rate(results: &[TaskResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Contract("success rate of no tasks".into()));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Mean steps per task, counting a failure at the cap as `cap` and a task
/// cut off by the stream end as the steps it had.
pub fn steps_to_goal(results: &[TaskResult], cap: usize) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Contract("steps-to-goal of no tasks".into()));
    }
    let total: usize = results
        .iter()
        .map(|r| if r.success || r.truncated { r.steps } else { cap })
        .sum();
    Ok(total as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Bucket {
    pub start: usize,
    pub count: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
}

/// Tasks binned by start step into `[0, w), [w, 2w), ...` up to `max_steps`.
pub fn icl_curve(results: &[TaskResult], width: usize, max_steps: usize) -> Vec<Bucket> {
    let n = max_steps.div_ceil(width).max(1);
    let mut buckets: Vec<Bucket> = (0..n)
        .map(|i| Bucket {
            start: i * width,
            count: 0,
            successes: 0,
            success_rate: None,
        })
        .collect();
    for r in results {
        let b = &mut buckets[(r.start_step / width).min(n - 1)];
        b.count += 1;
        b.successes += r.success as usize;
    }
    for b in &mut buckets {
        if b.count > 0 {
            b.success_rate = Some(b.successes as f64 / b.count as f64);
        }
    }
    buckets
}

/// Least-squares slope of success rate against bucket start over populated
/// buckets; `None` with fewer than two.
pub fn icl_slope(buckets: &[Bucket]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = buckets
        .iter()
        .filter_map(|b| b.success_rate.map(|r| (b.start as f64, r)))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Population std over mean of the trace after `burn_in` steps.
pub fn memory_rsd(trace: &[f64], burn_in: usize) -> Result<f64, EvalError> {
    if trace.len() <= burn_in {
        return Err(EvalError::Contract(format!(
            "trace of {} steps is not longer than the burn-in {burn_in}",
            trace.len()
        )));
    }
    let tail = &trace[burn_in..];
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(EvalError::Contract("memory norm trace has zero mean".into()));
    }
    let var = tail.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}
