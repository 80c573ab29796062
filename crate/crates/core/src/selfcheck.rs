//! Runtime invariant suites: gradients, chunk equivalence, and the maze
//! oracles. Each returns a named pass/fail with its worst observed value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{self, EvalConfig, ExpertPolicy};
use crate::lin_attn::{AttentionConfig, MemoryState};
use crate::maze::{generate_maze, MazeEnv, Pos};
use crate::model::{ModelConfig, PolicyNet, SegmentInputs};
use crate::numerics::{finite_difference_check, Graph, NumericsError, Scalar, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn tiny_config(decay: bool, normalized: bool) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        attention: AttentionConfig {
            n_heads: 2,
            d_key: 3,
            d_value: 4,
            decay_enabled: decay,
            normalized,
            ..AttentionConfig::default()
        },
        window_radius: 1,
        n_objects: 3,
    }
}

pub fn random_inputs(cfg: &ModelConfig, batch: usize, steps: usize, rng: &mut impl Rng) -> SegmentInputs {
    let rows = batch * steps;
    SegmentInputs {
        batch,
        steps,
        windows: (0..rows * cfg.window_cells())
            .map(|_| rng.gen_range(0..cfg.cell_vocab()) as u8)
            .collect(),
        goals: (0..rows).map(|_| rng.gen_range(0..cfg.n_objects) as u8).collect(),
        prev_actions: (0..rows).map(|_| rng.gen_range(0..5) as u8).collect(),
    }
}

fn contract(e: impl std::fmt::Display) -> NumericsError {
    NumericsError::Contract(e.to_string())
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of the masked NLL, starting from a warm carried state.
pub fn policy_fd_error(cfg: ModelConfig, batch: usize, seed: u64) -> Result<f64, NumericsError> {
    let net = PolicyNet::<f64>::new(cfg, seed).map_err(contract)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = random_inputs(&cfg, batch, 3, &mut rng);
    let targets: Vec<usize> = (0..inputs.rows()).map(|_| rng.gen_range(0..4)).collect();
    let mask: Vec<bool> = (0..inputs.rows()).map(|i| i != 1).collect();
    let pre = random_inputs(&cfg, batch, 2, &mut rng);
    let zero = net.zero_state();
    let warm = net
        .forward_segment(&vec![&zero; batch], &pre, false)
        .map_err(contract)?
        .1;
    let f = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var, NumericsError> {
        let refs: Vec<&MemoryState<f64>> = warm.iter().collect();
        let states = net.bind_states(g, &refs).map_err(contract)?;
        let (logits, _) = net.forward_graph(g, vars, &inputs, &states, true).map_err(contract)?;
        g.masked_nll(logits, &targets, &mask)
    };
    finite_difference_check(f, net.params(), 1e-5, 6, seed)
}

/// Largest difference between running a sequence whole and in pieces
/// with the state carried across the cuts.
pub fn chunk_error<F: Scalar>(cfg: ModelConfig, steps: usize, cuts: &[usize], seed: u64) -> Result<f64, String> {
    let net = PolicyNet::<F>::new(cfg, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let inputs = random_inputs(&cfg, 2, steps, &mut rng);
    let z = net.zero_state();
    let (whole, _) = net.forward_segment(&[&z, &z], &inputs, true).map_err(|e| e.to_string())?;
    let mut states = vec![z.clone(), z];
    let mut parts = Vec::new();
    let mut start = 0;
    for &end in cuts.iter().chain(std::iter::once(&steps)) {
        if end <= start {
            continue;
        }
        let refs: Vec<&MemoryState<F>> = states.iter().collect();
        let (out, next) = net
            .forward_segment(&refs, &inputs.time_slice(start, end), true)
            .map_err(|e| e.to_string())?;
        parts.extend(out.data().iter().map(|x| x.as_f64()));
        states = next;
        start = end;
    }
    Ok(whole
        .data()
        .iter()
        .zip(&parts)
        .map(|(a, b)| (a.as_f64() - b).abs())
        .fold(0.0, f64::max))
}

pub fn random_chunk_case(rng: &mut impl Rng) -> (ModelConfig, usize, Vec<usize>) {
    let cfg = ModelConfig {
        d_model: rng.gen_range(4..16),
        n_layers: rng.gen_range(1..3),
        attention: AttentionConfig {
            n_heads: rng.gen_range(1..3),
            d_key: rng.gen_range(1..6),
            d_value: rng.gen_range(1..6),
            decay_enabled: rng.gen(),
            normalized: rng.gen(),
            ..AttentionConfig::default()
        },
        window_radius: 1,
        n_objects: 3,
    };
    let steps = rng.gen_range(2..20);
    let mut cuts: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..steps)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    (cfg, steps, cuts)
}

/// All-pairs shortest paths over free cells by Floyd–Warshall.
pub fn floyd_warshall(env: &MazeEnv) -> Vec<Vec<usize>> {
    let (w, h) = (env.width(), env.height());
    let n = w * h;
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for y in 0..h {
        for x in 0..w {
            let p = Pos::new(x, y);
            if !env.is_free(p) {
                continue;
            }
            let i = y * w + x;
            d[i][i] = 0;
            for (dx, dy) in [(1usize, 0usize), (0, 1)] {
                let q = Pos::new(x + dx, y + dy);
                if x + dx < w && y + dy < h && env.is_free(q) {
                    let j = q.y * w + q.x;
                    d[i][j] = 1;
                    d[j][i] = 1;
                }
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if d[i][k] == inf {
                continue;
            }
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

/// Hand-drawn mazes below the generator's minimum size.
pub const SMALL_MAPS: [&[&str]; 3] = [
    &["0.#..", ".##.#", "...A1", "#.#.#", "....."],
    &["A...", ".##.", ".#1.", "0..."],
    &["0.A", "#.#", "1.."],
];

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

pub fn gradient_suite() -> CheckResult {
    let mut worst = 0.0f64;
    for (i, (decay, norm)) in [(true, false), (false, false), (true, true)].into_iter().enumerate() {
        match policy_fd_error(tiny_config(decay, norm), 2, 40 + i as u64) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return check("gradient", false, e.to_string()),
        }
    }
    check("gradient", worst <= 1e-4, format!("max relative error {worst:.3e} (limit 1e-4)"))
}

pub fn chunk_suite(cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for i in 0..cases {
        let (cfg, steps, cuts) = random_chunk_case(&mut rng);
        let r = chunk_error::<f64>(cfg, steps, &cuts, i as u64)
            .and_then(|a| chunk_error::<f32>(cfg, steps, &cuts, i as u64).map(|b| (a, b)));
        match r {
            Ok((a, b)) => {
                w64 = w64.max(a);
                w32 = w32.max(b);
            }
            Err(e) => return check("chunk-equivalence", false, e),
        }
    }
    check(
        "chunk-equivalence",
        w64 <= 1e-10 && w32 <= 1e-5,
        format!("{cases} cases: max error {w64:.3e} (f64, limit 1e-10), {w32:.3e} (f32, limit 1e-5)"),
    )
}

pub fn oracle_suite() -> CheckResult {
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    let mut mazes = Vec::new();
    for seed in 0..20u64 {
        match generate_maze(seed, 7, 7, 2) {
            Ok(e) => mazes.push(e),
            Err(e) => return check("oracle", false, e.to_string()),
        }
    }
    for rows in SMALL_MAPS {
        match MazeEnv::from_ascii(rows, 0) {
            Ok(e) => mazes.push(e),
            Err(e) => return check("oracle", false, e.to_string()),
        }
    }
    for env in &mazes {
        let w = env.width();
        let fw = floyd_warshall(env);
        for src in env.free_cells() {
            let bfs = env.distances_from(src);
            let i = src.y * w + src.x;
            for dst in env.free_cells() {
                compared += 1;
                if bfs[dst.y * w + dst.x] != fw[i][dst.y * w + dst.x] {
                    mismatches += 1;
                }
            }
        }
    }
    let cfg = EvalConfig {
        n_envs: 4,
        max_steps: 1500,
        ..EvalConfig::default()
    };
    let data = crate::data::DataConfig {
        width: 7,
        height: 7,
        n_objects: 3,
        window_radius: 1,
        ..crate::data::DataConfig::default()
    };
    let ro = eval::eval_envs(&data, &cfg).and_then(|envs| eval::rollout(&mut ExpertPolicy, envs, &cfg));
    let (sr, optimal) = match ro {
        Ok(ro) => {
            let done: Vec<_> = ro.tasks.into_iter().filter(|t| !t.truncated).collect();
            (
                eval::success_rate(&done).unwrap_or(0.0),
                done.iter().all(|t| t.steps == t.shortest),
            )
        }
        Err(e) => return check("oracle", false, e.to_string()),
    };
    check(
        "oracle",
        mismatches == 0 && sr == 1.0 && optimal,
        format!("BFS vs Floyd-Warshall: {mismatches}/{compared} mismatches; expert SR {sr}, optimal steps {optimal}"),
    )
}

pub fn run_all() -> Vec<CheckResult> {
    vec![gradient_suite(), chunk_suite(50), oracle_suite()]
}
