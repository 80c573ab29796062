use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::finite_difference_check;

fn tiny(decay: bool, normalized: bool) -> ModelConfig {
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

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        attention: AttentionConfig {
            n_heads: 2,
            d_key: 4,
            d_value: 4,
            ..AttentionConfig::default()
        },
        window_radius: 2,
        n_objects: 4,
    }
}

fn random_inputs(cfg: &ModelConfig, batch: usize, steps: usize, seed: u64) -> SegmentInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = batch * steps;
    SegmentInputs {
        batch,
        steps,
        windows: (0..rows * cfg.window_cells())
            .map(|_| rng.gen_range(0..cfg.cell_vocab()) as u8)
            .collect(),
        goals: (0..rows).map(|_| rng.gen_range(0..cfg.n_objects) as u8).collect(),
        prev_actions: (0..rows).map(|_| rng.gen_range(0..ACTION_VOCAB) as u8).collect(),
    }
}

fn observations(inputs: &SegmentInputs) -> Vec<Observation> {
    assert_eq!(inputs.batch, 1);
    let w = inputs.windows.len() / inputs.rows();
    (0..inputs.steps)
        .map(|t| Observation {
            window: inputs.windows[t * w..(t + 1) * w].to_vec(),
            goal_id: inputs.goals[t],
            prev_action: inputs.prev_actions[t],
        })
        .collect()
}

#[test]
fn param_count_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..5 {
        let cfg = ModelConfig {
            d_model: rng.gen_range(1..24),
            n_layers: rng.gen_range(1..4),
            attention: AttentionConfig {
                n_heads: rng.gen_range(1..4),
                d_key: rng.gen_range(1..6),
                d_value: rng.gen_range(1..6),
                decay_enabled: rng.gen(),
                normalized: rng.gen(),
                ..AttentionConfig::default()
            },
            window_radius: rng.gen_range(0..3),
            n_objects: rng.gen_range(1..8),
        };
        let net = PolicyNet::<f32>::new(cfg, i).unwrap();
        assert_eq!(net.num_params(), cfg.param_count(), "{cfg:?}");
    }
}

#[test]
fn default_config_round_trips_through_text() {
    let cfg = ModelConfig::default();
    assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(ModelConfig::from_text("[model]\nwidth = 3\n").is_err());
}

#[test]
fn encoding_is_deterministic_and_goal_sensitive() {
    let cfg = small();
    let net = PolicyNet::<f32>::new(cfg, 1).unwrap();
    let window = vec![1u8; cfg.window_cells()];
    let a = net.encode_observation(&window, 0, 4).unwrap();
    let b = net.encode_observation(&window, 0, 4).unwrap();
    assert_eq!(a, b);
    let c = net.encode_observation(&window, 1, 4).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| x != y));
}

#[test]
fn unknown_ids_are_vocabulary_errors() {
    let cfg = small();
    let net = PolicyNet::<f32>::new(cfg, 1).unwrap();
    let mut window = vec![1u8; cfg.window_cells()];
    assert!(matches!(
        net.encode_observation(&window, cfg.n_objects as u8, 0),
        Err(ModelError::Vocabulary { field: "goal", .. })
    ));
    window[3] = cfg.cell_vocab() as u8;
    assert!(matches!(
        net.encode_observation(&window, 0, 0),
        Err(ModelError::Vocabulary { field: "cell category", .. })
    ));
    assert!(matches!(
        net.encode_observation(&[1; 25], 0, ACTION_VOCAB as u8),
        Err(ModelError::Vocabulary { .. })
    ));
}

#[test]
fn policy_step_is_a_pure_function() {
    let cfg = small();
    let net = PolicyNet::<f32>::new(cfg, 2).unwrap();
    let obs = observations(&random_inputs(&cfg, 1, 1, 3)).remove(0);
    let s0 = net.zero_state();
    let (d1, s1) = net.policy_step(&s0, &obs).unwrap();
    let (d2, s2) = net.policy_step(&s0, &obs).unwrap();
    assert_eq!(d1, d2);
    assert_eq!(s1, s2);
    assert_eq!(s1.step_count, 1);
    assert!((d1.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    assert!(d1.probs.iter().all(|&p| p >= 0.0));
}

#[test]
fn wrong_state_geometry_is_a_config_error() {
    let net = PolicyNet::<f32>::new(small(), 2).unwrap();
    let other = PolicyNet::<f32>::new(tiny(true, false), 2).unwrap();
    let obs = observations(&random_inputs(&small(), 1, 1, 3)).remove(0);
    assert!(matches!(
        net.policy_step(&other.zero_state(), &obs),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn stepwise_rollout_matches_segment() {
    let cfg = small();
    let net = PolicyNet::<f32>::new(cfg, 4).unwrap();
    let inputs = random_inputs(&cfg, 1, 6, 9);
    let zero = net.zero_state();
    let (seg, seg_state) = net.forward_segment(&[&zero], &inputs, true).unwrap();
    let mut state = zero.clone();
    for (t, obs) in observations(&inputs).iter().enumerate() {
        let (d, next) = net.policy_step(&state, obs).unwrap();
        for a in 0..4 {
            let want = seg.data()[t * 4 + a] as f64;
            assert!((d.logits[a] - want).abs() <= 1e-5, "t={t} a={a}");
        }
        state = next;
    }
    assert_eq!(state.step_count, 6);
    for (a, b) in state.layers.iter().zip(&seg_state[0].layers) {
        assert!(a.memory.max_abs_diff(&b.memory) <= 1e-5);
    }
}

#[test]
fn single_step_segment_equals_policy_step() {
    let cfg = small();
    let net = PolicyNet::<f32>::new(cfg, 4).unwrap();
    let inputs = random_inputs(&cfg, 1, 1, 10);
    let zero = net.zero_state();
    let (seg, s1) = net.forward_segment(&[&zero], &inputs, false).unwrap();
    let (d, s2) = net.policy_step(&zero, &observations(&inputs)[0]).unwrap();
    assert_eq!(ActionDistribution::from_logits(seg.data()), d);
    assert_eq!(s1[0], s2);
}

#[test]
fn later_inputs_do_not_affect_earlier_logits() {
    let cfg = small();
    let net = PolicyNet::<f32>::new(cfg, 6).unwrap();
    let a = random_inputs(&cfg, 2, 8, 1);
    let mut b = a.clone();
    let w = cfg.window_cells();
    for r in 10..12 {
        b.goals[r] = (b.goals[r] + 1) % cfg.n_objects as u8;
        b.windows[r * w] = (b.windows[r * w] + 1) % cfg.cell_vocab() as u8;
    }
    let z = net.zero_state();
    let (la, _) = net.forward_segment(&[&z, &z], &a, false).unwrap();
    let (lb, _) = net.forward_segment(&[&z, &z], &b, false).unwrap();
    let cut = 5 * 2 * 4;
    assert_eq!(&la.data()[..cut], &lb.data()[..cut]);
    assert_ne!(&la.data()[cut..], &lb.data()[cut..]);
}

#[test]
fn split_segment_matches_whole() {
    let cfg = small();
    let net = PolicyNet::<f32>::new(cfg, 8).unwrap();
    let inputs = random_inputs(&cfg, 3, 8, 2);
    let z = net.zero_state();
    let zs = [&z, &z, &z];
    let (whole, whole_state) = net.forward_segment(&zs, &inputs, true).unwrap();
    let (first, mid) = net.forward_segment(&zs, &inputs.time_slice(0, 4), true).unwrap();
    let mid_refs: Vec<&MemoryState<f32>> = mid.iter().collect();
    let (second, end) = net.forward_segment(&mid_refs, &inputs.time_slice(4, 8), true).unwrap();
    let joined: Vec<f32> = first.data().iter().chain(second.data()).copied().collect();
    let err = whole
        .data()
        .iter()
        .zip(&joined)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(err <= 1e-5, "{err}");
    assert_eq!(end[1].step_count, 8);
    assert!(end[1].layers[0].memory.max_abs_diff(&whole_state[1].layers[0].memory) <= 1e-5);
}

fn fd_error(cfg: ModelConfig, batch: usize, seed: u64) -> f64 {
    let net = PolicyNet::<f64>::new(cfg, seed).unwrap();
    let inputs = random_inputs(&cfg, batch, 3, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let targets: Vec<usize> = (0..inputs.rows()).map(|_| rng.gen_range(0..4)).collect();
    let mask: Vec<bool> = (0..inputs.rows()).map(|i| i != 1).collect();
    // nonzero incoming state so the carried path is exercised too
    let mut warm = vec![net.zero_state(); batch];
    let pre = random_inputs(&cfg, batch, 2, seed + 3);
    let refs: Vec<&MemoryState<f64>> = warm.iter().collect();
    warm = net.forward_segment(&refs, &pre, false).unwrap().1;
    let f = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var, NumericsError> {
        let refs: Vec<&MemoryState<f64>> = warm.iter().collect();
        let states = net.bind_states(g, &refs).map_err(|e| NumericsError::Contract(e.to_string()))?;
        let (logits, _) = net
            .forward_graph(g, vars, &inputs, &states, true)
            .map_err(|e| NumericsError::Contract(e.to_string()))?;
        g.masked_nll(logits, &targets, &mask)
    };
    finite_difference_check(f, net.params(), 1e-5, 6, seed).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let err = fd_error(tiny(true, false), 1, 11);
    assert!(err <= 1e-4, "{err}");
    let err = fd_error(tiny(true, false), 2, 12);
    assert!(err <= 1e-4, "{err}");
    let err = fd_error(tiny(false, false), 2, 13);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn normalized_model_gradients_match_finite_differences() {
    let err = fd_error(tiny(true, true), 2, 14);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_logits() {
    let cfg = small();
    let net = PolicyNet::<f32>::new(cfg, 21).unwrap();
    let probe = random_inputs(&cfg, 2, 5, 22);
    let z = net.zero_state();
    let (before, states) = net.forward_segment(&[&z, &z], &probe, false).unwrap();
    let mut ck = Checkpoint::from_net(&net, "[train]\nmode = stateful\n");
    ck.moments = Some(AdamMoments {
        step: 7,
        m: net.params().to_vec(),
        v: net.params().to_vec(),
    });
    ck.slots = Some(vec![Some(states[0].clone()), None]);
    ck.progress = Some(Progress {
        epoch: 1,
        batch: 3,
        global_step: 40,
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let net2: PolicyNet<f32> = back.to_net().unwrap();
    assert_eq!(net2.param_hash(), net.param_hash());
    let (after, _) = net2.forward_segment(&[&z, &z], &probe, false).unwrap();
    assert_eq!(before.data(), after.data());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let net = PolicyNet::<f32>::new(small(), 21).unwrap();
    let bytes = Checkpoint::from_net(&net, "").to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut ver = bytes.clone();
    ver[8] = 9;
    assert!(Checkpoint::from_bytes(&ver).is_err());
    // config text edited without updating its hash
    let mut edited = bytes;
    let pos = edited.windows(7).position(|w| w == b"d_model").unwrap();
    edited[pos + 10] = b'9';
    assert!(Checkpoint::from_bytes(&edited).is_err());
}

#[test]
fn checkpoint_for_other_dims_is_refused() {
    let net = PolicyNet::<f32>::new(small(), 21).unwrap();
    let mut ck = Checkpoint::from_net(&net, "");
    ck.params.swap(0, 1);
    assert!(matches!(ck.to_net::<f32>(), Err(ModelError::Checkpoint(_))));
}

#[test]
fn greedy_prefers_first_index_on_ties() {
    let d = ActionDistribution::from_logits(&[1.0f64, 3.0, 3.0, 0.0]);
    assert_eq!(d.greedy(), Action::East);
    let d = ActionDistribution::from_logits(&[0.0f64; 4]);
    assert_eq!(d.greedy(), Action::North);
}
