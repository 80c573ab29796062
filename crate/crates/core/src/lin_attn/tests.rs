use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::finite_difference_check;

fn cfg(heads: usize, dk: usize, dv: usize, decay: bool, normalized: bool) -> AttentionConfig {
    AttentionConfig {
        n_heads: heads,
        d_key: dk,
        d_value: dv,
        feature_map: FeatureMap::EluPlusOne,
        decay_enabled: decay,
        normalized,
        test_mode: false,
    }
}

/// Quadratic-time attention: every output recomputed from the full prefix.
/// Inputs are per-step vectors for a single slot.
fn quadratic_oracle(
    c: &AttentionConfig,
    lam: Option<&[f64]>,
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let (hh, dk, dv) = (c.n_heads, c.d_key, c.d_value);
    let phi = |x: f64| match c.feature_map {
        FeatureMap::Identity => x,
        FeatureMap::EluPlusOne => {
            if x >= 0.0 {
                x + 1.0
            } else {
                x.exp()
            }
        }
    };
    let mut outs = Vec::new();
    for t in 0..q.len() {
        let mut out = vec![0.0; hh * dv];
        for h in 0..hh {
            let mut den = 0.0;
            for s in 0..=t {
                let mut w = 0.0;
                for i in 0..dk {
                    let decay = lam.map_or(1.0, |l| l[h * dk + i].powi((t - s) as i32));
                    w += phi(q[t][h * dk + i]) * decay * phi(k[s][h * dk + i]);
                }
                den += w;
                for j in 0..dv {
                    out[h * dv + j] += w * v[s][h * dv + j];
                }
            }
            if c.normalized {
                for j in 0..dv {
                    out[h * dv + j] /= den.max(NORMALIZER_EPS);
                }
            }
        }
        outs.push(out);
    }
    outs
}

struct Seq {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn random_seq(c: &AttentionConfig, steps: usize, rng: &mut ChaCha8Rng) -> Seq {
    let mk = |w: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..steps)
            .map(|_| Tensor::<f64>::randn(&[w], 1.0, rng).into_data())
            .collect()
    };
    Seq {
        q: mk(c.n_heads * c.d_key, rng),
        k: mk(c.n_heads * c.d_key, rng),
        v: mk(c.n_heads * c.d_value, rng),
    }
}

/// Run a batch of one slot through the graph op, in chunks.
fn run_chunked<F: Scalar>(
    c: &AttentionConfig,
    logits: Option<&Tensor<f64>>,
    seq: &Seq,
    splits: &[usize],
) -> Vec<Vec<f64>> {
    let cell = LinearAttentionCell::new(*c).unwrap();
    let mut g = Graph::<F>::new();
    let mut state = CellState::constant(&mut g, &[&LayerMemory::zeros(c)]).unwrap();
    let decay = logits.map(|l| g.constant(l.cast()));
    let mut outs = Vec::new();
    let mut start = 0;
    let mut bounds = splits.to_vec();
    bounds.push(seq.q.len());
    for end in bounds {
        if end <= start {
            continue;
        }
        let stack = |rows: &[Vec<f64>]| -> Tensor<F> {
            let w = rows[0].len();
            Tensor::from_f64(&[rows.len(), w], &rows.concat()).unwrap()
        };
        let q = g.constant(stack(&seq.q[start..end]));
        let k = g.constant(stack(&seq.k[start..end]));
        let v = g.constant(stack(&seq.v[start..end]));
        let (h, next) = cell.forward_chunk(&mut g, q, k, v, decay, state, 1, true).unwrap();
        let w = c.n_heads * c.d_value;
        for row in g.value(h).data().chunks(w) {
            outs.push(row.iter().map(|x| x.as_f64()).collect());
        }
        state = next;
        start = end;
    }
    outs
}

fn max_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn elu_plus_one_values() {
    let out = feature_map(&[0.0f64, 1.0, -1.0], FeatureMap::EluPlusOne);
    assert_eq!(out[0], 1.0);
    assert_eq!(out[1], 2.0);
    assert!((out[2] - (-1.0f64).exp()).abs() < 1e-15);
    assert!((out[2] - 0.367879).abs() < 1e-6);
    let xs: Vec<f64> = (-50..50).map(|i| i as f64 * 0.3).collect();
    assert!(feature_map(&xs, FeatureMap::EluPlusOne).iter().all(|&y| y > 0.0));
}

#[test]
fn identity_map_requires_test_mode() {
    let mut c = cfg(1, 2, 2, false, false);
    c.feature_map = FeatureMap::Identity;
    assert!(matches!(c.validate(), Err(LinAttnError::Config(_))));
    c.test_mode = true;
    assert!(c.validate().is_ok());
    let mut z = cfg(1, 2, 2, false, false);
    z.d_key = 0;
    assert!(z.validate().is_err());
}

#[test]
fn single_outer_product_step() {
    let mut c = cfg(1, 2, 2, false, false);
    c.feature_map = FeatureMap::Identity;
    c.test_mode = true;
    let cell = LinearAttentionCell::new(c).unwrap();
    let zero = LayerMemory::<f64>::zeros(&c);
    let (h, next) = cell.step(&zero, None, &[1.0, 0.0], &[1.0, 0.0], &[2.0, 3.0]).unwrap();
    assert_eq!(next.memory.data(), &[2.0, 3.0, 0.0, 0.0]);
    assert_eq!(h, vec![2.0, 3.0]);
}

#[test]
fn orthogonal_query_reads_nothing() {
    let mut c = cfg(1, 3, 2, false, false);
    c.feature_map = FeatureMap::Identity;
    c.test_mode = true;
    let cell = LinearAttentionCell::new(c).unwrap();
    let mut st = LayerMemory::<f64>::zeros(&c);
    for (k, v) in [([1.0, 0.0, 0.0], [1.0, 2.0]), ([0.0, 2.0, 0.0], [-3.0, 0.5])] {
        st = cell.step(&st, None, &[0.0, 0.0, 1.0], &k, &v).unwrap().1;
    }
    let (h, _) = cell.step(&st, None, &[0.0, 0.0, 1.0], &[1.0, 1.0, 0.0], &[4.0, 4.0]).unwrap();
    assert_eq!(h, vec![0.0, 0.0]);
}

#[test]
fn first_step_closed_form() {
    let c = cfg(2, 3, 4, false, false);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_seq(&c, 1, &mut rng);
    let cell = LinearAttentionCell::new(c).unwrap();
    let (h, _) = cell
        .step(&LayerMemory::<f64>::zeros(&c), None, &s.q[0], &s.k[0], &s.v[0])
        .unwrap();
    for head in 0..2 {
        let fq = feature_map(&s.q[0][head * 3..head * 3 + 3], c.feature_map);
        let fk = feature_map(&s.k[0][head * 3..head * 3 + 3], c.feature_map);
        let dot: f64 = fq.iter().zip(&fk).map(|(a, b)| a * b).sum();
        for j in 0..4 {
            let want = dot * s.v[0][head * 4 + j];
            assert!((h[head * 4 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn recurrence_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (decay, normalized) in [(false, false), (true, false), (false, true), (true, true)] {
        let c = cfg(2, 4, 3, decay, normalized);
        let s = random_seq(&c, 12, &mut rng);
        let logits = Tensor::<f64>::randn(&[2, 4], 1.5, &mut rng);
        let lam = kernel::decay_factors(logits.data());
        let want = quadratic_oracle(&c, decay.then_some(&lam[..]), &s.q, &s.k, &s.v);
        let got = run_chunked::<f64>(&c, decay.then_some(&logits), &s, &[]);
        let err = max_err(&got, &want);
        assert!(err <= 1e-10, "decay={decay} normalized={normalized}: {err}");
    }
}

#[test]
fn saturated_decay_matches_plain_accumulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = cfg(2, 4, 4, true, false);
    let plain = cfg(2, 4, 4, false, false);
    let s = random_seq(&c, 12, &mut rng);
    let logits = Tensor::<f64>::full(&[2, 4], 20.0);
    let got = run_chunked::<f64>(&c, Some(&logits), &s, &[]);
    let want = quadratic_oracle(&plain, None, &s.q, &s.k, &s.v);
    let err = max_err(&got, &want);
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn split_in_half_matches_unsplit() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = cfg(2, 4, 4, true, false);
    let s = random_seq(&c, 8, &mut rng);
    let logits = DecayGate::<f64>::new(2, 4).logits;
    let whole64 = run_chunked::<f64>(&c, Some(&logits), &s, &[]);
    let split64 = run_chunked::<f64>(&c, Some(&logits), &s, &[4]);
    assert!(max_err(&whole64, &split64) <= 1e-10);
    let whole32 = run_chunked::<f32>(&c, Some(&logits), &s, &[]);
    let split32 = run_chunked::<f32>(&c, Some(&logits), &s, &[4]);
    assert!(max_err(&whole32, &split32) <= 1e-5);
}

#[test]
fn detached_incoming_state_stops_gradient() {
    let c = cfg(1, 3, 2, true, true);
    let cell = LinearAttentionCell::new(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let zero = CellState::constant(&mut g, &[&LayerMemory::zeros(&c)]).unwrap();
    let decay = g.param(DecayGate::new(1, 3).logits);
    let q1 = g.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let k1 = g.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let v1 = g.param(Tensor::randn(&[4, 2], 1.0, &mut rng));
    let (_, carried) = cell.forward_chunk(&mut g, q1, k1, v1, Some(decay), zero, 1, false).unwrap();
    let q2 = g.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let k2 = g.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let v2 = g.param(Tensor::randn(&[4, 2], 1.0, &mut rng));
    let (h2, _) = cell.forward_chunk(&mut g, q2, k2, v2, Some(decay), carried, 1, true).unwrap();
    let loss = g.sum(h2).unwrap();
    let grads = g.backward(loss).unwrap();
    for x in [q1, k1, v1] {
        assert!(grads.get(x).is_none());
    }
    for x in [q2, k2, v2, decay] {
        assert!(grads.get(x).unwrap().norm() > 0.0);
    }

    // without detaching, chunk-1 inputs do receive gradient via the state
    let mut g = Graph::<f64>::new();
    let zero = CellState::constant(&mut g, &[&LayerMemory::zeros(&c)]).unwrap();
    let q1 = g.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let k1 = g.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let v1 = g.param(Tensor::randn(&[4, 2], 1.0, &mut rng));
    let decay = g.param(DecayGate::new(1, 3).logits);
    let (_, carried) = cell.forward_chunk(&mut g, q1, k1, v1, Some(decay), zero, 1, false).unwrap();
    let q2 = g.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let v2 = g.constant(Tensor::randn(&[4, 2], 1.0, &mut rng));
    let (h2, _) = cell.forward_chunk(&mut g, q2, q2, v2, Some(decay), carried, 1, false).unwrap();
    let loss = g.sum(h2).unwrap();
    let grads = g.backward(loss).unwrap();
    // queries of chunk 1 only shape chunk-1 outputs, never the carried state
    assert!(grads.get(q1).is_none_or(|t| t.norm() == 0.0));
    for x in [k1, v1] {
        assert!(grads.get(x).unwrap().norm() > 0.0);
    }
}

#[test]
fn cell_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (decay, normalized) in [(false, false), (true, false), (true, true)] {
        let c = cfg(2, 3, 2, decay, normalized);
        let cell = LinearAttentionCell::new(c).unwrap();
        let batch = 2;
        let steps = 5;
        let rows = batch * steps;
        let mut params = vec![
            Tensor::randn(&[rows, 6], 0.7, &mut rng),
            Tensor::randn(&[rows, 6], 0.7, &mut rng),
            Tensor::randn(&[rows, 4], 1.0, &mut rng),
            Tensor::randn(&[batch, 2, 3, 2], 0.5, &mut rng),
            Tensor::randn(&[rows, 4], 1.0, &mut rng),
            Tensor::randn(&[2, 3], 1.0, &mut rng),
        ];
        if normalized {
            // a positive normalizer keeps the denominator away from its floor
            params.push(Tensor::full(&[batch, 2, 3], 0.5));
        }
        let err = finite_difference_check(
            |g, v| {
                let state = CellState {
                    memory: v[3],
                    normalizer: normalized.then(|| v[6]),
                };
                let decay_var = decay.then_some(v[5]);
                let (h, out) = cell
                    .forward_chunk(g, v[0], v[1], v[2], decay_var, state, batch, false)
                    .map_err(|e| NumericsError::Contract(e.to_string()))?;
                let w = g.mul(h, v[4])?;
                let s1 = g.sum(w)?;
                let m2 = g.mul(out.memory, out.memory)?;
                let s2 = g.sum(m2)?;
                let s2 = g.scale(s2, 0.1)?;
                let mut total = g.add(s1, s2)?;
                if let Some(z) = out.normalizer {
                    let sz = g.sum(z)?;
                    total = g.add(total, sz)?;
                }
                Ok(total)
            },
            &params,
            1e-5,
            12,
            3,
        )
        .unwrap();
        // the normalized quotient loses a few digits to rounding at this step
        let tol = if normalized { 1e-4 } else { 1e-6 };
        assert!(err <= tol, "decay={decay} normalized={normalized}: {err}");
    }
}

#[test]
fn outputs_are_causal() {
    let c = cfg(2, 3, 3, true, true);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = random_seq(&c, 10, &mut rng);
    let logits = DecayGate::<f64>::new(2, 3).logits;
    let base = run_chunked::<f64>(&c, Some(&logits), &s, &[]);
    let mut p = Seq {
        q: s.q.clone(),
        k: s.k.clone(),
        v: s.v.clone(),
    };
    p.k[6][0] += 3.0;
    p.v[6][1] -= 2.0;
    p.q[7][2] += 1.0;
    let pert = run_chunked::<f64>(&c, Some(&logits), &p, &[]);
    for t in 0..6 {
        assert!(base[t]
            .iter()
            .zip(&pert[t])
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_ne!(base[6], pert[6]);
}

#[test]
fn output_is_linear_in_each_value() {
    let c = cfg(1, 4, 3, true, false);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_seq(&c, 6, &mut rng);
    let logits = DecayGate::<f64>::new(1, 4).logits;
    let base = run_chunked::<f64>(&c, Some(&logits), &s, &[]);
    let mut zeroed = Seq {
        q: s.q.clone(),
        k: s.k.clone(),
        v: s.v.clone(),
    };
    zeroed.v[2] = vec![0.0; 3];
    let mut doubled = Seq {
        q: s.q.clone(),
        k: s.k.clone(),
        v: s.v.clone(),
    };
    doubled.v[2] = s.v[2].iter().map(|x| 2.0 * x).collect();
    let without = run_chunked::<f64>(&c, Some(&logits), &zeroed, &[]);
    let twice = run_chunked::<f64>(&c, Some(&logits), &doubled, &[]);
    for t in 2..6 {
        for j in 0..3 {
            let contrib = base[t][j] - without[t][j];
            assert!((twice[t][j] - without[t][j] - 2.0 * contrib).abs() < 1e-12);
        }
    }
}

#[test]
fn decayed_memory_stays_bounded() {
    let c = cfg(2, 8, 8, true, false);
    let cell = LinearAttentionCell::new(c).unwrap();
    let gate = DecayGate::<f64>::new(2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut st = LayerMemory::zeros(&c);
    let mut at_100 = 0.0;
    let mut peak: f64 = 0.0;
    for t in 1..=10_000 {
        let q = Tensor::<f64>::randn(&[16], 1.0, &mut rng).into_data();
        let k = Tensor::<f64>::randn(&[16], 1.0, &mut rng).into_data();
        let v = Tensor::<f64>::randn(&[16], 1.0, &mut rng).into_data();
        st = cell.step(&st, Some(&gate), &q, &k, &v).unwrap().1;
        let n = st.memory.norm();
        if t == 100 {
            at_100 = n;
        }
        if t > 100 {
            peak = peak.max(n);
        }
    }
    assert!(peak <= 10.0 * at_100, "peak {peak} vs {at_100}");
}

#[test]
fn decay_factors_are_inside_unit_interval() {
    let gate = DecayGate::<f64> {
        logits: Tensor::from_f64(&[1, 5], &[-30.0, -1.0, 0.0, 3.0, 30.0]).unwrap(),
    };
    for l in gate.factors() {
        assert!(l > 0.0 && l < 1.0, "{l}");
    }
    assert!((DecayGate::<f64>::new(1, 1).factors()[0] - 0.9526).abs() < 1e-3);
}

#[test]
fn state_serialization_round_trips_and_checks_config() {
    let c = cfg(2, 3, 4, true, true);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut st = MemoryState::<f32>::zeros(3, &c);
    for l in st.layers.iter_mut() {
        l.memory = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        l.normalizer = Some(Tensor::randn(&[2, 3], 1.0, &mut rng));
    }
    st.step_count = 77;
    let mut buf = Vec::new();
    st.write_to(&c, &mut buf).unwrap();
    let back = MemoryState::<f32>::read_from(3, &c, &mut buf.as_slice()).unwrap();
    assert_eq!(back, st);
    assert!(MemoryState::<f32>::read_from(2, &c, &mut buf.as_slice()).is_err());
    let other = cfg(2, 3, 4, false, true);
    assert!(MemoryState::<f32>::read_from(3, &other, &mut buf.as_slice()).is_err());
    assert!(MemoryState::<f32>::read_from(3, &c, &mut &buf[..buf.len() - 1]).is_err());
}

#[test]
fn zero_state_invariants() {
    let c = cfg(2, 3, 4, true, true);
    let st = MemoryState::<f64>::zeros(2, &c);
    assert!(st.is_zero());
    assert_eq!(st.norm_sum_of_heads(), 0.0);
    assert!(st.check_geometry(2, &c).is_ok());
    assert!(st.check_geometry(3, &c).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunked_execution_matches_unsplit(
        seed in 0u64..1000,
        heads in 1usize..3,
        dk in 1usize..5,
        dv in 1usize..5,
        steps in 2usize..14,
        decay in any::<bool>(),
        normalized in any::<bool>(),
        cut_a in 0usize..14,
        cut_b in 0usize..14,
    ) {
        let c = cfg(heads, dk, dv, decay, normalized);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_seq(&c, steps, &mut rng);
        let logits = Tensor::<f64>::randn(&[heads, dk], 1.0, &mut rng);
        let mut cuts = vec![cut_a % steps, cut_b % steps];
        cuts.sort();
        let l = decay.then_some(&logits);
        let whole = run_chunked::<f64>(&c, l, &s, &[]);
        let split = run_chunked::<f64>(&c, l, &s, &cuts);
        prop_assert!(max_err(&whole, &split) <= 1e-10);
        let whole32 = run_chunked::<f32>(&c, l, &s, &[]);
        let split32 = run_chunked::<f32>(&c, l, &s, &cuts);
        prop_assert!(max_err(&whole32, &split32) <= 1e-5);
    }
}
