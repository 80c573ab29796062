//! Slice-level forward and backward passes of the linear-attention
//! recurrence, shared by the tape op and the value-only stepping path.
//!
//! Per slot `b` and head `h`, with `a = φ(q_t)`, `c = φ(k_t)`:
//!
//! ```text
//! M_t = diag(λ) M_{t-1} + c v_tᵀ
//! z_t = λ ⊙ z_{t-1} + c                       (normalized mode)
//! h_t = M_tᵀ a  [/ max(a·z_t, eps)]
//! ```
//!
//! `λ = sigmoid(decay logits)` when decay is on, otherwise 1.

use crate::numerics::Scalar;

use super::FeatureMap;

/// Static shape and mode of one recurrence invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGeometry {
    pub batch: usize,
    pub heads: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub feature_map: FeatureMap,
    pub normalized: bool,
    pub eps: f64,
}

impl CellGeometry {
    fn memory_len(&self) -> usize {
        self.batch * self.heads * self.d_key * self.d_value
    }

    fn normalizer_len(&self) -> usize {
        self.batch * self.heads * self.d_key
    }
}

/// States kept by the forward pass for the backward pass.
pub struct SavedStates<F> {
    /// `[T+1, B, H, dk, dv]`, index 0 is the incoming memory.
    pub history_memory: Option<Vec<F>>,
    /// `[T+1, B, H, dk]`.
    pub history_normalizer: Option<Vec<F>>,
    pub final_memory: Vec<F>,
    pub final_normalizer: Option<Vec<F>>,
}

pub struct CellGrads<F> {
    pub dq: Vec<F>,
    pub dk: Vec<F>,
    pub dv: Vec<F>,
    pub dmemory: Vec<F>,
    pub ddecay_logits: Option<Vec<F>>,
    pub dnormalizer: Option<Vec<F>>,
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn decay_factors<F: Scalar>(logits: &[F]) -> Vec<F> {
    logits.iter().map(|&x| sigmoid(x)).collect()
}

#[inline]
fn feature<F: Scalar>(map: FeatureMap, src: &[F], dst: &mut [F]) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = map.apply(x);
    }
}

/// Run `steps` recurrence steps. Inputs are time-major (`row = t*B + b`).
#[allow(clippy::too_many_arguments)]
pub fn forward<F: Scalar>(
    geom: &CellGeometry,
    steps: usize,
    q: &[F],
    k: &[F],
    v: &[F],
    decay: Option<&[F]>,
    memory: &[F],
    normalizer: Option<&[F]>,
    keep_history: bool,
) -> (Vec<F>, SavedStates<F>) {
    let CellGeometry {
        batch,
        heads,
        d_key: dk,
        d_value: dv,
        feature_map,
        normalized,
        eps,
    } = *geom;
    let eps = F::of(eps);
    let mut m = memory.to_vec();
    let mut z = normalizer.map(|z| z.to_vec());
    let mut hist_m = keep_history.then(|| {
        let mut h = Vec::with_capacity((steps + 1) * m.len());
        h.extend_from_slice(&m);
        h
    });
    let mut hist_z = match (&z, keep_history) {
        (Some(z), true) => {
            let mut h = Vec::with_capacity((steps + 1) * z.len());
            h.extend_from_slice(z);
            Some(h)
        }
        _ => None,
    };
    let mut out = vec![F::zero(); steps * batch * heads * dv];
    let mut a = vec![F::zero(); dk];
    let mut c = vec![F::zero(); dk];

    for t in 0..steps {
        for b in 0..batch {
            let row = t * batch + b;
            for h in 0..heads {
                let qoff = row * heads * dk + h * dk;
                let voff = row * heads * dv + h * dv;
                feature(feature_map, &q[qoff..qoff + dk], &mut a);
                feature(feature_map, &k[qoff..qoff + dk], &mut c);
                let vv = &v[voff..voff + dv];
                let moff = (b * heads + h) * dk * dv;
                let mh = &mut m[moff..moff + dk * dv];
                let lam = decay.map(|d| &d[h * dk..(h + 1) * dk]);
                for i in 0..dk {
                    let mrow = &mut mh[i * dv..(i + 1) * dv];
                    let ci = c[i];
                    match lam {
                        Some(l) => {
                            let li = l[i];
                            for (mij, &vj) in mrow.iter_mut().zip(vv) {
                                *mij = li * *mij + ci * vj;
                            }
                        }
                        None => {
                            for (mij, &vj) in mrow.iter_mut().zip(vv) {
                                *mij = *mij + ci * vj;
                            }
                        }
                    }
                }
                let o = &mut out[voff..voff + dv];
                for i in 0..dk {
                    let ai = a[i];
                    for (oj, &mij) in o.iter_mut().zip(&mh[i * dv..(i + 1) * dv]) {
                        *oj = *oj + ai * mij;
                    }
                }
                if let Some(z) = z.as_mut() {
                    let zoff = (b * heads + h) * dk;
                    let zh = &mut z[zoff..zoff + dk];
                    let mut s = F::zero();
                    for i in 0..dk {
                        let li = lam.map_or(F::one(), |l| l[i]);
                        zh[i] = li * zh[i] + c[i];
                        s = s + a[i] * zh[i];
                    }
                    let den = s.max(eps);
                    for oj in o.iter_mut() {
                        *oj = *oj / den;
                    }
                }
            }
        }
        if let Some(hm) = hist_m.as_mut() {
            hm.extend_from_slice(&m);
        }
        if let (Some(hz), Some(z)) = (hist_z.as_mut(), z.as_ref()) {
            hz.extend_from_slice(z);
        }
    }
    debug_assert!(!normalized || z.is_some());
    (
        out,
        SavedStates {
            history_memory: hist_m,
            history_normalizer: hist_z,
            final_memory: m,
            final_normalizer: z,
        },
    )
}

/// First `(slot, head, step)` whose output is not finite.
pub fn first_non_finite<F: Scalar>(out: &[F], geom: &CellGeometry) -> Option<(usize, usize, usize)> {
    let dv = geom.d_value;
    let pos = out.iter().position(|x| !x.is_finite())?;
    let head = (pos / dv) % geom.heads;
    let row = pos / (dv * geom.heads);
    Some((row % geom.batch, head, row / geom.batch))
}

/// Reverse sweep. `dout` is the gradient of the outputs (absent when only
/// the carried state is used downstream); `dmemory_final` and
/// `dnormalizer_final` are gradients reaching the final carried state.
#[allow(clippy::too_many_arguments)]
pub fn backward<F: Scalar>(
    geom: &CellGeometry,
    steps: usize,
    q: &[F],
    k: &[F],
    v: &[F],
    decay: Option<&[F]>,
    saved: &SavedStates<F>,
    dout: Option<&[F]>,
    dmemory_final: Option<&[F]>,
    dnormalizer_final: Option<&[F]>,
) -> CellGrads<F> {
    let CellGeometry {
        batch,
        heads,
        d_key: dk,
        d_value: dv,
        feature_map,
        normalized,
        eps,
    } = *geom;
    let eps = F::of(eps);
    let hist_m = saved
        .history_memory
        .as_ref()
        .expect("backward through a cell run without history");
    let hist_z = saved.history_normalizer.as_ref();
    let mem_len = geom.memory_len();
    let z_len = geom.normalizer_len();

    let mut dq = vec![F::zero(); q.len()];
    let mut dkv = vec![F::zero(); k.len()];
    let mut dvv = vec![F::zero(); v.len()];
    let mut dmem = vec![F::zero(); mem_len];
    let mut dlam = decay.map(|_| vec![F::zero(); heads * dk]);
    let mut dz0 = normalized.then(|| vec![F::zero(); z_len]);

    let mut a = vec![F::zero(); dk];
    let mut c = vec![F::zero(); dk];
    let mut da = vec![F::zero(); dk];
    let mut dc = vec![F::zero(); dk];
    let mut num = vec![F::zero(); dv];
    let mut dnum = vec![F::zero(); dv];
    let mut gm = vec![F::zero(); dk * dv];
    let mut gz = vec![F::zero(); dk];

    for b in 0..batch {
        for h in 0..heads {
            let moff = (b * heads + h) * dk * dv;
            let zoff = (b * heads + h) * dk;
            match dmemory_final {
                Some(g) => gm.copy_from_slice(&g[moff..moff + dk * dv]),
                None => gm.iter_mut().for_each(|x| *x = F::zero()),
            }
            match dnormalizer_final {
                Some(g) => gz.copy_from_slice(&g[zoff..zoff + dk]),
                None => gz.iter_mut().for_each(|x| *x = F::zero()),
            }
            let lam = decay.map(|d| &d[h * dk..(h + 1) * dk]);
            for t in (0..steps).rev() {
                let row = t * batch + b;
                let qoff = row * heads * dk + h * dk;
                let voff = row * heads * dv + h * dv;
                feature(feature_map, &q[qoff..qoff + dk], &mut a);
                feature(feature_map, &k[qoff..qoff + dk], &mut c);
                let vv = &v[voff..voff + dv];
                let m_t = &hist_m[(t + 1) * mem_len + moff..(t + 1) * mem_len + moff + dk * dv];
                let m_prev = &hist_m[t * mem_len + moff..t * mem_len + moff + dk * dv];
                da.iter_mut().for_each(|x| *x = F::zero());
                dc.iter_mut().for_each(|x| *x = F::zero());

                if let Some(dout) = dout {
                    let dh = &dout[voff..voff + dv];
                    if normalized {
                        let hz = hist_z.expect("normalizer history");
                        let z_t = &hz[(t + 1) * z_len + zoff..(t + 1) * z_len + zoff + dk];
                        let s: F = a.iter().zip(z_t).map(|(&x, &y)| x * y).sum();
                        let den = s.max(eps);
                        num.iter_mut().for_each(|x| *x = F::zero());
                        for i in 0..dk {
                            for j in 0..dv {
                                num[j] = num[j] + a[i] * m_t[i * dv + j];
                            }
                        }
                        for j in 0..dv {
                            dnum[j] = dh[j] / den;
                        }
                        if s > eps {
                            let ds = -dh.iter().zip(&num).map(|(&g, &n)| g * n).sum::<F>() / (den * den);
                            for i in 0..dk {
                                da[i] = da[i] + ds * z_t[i];
                                gz[i] = gz[i] + ds * a[i];
                            }
                        }
                    } else {
                        dnum.copy_from_slice(dh);
                    }
                    for i in 0..dk {
                        let ai = a[i];
                        let mrow = &m_t[i * dv..(i + 1) * dv];
                        let grow = &mut gm[i * dv..(i + 1) * dv];
                        let mut acc = F::zero();
                        for j in 0..dv {
                            grow[j] = grow[j] + ai * dnum[j];
                            acc = acc + mrow[j] * dnum[j];
                        }
                        da[i] = da[i] + acc;
                    }
                }

                // M_t = λ ⊙ M_prev + c vᵀ
                let dvrow = &mut dvv[voff..voff + dv];
                for i in 0..dk {
                    let grow = &mut gm[i * dv..(i + 1) * dv];
                    let ci = c[i];
                    let mut acc = F::zero();
                    for j in 0..dv {
                        acc = acc + grow[j] * vv[j];
                        dvrow[j] = dvrow[j] + grow[j] * ci;
                    }
                    dc[i] = dc[i] + acc;
                    if let (Some(l), Some(dl)) = (lam, dlam.as_mut()) {
                        let prow = &m_prev[i * dv..(i + 1) * dv];
                        let dot: F = grow.iter().zip(prow).map(|(&g, &p)| g * p).sum();
                        dl[h * dk + i] = dl[h * dk + i] + dot;
                        let li = l[i];
                        grow.iter_mut().for_each(|g| *g = *g * li);
                    }
                }
                if normalized {
                    let hz = hist_z.expect("normalizer history");
                    let z_prev = &hz[t * z_len + zoff..t * z_len + zoff + dk];
                    for i in 0..dk {
                        dc[i] = dc[i] + gz[i];
                        if let (Some(l), Some(dl)) = (lam, dlam.as_mut()) {
                            dl[h * dk + i] = dl[h * dk + i] + gz[i] * z_prev[i];
                            gz[i] = gz[i] * l[i];
                        }
                    }
                }

                for i in 0..dk {
                    let (xq, xk) = (q[qoff + i], k[qoff + i]);
                    dq[qoff + i] = dq[qoff + i] + da[i] * feature_map.derivative(xq, a[i]);
                    dkv[qoff + i] = dkv[qoff + i] + dc[i] * feature_map.derivative(xk, c[i]);
                }
            }
            dmem[moff..moff + dk * dv].copy_from_slice(&gm);
            if let Some(dz) = dz0.as_mut() {
                dz[zoff..zoff + dk].copy_from_slice(&gz);
            }
        }
    }

    // chain through λ = sigmoid(logit)
    let ddecay_logits = match (dlam, decay) {
        (Some(dl), Some(l)) => Some(
            dl.iter()
                .zip(l)
                .map(|(&g, &lv)| g * lv * (F::one() - lv))
                .collect(),
        ),
        _ => None,
    };
    CellGrads {
        dq,
        dk: dkv,
        dv: dvv,
        dmemory: dmem,
        ddecay_logits,
        dnormalizer: dz0,
    }
}
