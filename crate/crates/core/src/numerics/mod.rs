//! Dense tensors and a reverse-mode tape.
//!
//! Every model and training computation is expressed as operations on a
//! [`Graph`]. Values are computed eagerly as nodes are appended; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse. A node made by
//! [`Graph::detach`] is a fresh leaf with the same values, so no gradient
//! crosses it. That is the whole mechanism behind truncated training.

mod graph;
mod tensor;

pub use graph::{ElemFn, Gradients, Graph, StatePart, Var};
pub(crate) use graph::{log_softmax_at, softmax_in_place};
pub use tensor::{DType, Scalar, Tensor};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Entries with magnitude below this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

/// Compare reverse-mode gradients of `f` with central differences.
///
/// `f` builds a scalar loss from leaves bound to `params`. Up to
/// `samples_per_param` coordinates of each parameter are checked, chosen
/// uniformly by `seed`. Values passed through `detach` are held at their
/// unperturbed values during probing. Returns the largest
/// `|analytic - cd| / max(|analytic|, |cd|, FD_FLOOR)`.
///
/// A coordinate whose differences at `step` and `step / 2` disagree sits
/// on a kink (a ReLU crossing zero) and is skipped; more than a quarter of
/// probes skipped is an error.
pub fn finite_difference_check<Fun>(
    f: Fun,
    params: &[Tensor<f64>],
    step: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<f64, NumericsError>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item();
    let frozen = g.detached_values().to_vec();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::replaying(frozen.clone());
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(NumericsError::Contract(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let (mut probes, mut skipped) = (0usize, 0usize);
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p.shape());
        let n = p.numel().min(samples_per_param);
        for idx in sample(&mut rng, p.numel(), n).into_iter() {
            let orig = p.data()[idx];
            let mut central = |h: f64| -> Result<f64, NumericsError> {
                probe[pi].data_mut()[idx] = orig + h;
                let plus = eval(&probe)?;
                probe[pi].data_mut()[idx] = orig - h;
                let minus = eval(&probe)?;
                probe[pi].data_mut()[idx] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let cd = central(step)?;
            let half = central(step / 2.0)?;
            probes += 1;
            if (cd - half).abs() > 1e-4 * cd.abs().max(half.abs()).max(FD_FLOOR) {
                skipped += 1;
                continue;
            }
            let an = analytic.data()[idx];
            let denom = an.abs().max(cd.abs()).max(FD_FLOOR);
            worst = worst.max((an - cd).abs() / denom);
        }
    }
    if skipped * 4 > probes {
        return Err(NumericsError::Contract(format!(
            "{skipped} of {probes} probes landed on non-smooth points"
        )));
    }
    Ok(worst)
}
