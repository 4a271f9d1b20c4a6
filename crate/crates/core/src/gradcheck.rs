//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Magnitude below which a gradient pair is compared absolutely rather than
/// relatively: both sides of a coordinate with no real dependence on the loss
/// sit at rounding noise. The difference quotient alone carries about
/// `eps * |f| / h` of noise, roughly 2e-10 for a loss near 10 at h = 1e-5.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Distinct parameter tensors that had at least one coordinate checked.
    pub fn params_covered(&self) -> usize {
        let mut names: Vec<&str> = self.checks.iter().map(|c| c.param.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names.len()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares the backward pass of `forward` against `(f(θ+h) − f(θ−h)) / 2h`
/// on at least `sample_count` coordinates, spread so every parameter tensor
/// contributes. Leaves `params` values unchanged and their grads holding the
/// analytic gradient.
pub fn grad_check<Fwd>(forward: Fwd, params: &mut ParamStore<f64>, h: f64, sample_count: usize, seed: u64) -> Result<GradCheckReport>
where
    Fwd: Fn(&mut Graph<f64>) -> Result<NodeId>,
{
    let eval = |params: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(params);
        let loss = forward(&mut g)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(v)
    };

    params.zero_grads();
    let grads = {
        let mut g = Graph::with_params(params);
        let loss = forward(&mut g)?;
        g.backward(loss, 1.0)?
    };
    params.accumulate(&grads);

    let n_params = params.len().max(1);
    let per_tensor = sample_count.div_ceil(n_params).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for pi in 0..params.len() {
        let len = params.entry(pi).value.len();
        let picks = index::sample(&mut rng, len, per_tensor.min(len)).into_vec();
        for idx in picks {
            let name = params.entry(pi).name.clone();
            let analytic = params.entry(pi).grad.data()[idx];
            let orig = params.entry(pi).value.data()[idx];
            params.entries_mut()[pi].value.data_mut()[idx] = orig + h;
            let up = eval(params);
            params.entries_mut()[pi].value.data_mut()[idx] = orig - h;
            let down = eval(params);
            params.entries_mut()[pi].value.data_mut()[idx] = orig;
            let numeric = (up? - down?) / (2.0 * h);
            checks.push(CoordCheck {
                param: name,
                index: idx,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric),
            });
        }
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, checks })
}
