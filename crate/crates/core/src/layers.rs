//! Building blocks shared by the encoder and decoder, and the parameter
//! naming/initialization scheme they rely on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttnMask, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Expected parameter: name and shape.
pub type ParamSpec = (String, Vec<usize>);

pub(crate) fn linear_spec(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    out.push((format!("{prefix}.weight"), vec![d_in, d_out]));
    out.push((format!("{prefix}.bias"), vec![d_out]));
}

pub(crate) fn norm_spec(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d]));
    out.push((format!("{prefix}.bias"), vec![d]));
}

pub(crate) fn attention_spec(out: &mut Vec<ParamSpec>, prefix: &str, d_q: usize, d_kv: usize) {
    linear_spec(out, &format!("{prefix}.q"), d_q, d_q);
    linear_spec(out, &format!("{prefix}.k"), d_kv, d_q);
    linear_spec(out, &format!("{prefix}.v"), d_kv, d_q);
    linear_spec(out, &format!("{prefix}.out"), d_q, d_q);
}

pub(crate) fn mlp_spec(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, ratio: usize) {
    linear_spec(out, &format!("{prefix}.fc1"), d, d * ratio);
    linear_spec(out, &format!("{prefix}.fc2"), d * ratio, d);
}

/// Fills a store from specs: norm gains 1, biases 0, everything else
/// truncated normal. Specs are visited in name order so the draw sequence
/// depends only on `seed`.
pub fn init_params<F: Scalar>(specs: &[ParamSpec], std: f64, seed: u64) -> Result<ParamStore<F>> {
    let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in sorted {
        let t = if name.ends_with(".gain") {
            Tensor::filled(shape, F::one())
        } else if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            trunc_normal(shape, std, &mut rng)
        };
        store.insert(name.clone(), t)?;
    }
    Ok(store)
}

/// Verifies that every spec is present with the right shape.
pub fn check_params<F: Scalar>(store: &ParamStore<F>, specs: &[ParamSpec]) -> Result<()> {
    for (name, shape) in specs {
        match store.get(name) {
            None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

pub(crate) fn linear<F: Scalar>(g: &mut Graph<'_, F>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub(crate) fn norm<F: Scalar>(g: &mut Graph<'_, F>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Projects queries from `x` and keys/values from `source`, attends, and
/// applies the output projection. Returns `(output, attention node)`.
pub(crate) fn attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: NodeId,
    source: NodeId,
    prefix: &str,
    heads: usize,
    mask: &AttnMask,
) -> Result<(NodeId, NodeId)> {
    let q = linear(g, x, &format!("{prefix}.q"))?;
    let k = linear(g, source, &format!("{prefix}.k"))?;
    let v = linear(g, source, &format!("{prefix}.v"))?;
    let a = g.attention(q, k, v, heads, mask)?;
    let o = linear(g, a, &format!("{prefix}.out"))?;
    Ok((o, a))
}

pub(crate) fn mlp<F: Scalar>(g: &mut Graph<'_, F>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.gelu(h);
    linear(g, h, &format!("{prefix}.fc2"))
}

/// Row-level linear layer for incremental decoding; matches [`linear`]
/// bit for bit.
pub(crate) fn linear_rows<F: Scalar>(store: &ParamStore<F>, x: &[F], rows: usize, prefix: &str) -> Result<Vec<F>> {
    let w = store
        .get(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::Config(format!("missing parameter `{prefix}.weight`")))?;
    let b = store
        .get(&format!("{prefix}.bias"))
        .ok_or_else(|| Error::Config(format!("missing parameter `{prefix}.bias`")))?;
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![F::zero(); rows * n];
    crate::tensor::matmul_acc(x, w.data(), &mut out, rows, k, n);
    for row in out.chunks_exact_mut(n) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(out)
}

pub(crate) fn norm_row<F: Scalar>(store: &ParamStore<F>, x: &[F], prefix: &str) -> Result<Vec<F>> {
    let gain = store
        .get(&format!("{prefix}.gain"))
        .ok_or_else(|| Error::Config(format!("missing parameter `{prefix}.gain`")))?;
    let bias = store
        .get(&format!("{prefix}.bias"))
        .ok_or_else(|| Error::Config(format!("missing parameter `{prefix}.bias`")))?;
    let mut out = vec![F::zero(); x.len()];
    crate::tensor::layer_norm_row(
        x,
        gain.data(),
        bias.data(),
        F::of(crate::tensor::LAYER_NORM_EPS),
        &mut out,
    );
    Ok(out)
}
