//! Autoregressive text decoder: causal self-attention, cross-attention over
//! the fused image context, and an MLP per block (pre-norm residual).

use serde::{Deserialize, Serialize};

use crate::autograd::{attend_row, AttnMask, Graph, NodeId};
use crate::error::{Error, Result};
use crate::fusion::FusedContext;
use crate::layers::{self, ParamSpec};
use crate::params::ParamStore;
use crate::tensor::{self, Scalar, Tensor};

const PREFIX: &str = "decoder";

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl DecoderConfig {
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            layers: 3,
            heads: 4,
            d_model: 128,
            max_seq_len,
            vocab_size,
            mlp_ratio: 4,
        }
    }

    /// 6 layers, 6 heads.
    pub fn base(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            layers: 6,
            heads: 6,
            d_model: 768,
            max_seq_len,
            vocab_size,
            mlp_ratio: 4,
        }
    }

    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            max_seq_len: 16,
            vocab_size,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("vocab_size and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Parameter shapes; cross-attention keys/values read `context_dim`-wide
    /// encoder rows.
    pub fn param_specs(&self, context_dim: usize) -> Vec<ParamSpec> {
        let d = self.d_model;
        let mut s = vec![
            (format!("{PREFIX}.tok_embed"), vec![self.vocab_size, d]),
            (format!("{PREFIX}.pos_embed"), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.layers {
            let b = format!("{PREFIX}.blocks.{l:02}");
            layers::norm_spec(&mut s, &format!("{b}.norm1"), d);
            layers::attention_spec(&mut s, &format!("{b}.self_attn"), d, d);
            layers::norm_spec(&mut s, &format!("{b}.norm2"), d);
            layers::attention_spec(&mut s, &format!("{b}.cross_attn"), d, context_dim);
            layers::norm_spec(&mut s, &format!("{b}.norm3"), d);
            layers::mlp_spec(&mut s, &format!("{b}.mlp"), d, self.mlp_ratio);
        }
        layers::norm_spec(&mut s, &format!("{PREFIX}.norm"), d);
        layers::linear_spec(&mut s, &format!("{PREFIX}.head"), d, self.vocab_size);
        s
    }
}

/// `[T, T]` with entry `(i, j)` true (visible) iff `j <= i`.
pub fn causal_mask(t: usize) -> Tensor<f64> {
    let data = (0..t * t)
        .map(|k| if k % t <= k / t { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![t, t], data).expect("square")
}

/// Cross-attention weights per layer, each `[heads, T, context_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<F> {
    pub heads: usize,
    pub rows: usize,
    pub keys: usize,
    pub layers: Vec<Vec<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput<F> {
    pub logits: Tensor<F>,
    pub attention_trace: Option<AttentionTrace<F>>,
}

fn check_tokens(tokens: &[u32], cfg: &DecoderConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    Ok(())
}

/// Records the decoder on `g`. Returns the logits node and the cross-attention
/// node of every layer.
pub fn decoder_in_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    tokens: &[u32],
    memory: NodeId,
    mask: &AttnMask,
    cfg: &DecoderConfig,
) -> Result<(NodeId, Vec<NodeId>)> {
    check_tokens(tokens, cfg)?;
    let table = g.param(&format!("{PREFIX}.tok_embed"))?;
    let x = g.embedding(table, tokens)?;
    let pos_table = g.param(&format!("{PREFIX}.pos_embed"))?;
    let pos = g.slice_rows(pos_table, 0, tokens.len())?;
    let mut x = g.add(x, pos)?;
    let mut cross = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let b = format!("{PREFIX}.blocks.{l:02}");
        let h = layers::norm(g, x, &format!("{b}.norm1"))?;
        let (a, _) = layers::attention(g, h, h, &format!("{b}.self_attn"), cfg.heads, &AttnMask::Causal)?;
        x = g.add(x, a)?;
        let h = layers::norm(g, x, &format!("{b}.norm2"))?;
        let (a, probs) = layers::attention(g, h, memory, &format!("{b}.cross_attn"), cfg.heads, mask)?;
        cross.push(probs);
        x = g.add(x, a)?;
        let h = layers::norm(g, x, &format!("{b}.norm3"))?;
        let m = layers::mlp(g, h, &format!("{b}.mlp"))?;
        x = g.add(x, m)?;
    }
    let h = layers::norm(g, x, &format!("{PREFIX}.norm"))?;
    let logits = layers::linear(g, h, &format!("{PREFIX}.head"))?;
    Ok((logits, cross))
}

pub fn decoder_forward<F: Scalar>(
    tokens: &[u32],
    context: &FusedContext<F>,
    params: &ParamStore<F>,
    cfg: &DecoderConfig,
    want_trace: bool,
) -> Result<DecoderOutput<F>> {
    context.validate()?;
    let mut g = Graph::with_params(params);
    let memory = g.constant(context.memory.clone());
    let (logits, cross) = decoder_in_graph(&mut g, tokens, memory, &context.key_mask(), cfg)?;
    let attention_trace = if want_trace {
        let heads = cfg.heads;
        let rows = tokens.len();
        let keys = context.memory.rows();
        Some(AttentionTrace {
            heads,
            rows,
            keys,
            layers: cross
                .iter()
                .map(|&n| g.attention_probs(n).expect("attention node").0.to_vec())
                .collect(),
        })
    } else {
        None
    };
    Ok(DecoderOutput {
        logits: g.value(logits).clone(),
        attention_trace,
    })
}

struct LayerCache<F> {
    self_k: Vec<F>,
    self_v: Vec<F>,
    cross_k: Vec<F>,
    cross_v: Vec<F>,
}

/// Key/value-cached decoding, one token at a time. Each step reproduces the
/// corresponding row of [`decoder_forward`] exactly.
pub struct IncrementalDecoder<'a, F: Scalar> {
    params: &'a ParamStore<F>,
    cfg: &'a DecoderConfig,
    cache: Vec<LayerCache<F>>,
    keys: Vec<usize>,
    pos: usize,
}

impl<'a, F: Scalar> IncrementalDecoder<'a, F> {
    pub fn new(context: &FusedContext<F>, params: &'a ParamStore<F>, cfg: &'a DecoderConfig) -> Result<Self> {
        context.validate()?;
        layers::check_params(params, &cfg.param_specs(context.memory.cols()))?;
        let rows = context.memory.rows();
        let mut cache = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let b = format!("{PREFIX}.blocks.{l:02}.cross_attn");
            cache.push(LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: layers::linear_rows(params, context.memory.data(), rows, &format!("{b}.k"))?,
                cross_v: layers::linear_rows(params, context.memory.data(), rows, &format!("{b}.v"))?,
            });
        }
        let keys = (0..rows).filter(|&j| context.valid[j]).collect();
        Ok(Self {
            params,
            cfg,
            cache,
            keys,
            pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token; returns its logits row.
    pub fn step(&mut self, token: u32) -> Result<Vec<F>> {
        let cfg = self.cfg;
        let d = cfg.d_model;
        if self.pos >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        let get = |name: String| {
            self.params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
        };
        let table = get(format!("{PREFIX}.tok_embed"))?;
        if token as usize >= table.rows() {
            return Err(Error::TargetOutOfRange {
                id: token,
                vocab: table.rows(),
            });
        }
        let pos_table = get(format!("{PREFIX}.pos_embed"))?;
        let mut x: Vec<F> = table.row(token as usize).to_vec();
        for (xv, &p) in x.iter_mut().zip(pos_table.row(self.pos)) {
            *xv += p;
        }
        let t = self.pos;
        let mut scratch = vec![F::zero(); (t + 1).max(self.cross_len())];
        for l in 0..cfg.layers {
            let b = format!("{PREFIX}.blocks.{l:02}");
            let h = layers::norm_row(self.params, &x, &format!("{b}.norm1"))?;
            let q = layers::linear_rows(self.params, &h, 1, &format!("{b}.self_attn.q"))?;
            let k = layers::linear_rows(self.params, &h, 1, &format!("{b}.self_attn.k"))?;
            let v = layers::linear_rows(self.params, &h, 1, &format!("{b}.self_attn.v"))?;
            let cache = &mut self.cache[l];
            cache.self_k.extend_from_slice(&k);
            cache.self_v.extend_from_slice(&v);
            let causal: Vec<usize> = (0..=t).collect();
            let mut o = vec![F::zero(); d];
            let mut probs = vec![F::zero(); t + 1];
            for hd in 0..cfg.heads {
                probs.iter_mut().for_each(|p| *p = F::zero());
                attend_row(&q, &cache.self_k, &cache.self_v, d, cfg.heads, hd, 0, &causal, &mut scratch, &mut probs, &mut o);
            }
            let a = layers::linear_rows(self.params, &o, 1, &format!("{b}.self_attn.out"))?;
            add_assign(&mut x, &a);

            let h = layers::norm_row(self.params, &x, &format!("{b}.norm2"))?;
            let q = layers::linear_rows(self.params, &h, 1, &format!("{b}.cross_attn.q"))?;
            let cache = &self.cache[l];
            let mut o = vec![F::zero(); d];
            let mut probs = vec![F::zero(); self.cross_len()];
            for hd in 0..cfg.heads {
                probs.iter_mut().for_each(|p| *p = F::zero());
                attend_row(&q, &cache.cross_k, &cache.cross_v, d, cfg.heads, hd, 0, &self.keys, &mut scratch, &mut probs, &mut o);
            }
            let a = layers::linear_rows(self.params, &o, 1, &format!("{b}.cross_attn.out"))?;
            add_assign(&mut x, &a);

            let h = layers::norm_row(self.params, &x, &format!("{b}.norm3"))?;
            let mut m = layers::linear_rows(self.params, &h, 1, &format!("{b}.mlp.fc1"))?;
            m.iter_mut().for_each(|v| *v = tensor::gelu_scalar(*v));
            let m = layers::linear_rows(self.params, &m, 1, &format!("{b}.mlp.fc2"))?;
            add_assign(&mut x, &m);
        }
        let h = layers::norm_row(self.params, &x, &format!("{PREFIX}.norm"))?;
        let logits = layers::linear_rows(self.params, &h, 1, &format!("{PREFIX}.head"))?;
        self.pos += 1;
        Ok(logits)
    }

    fn cross_len(&self) -> usize {
        self.cache
            .first()
            .map_or(0, |c| c.cross_k.len() / self.cfg.d_model)
    }
}

fn add_assign<F: Scalar>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
