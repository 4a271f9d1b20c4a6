//! The full captioning/report model: encoder, optional multi-image fusion,
//! and decoder, plus the training objective over one example.

use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, NodeId};
use crate::decoder::{self, DecoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusedContext, TEMPORAL_PARAM};
use crate::layers::{self, ParamSpec};
use crate::params::ParamStore;
use crate::tensor::{self, Scalar, Tensor};
use crate::tokenizer::SpecialIds;
use crate::vision::{self, EncoderConfig, ImageTensor, PatchEmbeddings};

/// Stage 1 conditions on one image with no fusion; stage 2 fuses up to
/// `max_images` images with temporal slot embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Caption,
    Findings,
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::Caption),
            2 => Ok(Stage::Findings),
            other => Err(format!("stage must be 1 or 2, got {other}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::Caption => 1,
            Stage::Findings => 2,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

fn default_max_images() -> usize {
    fusion::MAX_IMAGES
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default = "default_max_images")]
    pub max_images: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(vocab_size, max_seq_len),
            max_images: fusion::MAX_IMAGES,
            init_std: default_init_std(),
        }
    }

    /// Gradient-check geometry: 32px images, width 32, two layers and two
    /// heads on both sides, two image slots.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig::tiny(vocab_size),
            max_images: 2,
            init_std: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.max_images == 0 {
            return Err(Error::Config("max_images must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.encoder.param_specs();
        s.extend(fusion::param_specs(self.max_images, self.encoder.d_model));
        s.extend(self.decoder.param_specs(self.encoder.d_model));
        s
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> Result<ParamStore<F>> {
        self.validate()?;
        layers::init_params(&self.param_specs(), self.init_std, seed)
    }

    pub fn check_params<F: Scalar>(&self, params: &ParamStore<F>) -> Result<()> {
        layers::check_params(params, &self.param_specs())?;
        if params.len() != self.param_specs().len() {
            return Err(Error::Config(format!(
                "parameter store has {} tensors, config expects {}",
                params.len(),
                self.param_specs().len()
            )));
        }
        Ok(())
    }
}

/// One training example: patchified images in capture order and the target
/// token ids without BOS/EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<F> {
    pub patches: Vec<Tensor<F>>,
    pub tokens: Vec<u32>,
}

/// Decoder input `[BOS, y..]` and targets `[y.., EOS]`.
pub fn shift_tokens(tokens: &[u32], special: SpecialIds) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(special.bos);
    input.extend_from_slice(tokens);
    let mut targets = tokens.to_vec();
    targets.push(special.eos);
    (input, targets)
}

/// Mean cross-entropy of `logits [T+1, V]` against `targets [y.., EOS]`.
pub fn lm_loss<F: Scalar>(logits: &Tensor<F>, targets: &[u32]) -> Result<F> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    tensor::cross_entropy(logits, targets)
}

/// Records encoder (+ fusion) for `patches` and returns the decoder memory
/// node and its key mask.
pub fn context_in_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    patches: &[Tensor<F>],
    cfg: &ModelConfig,
    stage: Stage,
) -> Result<(NodeId, AttnMask)> {
    let mut z = Vec::with_capacity(patches.len());
    for p in patches {
        let pn = g.constant(p.clone());
        z.push(vision::encode_in_graph(g, pn, &cfg.encoder)?);
    }
    match stage {
        Stage::Caption => {
            if z.len() != 1 {
                return Err(Error::Context(format!("caption examples take one image, got {}", z.len())));
            }
            Ok((z[0], AttnMask::Full))
        }
        Stage::Findings => {
            let (memory, valid) = fusion::assemble_in_graph(g, &z, cfg.max_images)?;
            Ok((memory, AttnMask::Keys(valid)))
        }
    }
}

/// Records the full forward pass and the loss of one example.
pub fn example_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    ex: &Example<F>,
    cfg: &ModelConfig,
    stage: Stage,
    special: SpecialIds,
) -> Result<NodeId> {
    let (memory, mask) = context_in_graph(g, &ex.patches, cfg, stage)?;
    let (input, targets) = shift_tokens(&ex.tokens, special);
    let (logits, _) = decoder::decoder_in_graph(g, &input, memory, &mask, &cfg.decoder)?;
    g.cross_entropy(logits, &targets)
}

/// Encodes images and builds the decoder context for inference.
pub fn build_context<F: Scalar>(
    images: &[ImageTensor<F>],
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    stage: Stage,
) -> Result<FusedContext<F>> {
    let z: Vec<PatchEmbeddings<F>> = images
        .iter()
        .map(|img| vision::encode_image(img, params, &cfg.encoder))
        .collect::<Result<_>>()?;
    match stage {
        Stage::Caption => {
            if z.len() != 1 {
                return Err(Error::Context(format!("caption inference takes one image, got {}", z.len())));
            }
            Ok(FusedContext::single(&z[0]))
        }
        Stage::Findings => {
            let temporal = params
                .get(TEMPORAL_PARAM)
                .ok_or_else(|| Error::Config(format!("missing parameter `{TEMPORAL_PARAM}`")))?;
            fusion::assemble_context(&z, temporal, cfg.max_images)
        }
    }
}

/// Loss of `tokens` given a prebuilt context.
pub fn context_loss<F: Scalar>(
    context: &FusedContext<F>,
    tokens: &[u32],
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    special: SpecialIds,
) -> Result<F> {
    let (input, targets) = shift_tokens(tokens, special);
    let out = decoder::decoder_forward(&input, context, params, &cfg.decoder, false)?;
    lm_loss(&out.logits, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn special() -> SpecialIds {
        SpecialIds {
            bos: 61,
            eos: 62,
            pad: 63,
        }
    }

    #[test]
    fn shift_puts_bos_in_and_eos_out() {
        let (i, t) = shift_tokens(&[5, 6], special());
        assert_eq!(i, vec![61, 5, 6]);
        assert_eq!(t, vec![5, 6, 62]);
    }

    #[test]
    fn lm_loss_reference_values() {
        let uniform = Tensor::<f64>::zeros(&[2, 64]);
        approx::assert_relative_eq!(lm_loss(&uniform, &[1, 2]).unwrap(), 64f64.ln(), epsilon = 1e-12);
        let mut delta = Tensor::<f64>::filled(&[1, 4], -1e4);
        delta.data_mut()[2] = 1e4;
        assert_eq!(lm_loss(&delta, &[2]).unwrap(), 0.0);
        assert!(lm_loss(&uniform, &[1]).is_err());
    }

    #[test]
    fn stage_serializes_as_number() {
        assert_eq!(serde_json::to_string(&Stage::Findings).unwrap(), "2");
        assert_eq!(serde_json::from_str::<Stage>("1").unwrap(), Stage::Caption);
        assert!(serde_json::from_str::<Stage>("3").is_err());
    }

    #[test]
    fn graph_loss_matches_context_loss() {
        let cfg = ModelConfig::tiny(64);
        let params: ParamStore<f64> = cfg.init_params(3).unwrap();
        let n = cfg.encoder.n_patches();
        let d = cfg.encoder.patch_dim();
        let patch = |s: f64| Tensor::from_f64(&[n, d], &(0..n * d).map(|i| (i as f64 * s).sin()).collect::<Vec<_>>()).unwrap();
        let ex = Example {
            patches: vec![patch(0.37)],
            tokens: vec![4, 9, 11],
        };
        for stage in [Stage::Caption, Stage::Findings] {
            let mut g = Graph::with_params(&params);
            let l = example_loss(&mut g, &ex, &cfg, stage, special()).unwrap();
            let img_z = {
                let mut g2 = Graph::with_params(&params);
                let p = g2.constant(ex.patches[0].clone());
                let zn = vision::encode_in_graph(&mut g2, p, &cfg.encoder).unwrap();
                PatchEmbeddings { z: g2.value(zn).clone() }
            };
            let ctx = match stage {
                Stage::Caption => FusedContext::single(&img_z),
                Stage::Findings => fusion::assemble_context(&[img_z], params.get(TEMPORAL_PARAM).unwrap(), 2).unwrap(),
            };
            let want = context_loss(&ctx, &ex.tokens, &params, &cfg, special()).unwrap();
            assert_eq!(g.scalar(l), want);
        }
    }
}
