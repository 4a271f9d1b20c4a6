//! Multi-image context assembly: per-slot temporal embeddings, concatenation
//! into a fixed number of image slots, and the validity mask that hides
//! unused ("dummy") slots from cross-attention.

use crate::autograd::{AttnMask, Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::ParamSpec;
use crate::tensor::{Scalar, Tensor};
use crate::vision::PatchEmbeddings;

pub const MAX_IMAGES: usize = 12;
pub const TEMPORAL_PARAM: &str = "fusion.temporal";

pub fn param_specs(max_images: usize, d_model: usize) -> Vec<ParamSpec> {
    vec![(TEMPORAL_PARAM.to_string(), vec![max_images, d_model])]
}

/// Decoder memory over `max_images` slots of `n_patches` rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedContext<F> {
    pub memory: Tensor<F>,
    pub valid: Vec<bool>,
    pub n_images: usize,
    pub n_patches: usize,
}

impl<F: Scalar> FusedContext<F> {
    /// Single-image context with no temporal embedding and no dummy slots.
    pub fn single(z: &PatchEmbeddings<F>) -> Self {
        let n = z.z.rows();
        Self {
            memory: z.z.clone(),
            valid: vec![true; n],
            n_images: 1,
            n_patches: n,
        }
    }

    pub fn slots(&self) -> usize {
        self.valid.len() / self.n_patches.max(1)
    }

    pub fn key_mask(&self) -> AttnMask {
        AttnMask::Keys(self.valid.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.memory.rows();
        if self.memory.shape().len() != 2 || rows != self.valid.len() {
            return Err(Error::Context(format!(
                "memory {:?} with {} mask entries",
                self.memory.shape(),
                self.valid.len()
            )));
        }
        if self.n_patches == 0 || rows % self.n_patches != 0 {
            return Err(Error::Context(format!("{rows} rows are not whole slots of {}", self.n_patches)));
        }
        if self.n_images == 0 || self.n_images > self.slots() {
            return Err(Error::Context(format!("{} images in {} slots", self.n_images, self.slots())));
        }
        let boundary = self.n_images * self.n_patches;
        if self.valid.iter().enumerate().any(|(i, &v)| v != (i < boundary)) {
            return Err(Error::Context("validity mask is not a prefix of the image slots".into()));
        }
        Ok(())
    }

    /// Row range of slot `k`.
    pub fn slot_rows(&self, k: usize) -> std::ops::Range<usize> {
        k * self.n_patches..(k + 1) * self.n_patches
    }
}

fn check_count(n: usize, max_images: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Context("no images".into()));
    }
    if n > max_images {
        return Err(Error::Context(format!(
            "{n} images exceed the limit of {max_images}; such procedures are excluded upstream"
        )));
    }
    Ok(())
}

/// Slot `k` rows are `z_k + temporal[k]`; slots past the last image are zero
/// and marked invalid.
pub fn assemble_context<F: Scalar>(
    images_z: &[PatchEmbeddings<F>],
    temporal: &Tensor<F>,
    max_images: usize,
) -> Result<FusedContext<F>> {
    check_count(images_z.len(), max_images)?;
    let (n_patches, d) = (images_z[0].z.rows(), images_z[0].z.cols());
    if temporal.rows() < max_images || temporal.cols() != d {
        return Err(Error::Shape(format!(
            "temporal table {:?} for {max_images} slots of width {d}",
            temporal.shape()
        )));
    }
    let mut memory = Tensor::zeros(&[max_images * n_patches, d]);
    for (k, z) in images_z.iter().enumerate() {
        if z.z.shape() != [n_patches, d] {
            return Err(Error::Shape(format!("image {k} embeddings {:?}", z.z.shape())));
        }
        let t = temporal.row(k);
        for p in 0..n_patches {
            let dst = memory.row_mut(k * n_patches + p);
            for ((o, &zv), &tv) in dst.iter_mut().zip(z.z.row(p)).zip(t) {
                *o = zv + tv;
            }
        }
    }
    let valid = (0..max_images * n_patches)
        .map(|i| i < images_z.len() * n_patches)
        .collect();
    Ok(FusedContext {
        memory,
        valid,
        n_images: images_z.len(),
        n_patches,
    })
}

/// [`assemble_context`] recorded on a graph. Returns the memory node and the
/// validity mask.
pub fn assemble_in_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    z_nodes: &[NodeId],
    max_images: usize,
) -> Result<(NodeId, Vec<bool>)> {
    check_count(z_nodes.len(), max_images)?;
    let (n_patches, d) = (g.value(z_nodes[0]).rows(), g.value(z_nodes[0]).cols());
    let temporal = g.param(TEMPORAL_PARAM)?;
    let mut parts = Vec::with_capacity(z_nodes.len() + 1);
    for (k, &z) in z_nodes.iter().enumerate() {
        let t = g.slice_rows(temporal, k, 1)?;
        parts.push(g.add_bias(z, t)?);
    }
    let dummy = max_images - z_nodes.len();
    if dummy > 0 {
        parts.push(g.constant(Tensor::zeros(&[dummy * n_patches, d])));
    }
    let memory = g.concat_rows(&parts)?;
    let valid = (0..max_images * n_patches)
        .map(|i| i < z_nodes.len() * n_patches)
        .collect();
    Ok((memory, valid))
}

/// Whether a procedure with `image_count` screenshots is kept; procedures
/// with more than `max_images` are dropped from training and evaluation.
pub fn max_image_filter(image_count: usize, max_images: usize) -> bool {
    image_count <= max_images
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z(rows: usize, d: usize, seed: f64) -> PatchEmbeddings<f64> {
        let data = (0..rows * d).map(|i| (i as f64 * 0.3 + seed).sin()).collect();
        PatchEmbeddings {
            z: Tensor::new(vec![rows, d], data).unwrap(),
        }
    }

    #[test]
    fn three_images_mask_counts() {
        let imgs: Vec<_> = (0..3).map(|k| z(196, 4, k as f64)).collect();
        let temporal = Tensor::zeros(&[12, 4]);
        let ctx = assemble_context(&imgs, &temporal, 12).unwrap();
        assert_eq!(ctx.valid.iter().filter(|&&v| v).count(), 588);
        assert_eq!(ctx.valid.iter().filter(|&&v| !v).count(), 1764);
        assert!(ctx.valid[..588].iter().all(|&v| v));
        ctx.validate().unwrap();
    }

    #[test]
    fn single_image_zero_temporal_is_identity() {
        let img = z(16, 8, 0.5);
        let mut temporal = Tensor::filled(&[12, 8], 0.25);
        temporal.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        let ctx = assemble_context(std::slice::from_ref(&img), &temporal, 12).unwrap();
        assert_eq!(&ctx.memory.data()[..16 * 8], img.z.data());
        assert!(ctx.memory.data()[16 * 8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temporal_rows_distinguish_order() {
        let (a, b) = (z(4, 3, 0.1), z(4, 3, 0.9));
        let temporal = Tensor::from_f64(&[12, 3], &(0..36).map(|i| i as f64 * 0.01).collect::<Vec<_>>()).unwrap();
        let ab = assemble_context(&[a.clone(), b.clone()], &temporal, 12).unwrap();
        let ba = assemble_context(&[b, a], &temporal, 12).unwrap();
        assert_ne!(ab.memory, ba.memory);
    }

    #[test]
    fn image_count_limits() {
        let temporal = Tensor::<f64>::zeros(&[12, 2]);
        assert!(assemble_context::<f64>(&[], &temporal, 12).is_err());
        let many: Vec<_> = (0..13).map(|k| z(1, 2, k as f64)).collect();
        assert!(assemble_context(&many, &temporal, 12).is_err());
        assert!(max_image_filter(12, 12));
        assert!(!max_image_filter(13, 12));
        assert!(max_image_filter(1, 12));
    }

    #[test]
    fn graph_assembly_matches_values() {
        let mut store = crate::params::ParamStore::<f64>::new();
        let temporal = Tensor::from_f64(&[12, 3], &(0..36).map(|i| (i as f64).cos()).collect::<Vec<_>>()).unwrap();
        store.insert(TEMPORAL_PARAM, temporal.clone()).unwrap();
        let imgs = [z(4, 3, 0.2), z(4, 3, 0.7)];
        let want = assemble_context(&imgs, &temporal, 12).unwrap();
        let mut g = Graph::with_params(&store);
        let nodes: Vec<_> = imgs.iter().map(|i| g.constant(i.z.clone())).collect();
        let (mem, valid) = assemble_in_graph(&mut g, &nodes, 12).unwrap();
        assert_eq!(g.value(mem), &want.memory);
        assert_eq!(valid, want.valid);
    }
}
