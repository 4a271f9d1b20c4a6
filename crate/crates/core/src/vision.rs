//! Patch-based transformer image encoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{self, ParamSpec};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Per-channel normalization constants (ImageNet statistics).
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

const PREFIX: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// CPU-scale default.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            d_model: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    /// ViT-B/16 geometry.
    pub fn base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            d_model: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
        }
    }

    /// Smallest geometry used for gradient verification.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 16,
            d_model: 32,
            layers: 2,
            heads: 2,
            mlp_ratio: 4,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let mut s = Vec::new();
        layers::linear_spec(&mut s, &format!("{PREFIX}.patch_embed"), self.patch_dim(), d);
        s.push((format!("{PREFIX}.pos_embed"), vec![self.n_patches(), d]));
        for l in 0..self.layers {
            let b = format!("{PREFIX}.blocks.{l:02}");
            layers::norm_spec(&mut s, &format!("{b}.norm1"), d);
            layers::attention_spec(&mut s, &format!("{b}.attn"), d, d);
            layers::norm_spec(&mut s, &format!("{b}.norm2"), d);
            layers::mlp_spec(&mut s, &format!("{b}.mlp"), d, self.mlp_ratio);
        }
        layers::norm_spec(&mut s, &format!("{PREFIX}.norm"), d);
        s
    }
}

/// A decoded 8-bit raster, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let channels = img.color().channel_count() as usize;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match channels {
            3 => img.into_rgb8().into_raw(),
            _ => img.into_bytes(),
        };
        Ok(Self {
            width: w,
            height: h,
            channels,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Image(format!("expected 3 channels, got {}", self.channels)));
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Image("raster size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Normalized pixels, `[image_size, image_size, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F> {
    pixels: Tensor<F>,
}

impl<F: Scalar> ImageTensor<F> {
    pub fn pixels(&self) -> &Tensor<F> {
        &self.pixels
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Undoes channel normalization back to 8-bit RGB (for display).
    pub fn to_raw(&self) -> RawImage {
        let s = self.size();
        let data = self
            .pixels
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % 3;
                let x = (v.as_f64() * CHANNEL_STD[c] + CHANNEL_MEAN[c]) * 255.0;
                x.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        RawImage::rgb(s, s, data)
    }
}

fn bilinear_sample(raw: &RawImage, c: usize, y: f64, x: f64) -> f64 {
    let yc = y.clamp(0.0, (raw.height - 1) as f64);
    let xc = x.clamp(0.0, (raw.width - 1) as f64);
    let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(raw.height - 1), (x0 + 1).min(raw.width - 1));
    let (fy, fx) = (yc - y0 as f64, xc - x0 as f64);
    let px = |yy: usize, xx: usize| raw.data[(yy * raw.width + xx) * 3 + c] as f64;
    let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
    let bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize (half-pixel centers) to `image_size²`, then per-channel
/// `(x/255 − mean) / std`.
pub fn preprocess<F: Scalar>(raw: &RawImage, cfg: &EncoderConfig) -> Result<ImageTensor<F>> {
    if raw.channels != 3 {
        return Err(Error::Image(format!("expected 3 channels, got {}", raw.channels)));
    }
    if raw.width == 0 || raw.height == 0 || raw.data.len() != raw.width * raw.height * 3 {
        return Err(Error::Image(format!(
            "invalid raster {}x{} with {} bytes",
            raw.width,
            raw.height,
            raw.data.len()
        )));
    }
    let s = cfg.image_size;
    let sy = raw.height as f64 / s as f64;
    let sx = raw.width as f64 / s as f64;
    let same = raw.width == s && raw.height == s;
    let mut data = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                let v = if same {
                    raw.data[(y * s + x) * 3 + c] as f64
                } else {
                    bilinear_sample(raw, c, (y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5)
                };
                data.push(F::of((v / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c]));
            }
        }
    }
    Ok(ImageTensor {
        pixels: Tensor::new(vec![s, s, 3], data)?,
    })
}

/// Splits into non-overlapping patches in row-major patch order; each row is
/// the patch's pixels flattened as (y, x, channel).
pub fn patchify<F: Scalar>(img: &ImageTensor<F>, cfg: &EncoderConfig) -> Result<Tensor<F>> {
    cfg.validate()?;
    if img.size() != cfg.image_size {
        return Err(Error::Shape(format!(
            "image is {}px, encoder expects {}px",
            img.size(),
            cfg.image_size
        )));
    }
    let (s, p, grid) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let src = img.pixels.data();
    let mut data = Vec::with_capacity(s * s * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            for y in 0..p {
                let row = (gy * p + y) * s + gx * p;
                data.extend_from_slice(&src[row * 3..(row + p) * 3]);
            }
        }
    }
    Tensor::new(vec![cfg.n_patches(), cfg.patch_dim()], data)
}

/// Encoder output `[n_patches, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings<F> {
    pub z: Tensor<F>,
}

/// Records the encoder on `g` for patches `[n_patches, patch_dim]`.
pub fn encode_in_graph<F: Scalar>(g: &mut Graph<'_, F>, patches: NodeId, cfg: &EncoderConfig) -> Result<NodeId> {
    let x = layers::linear(g, patches, &format!("{PREFIX}.patch_embed"))?;
    let pos = g.param(&format!("{PREFIX}.pos_embed"))?;
    let mut x = g.add(x, pos)?;
    for l in 0..cfg.layers {
        let b = format!("{PREFIX}.blocks.{l:02}");
        let h = layers::norm(g, x, &format!("{b}.norm1"))?;
        let (a, _) = layers::attention(g, h, h, &format!("{b}.attn"), cfg.heads, &AttnMask::Full)?;
        x = g.add(x, a)?;
        let h = layers::norm(g, x, &format!("{b}.norm2"))?;
        let m = layers::mlp(g, h, &format!("{b}.mlp"))?;
        x = g.add(x, m)?;
    }
    layers::norm(g, x, &format!("{PREFIX}.norm"))
}

pub fn encode_image<F: Scalar>(img: &ImageTensor<F>, params: &ParamStore<F>, cfg: &EncoderConfig) -> Result<PatchEmbeddings<F>> {
    layers::check_params(params, &cfg.param_specs())?;
    let patches = patchify(img, cfg)?;
    let mut g = Graph::with_params(params);
    let p = g.constant(patches);
    let z = encode_in_graph(&mut g, p, cfg)?;
    Ok(PatchEmbeddings { z: g.value(z).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn solid(w: usize, h: usize, rgb: [u8; 3]) -> RawImage {
        RawImage::rgb(w, h, (0..w * h).flat_map(|_| rgb).collect())
    }

    #[test]
    fn preprocess_resizes_and_normalizes() {
        let cfg = EncoderConfig::base();
        let img: ImageTensor<f64> = preprocess(&solid(448, 448, [255, 0, 0]), &cfg).unwrap();
        assert_eq!(img.pixels().shape(), &[224, 224, 3]);
        assert_relative_eq!(img.pixels().data()[0], (1.0 - 0.485) / 0.229, epsilon = 1e-12);
        assert_relative_eq!(img.pixels().data()[0], 2.2489, epsilon = 1e-4);

        let zero: ImageTensor<f64> = preprocess(&solid(10, 7, [0, 0, 0]), &EncoderConfig::desk()).unwrap();
        for (i, &v) in zero.pixels().data().iter().enumerate() {
            let c = i % 3;
            assert_relative_eq!(v, -CHANNEL_MEAN[c] / CHANNEL_STD[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn preprocess_rejects_non_rgb() {
        let raw = RawImage {
            width: 2,
            height: 2,
            channels: 1,
            data: vec![0; 4],
        };
        assert!(preprocess::<f32>(&raw, &EncoderConfig::desk()).is_err());
    }

    #[test]
    fn bilinear_downsample_averages_pairs() {
        // 2x1 -> 1x1 lands exactly between the two source pixels
        let raw = RawImage::rgb(2, 2, vec![0, 0, 0, 200, 200, 200, 0, 0, 0, 200, 200, 200]);
        let cfg = EncoderConfig {
            image_size: 1,
            patch_size: 1,
            ..EncoderConfig::tiny()
        };
        let img: ImageTensor<f64> = preprocess(&raw, &cfg).unwrap();
        let back = (img.pixels().data()[0] * CHANNEL_STD[0] + CHANNEL_MEAN[0]) * 255.0;
        assert_relative_eq!(back, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn patch_counts() {
        let cfg = EncoderConfig::base();
        let img: ImageTensor<f32> = preprocess(&solid(224, 224, [9, 9, 9]), &cfg).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[196, 768]);

        let cfg = EncoderConfig::desk();
        let img: ImageTensor<f32> = preprocess(&solid(64, 64, [30, 60, 90]), &cfg).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[16, 768]);
        for r in 1..16 {
            assert_eq!(p.row(r), p.row(0));
        }
    }

    #[test]
    fn patch_order_is_row_major() {
        let cfg = EncoderConfig {
            image_size: 4,
            patch_size: 2,
            d_model: 4,
            layers: 0,
            heads: 1,
            mlp_ratio: 1,
        };
        // pixel value encodes (y, x)
        let data: Vec<u8> = (0..16u8).flat_map(|i| [i * 10, 0, 0]).collect();
        let img: ImageTensor<f64> = preprocess(&RawImage::rgb(4, 4, data), &cfg).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        let first = |r: usize| {
            let v = p.row(r)[0];
            ((v * CHANNEL_STD[0] + CHANNEL_MEAN[0]) * 255.0 / 10.0).round() as usize
        };
        // top-left pixel of patches (0,0),(0,1),(1,0),(1,1)
        assert_eq!([first(0), first(1), first(2), first(3)], [0, 2, 8, 10]);
        assert!(patchify(&img, &EncoderConfig::desk()).is_err());
    }

    #[test]
    fn encoder_shape_and_permutation_symmetry() {
        let cfg = EncoderConfig::tiny();
        let mut params: ParamStore<f64> = layers::init_params(&cfg.param_specs(), 0.2, 3).unwrap();
        let img: ImageTensor<f64> = preprocess(&solid(32, 32, [120, 40, 200]), &cfg).unwrap();
        let z = encode_image(&img, &params, &cfg).unwrap();
        assert_eq!(z.z.shape(), &[cfg.n_patches(), cfg.d_model]);

        params.get_mut("encoder.pos_embed").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let z = encode_image(&img, &params, &cfg).unwrap();
        for r in 1..cfg.n_patches() {
            assert_eq!(z.z.row(r), z.z.row(0));
        }
    }

    #[test]
    fn encoder_rejects_mismatched_params() {
        let params: ParamStore<f32> = layers::init_params(&EncoderConfig::tiny().param_specs(), 0.02, 0).unwrap();
        let cfg = EncoderConfig {
            d_model: 64,
            ..EncoderConfig::tiny()
        };
        let img: ImageTensor<f32> = preprocess(&solid(32, 32, [1, 2, 3]), &cfg).unwrap();
        assert!(encode_image(&img, &params, &cfg).is_err());
    }
}
