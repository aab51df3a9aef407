// SPDX-License-Identifier: Apache-2.0

//! A miniature ViT-style image encoder with seeded random weights.
//!
//! Images are cut into `p x p` patches, projected to `C` channels, prefixed
//! with a `[CLS]` token and pushed through `L` pre-norm transformer blocks.
//! Every layer's spatial grid and `[CLS]` vector is returned. An optional
//! [`Interceptor`] may rewrite the token sequence at the input of each layer.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{orthogonal, EncoderBlock, Trace};
use crate::rng::{gaussian, keyed, Stream};

/// RGB image with values in `[0, 1]`, stored as `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::Dimension(format!(
                "image must have 3 channels, got {}",
                pixels.dim().2
            )));
        }
        if pixels
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::Domain(
                "pixel values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            embed_dim: 64,
            num_heads: 4,
            patch_size: 14,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config("encoder needs at least 2 layers".into()));
        }
        if self.embed_dim == 0 || self.patch_size == 0 || self.num_heads == 0 {
            return Err(Error::Config(
                "embed_dim, patch_size and num_heads must be positive".into(),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Output of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    /// 1-based layer index.
    pub layer_index: usize,
    /// Spatial tokens, `H/p x W/p x C`.
    pub spatial: Array3<f64>,
    pub cls: Array1<f64>,
}

/// Rewrites the token sequence (`1 + n` rows, `[CLS]` first) entering a layer.
pub trait Interceptor {
    fn rewrite(&self, layer: usize, tokens: Array2<f64>) -> Array2<f64>;
}

impl<F> Interceptor for F
where
    F: Fn(usize, Array2<f64>) -> Array2<f64>,
{
    fn rewrite(&self, layer: usize, tokens: Array2<f64>) -> Array2<f64> {
        self(layer, tokens)
    }
}

/// The identity interceptor.
pub struct Identity;

impl Interceptor for Identity {
    fn rewrite(&self, _layer: usize, tokens: Array2<f64>) -> Array2<f64> {
        tokens
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_proj: Array2<f64>,
    cls_token: Array1<f64>,
    blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.embed_dim;
        let patch_len = 3 * cfg.patch_size * cfg.patch_size;
        let mut rng = keyed(cfg.seed, Stream::EncoderWeights, &[0]);
        let patch_proj = orthogonal(patch_len, dim, &mut rng);
        let cls_token = Array1::from_shape_fn(dim, |_| gaussian(&mut rng));
        let blocks = (1..=cfg.num_layers)
            .map(|i| {
                let mut rng = keyed(cfg.seed, Stream::EncoderWeights, &[i as u64]);
                EncoderBlock::seeded(dim, cfg.num_heads, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            patch_proj,
            cls_token,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn num_layers(&self) -> usize {
        self.cfg.num_layers
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    /// The `[CLS]` token as it leaves patch embedding (before layer 1).
    pub fn cls_token(&self) -> &Array1<f64> {
        &self.cls_token
    }

    pub fn grid(&self, image: &ImageTensor) -> Result<(usize, usize)> {
        let p = self.cfg.patch_size;
        let (h, w) = (image.height(), image.width());
        if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "image {h}x{w} is not divisible by patch size {p}"
            )));
        }
        Ok((h / p, w / p))
    }

    /// Token sequence entering layer 1: `[CLS]` followed by the row-major
    /// patch tokens with a fixed 2-D sinusoidal position code added.
    pub fn patch_embed(&self, image: &ImageTensor) -> Result<Array2<f64>> {
        let (gh, gw) = self.grid(image)?;
        let p = self.cfg.patch_size;
        let dim = self.cfg.embed_dim;
        let px = image.pixels();
        let mut patches = Array2::<f64>::zeros((gh * gw, 3 * p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                let mut row = patches.row_mut(gy * gw + gx);
                let block = px.slice(s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..]);
                for (dst, src) in row.iter_mut().zip(block.iter()) {
                    *dst = *src;
                }
            }
        }
        let mut spatial = patches.dot(&self.patch_proj);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut row = spatial.row_mut(gy * gw + gx);
                for c in 0..dim {
                    row[c] += position_code(gy, gx, c, dim);
                }
            }
        }
        let mut tokens = Array2::<f64>::zeros((1 + gh * gw, dim));
        tokens.row_mut(0).assign(&self.cls_token);
        tokens.slice_mut(s![1.., ..]).assign(&spatial);
        Ok(tokens)
    }

    pub fn forward(
        &self,
        image: &ImageTensor,
        interceptor: Option<&dyn Interceptor>,
    ) -> Result<Vec<LayerFeatures>> {
        self.forward_traced(image, interceptor, None)
    }

    /// Like [`Encoder::forward`], additionally recording attention weights and
    /// layer-norm outputs into `trace`.
    pub fn forward_traced(
        &self,
        image: &ImageTensor,
        interceptor: Option<&dyn Interceptor>,
        mut trace: Option<&mut Trace>,
    ) -> Result<Vec<LayerFeatures>> {
        let (gh, gw) = self.grid(image)?;
        let mut tokens = self.patch_embed(image)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (idx, block) in self.blocks.iter().enumerate() {
            let layer = idx + 1;
            if let Some(icpt) = interceptor {
                let shape = tokens.dim();
                tokens = icpt.rewrite(layer, tokens);
                if tokens.dim() != shape {
                    return Err(Error::Shape(format!(
                        "interceptor at layer {layer} changed token shape {shape:?} to {:?}",
                        tokens.dim()
                    )));
                }
            }
            tokens = block.forward(tokens.view(), trace.as_deref_mut())?;
            out.push(split_tokens(layer, tokens.view(), gh, gw));
        }
        Ok(out)
    }
}

fn split_tokens(layer: usize, tokens: ArrayView2<'_, f64>, gh: usize, gw: usize) -> LayerFeatures {
    let dim = tokens.ncols();
    let spatial = tokens
        .slice(s![1.., ..])
        .to_owned()
        .into_shape_with_order((gh, gw, dim))
        .expect("token count matches grid");
    LayerFeatures {
        layer_index: layer,
        spatial,
        cls: tokens.index_axis(Axis(0), 0).to_owned(),
    }
}

/// Channels are split in half between rows and columns; each half alternates
/// sine and cosine at geometrically spaced frequencies.
fn position_code(gy: usize, gx: usize, c: usize, dim: usize) -> f64 {
    let half = (dim / 2).max(1);
    let (pos, k) = if c < half { (gy, c) } else { (gx, c - half) };
    let pair = (k / 2) as f64;
    let freq = 1.0 / 100f64.powf(2.0 * pair / half as f64);
    let angle = pos as f64 * freq;
    if k % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}
