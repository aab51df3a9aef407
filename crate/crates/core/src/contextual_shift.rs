// SPDX-License-Identifier: Apache-2.0

//! Masked sub-image classification with contextual background replacement.
//!
//! A proposal is cropped to its tight bounding box, padded to a square,
//! resized and background-filled. During the encoder pass, a seeded fraction
//! of the background patch tokens entering each selected layer `i` is
//! overwritten with the `[CLS]` vector that the clean, full image produced at
//! layer `i - 1`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, ImageTensor, Interceptor, LayerFeatures};
use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsConfig {
    /// 1-based layers whose input tokens are rewritten.
    pub idx: Vec<usize>,
    /// Fraction of background tokens replaced at each selected layer.
    pub alpha: f64,
    /// A patch is background when its foreground fraction is below this.
    pub bg_threshold: f64,
    pub sub_image_size: usize,
    pub fill_value: f64,
    pub seed: u64,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            idx: vec![1, 3, 5, 7, 9],
            alpha: 0.30,
            bg_threshold: 0.5,
            sub_image_size: 56,
            fill_value: 0.0,
            seed: 0,
        }
    }
}

impl CsConfig {
    pub fn validate(&self, num_layers: usize, patch_size: usize) -> Result<()> {
        if let Some(bad) = self.idx.iter().find(|&&i| i == 0 || i > num_layers) {
            return Err(Error::Config(format!(
                "replacement layer {bad} outside encoder range 1..={num_layers}"
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.bg_threshold > 0.0 && self.bg_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "bg_threshold {} not in (0, 1]",
                self.bg_threshold
            )));
        }
        if self.sub_image_size == 0 || !self.sub_image_size.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "sub_image_size {} must be a positive multiple of patch size {patch_size}",
                self.sub_image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::Config(format!(
                "fill_value {} not in [0, 1]",
                self.fill_value
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    pub id: usize,
    pub mask: Array2<bool>,
}

/// Per-layer `[CLS]` vectors of the unmodified encoder on the full image.
/// Entry 0 is the `[CLS]` token leaving patch embedding; entry `i` is the
/// output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanContext {
    pub cls_per_layer: Vec<Array1<f64>>,
}

impl CleanContext {
    pub fn new(encoder: &Encoder, layers: &[LayerFeatures]) -> Result<Self> {
        if layers.len() != encoder.num_layers() {
            return Err(Error::Shape(format!(
                "expected {} layers of clean features, got {}",
                encoder.num_layers(),
                layers.len()
            )));
        }
        let mut cls_per_layer = Vec::with_capacity(layers.len() + 1);
        cls_per_layer.push(encoder.cls_token().clone());
        cls_per_layer.extend(layers.iter().map(|f| f.cls.clone()));
        Ok(Self { cls_per_layer })
    }

    pub fn compute(encoder: &Encoder, image: &ImageTensor) -> Result<Self> {
        let layers = encoder.forward(image, None)?;
        Self::new(encoder, &layers)
    }
}

/// A cropped, masked, resized proposal and its mask at the same resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SubImage {
    pub image: ImageTensor,
    pub mask: Array2<bool>,
}

/// Bilinear resampling with half-pixel centres and clamped borders.
fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, ch) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, n: usize| {
        let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    let mut out = Array3::<f64>::zeros((out_h, out_w, ch));
    for oy in 0..out_h {
        let (y0, y1, ty) = axis(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, tx) = axis(ox, sx, w);
            for c in 0..ch {
                let top = src[[y0, x0, c]] * (1.0 - tx) + src[[y0, x1, c]] * tx;
                let bottom = src[[y1, x0, c]] * (1.0 - tx) + src[[y1, x1, c]] * tx;
                out[[oy, ox, c]] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Tight bounding box `(top, left, bottom, right)`, inclusive.
pub fn bounding_box(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &on) in mask.indexed_iter() {
        if on {
            bbox = Some(match bbox {
                None => (y, x, y, x),
                Some((t, l, b, r)) => (t.min(y), l.min(x), b.max(y), r.max(x)),
            });
        }
    }
    bbox
}

/// Crop to the mask's bounding box, centre-pad to a square, resize to
/// `sub_image_size` and set every pixel outside the resampled mask to
/// `fill_value`.
pub fn crop_and_mask(
    image: &ImageTensor,
    proposal: &MaskProposal,
    cfg: &CsConfig,
) -> Result<SubImage> {
    let px = image.pixels();
    if proposal.mask.dim() != (image.height(), image.width()) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {}x{}",
            proposal.mask.dim(),
            image.height(),
            image.width()
        )));
    }
    let (top, left, bottom, right) =
        bounding_box(&proposal.mask).ok_or(Error::EmptyProposal(proposal.id))?;
    let (bh, bw) = (bottom - top + 1, right - left + 1);
    let side = bh.max(bw);
    let (oy, ox) = ((side - bh) / 2, (side - bw) / 2);

    let mut canvas = Array3::from_elem((side, side, 3), cfg.fill_value);
    let mut canvas_mask = Array3::<f64>::zeros((side, side, 1));
    for y in 0..bh {
        for x in 0..bw {
            if proposal.mask[[top + y, left + x]] {
                canvas_mask[[oy + y, ox + x, 0]] = 1.0;
                for c in 0..3 {
                    canvas[[oy + y, ox + x, c]] = px[[top + y, left + x, c]];
                }
            }
        }
    }

    let size = cfg.sub_image_size;
    let mut pixels = resize_bilinear(&canvas, size, size);
    let soft = resize_bilinear(&canvas_mask, size, size);
    let mask = Array2::from_shape_fn((size, size), |(y, x)| soft[[y, x, 0]] >= 0.5);
    for ((y, x), &on) in mask.indexed_iter() {
        if !on {
            for c in 0..3 {
                pixels[[y, x, c]] = cfg.fill_value;
            }
        }
    }
    // interpolation of values in [0, 1] stays in range up to rounding
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(SubImage {
        image: ImageTensor::new(pixels)?,
        mask,
    })
}

/// Row-major indices of patches whose foreground fraction is below `tau`.
pub fn background_patches(mask: &Array2<bool>, patch_size: usize, tau: f64) -> Result<Vec<usize>> {
    let (h, w) = mask.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "mask {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let area = (patch_size * patch_size) as f64;
    let mut out = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let fg = (0..patch_size)
                .flat_map(|dy| (0..patch_size).map(move |dx| (dy, dx)))
                .filter(|&(dy, dx)| mask[[gy * patch_size + dy, gx * patch_size + dx]])
                .count();
            if (fg as f64) / area < tau {
                out.push(gy * gw + gx);
            }
        }
    }
    Ok(out)
}

/// `floor(alpha * n + 1/2)`, with a tiny allowance so that products which
/// are halves in exact arithmetic but land just below in binary still round
/// up.
pub fn replacement_count(alpha: f64, n: usize) -> usize {
    let exact = alpha * n as f64;
    ((exact + 0.5 + 1e-9).floor() as usize).min(n)
}

/// Seeded uniform subset of `bg` of size [`replacement_count`], sorted.
/// The stream is keyed by `(seed, proposal, layer)`.
pub fn replacement_plan(
    bg: &[usize],
    alpha: f64,
    proposal: usize,
    layer: usize,
    seed: u64,
) -> Vec<usize> {
    let count = replacement_count(alpha, bg.len());
    let mut rng = keyed(seed, Stream::Replacement, &[proposal as u64, layer as u64]);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, bg.len(), count)
        .into_iter()
        .map(|i| bg[i])
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Rewrites the planned spatial tokens at each planned layer.
#[derive(Debug, Clone)]
pub struct BackgroundReplacement<'a> {
    pub plans: BTreeMap<usize, Vec<usize>>,
    pub clean: &'a CleanContext,
}

impl Interceptor for BackgroundReplacement<'_> {
    fn rewrite(&self, layer: usize, mut tokens: Array2<f64>) -> Array2<f64> {
        if let Some(positions) = self.plans.get(&layer) {
            let cls = &self.clean.cls_per_layer[layer - 1];
            for &j in positions {
                tokens.row_mut(1 + j).assign(cls);
            }
        }
        tokens
    }
}

#[derive(Debug, Clone)]
pub struct CsOutput {
    /// Final-layer `[CLS]` of the shifted pass, used for classification.
    pub embedding: Array1<f64>,
    pub layers: Vec<LayerFeatures>,
    /// Replaced spatial token indices per layer.
    pub plans: BTreeMap<usize, Vec<usize>>,
}

/// Build the replacement interceptor for one proposal.
pub fn plan_replacement<'a>(
    sub: &SubImage,
    clean: &'a CleanContext,
    cfg: &CsConfig,
    encoder: &Encoder,
    proposal: usize,
) -> Result<BackgroundReplacement<'a>> {
    let num_layers = encoder.num_layers();
    let patch = encoder.config().patch_size;
    if let Some(bad) = cfg.idx.iter().find(|&&i| i == 0 || i > num_layers) {
        return Err(Error::Config(format!(
            "replacement layer {bad} outside encoder range 1..={num_layers}"
        )));
    }
    if clean.cls_per_layer.len() != num_layers + 1 {
        return Err(Error::Shape(format!(
            "clean context has {} entries, encoder needs {}",
            clean.cls_per_layer.len(),
            num_layers + 1
        )));
    }
    let bg = background_patches(&sub.mask, patch, cfg.bg_threshold)?;
    let plans = cfg
        .idx
        .iter()
        .map(|&layer| {
            (
                layer,
                replacement_plan(&bg, cfg.alpha, proposal, layer, cfg.seed),
            )
        })
        .collect();
    Ok(BackgroundReplacement { plans, clean })
}

pub fn cs_forward(
    encoder: &Encoder,
    sub: &SubImage,
    clean: &CleanContext,
    cfg: &CsConfig,
    proposal: usize,
) -> Result<CsOutput> {
    let replacement = plan_replacement(sub, clean, cfg, encoder, proposal)?;
    let layers = encoder.forward(&sub.image, Some(&replacement))?;
    let embedding = layers.last().expect("encoder has layers").cls.clone();
    Ok(CsOutput {
        embedding,
        layers,
        plans: replacement.plans,
    })
}
