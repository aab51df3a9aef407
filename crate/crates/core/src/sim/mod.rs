// SPDX-License-Identifier: Apache-2.0

//! Semantic integration: calibrates proposal embeddings with spectrally
//! filtered encoder features (cross-attention) and the final encoder
//! `[CLS]` vector (scaled broadcast add followed by one encoder block).

mod spectral;

pub use spectral::{
    low_frequency_enhance, make_frequency_kernel, FrequencyKernel, SpectralConv, SpectralPath,
};

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::LayerFeatures;
use crate::error::{Error, Result};
use crate::nn::{AttentionOutput, EncoderBlock, MultiHeadAttention, Trace};
use crate::rng::{keyed, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// When false the proposal embeddings pass through unchanged.
    pub enabled: bool,
    /// 1-based encoder layers whose spatial tokens are enhanced and attended.
    pub selected_layers: Vec<usize>,
    /// One cutoff per selected layer.
    pub sigmas: Vec<f64>,
    pub gamma: f64,
    pub heads: usize,
    pub conv: SpectralConv,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            selected_layers: vec![6, 9, 12],
            sigmas: vec![9.0, 7.0, 3.0],
            gamma: 0.1,
            heads: 4,
            conv: SpectralConv::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, num_layers: usize, embed_dim: usize) -> Result<()> {
        if self.selected_layers.is_empty() {
            return Err(Error::Config(
                "SIM needs at least one selected layer".into(),
            ));
        }
        if self.selected_layers.len() != self.sigmas.len() {
            return Err(Error::Config(format!(
                "{} selected layers but {} sigmas",
                self.selected_layers.len(),
                self.sigmas.len()
            )));
        }
        if let Some(bad) = self
            .selected_layers
            .iter()
            .find(|&&l| l == 0 || l > num_layers)
        {
            return Err(Error::Config(format!(
                "SIM layer {bad} outside encoder range 1..={num_layers}"
            )));
        }
        if let Some(bad) = self.sigmas.iter().find(|s| **s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config(format!("SIM sigma {bad} must be positive")));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("SIM gamma must be finite".into()));
        }
        if self.heads == 0 || !embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "SIM heads {} must divide embed_dim {embed_dim}",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Flatten `m` enhanced `h x w x C` grids into one `m*h*w x C` key/value
/// sequence and attend to it from the proposal embeddings.
pub fn integrate_semantics(
    attn: &MultiHeadAttention,
    proposals: ArrayView2<'_, f64>,
    enhanced: &[Array3<f64>],
) -> Result<AttentionOutput> {
    if enhanced.is_empty() {
        return Err(Error::Shape("no enhanced layers to integrate".into()));
    }
    let dim = proposals.ncols();
    let mut rows = Vec::new();
    for grid in enhanced {
        let (h, w, c) = grid.dim();
        if c != dim {
            return Err(Error::Shape(format!(
                "enhanced grid has {c} channels but proposals have {dim}"
            )));
        }
        let flat = grid
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, c))
            .expect("contiguous grid");
        rows.push(flat);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let key_value = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::Shape(format!("cannot concatenate enhanced grids: {e}")))?;
    attn.forward(proposals, key_value.view())
}

/// `block(F + gamma * cls)` with `cls` broadcast over the rows of `F`.
pub fn fuse_cls(
    block: &EncoderBlock,
    integrated: ArrayView2<'_, f64>,
    cls_final: ArrayView1<'_, f64>,
    gamma: f64,
    trace: Option<&mut Trace>,
) -> Result<Array2<f64>> {
    if cls_final.len() != integrated.ncols() {
        return Err(Error::Shape(format!(
            "final [CLS] has {} channels, embeddings have {}",
            cls_final.len(),
            integrated.ncols()
        )));
    }
    let fused = &integrated + &(&cls_final * gamma);
    block.forward(fused.view(), trace)
}

/// Seeded instance of the module: one cross-attention and one fusion block.
#[derive(Debug, Clone)]
pub struct SemanticIntegration {
    cfg: SimConfig,
    cross_attn: MultiHeadAttention,
    fusion: EncoderBlock,
}

impl SemanticIntegration {
    pub fn new(cfg: SimConfig, num_layers: usize, embed_dim: usize) -> Result<Self> {
        cfg.validate(num_layers, embed_dim)?;
        let mut rng = keyed(cfg.seed, Stream::SimWeights, &[0]);
        let cross_attn = MultiHeadAttention::seeded(embed_dim, cfg.heads, &mut rng)?;
        let mut rng = keyed(cfg.seed, Stream::SimWeights, &[1]);
        let fusion = EncoderBlock::seeded(embed_dim, cfg.heads, &mut rng)?;
        Ok(Self {
            cfg,
            cross_attn,
            fusion,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn cross_attention(&self) -> &MultiHeadAttention {
        &self.cross_attn
    }

    pub fn fusion_block(&self) -> &EncoderBlock {
        &self.fusion
    }

    /// Enhance each selected layer's spatial grid with its own kernel.
    pub fn enhance_layers(&self, layers: &[LayerFeatures]) -> Result<Vec<Array3<f64>>> {
        self.cfg
            .selected_layers
            .iter()
            .zip(&self.cfg.sigmas)
            .map(|(&idx, &sigma)| {
                let feats = layers
                    .iter()
                    .find(|f| f.layer_index == idx)
                    .ok_or_else(|| Error::Config(format!("layer {idx} missing from features")))?;
                let (h, w, _) = feats.spatial.dim();
                let kernel = make_frequency_kernel(h, w, sigma)?;
                low_frequency_enhance(&feats.spatial, &kernel, SpectralPath::Conv(self.cfg.conv))
            })
            .collect()
    }

    /// Full calibration of `proposals` (`N x C`) against one image's layers.
    pub fn calibrate(
        &self,
        proposals: ArrayView2<'_, f64>,
        layers: &[LayerFeatures],
        mut trace: Option<&mut Trace>,
    ) -> Result<Array2<f64>> {
        if proposals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "proposal embeddings contain NaN or Inf".into(),
            ));
        }
        if !self.cfg.enabled {
            return Ok(proposals.to_owned());
        }
        let last: &Array1<f64> = &layers
            .last()
            .ok_or_else(|| Error::Shape("no encoder layers supplied".into()))?
            .cls;
        let enhanced = self.enhance_layers(layers)?;
        let integrated = integrate_semantics(&self.cross_attn, proposals, &enhanced)?;
        if let Some(t) = trace.as_deref_mut() {
            t.attention.extend(integrated.weights.iter().cloned());
        }
        fuse_cls(
            &self.fusion,
            integrated.output.view(),
            last.view(),
            self.cfg.gamma,
            trace,
        )
    }
}
