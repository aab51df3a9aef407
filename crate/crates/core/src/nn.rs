// SPDX-License-Identifier: Apache-2.0

//! Dense building blocks shared by the toy encoder and the semantic
//! integration module: layer norm, multi-head attention, the GELU MLP and a
//! pre-norm transformer block.

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::gaussian;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Seeded matrix with orthonormal rows or columns, whichever is shorter,
/// obtained from the QR factorisation of a Gaussian matrix.
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::<f64>::from_fn(r, c, |_, _| gaussian(rng));
    let q = g.qr().q();
    let out = Array2::from_shape_fn((r, c), |(i, j)| q[(i, j)]);
    if tall {
        out
    } else {
        out.reversed_axes().as_standard_layout().to_owned()
    }
}

/// Records intermediate tensors of a forward pass for invariant checks.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    /// Post-softmax attention weights, one matrix per head per attention call.
    pub attention: Vec<Array2<f64>>,
    /// Layer-norm outputs at every normalisation site.
    pub normalized: Vec<Array2<f64>>,
}

/// Per-row layer normalisation with unit gain and zero bias.
pub fn layer_norm(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Numerically stable softmax applied to each row in place.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

/// Result of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Final output after the output projection, `queries x C`.
    pub output: Array2<f64>,
    /// Concatenated per-head context before the output projection.
    pub context: Array2<f64>,
    /// Post-softmax weights per head, each `queries x keys`.
    pub weights: Vec<Array2<f64>>,
}

/// Vanilla multi-head attention without biases.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn seeded<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            w_q: orthogonal(dim, dim, rng),
            w_k: orthogonal(dim, dim, rng),
            w_v: orthogonal(dim, dim, rng),
            w_o: orthogonal(dim, dim, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    /// Attend from `query` rows to `key_value` rows.
    pub fn forward(
        &self,
        query: ArrayView2<'_, f64>,
        key_value: ArrayView2<'_, f64>,
    ) -> Result<AttentionOutput> {
        let dim = self.dim();
        if query.ncols() != dim || key_value.ncols() != dim {
            return Err(Error::Shape(format!(
                "attention expects {dim} channels, got query {} and key/value {}",
                query.ncols(),
                key_value.ncols()
            )));
        }
        if key_value.nrows() == 0 {
            return Err(Error::Shape("empty key/value sequence".into()));
        }
        let q = query.dot(&self.w_q);
        let k = key_value.dot(&self.w_k);
        let v = key_value.dot(&self.w_v);
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut context = Array2::<f64>::zeros((query.nrows(), dim));
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            weights.push(scores);
        }
        let output = context.dot(&self.w_o);
        Ok(AttentionOutput {
            output,
            context,
            weights,
        })
    }
}

/// Two-layer GELU perceptron with hidden width `4 * dim`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w_in: Array2<f64>,
    pub w_out: Array2<f64>,
}

impl Mlp {
    pub fn seeded<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            w_in: orthogonal(dim, 4 * dim, rng),
            w_out: orthogonal(4 * dim, dim, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w_in).mapv(gelu).dot(&self.w_out)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn seeded<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::seeded(dim, heads, rng)?,
            mlp: Mlp::seeded(dim, rng),
        })
    }

    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        trace: Option<&mut Trace>,
    ) -> Result<Array2<f64>> {
        let normed = layer_norm(x);
        let attn = self.attn.forward(normed.view(), normed.view())?;
        let mid = &x + &attn.output;
        let normed_mid = layer_norm(mid.view());
        let out = &mid + &self.mlp.forward(normed_mid.view());
        if let Some(t) = trace {
            t.attention.extend(attn.weights);
            t.normalized.push(normed);
            t.normalized.push(normed_mid);
        }
        Ok(out)
    }
}

/// Row sums of every weight matrix, for normalisation checks.
pub fn attention_row_sums(weights: &[Array2<f64>]) -> impl Iterator<Item = f64> + '_ {
    weights.iter().flat_map(|w| w.sum_axis(Axis(1)).into_iter())
}
