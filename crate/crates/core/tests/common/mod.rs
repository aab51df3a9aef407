// SPDX-License-Identifier: Apache-2.0

//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use ndarray::{Array2, Array3};
use ovseg_core::metrics::IGNORE;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct-summation DFT enhancement on one `h x w x C` grid:
/// `x + Re(IDFT(map(DFT(x) * g)))` where `map` is the 2x2 (re, im) matrix
/// followed by ReLU, or the identity when `weights` is `None`.
pub fn naive_enhance(
    x: &Array3<f64>,
    g: &Array2<f64>,
    weights: Option<[[f64; 2]; 2]>,
) -> Array3<f64> {
    let (h, w, channels) = x.dim();
    let tau = std::f64::consts::TAU;
    let mut out = x.clone();
    for c in 0..channels {
        let mut spectrum = vec![(0.0f64, 0.0f64); h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let ang = -tau * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        re += x[[y, xx, c]] * ang.cos();
                        im += x[[y, xx, c]] * ang.sin();
                    }
                }
                let (re, im) = (re * g[[u, v]], im * g[[u, v]]);
                spectrum[u * w + v] = match weights {
                    Some([[a, b], [cc, d]]) => {
                        ((a * re + b * im).max(0.0), (cc * re + d * im).max(0.0))
                    }
                    None => (re, im),
                };
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut re = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let ang = tau * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        let (sr, si) = spectrum[u * w + v];
                        re += sr * ang.cos() - si * ang.sin();
                    }
                }
                out[[y, xx, c]] += re / (h * w) as f64;
            }
        }
    }
    out
}

/// Per-class pixel buckets counted straight from the label maps.
#[derive(Debug, Clone, Copy, Default)]
pub struct Buckets {
    pub p_q: u64,
    pub g_q: u64,
    pub pq_gq: u64,
    pub pbq_gq: u64,
    pub pbq_gbq: u64,
    pub p_bq: u64,
}

pub fn buckets(pred: &Array2<u16>, gt: &Array2<u16>, q: usize, related: &[bool]) -> Buckets {
    let mut b = Buckets::default();
    let in_q = |l: u16| l != IGNORE && related[l as usize];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g == IGNORE {
            continue;
        }
        let p_is_q = p != IGNORE && p as usize == q;
        let g_is_q = g as usize == q;
        b.p_q += p_is_q as u64;
        b.g_q += g_is_q as u64;
        b.pq_gq += (p_is_q && g_is_q) as u64;
        b.pbq_gq += (in_q(p) && g_is_q) as u64;
        b.pbq_gbq += (in_q(p) && in_q(g)) as u64;
        b.p_bq += in_q(p) as u64;
    }
    b
}

pub fn oracle_beta(b: &Buckets) -> f64 {
    if b.p_bq == 0 {
        0.0
    } else {
        (b.pbq_gq + b.pbq_gbq) as f64 / b.p_bq as f64
    }
}

pub fn oracle_iou(b: &Buckets) -> Option<f64> {
    let union = b.p_q + b.g_q - b.pq_gq;
    (union > 0).then(|| b.pq_gq as f64 / union as f64)
}

pub fn oracle_sg_iou(b: &Buckets) -> Option<f64> {
    let union = b.p_q + b.g_q - b.pq_gq;
    (union > 0).then(|| (b.pq_gq as f64 + b.pbq_gq as f64 * oracle_beta(b)) / union as f64)
}

/// A random evaluation instance: prediction, ground truth, relation rows.
pub struct Instance {
    pub pred: Array2<u16>,
    pub gt: Array2<u16>,
    pub classes: usize,
    pub relations: Vec<Vec<bool>>,
}

pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let classes = rng.random_range(1..=6usize);
    let h = rng.random_range(1..=8usize);
    let w = rng.random_range(1..=8usize);
    let label = |rng: &mut dyn rand::RngCore, ignore_p: f64| -> u16 {
        if rng.random_bool(ignore_p) {
            IGNORE
        } else {
            rng.random_range(0..classes) as u16
        }
    };
    let mut pred = Array2::<u16>::zeros((h, w));
    let mut gt = Array2::<u16>::zeros((h, w));
    for v in pred.iter_mut() {
        *v = label(rng, 0.05);
    }
    for v in gt.iter_mut() {
        *v = label(rng, 0.05);
    }
    let density = rng.random_range(0.0..0.6);
    let relations = (0..classes)
        .map(|q| {
            (0..classes)
                .map(|r| r != q && rng.random_bool(density))
                .collect()
        })
        .collect();
    Instance {
        pred,
        gt,
        classes,
        relations,
    }
}
