// SPDX-License-Identifier: Apache-2.0

//! Two-stage assembly: synthetic proposals, a toy text bank, scoring of the
//! calibrated proposal embeddings and of the contextually shifted encoder
//! embeddings, geometric ensembling and per-pixel label assignment.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contextual_shift::{crop_and_mask, cs_forward, CleanContext, CsConfig, MaskProposal};
use crate::encoder::{Encoder, ImageTensor};
use crate::error::{Error, Result};
use crate::metrics::{AssociationMatrix, LabelMap, IGNORE};
use crate::rng::{gaussian, keyed, Stream};
use crate::sim::SemanticIntegration;

/// Relative size of the perturbation added to derived class vectors.
pub const TEXT_NOISE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub class_names: Vec<String>,
    /// `K x C`, unit-norm rows.
    pub vectors: Array2<f64>,
}

impl TextBank {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn unit_random<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| gaussian(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Seeded class vectors. Classes without relations get independent random
/// unit vectors; a class with relations gets the normalised mean of its
/// related classes' vectors plus a random perturbation of norm
/// `TEXT_NOISE * |mean|`. Related classes are resolved first where the
/// relation graph allows it, so chains (child -> parent -> grandparent) stay
/// correlated.
pub fn build_text_bank(
    class_names: &[String],
    hierarchy: &AssociationMatrix,
    dim: usize,
    seed: u64,
) -> Result<TextBank> {
    let k = class_names.len();
    if k == 0 {
        return Err(Error::Config("text bank needs at least one class".into()));
    }
    if dim == 0 {
        return Err(Error::Config("text bank dimension must be positive".into()));
    }
    if hierarchy.classes() != k {
        return Err(Error::Config(format!(
            "hierarchy covers {} classes, {k} names given",
            hierarchy.classes()
        )));
    }
    for (i, name) in class_names.iter().enumerate() {
        if class_names[..i].contains(name) {
            return Err(Error::Config(format!("duplicate class name {name:?}")));
        }
    }

    let mut vectors = Array2::<f64>::zeros((k, dim));
    for q in 0..k {
        let mut rng = keyed(seed, Stream::TextBank, &[q as u64, 0]);
        vectors.row_mut(q).assign(&unit_random(dim, &mut rng));
    }

    let mut done: Vec<bool> = (0..k).map(|q| hierarchy.related(q).is_empty()).collect();
    while let Some(q) = (0..k)
        .find(|&q| !done[q] && hierarchy.related(q).iter().all(|&r| done[r]))
        .or_else(|| (0..k).find(|&q| !done[q]))
    {
        let related = hierarchy.related(q);
        let mut mean = Array1::<f64>::zeros(dim);
        for &r in &related {
            mean += &vectors.row(r);
        }
        mean /= related.len() as f64;
        let norm = mean.dot(&mean).sqrt();
        let mut rng = keyed(seed, Stream::TextBank, &[q as u64, 1]);
        let derived = if norm > 1e-12 {
            &mean + &(unit_random(dim, &mut rng) * (TEXT_NOISE * norm))
        } else {
            unit_random(dim, &mut rng)
        };
        let n = derived.dot(&derived).sqrt();
        vectors.row_mut(q).assign(&(derived / n));
        done[q] = true;
    }

    Ok(TextBank {
        class_names: class_names.to_vec(),
        vectors,
    })
}

/// `softmax(cos(e, bank_k) / temperature)` over the bank.
pub fn classify_embedding(
    e: ArrayView1<'_, f64>,
    bank: &TextBank,
    temperature: f64,
) -> Result<Array1<f64>> {
    if e.len() != bank.dim() {
        return Err(Error::Shape(format!(
            "embedding has {} channels, bank has {}",
            e.len(),
            bank.dim()
        )));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Domain(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateEmbedding("embedding is not finite".into()));
    }
    let norm = e.dot(&e).sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateEmbedding("zero embedding".into()));
    }
    let logits = bank.vectors.dot(&e) / (norm * temperature);
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    Ok(exp / sum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Weight of the encoder (contextual shift) branch.
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            temperature: 0.01,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} not in [0, 1]",
                self.lambda
            )));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn check_distribution(p: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Contract(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `model^(1 - lambda) * clip^lambda`, renormalised.
pub fn ensemble_scores(
    model: ArrayView1<'_, f64>,
    clip: ArrayView1<'_, f64>,
    lambda: f64,
) -> Result<Array1<f64>> {
    if model.len() != clip.len() {
        return Err(Error::Shape(format!(
            "model scores have {} classes, clip scores {}",
            model.len(),
            clip.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} not in [0, 1]")));
    }
    check_distribution(model, "model scores")?;
    check_distribution(clip, "clip scores")?;
    let combined: Array1<f64> = model
        .iter()
        .zip(clip.iter())
        .map(|(&m, &c)| m.powf(1.0 - lambda) * c.powf(lambda))
        .collect();
    let sum = combined.sum();
    if sum.is_nan() || sum <= 0.0 {
        return Err(Error::Contract(
            "model and clip scores have disjoint support".into(),
        ));
    }
    Ok(combined / sum)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per pixel, sum the class scores of every covering mask and take the
/// argmax (smallest class on ties). Uncovered pixels get [`IGNORE`].
pub fn assign_labels(masks: &[Array2<bool>], probs: &Array2<f64>) -> Result<LabelMap> {
    if masks.len() != probs.nrows() {
        return Err(Error::Shape(format!(
            "{} masks but {} score rows",
            masks.len(),
            probs.nrows()
        )));
    }
    let Some(first) = masks.first() else {
        return Err(Error::Shape("no masks to assign".into()));
    };
    let dim = first.dim();
    if let Some(bad) = masks.iter().find(|m| m.dim() != dim) {
        return Err(Error::Shape(format!(
            "mask {:?} differs from {dim:?}",
            bad.dim()
        )));
    }
    let k = probs.ncols();
    let mut labels = Array2::from_elem(dim, IGNORE);
    let mut score = Array1::<f64>::zeros(k);
    for ((y, x), out) in labels.indexed_iter_mut() {
        score.fill(0.0);
        let mut covered = false;
        for (m, row) in masks.iter().zip(probs.rows()) {
            if m[[y, x]] {
                score += &row;
                covered = true;
            }
        }
        if covered {
            *out = argmax(score.view()) as u16;
        }
    }
    Ok(LabelMap::new(labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalNoise {
    /// Probability of flipping each region-boundary pixel.
    pub mask_flip_rate: f64,
    /// Per-component standard deviation added to the embedding.
    pub embed_noise: f64,
    /// Probability of embedding a proposal as one of its related classes.
    pub parent_swap_rate: f64,
}

impl Default for ProposalNoise {
    fn default() -> Self {
        Self {
            mask_flip_rate: 0.05,
            embed_noise: 0.05,
            parent_swap_rate: 0.0,
        }
    }
}

impl ProposalNoise {
    pub fn none() -> Self {
        Self {
            mask_flip_rate: 0.0,
            embed_noise: 0.0,
            parent_swap_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("mask_flip_rate", self.mask_flip_rate),
            ("parent_swap_rate", self.parent_swap_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} {rate} not in [0, 1]")));
            }
        }
        if self.embed_noise < 0.0 || !self.embed_noise.is_finite() {
            return Err(Error::Config(format!(
                "embed_noise {} must be nonnegative",
                self.embed_noise
            )));
        }
        Ok(())
    }
}

/// Stand-in for a trained segmentation stage's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub masks: Vec<Array2<bool>>,
    /// `N x C`.
    pub embeddings: Array2<f64>,
    /// Ground-truth class each proposal was derived from.
    pub classes: Vec<usize>,
    /// Class whose text vector seeded the embedding.
    pub embedded_as: Vec<usize>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Pixels whose 4-neighbourhood straddles the region edge.
pub fn region_boundary(region: &Array2<bool>) -> Array2<bool> {
    let (h, w) = region.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = region[[y, x]];
        (y > 0 && region[[y - 1, x]] != v)
            || (y + 1 < h && region[[y + 1, x]] != v)
            || (x > 0 && region[[y, x - 1]] != v)
            || (x + 1 < w && region[[y, x + 1]] != v)
    })
}

/// One proposal per ground-truth class present, in ascending class order.
pub fn synth_proposals(
    gt: &LabelMap,
    bank: &TextBank,
    noise: &ProposalNoise,
    seed: u64,
) -> Result<ProposalSet> {
    gt.validate(bank.classes())?;
    let classes: Vec<usize> = gt.classes_present().into_iter().map(usize::from).collect();
    let mut masks = Vec::with_capacity(classes.len());
    let mut embeddings = Array2::<f64>::zeros((classes.len(), bank.dim()));
    let mut embedded_as = Vec::with_capacity(classes.len());

    for (n, &class) in classes.iter().enumerate() {
        let mut rng = keyed(seed, Stream::Proposals, &[class as u64]);
        let region = gt.labels.mapv(|l| l as usize == class);
        let mut mask = region.clone();
        if noise.mask_flip_rate > 0.0 {
            let boundary = region_boundary(&region);
            for ((y, x), &on) in boundary.indexed_iter() {
                if on && rng.random::<f64>() < noise.mask_flip_rate {
                    mask[[y, x]] = !mask[[y, x]];
                }
            }
            if !mask.iter().any(|&m| m) {
                mask = region;
            }
        }
        masks.push(mask);
        embedded_as.push(class);
        let row = bank.vectors.row(class);
        let mut e = embeddings.row_mut(n);
        e.assign(&row);
        if noise.embed_noise > 0.0 {
            e.mapv_inplace(|v| v + noise.embed_noise * gaussian(&mut rng));
        }
    }
    Ok(ProposalSet {
        masks,
        embeddings,
        classes,
        embedded_as,
    })
}

/// Replace a proposal's embedding source with one of its related classes.
pub fn swap_to_related(
    set: &mut ProposalSet,
    bank: &TextBank,
    hierarchy: &AssociationMatrix,
    noise: &ProposalNoise,
    seed: u64,
) {
    if noise.parent_swap_rate <= 0.0 {
        return;
    }
    for n in 0..set.len() {
        let class = set.classes[n];
        let related = hierarchy.related(class);
        let mut rng = keyed(seed, Stream::Proposals, &[class as u64, 1]);
        if related.is_empty() || rng.random::<f64>() >= noise.parent_swap_rate {
            continue;
        }
        let target = related[rng.random_range(0..related.len())];
        let mut e = set.embeddings.row_mut(n);
        e.assign(&bank.vectors.row(target));
        if noise.embed_noise > 0.0 {
            e.mapv_inplace(|v| v + noise.embed_noise * gaussian(&mut rng));
        }
        set.embedded_as[n] = target;
    }
}

/// Seeded models shared by every image of a run.
#[derive(Debug, Clone)]
pub struct Models {
    pub encoder: Encoder,
    pub sim: SemanticIntegration,
    pub bank: TextBank,
    pub hierarchy: AssociationMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub id: usize,
    pub true_class: usize,
    pub embedded_as: usize,
    pub mask_pixels: usize,
    /// Number of replaced background tokens per replaced layer.
    pub replaced: Vec<(usize, usize)>,
    pub model_probs: Vec<f64>,
    pub clip_probs: Vec<f64>,
    pub combined: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub labels: LabelMap,
    pub proposals: Vec<ProposalRecord>,
}

pub fn run_pipeline(
    models: &Models,
    image: &ImageTensor,
    gt: &LabelMap,
    noise: &ProposalNoise,
    cs_cfg: &CsConfig,
    ens_cfg: &EnsembleConfig,
    seed: u64,
) -> Result<PipelineOutput> {
    ens_cfg.validate()?;
    if gt.dim() != (image.height(), image.width()) {
        return Err(Error::Shape(format!(
            "ground truth {:?} does not match image {}x{}",
            gt.dim(),
            image.height(),
            image.width()
        )));
    }
    let bank = &models.bank;
    let mut proposals = synth_proposals(gt, bank, noise, seed)?;
    swap_to_related(&mut proposals, bank, &models.hierarchy, noise, seed);
    if proposals.is_empty() {
        return Ok(PipelineOutput {
            labels: LabelMap::new(Array2::from_elem(gt.dim(), IGNORE)),
            proposals: Vec::new(),
        });
    }

    let layers = models.encoder.forward(image, None)?;
    let calibrated = models
        .sim
        .calibrate(proposals.embeddings.view(), &layers, None)?;
    let clean = CleanContext::new(&models.encoder, &layers)?;

    let k = bank.classes();
    let mut combined = Array2::<f64>::zeros((proposals.len(), k));
    let mut records = Vec::with_capacity(proposals.len());
    for (n, mask) in proposals.masks.iter().enumerate() {
        let model_probs = classify_embedding(calibrated.row(n), bank, ens_cfg.temperature)?;
        let proposal = MaskProposal {
            id: n,
            mask: mask.clone(),
        };
        let sub = crop_and_mask(image, &proposal, cs_cfg)?;
        let shifted = cs_forward(&models.encoder, &sub, &clean, cs_cfg, n)?;
        let clip_probs = classify_embedding(shifted.embedding.view(), bank, ens_cfg.temperature)?;
        let mixed = ensemble_scores(model_probs.view(), clip_probs.view(), ens_cfg.lambda)?;
        combined.row_mut(n).assign(&mixed);
        records.push(ProposalRecord {
            id: n,
            true_class: proposals.classes[n],
            embedded_as: proposals.embedded_as[n],
            mask_pixels: mask.iter().filter(|&&m| m).count(),
            replaced: shifted.plans.iter().map(|(&l, p)| (l, p.len())).collect(),
            label: argmax(mixed.view()),
            model_probs: model_probs.to_vec(),
            clip_probs: clip_probs.to_vec(),
            combined: mixed.to_vec(),
        });
    }
    let labels = assign_labels(&proposals.masks, &combined)?;
    Ok(PipelineOutput {
        labels,
        proposals: records,
    })
}
