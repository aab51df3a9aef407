// SPDX-License-Identifier: Apache-2.0

//! Confusion counting, IoU and Semantic-Guided IoU.
//!
//! SG-IoU credits pixels of class `q` predicted as one of its synonyms or
//! parents `Q`, scaled by a balance factor
//! `beta = (P_Q G_q + P_Q G_Q) / P_Q`, the share of `Q` predictions that land
//! on `q` or on `Q` itself:
//!
//! ```text
//! SG-IoU(q) = (P_q G_q + P_Q G_q * beta) / (P_q + G_q - P_q G_q)
//! ```
//!
//! Counts are aggregated over the whole dataset before any ratio is taken.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for pixels excluded from evaluation.
pub const IGNORE: u16 = u16::MAX;

/// Dense class map, `H x W`, values `< K` or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Array2<u16>,
}

impl LabelMap {
    pub fn new(labels: Array2<u16>) -> Self {
        Self { labels }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= classes)
        {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    /// Sorted distinct non-ignore labels.
    pub fn classes_present(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self
            .labels
            .iter()
            .copied()
            .filter(|&l| l != IGNORE)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

/// `relations[q][r]` is true when `r` is a synonym or parent of `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationMatrix {
    relations: Array2<bool>,
}

impl AssociationMatrix {
    pub fn empty(classes: usize) -> Self {
        Self {
            relations: Array2::from_elem((classes, classes), false),
        }
    }

    pub fn from_relations(relations: Array2<bool>) -> Result<Self> {
        let (k, k2) = relations.dim();
        if k != k2 {
            return Err(Error::Association(format!(
                "matrix is {k}x{k2}, not square"
            )));
        }
        if let Some(q) = (0..k).find(|&q| relations[[q, q]]) {
            return Err(Error::Association(format!(
                "class {q} is related to itself"
            )));
        }
        Ok(Self { relations })
    }

    /// Build from `class -> related classes` pairs.
    pub fn from_map(classes: usize, map: &BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let mut relations = Array2::from_elem((classes, classes), false);
        for (&q, related) in map {
            if q >= classes {
                return Err(Error::Association(format!(
                    "unknown class id {q} (K = {classes})"
                )));
            }
            for &r in related {
                if r >= classes {
                    return Err(Error::Association(format!(
                        "unknown class id {r} related to {q} (K = {classes})"
                    )));
                }
                relations[[q, r]] = true;
            }
        }
        Self::from_relations(relations)
    }

    /// Parse the JSON form: keys are class-id strings, values arrays of ids.
    pub fn from_json(classes: usize, text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<usize>> = serde_json::from_str(text)
            .map_err(|e| Error::Association(format!("malformed association JSON: {e}")))?;
        let mut map = BTreeMap::new();
        for (key, related) in raw {
            let q: usize = key
                .trim()
                .parse()
                .map_err(|_| Error::Association(format!("key {key:?} is not a class id")))?;
            map.entry(q).or_insert_with(Vec::new).extend(related);
        }
        Self::from_map(classes, &map)
    }

    pub fn to_map(&self) -> BTreeMap<usize, Vec<usize>> {
        (0..self.classes())
            .filter_map(|q| {
                let rel = self.related(q);
                (!rel.is_empty()).then_some((q, rel))
            })
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.relations.nrows()
    }

    pub fn is_related(&self, q: usize, r: usize) -> bool {
        self.relations[[q, r]]
    }

    /// The set `Q_q`, ascending.
    pub fn related(&self, q: usize) -> Vec<usize> {
        (0..self.classes())
            .filter(|&r| self.relations[[q, r]])
            .collect()
    }
}

pub fn load_association(path: &Path, classes: usize) -> Result<AssociationMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AssociationMatrix::from_json(classes, &text)
}

/// Pixel counts indexed `[predicted][ground truth]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    classes: usize,
    counts: Vec<u64>,
    /// Ground-truth pixels of each class that received no prediction.
    unpredicted: Vec<u64>,
    pub total_ignored: u64,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            unpredicted: vec![0; classes],
            total_ignored: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.classes + gt]
    }

    pub fn add(&mut self, pred: usize, gt: usize, n: u64) {
        self.counts[pred * self.classes + gt] += n;
    }

    pub fn unpredicted(&self, gt: usize) -> u64 {
        self.unpredicted[gt]
    }

    /// Pixels predicted as `q`.
    pub fn predicted(&self, q: usize) -> u64 {
        (0..self.classes).map(|g| self.get(q, g)).sum()
    }

    /// Pixels whose ground truth is `q`, including unpredicted ones.
    pub fn ground_truth(&self, q: usize) -> u64 {
        (0..self.classes).map(|p| self.get(p, q)).sum::<u64>() + self.unpredicted[q]
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge counts over {} and {} classes",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unpredicted.iter_mut().zip(&other.unpredicted) {
            *a += b;
        }
        self.total_ignored += other.total_ignored;
        Ok(())
    }
}

/// Count one prediction against its ground truth.
///
/// Pixels with ignored ground truth are only tallied in `total_ignored`;
/// ignored predictions on labelled pixels count as misses of the true class.
pub fn accumulate_confusion(
    pred: &LabelMap,
    gt: &LabelMap,
    classes: usize,
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::new(classes);
    accumulate_into(&mut counts, pred, gt)?;
    Ok(counts)
}

pub fn accumulate_into(counts: &mut ConfusionCounts, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    let classes = counts.classes;
    pred.validate(classes)?;
    gt.validate(classes)?;
    for (&p, &g) in pred.labels.iter().zip(gt.labels.iter()) {
        if g == IGNORE {
            counts.total_ignored += 1;
        } else if p == IGNORE {
            counts.unpredicted[g as usize] += 1;
        } else {
            counts.add(p as usize, g as usize, 1);
        }
    }
    Ok(())
}

/// `None` when class `q` neither occurs nor is predicted.
pub fn iou(counts: &ConfusionCounts, q: usize) -> Option<f64> {
    let inter = counts.get(q, q);
    let union = counts.predicted(q) + counts.ground_truth(q) - inter;
    (union > 0).then(|| inter as f64 / union as f64)
}

/// The five pixel tallies behind SG-IoU for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SgTerms {
    pub p_q: u64,
    pub g_q: u64,
    pub pq_gq: u64,
    pub p_big_q_gq: u64,
    pub p_big_q_g_big_q: u64,
    pub p_big_q: u64,
}

pub fn sg_terms(counts: &ConfusionCounts, assoc: &AssociationMatrix, q: usize) -> SgTerms {
    let related = assoc.related(q);
    SgTerms {
        p_q: counts.predicted(q),
        g_q: counts.ground_truth(q),
        pq_gq: counts.get(q, q),
        p_big_q_gq: related.iter().map(|&r| counts.get(r, q)).sum(),
        p_big_q_g_big_q: related
            .iter()
            .flat_map(|&r| related.iter().map(move |&s| (r, s)))
            .map(|(r, s)| counts.get(r, s))
            .sum(),
        p_big_q: related.iter().map(|&r| counts.predicted(r)).sum(),
    }
}

/// Balance factor; zero when nothing was predicted as any class in `Q_q`.
pub fn beta(counts: &ConfusionCounts, assoc: &AssociationMatrix, q: usize) -> f64 {
    let t = sg_terms(counts, assoc, q);
    balance(&t)
}

fn balance(t: &SgTerms) -> f64 {
    if t.p_big_q == 0 {
        0.0
    } else {
        (t.p_big_q_gq + t.p_big_q_g_big_q) as f64 / t.p_big_q as f64
    }
}

/// `None` when class `q` neither occurs nor is predicted.
pub fn sg_iou(counts: &ConfusionCounts, assoc: &AssociationMatrix, q: usize) -> Option<f64> {
    let t = sg_terms(counts, assoc, q);
    let union = t.p_q + t.g_q - t.pq_gq;
    (union > 0).then(|| (t.pq_gq as f64 + t.p_big_q_gq as f64 * balance(&t)) / union as f64)
}

/// Which classes enter the class means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanOver {
    /// Classes with any ground-truth or predicted pixel.
    #[default]
    AnyPresent,
    /// Classes with ground-truth pixels only.
    GtPresent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub id: usize,
    pub name: String,
    pub iou: Option<f64>,
    pub sg_iou: Option<f64>,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_class: Vec<ClassReport>,
    pub miou: Option<f64>,
    pub msg_iou: Option<f64>,
    pub ignored_pixels: u64,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

pub fn report(
    counts: &ConfusionCounts,
    assoc: &AssociationMatrix,
    names: &[String],
    mean_over: MeanOver,
) -> Result<Report> {
    let k = counts.classes();
    if assoc.classes() != k {
        return Err(Error::Shape(format!(
            "association covers {} classes, counts cover {k}",
            assoc.classes()
        )));
    }
    let per_class: Vec<ClassReport> = (0..k)
        .map(|q| {
            let present = match mean_over {
                MeanOver::AnyPresent => counts.predicted(q) + counts.ground_truth(q) > 0,
                MeanOver::GtPresent => counts.ground_truth(q) > 0,
            };
            ClassReport {
                id: q,
                name: names
                    .get(q)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{q}")),
                iou: iou(counts, q),
                sg_iou: sg_iou(counts, assoc, q),
                present,
            }
        })
        .collect();
    let mean = |pick: fn(&ClassReport) -> Option<f64>| {
        let vals: Vec<f64> = per_class
            .iter()
            .filter(|c| c.present)
            .filter_map(pick)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(Report {
        miou: mean(|c| c.iou),
        msg_iou: mean(|c| c.sg_iou),
        per_class,
        ignored_pixels: counts.total_ignored,
    })
}
