// SPDX-License-Identifier: Apache-2.0

//! Run orchestration: scene generation, the full pipeline over a scene set
//! and metrics over existing label maps.
//!
//! Images are processed in parallel on a dedicated pool, then merged in
//! index order, so outputs do not depend on the worker count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::contextual_shift::CsConfig;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::io::{read_label_png, write_atomic, write_image_png, write_label_png};
use crate::metrics::{
    accumulate_confusion, report, AssociationMatrix, ConfusionCounts, LabelMap, MeanOver, Report,
};
use crate::pipeline::{build_text_bank, run_pipeline, Models, ProposalRecord};
use crate::rng::{derive_seed, Stream};
use crate::scene::generate_scene;
use crate::sim::SemanticIntegration;

pub fn build_models(cfg: &RunConfig) -> Result<Models> {
    cfg.validate()?;
    let encoder = Encoder::new(cfg.encoder.clone())?;
    let sim = SemanticIntegration::new(
        cfg.sim.clone(),
        cfg.encoder.num_layers,
        cfg.encoder.embed_dim,
    )?;
    let hierarchy = cfg.scene.association()?;
    let bank = build_text_bank(
        &cfg.scene.names(),
        &hierarchy,
        cfg.encoder.embed_dim,
        cfg.scene.seed,
    )?;
    Ok(Models {
        encoder,
        sim,
        bank,
        hierarchy,
    })
}

/// Per-image outcome of a run.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub index: usize,
    pub prediction: LabelMap,
    pub counts: ConfusionCounts,
    pub proposals: Vec<ProposalRecord>,
}

#[derive(Serialize)]
struct AuditLine<'a> {
    image: usize,
    proposals: &'a [ProposalRecord],
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

fn process_image(cfg: &RunConfig, models: &Models, index: usize) -> Result<ImageResult> {
    let (image, gt) = generate_scene(&cfg.scene, index);
    let seed = derive_seed(cfg.scene.seed, Stream::Proposals, &[index as u64]);
    let cs = CsConfig {
        seed: derive_seed(cfg.cs.seed, Stream::Replacement, &[index as u64]),
        ..cfg.cs.clone()
    };
    let out = run_pipeline(
        models,
        &image,
        &gt,
        &cfg.proposals,
        &cs,
        &cfg.ensemble,
        seed,
    )?;
    let counts = accumulate_confusion(&out.labels, &gt, cfg.scene.num_classes)?;
    Ok(ImageResult {
        index,
        prediction: out.labels,
        counts,
        proposals: out.proposals,
    })
}

/// Run the pipeline over every configured scene; results in index order.
pub fn evaluate_scenes(
    cfg: &RunConfig,
    models: &Models,
    workers: usize,
) -> Result<Vec<ImageResult>> {
    let indices: Vec<usize> = (0..cfg.scene.image_count).collect();
    pool(workers)?.install(|| {
        indices
            .par_iter()
            .map(|&i| process_image(cfg, models, i))
            .collect::<Result<Vec<_>>>()
    })
}

pub fn merge_counts(classes: usize, results: &[ImageResult]) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::new(classes);
    for r in results {
        total.merge(&r.counts)?;
    }
    Ok(total)
}

fn image_name(index: usize) -> String {
    format!("{index:04}.png")
}

/// Full pipeline plus evaluation. Writes `report.json`, `audit.jsonl` and
/// `pred/NNNN.png` under `out`.
pub fn run_eval(cfg: &RunConfig, out: &Path, workers: Option<usize>) -> Result<Report> {
    let models = build_models(cfg)?;
    let results = evaluate_scenes(cfg, &models, workers.unwrap_or(cfg.workers))?;
    let counts = merge_counts(cfg.scene.num_classes, &results)?;
    let report = report(
        &counts,
        &models.hierarchy,
        &cfg.scene.names(),
        cfg.metrics.mean_over,
    )?;

    let mut audit = String::new();
    for r in &results {
        write_label_png(&out.join("pred").join(image_name(r.index)), &r.prediction)?;
        let line = AuditLine {
            image: r.index,
            proposals: &r.proposals,
        };
        audit.push_str(&serde_json::to_string(&line)?);
        audit.push('\n');
    }
    write_atomic(&out.join("audit.jsonl"), audit.as_bytes())?;
    write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
    Ok(report)
}

/// Write `images/NNNN.png` (8-bit RGB), `labels/NNNN.png` (16-bit) and the
/// scene taxonomy as `association.json` and `classes.json`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<usize> {
    cfg.validate()?;
    for index in 0..cfg.scene.image_count {
        let (image, labels) = generate_scene(&cfg.scene, index);
        write_image_png(&out.join("images").join(image_name(index)), &image)?;
        write_label_png(&out.join("labels").join(image_name(index)), &labels)?;
    }
    let assoc = cfg.scene.association()?;
    let map: std::collections::BTreeMap<String, Vec<usize>> = assoc
        .to_map()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    write_atomic(
        &out.join("association.json"),
        serde_json::to_string_pretty(&map)?.as_bytes(),
    )?;
    write_atomic(
        &out.join("classes.json"),
        serde_json::to_string_pretty(&cfg.scene.names())?.as_bytes(),
    )?;
    Ok(cfg.scene.image_count)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Metrics over matching `*.png` label maps in two directories.
pub fn eval_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    assoc: &AssociationMatrix,
    names: &[String],
    mean_over: MeanOver,
    out: &Path,
) -> Result<Report> {
    let classes = assoc.classes();
    let preds = png_files(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::Config(format!(
            "no PNG label maps in {}",
            pred_dir.display()
        )));
    }
    let mut counts = ConfusionCounts::new(classes);
    for pred_path in preds {
        let name = pred_path.file_name().expect("listed file has a name");
        let gt_path = gt_dir.join(name);
        if !gt_path.exists() {
            return Err(Error::Config(format!(
                "no ground truth {} for prediction {}",
                gt_path.display(),
                pred_path.display()
            )));
        }
        let pred = read_label_png(&pred_path)?;
        let gt = read_label_png(&gt_path)?;
        counts.merge(&accumulate_confusion(&pred, &gt, classes)?)?;
    }
    let report = report(&counts, assoc, names, mean_over)?;
    write_atomic(out, report.to_json().as_bytes())?;
    Ok(report)
}
