// SPDX-License-Identifier: Apache-2.0

mod common;

use ndarray::{s, Array2};
use ovseg_core::config::RunConfig;
use ovseg_core::contextual_shift::CsConfig;
use ovseg_core::harness::{build_models, evaluate_scenes, merge_counts};
use ovseg_core::metrics::{
    accumulate_confusion, report, AssociationMatrix, LabelMap, MeanOver, IGNORE,
};
use ovseg_core::pipeline::{run_pipeline, PipelineOutput, ProposalNoise};
use ovseg_core::scene::generate_scene;

fn lossless() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scene.image_count = 3;
    cfg.proposals = ProposalNoise::none();
    cfg.sim.enabled = false;
    cfg.sim.gamma = 0.0;
    cfg.ensemble.lambda = 0.0;
    cfg
}

fn run(cfg: &RunConfig, index: usize) -> PipelineOutput {
    let models = build_models(cfg).unwrap();
    let (image, gt) = generate_scene(&cfg.scene, index);
    run_pipeline(
        &models,
        &image,
        &gt,
        &cfg.proposals,
        &cfg.cs,
        &cfg.ensemble,
        17,
    )
    .unwrap()
}

#[test]
fn lossless_path_reproduces_ground_truth() {
    let cfg = lossless();
    for index in 0..3 {
        let (_, gt) = generate_scene(&cfg.scene, index);
        let out = run(&cfg, index);
        assert_eq!(out.labels, gt);
    }
}

#[test]
fn disabling_shift_changes_only_the_encoder_branch() {
    let cfg = RunConfig::default();
    let shifted = run(&cfg, 1);
    let mut plain_cfg = cfg.clone();
    plain_cfg.cs.idx.clear();
    let plain = run(&plain_cfg, 1);
    assert_eq!(shifted.proposals.len(), plain.proposals.len());
    let mut any_diff = false;
    for (a, b) in shifted.proposals.iter().zip(&plain.proposals) {
        assert_eq!(a.model_probs, b.model_probs);
        any_diff |= a.clip_probs != b.clip_probs;
    }
    assert!(any_diff);
}

#[test]
fn zero_lambda_makes_encoder_branch_irrelevant() {
    let mut a = RunConfig::default();
    a.ensemble.lambda = 0.0;
    let mut b = a.clone();
    b.cs = CsConfig {
        idx: vec![2, 4, 6],
        alpha: 0.9,
        seed: 99,
        ..CsConfig::default()
    };
    for index in 0..3 {
        assert_eq!(run(&a, index).labels, run(&b, index).labels);
    }
}

#[test]
fn pipeline_is_deterministic() {
    let cfg = RunConfig::default();
    let a = run(&cfg, 2);
    let b = run(&cfg, 2);
    assert_eq!(a, b);
}

#[test]
fn labels_stay_in_range_and_ignore_marks_uncovered_pixels() {
    let mut cfg = RunConfig::default();
    cfg.proposals.mask_flip_rate = 0.3;
    let models = build_models(&cfg).unwrap();
    for index in 0..4 {
        let (image, gt) = generate_scene(&cfg.scene, index);
        let out = run_pipeline(
            &models,
            &image,
            &gt,
            &cfg.proposals,
            &cfg.cs,
            &cfg.ensemble,
            index as u64,
        )
        .unwrap();
        out.labels.validate(cfg.scene.num_classes).unwrap();
        assert!(out
            .labels
            .labels
            .iter()
            .all(|&l| l == IGNORE || (l as usize) < 12));
    }
}

#[test]
fn parent_swaps_are_credited_by_sg_iou() {
    let mut cfg = lossless();
    cfg.scene.image_count = 8;
    cfg.scene.shapes_min = 3;
    cfg.proposals.parent_swap_rate = 1.0;
    let models = build_models(&cfg).unwrap();
    let results = evaluate_scenes(&cfg, &models, 2).unwrap();
    let swapped = results
        .iter()
        .flat_map(|r| &r.proposals)
        .filter(|p| p.embedded_as != p.true_class)
        .count();
    assert!(swapped > 0);
    let counts = merge_counts(12, &results).unwrap();
    let rep = report(
        &counts,
        &models.hierarchy,
        &cfg.scene.names(),
        MeanOver::AnyPresent,
    )
    .unwrap();
    let plain = report(
        &counts,
        &AssociationMatrix::empty(12),
        &[],
        MeanOver::AnyPresent,
    )
    .unwrap();
    assert!(rep.msg_iou.unwrap() > rep.miou.unwrap());
    assert_eq!(plain.msg_iou, plain.miou);
}

#[test]
fn report_over_merged_counts_equals_report_over_concatenated_pixels() {
    let cfg = RunConfig::default();
    let (_, a) = generate_scene(&cfg.scene, 0);
    let (_, b) = generate_scene(&cfg.scene, 1);
    let (_, pa) = generate_scene(&cfg.scene, 2);
    let (_, pb) = generate_scene(&cfg.scene, 3);
    let assoc = cfg.scene.association().unwrap();
    let mut merged = accumulate_confusion(&pa, &a, 12).unwrap();
    merged
        .merge(&accumulate_confusion(&pb, &b, 12).unwrap())
        .unwrap();

    let stack = |x: &LabelMap, y: &LabelMap| {
        let (h, w) = x.dim();
        let mut out = Array2::<u16>::zeros((2 * h, w));
        out.slice_mut(s![..h, ..]).assign(&x.labels);
        out.slice_mut(s![h.., ..]).assign(&y.labels);
        LabelMap::new(out)
    };
    let joint = accumulate_confusion(&stack(&pa, &pb), &stack(&a, &b), 12).unwrap();
    assert_eq!(merged, joint);
    assert_eq!(
        report(&merged, &assoc, &[], MeanOver::AnyPresent).unwrap(),
        report(&joint, &assoc, &[], MeanOver::AnyPresent).unwrap()
    );
}
