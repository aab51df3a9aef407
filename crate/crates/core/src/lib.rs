// SPDX-License-Identifier: Apache-2.0

//! Open-vocabulary segmentation mechanisms on a seeded toy encoder.
//!
//! * [`encoder`]: ViT-style encoder with per-layer token interception.
//! * [`sim`]: low-frequency enhancement, cross-attention integration and
//!   `[CLS]` fusion of proposal embeddings.
//! * [`contextual_shift`]: masked sub-image classification with background
//!   tokens replaced by the clean image's per-layer `[CLS]`.
//! * [`pipeline`]: synthetic proposals, toy text bank, two-branch scoring and
//!   label assignment.
//! * [`metrics`]: confusion counts, IoU and hierarchy-aware SG-IoU.
//! * [`scene`], [`config`], [`harness`]: synthetic data and orchestration.

pub mod config;
pub mod contextual_shift;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod sim;

pub use error::{Error, Result};
