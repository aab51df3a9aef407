// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic scenes: non-overlapping coloured rectangles and
//! ellipses on a textured background, with a pixel-exact label map.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::metrics::{AssociationMatrix, LabelMap};
use crate::rng::{keyed, Stream};

/// Class 0 of every scene; shapes use classes `1..K`.
pub const BACKGROUND: u16 = 0;

const DEMO_CLASSES: [&str; 12] = [
    "background",
    "chair",
    "armchair",
    "swivel chair",
    "table",
    "coffee table",
    "plant",
    "flower",
    "tree",
    "vehicle",
    "car",
    "truck",
];

const DEMO_RELATIONS: [(usize, usize); 7] =
    [(2, 1), (3, 1), (5, 4), (7, 6), (8, 6), (10, 9), (11, 9)];

/// Demo class names, extended with `class_{i}` past the built-in twelve.
pub fn demo_class_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| {
            DEMO_CLASSES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class_{i}"))
        })
        .collect()
}

/// Child-to-parent relations of the demo taxonomy restricted to `k` classes.
pub fn demo_hierarchy(k: usize) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (child, parent) in DEMO_RELATIONS {
        if child < k && parent < k {
            map.entry(child).or_default().push(parent);
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_count: usize,
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Class names; demo names when absent.
    pub class_names: Option<Vec<String>>,
    /// Class id (as string) to related class ids; demo taxonomy when absent.
    pub hierarchy: Option<BTreeMap<String, Vec<usize>>>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_count: 8,
            canvas: 112,
            num_classes: 12,
            shapes_min: 1,
            shapes_max: 4,
            class_names: None,
            hierarchy: None,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("scenes need at least 2 classes".into()));
        }
        if self.num_classes > usize::from(u16::MAX) {
            return Err(Error::Config(
                "too many classes for 16-bit label maps".into(),
            ));
        }
        if self.canvas == 0 || !self.canvas.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "canvas {} must be a positive multiple of patch size {patch_size}",
                self.canvas
            )));
        }
        if self.canvas < 8 {
            return Err(Error::Config("canvas must be at least 8 pixels".into()));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config(format!(
                "shapes_min {} exceeds shapes_max {}",
                self.shapes_min, self.shapes_max
            )));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::Config(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.num_classes
                )));
            }
        }
        self.association()?;
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| demo_class_names(self.num_classes))
    }

    pub fn association(&self) -> Result<AssociationMatrix> {
        match &self.hierarchy {
            None => {
                AssociationMatrix::from_map(self.num_classes, &demo_hierarchy(self.num_classes))
            }
            Some(raw) => {
                let text = serde_json::to_string(raw)?;
                AssociationMatrix::from_json(self.num_classes, &text)
                    .map_err(|e| Error::Config(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

fn class_color(seed: u64, class: u16) -> [f64; 3] {
    let mut rng = keyed(seed, Stream::Scene, &[u64::MAX, u64::from(class)]);
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

/// Scene `index` of the configured set; identical for identical `(seed, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> (ImageTensor, LabelMap) {
    let n = cfg.canvas;
    let mut rng = keyed(cfg.seed, Stream::Scene, &[index as u64]);

    let fy = rng.random_range(0.05..0.4);
    let fx = rng.random_range(0.05..0.4);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let base = rng.random_range(0.3..0.6);
    let mut pixels = Array3::<f64>::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let wave = 0.08 * (fy * y as f64 + fx * x as f64 + phase).sin();
            for c in 0..3 {
                let grain: f64 = rng.random_range(-0.03..0.03);
                pixels[[y, x, c]] = base + wave + grain + 0.05 * c as f64;
            }
        }
    }
    let mut labels = Array2::from_elem((n, n), BACKGROUND);

    let count = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    let (min_side, max_side) = ((n / 6).max(4), (n / 3).max(4));
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(1..cfg.num_classes) as u16;
        let kind = if rng.random_bool(0.5) {
            Shape::Rect
        } else {
            Shape::Ellipse
        };
        let tint = class_color(cfg.seed, class);
        let jitter: f64 = rng.random_range(-0.04..0.04);
        for _attempt in 0..64 {
            let h = rng.random_range(min_side..=max_side);
            let w = rng.random_range(min_side..=max_side);
            let top = rng.random_range(0..=n - h);
            let left = rng.random_range(0..=n - w);
            // one pixel of clearance between shapes
            let clear = placed
                .iter()
                .all(|&(t, l, b, r)| top + h < t || b + 1 < top || left + w < l || r + 1 < left);
            if !clear {
                continue;
            }
            let (cy, cx) = (
                top as f64 + (h as f64 - 1.0) / 2.0,
                left as f64 + (w as f64 - 1.0) / 2.0,
            );
            let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
            for y in top..top + h {
                for x in left..left + w {
                    let inside = match kind {
                        Shape::Rect => true,
                        Shape::Ellipse => {
                            let dy = (y as f64 - cy) / ry;
                            let dx = (x as f64 - cx) / rx;
                            dy * dy + dx * dx <= 1.0
                        }
                    };
                    if inside {
                        labels[[y, x]] = class;
                        let shade = 0.03 * ((x + y) % 4) as f64;
                        for c in 0..3 {
                            pixels[[y, x, c]] = tint[c] + jitter + shade;
                        }
                    }
                }
            }
            placed.push((top, left, top + h - 1, left + w - 1));
            break;
        }
    }
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let image = ImageTensor::new(pixels).expect("scene pixels are clamped to [0, 1]");
    (image, LabelMap::new(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_shape_gives_two_labels() {
        let cfg = SceneConfig {
            num_classes: 3,
            shapes_min: 1,
            shapes_max: 1,
            ..SceneConfig::default()
        };
        for index in 0..20 {
            let (_, map) = generate_scene(&cfg, index);
            assert_eq!(map.classes_present().len(), 2, "scene {index}");
        }
    }

    #[test]
    fn scenes_are_reproducible() {
        let cfg = SceneConfig::default();
        let (a_img, a_map) = generate_scene(&cfg, 3);
        let (b_img, b_map) = generate_scene(&cfg, 3);
        assert_eq!(a_img, b_img);
        assert_eq!(a_map, b_map);
        let (c_img, _) = generate_scene(&cfg, 4);
        assert_ne!(a_img, c_img);
    }

    #[test]
    fn labels_stay_in_range() {
        let cfg = SceneConfig {
            num_classes: 5,
            shapes_min: 1,
            shapes_max: 4,
            ..SceneConfig::default()
        };
        for index in 0..100 {
            let (_, map) = generate_scene(&cfg, index);
            assert!(map.labels.iter().all(|&l| (l as usize) < 5));
        }
    }

    #[test]
    fn demo_taxonomy_is_valid() {
        let cfg = SceneConfig::default();
        let assoc = cfg.association().unwrap();
        assert_eq!(assoc.related(2), vec![1]);
        assert_eq!(assoc.related(11), vec![9]);
        assert!(assoc.related(0).is_empty());
        let small = SceneConfig {
            num_classes: 4,
            ..SceneConfig::default()
        };
        assert_eq!(small.association().unwrap().to_map(), demo_hierarchy(4));
        assert_eq!(demo_class_names(14)[13], "class_13");
    }

    #[test]
    fn validation() {
        assert!(SceneConfig::default().validate(14).is_ok());
        let bad = SceneConfig {
            canvas: 100,
            ..SceneConfig::default()
        };
        assert!(bad.validate(14).is_err());
        let bad = SceneConfig {
            num_classes: 1,
            ..SceneConfig::default()
        };
        assert!(bad.validate(14).is_err());
        let bad = SceneConfig {
            hierarchy: Some(BTreeMap::from([("1".to_string(), vec![1])])),
            ..SceneConfig::default()
        };
        assert!(bad.validate(14).is_err());
    }
}
