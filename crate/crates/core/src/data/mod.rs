//! Synthetic shapes detection data.
//!
//! Every image is a 64×64 RGB canvas with a noisy tinted background and one
//! to three filled shapes; the shape decides the class. Generation uses the
//! ChaCha8 stream cipher RNG (`rand_chacha::ChaCha8Rng`) seeded per image
//! with `seed ^ image_index`, so each image can be produced independently
//! and in any order.

mod io;
mod scenario;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{export_dataset, import_dataset};
pub use scenario::{batch_iter, split_tasks, task_for_range, Batch, ClassRange, Sample, ScenarioSpec, TaskDataset, TaskSequence};

use crate::detector::box_iou;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CANVAS: usize = 64;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CANVAS * CANVAS * CHANNELS;
pub const MAX_OBJECTS: usize = 3;
pub const MAX_PAIR_IOU: f64 = 0.3;

const MIN_SIDE: usize = 14;
const MAX_SIDE: usize = 28;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Diamond,
    Plus,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Bar,
        Shape::Diamond,
        Shape::Plus,
    ];

    /// Shape for a 1-based class id.
    pub fn of_class(class_id: usize) -> Shape {
        Self::ALL[class_id - 1]
    }

    /// Whether a point in box-normalized coordinates `(u, v) ∈ [0,1]²` is filled.
    fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Shape::Circle => r2 <= 0.25,
            Shape::Square | Shape::Bar => true,
            Shape::Triangle => du.abs() <= 0.5 * v,
            Shape::Cross => (u - v).abs() <= 0.18 || (u + v - 1.0).abs() <= 0.18,
            Shape::Ring => (0.09..=0.25).contains(&r2),
            Shape::Diamond => du.abs() + dv.abs() <= 0.5,
            Shape::Plus => du.abs() <= 0.15 || dv.abs() <= 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<Annotation>,
    /// Channel-major `[3, 64, 64]` bytes.
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub seed: u64,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for s in &self.scenes {
            for o in &s.objects {
                h[o.class_id - 1] += 1;
            }
        }
        h
    }
}

/// Converts byte images to a `[B, 3, 64, 64]` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&[u8]]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_BYTES);
    for img in images {
        if img.len() != IMAGE_BYTES {
            return Err(Error::shape(format!("image has {} bytes, expected {IMAGE_BYTES}", img.len())));
        }
        data.extend(img.iter().map(|&b| f64::from(b) / 255.0));
    }
    Tensor::new(&[images.len(), CHANNELS, CANVAS, CANVAS], data)
}

pub fn generate_dataset(num_images: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || num_classes > Shape::ALL.len() {
        return Err(Error::invalid(format!(
            "num_classes must be in 1..={}, got {num_classes}",
            Shape::ALL.len()
        )));
    }
    let scenes = (0..num_images).map(|i| render_scene(seed ^ i as u64, num_classes)).collect();
    Ok(Dataset { num_classes, seed, scenes })
}

/// Renders one scene from its own sub-seed.
pub fn render_scene(sub_seed: u64, num_classes: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    let target = rng.random_range(1..=MAX_OBJECTS);
    let mut objects: Vec<Annotation> = Vec::with_capacity(target);
    let mut attempts = 0;
    while objects.len() < target && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let class_id = rng.random_range(1..=num_classes);
        let side = rng.random_range(MIN_SIDE..=MAX_SIDE);
        let (w, h) = if Shape::of_class(class_id) == Shape::Bar {
            if rng.random_bool(0.5) {
                (side, (side / 3).max(9))
            } else {
                ((side / 3).max(9), side)
            }
        } else {
            (side, side)
        };
        let x0 = rng.random_range(0..=CANVAS - w);
        let y0 = rng.random_range(0..=CANVAS - h);
        let bbox = [x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64];
        if objects.iter().all(|o| box_iou(&o.bbox, &bbox) <= MAX_PAIR_IOU) {
            objects.push(Annotation { class_id, bbox });
        }
    }

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(30.0..110.0));
    let mut pixels = vec![0u8; IMAGE_BYTES];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let noise = rng.random_range(-12.0..12.0);
            for c in 0..CHANNELS {
                pixels[(c * CANVAS + y) * CANVAS + x] = (base[c] + noise).clamp(0.0, 255.0) as u8;
            }
        }
    }
    for o in &objects {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(150.0..255.0));
        let shape = Shape::of_class(o.class_id);
        let [x1, y1, x2, y2] = o.bbox.map(|v| v as usize);
        for y in y1..y2 {
            for x in x1..x2 {
                let u = (x - x1) as f64 / (x2 - x1) as f64 + 0.5 / (x2 - x1) as f64;
                let v = (y - y1) as f64 / (y2 - y1) as f64 + 0.5 / (y2 - y1) as f64;
                if shape.covers(u, v) {
                    for c in 0..CHANNELS {
                        pixels[(c * CANVAS + y) * CANVAS + x] = color[c] as u8;
                    }
                }
            }
        }
    }
    Scene { objects, pixels }
}
