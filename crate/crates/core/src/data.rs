//! Synthetic labelled image sets: one class-coloured object and one
//! distractor on a smoothly varying nuisance background, with per-pixel
//! segment masks.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::error::{config_err, Result};
use crate::harness::config::DataConfig;
use crate::rng::{streams, substream};

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub label: usize,
    /// Segment ids per pixel: 0 background, 1 object, 2 distractor.
    pub mask: Array2<u32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Shape {
    Rect,
    Ellipse,
}

/// Evenly spaced hues at full saturation.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let h = class as f64 / num_classes as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn paint<R: Rng + ?Sized>(
    rng: &mut R,
    pixels: &mut Array3<f64>,
    mask: &mut Array2<u32>,
    segment: u32,
    color: [f64; 3],
    min_frac: f64,
    max_frac: f64,
) {
    let (_, h, w) = pixels.dim();
    let sh = ((rng.random_range(min_frac..max_frac)) * h as f64).round().max(2.0) as usize;
    let sw = ((rng.random_range(min_frac..max_frac)) * w as f64).round().max(2.0) as usize;
    let top = rng.random_range(0..=h - sh);
    let left = rng.random_range(0..=w - sw);
    let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
    let (cy, cx) = (top as f64 + sh as f64 / 2.0, left as f64 + sw as f64 / 2.0);
    for r in top..top + sh {
        for c in left..left + sw {
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse => {
                    let dy = (r as f64 + 0.5 - cy) / (sh as f64 / 2.0);
                    let dx = (c as f64 + 0.5 - cx) / (sw as f64 / 2.0);
                    dy * dy + dx * dx <= 1.0
                }
            };
            if inside {
                for k in 0..3 {
                    pixels[[k, r, c]] = color[k];
                }
                mask[[r, c]] = segment;
            }
        }
    }
}

/// One image of class `label`.
pub fn render<R: Rng + ?Sized>(rng: &mut R, size: usize, label: usize, num_classes: usize) -> (ImageTensor, Array2<u32>) {
    let mut pixels = Array3::zeros((3, size, size));
    let mut mask = Array2::zeros((size, size));
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.5));
    let grad: [f64; 2] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    for r in 0..size {
        for c in 0..size {
            let ramp = grad[0] * r as f64 / size as f64 + grad[1] * c as f64 / size as f64;
            for k in 0..3 {
                pixels[[k, r, c]] = (base[k] + ramp + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    let gray = rng.random_range(0.55..0.95);
    paint(rng, &mut pixels, &mut mask, 2, [gray; 3], 0.15, 0.3);
    let mut color = class_color(label, num_classes);
    for v in color.iter_mut() {
        *v = (*v * rng.random_range(0.8..1.0)).clamp(0.0, 1.0);
    }
    paint(rng, &mut pixels, &mut mask, 1, color, 0.35, 0.6);
    (ImageTensor::new(pixels).expect("pixels are clamped to [0, 1]"), mask)
}

/// Train and held-out sets drawn from the data substream of `seed`. Labels
/// cycle through the classes so every class is balanced.
pub fn synthetic_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.image_size < 8 {
        return Err(config_err("synthetic data needs at least one class and 8-pixel images"));
    }
    let make = |split: &str, count: usize| {
        let mut rng = substream(seed, &format!("{}.{split}", streams::DATA));
        (0..count)
            .map(|i| {
                let label = i % cfg.num_classes;
                let (image, mask) = render(&mut rng, cfg.image_size, label, cfg.num_classes);
                Sample {
                    id: format!("{split}-{i:05}"),
                    image,
                    label,
                    mask,
                }
            })
            .collect::<Vec<_>>()
    };
    Ok(Dataset {
        train: make("train", cfg.train_images),
        heldout: make("heldout", cfg.heldout_images),
        num_classes: cfg.num_classes,
    })
}
