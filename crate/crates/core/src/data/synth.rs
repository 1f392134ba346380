use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const MIN_SYNTH_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// One filled rectangle (label 0) or ellipse (label 1) per blank canvas.
    #[default]
    Shapes,
    /// Per-pixel noise around a dark (label 0) or bright (label 1) level.
    TwoGaussians,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(SynthKind::Shapes),
            "two-gaussians" => Ok(SynthKind::TwoGaussians),
            _ => Err(Error::Config(format!("unknown synthetic dataset `{s}`"))),
        }
    }
}

/// Single-channel `size×size` images. Generation uses integer arithmetic only,
/// so the bytes are identical on every platform for a given seed.
pub fn synth_dataset(kind: SynthKind, count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < MIN_SYNTH_SIZE {
        return invalid(format!("synthetic images need size >= {MIN_SYNTH_SIZE}, got {size}"));
    }
    if count == 0 {
        return invalid("synthetic dataset count must be positive");
    }
    let mut rng = rng_for(seed, "synth");
    let mut pixels: Vec<u8> = Vec::with_capacity(count * size * size);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(0..2u32) as u8;
        let canvas = match kind {
            SynthKind::Shapes => shape_canvas(&mut rng, size as i64, label),
            SynthKind::TwoGaussians => noise_canvas(&mut rng, size, label),
        };
        pixels.extend(canvas);
        labels.push(label);
    }
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(Tensor::new(vec![count, size, size, 1], data)?, Some(labels), Split::Train)
}

fn shape_canvas(rng: &mut impl Rng, size: i64, label: u8) -> Vec<u8> {
    let mut canvas = vec![0u8; (size * size) as usize];
    let min_extent = (size / 4).max(2) as u32;
    let w = i64::from(rng.random_range(min_extent..=size as u32 - 2));
    let h = i64::from(rng.random_range(min_extent..=size as u32 - 2));
    let left = i64::from(rng.random_range(0..=(size - w) as u32));
    let top = i64::from(rng.random_range(0..=(size - h) as u32));
    let ink = rng.random_range(128..=255u32) as u8;
    for y in top..top + h {
        for x in left..left + w {
            let inside = if label == 0 {
                true
            } else {
                // Doubled coordinates keep the centre on the integer grid.
                let dx = 2 * (x - left) + 1 - w;
                let dy = 2 * (y - top) + 1 - h;
                dx * dx * h * h + dy * dy * w * w <= w * w * h * h
            };
            if inside {
                canvas[(y * size + x) as usize] = ink;
            }
        }
    }
    canvas
}

fn noise_canvas(rng: &mut impl Rng, size: usize, label: u8) -> Vec<u8> {
    let level: i32 = if label == 0 { 72 } else { 184 };
    (0..size * size)
        .map(|_| {
            let spread: i32 = (0..4).map(|_| rng.random_range(-24..=24i32)).sum();
            (level + spread).clamp(0, 255) as u8
        })
        .collect()
}
