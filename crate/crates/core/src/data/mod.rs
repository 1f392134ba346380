//! Dataset loaders and on-disk formats.

mod checkpoint;
mod grid;
mod matrix;
mod synth;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, NamedBlock, TrainState, CHECKPOINT_VERSION};
pub use grid::{export_grid, grid_extent, read_image, GRID_MARGIN};
pub use matrix::{load_matrix, parse_matrix, save_matrix, MATRIX_VERSION};
pub use synth::{synth_dataset, SynthKind, MIN_SYNTH_SIZE};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::ImageShape;
use crate::tensor::Tensor;
use crate::vae::slice_rows;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Images `[m, h, w, c]` in `[0, 1]`, optionally labelled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<u8>>, split: Split) -> Result<Self> {
        let (m, ..) = images.nhwc()?;
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("dataset values must lie in [0, 1]");
        }
        if let Some(l) = &labels {
            if l.len() != m {
                return invalid(format!("{m} images but {} labels", l.len()));
            }
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> ImageShape {
        let s = self.images.shape();
        ImageShape::new(s[1], s[2], s[3])
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(Self {
            images: slice_rows(&self.images, 0, n)?,
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            split: self.split,
        })
    }

    /// Items whose label equals `label`.
    pub fn with_label(&self, label: u8) -> Result<Self> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))?;
        let per = self.images.len() / self.len();
        let keep: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == label).collect();
        if keep.is_empty() {
            return invalid(format!("no items with label {label}"));
        }
        let mut data = Vec::with_capacity(keep.len() * per);
        for &i in &keep {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = keep.len();
        Ok(Self {
            images: Tensor::new(shape, data)?,
            labels: Some(vec![label; keep.len()]),
            split: self.split,
        })
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

fn scale_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// IDX image file (magic `0x00000803`), scaled to `[0, 1]`, one channel.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path.as_ref())?;
    parse_idx_images(&bytes)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Dataset> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("IDX image magic {IDX_IMAGES:#010x} expected, found {magic:#010x}")));
    }
    let (n, h, w) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let need = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format(format!("IDX payload truncated: {} of {need} bytes", payload.len())));
    }
    Dataset::new(Tensor::new(vec![n, h, w, 1], scale_bytes(&payload[..need]))?, None, Split::Train)
}

/// IDX label file (magic `0x00000801`).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let bytes = fs::read(path.as_ref())?;
    parse_idx_labels(&bytes)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("IDX label magic {IDX_LABELS:#010x} expected, found {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    bytes
        .get(8..8 + n)
        .map(<[u8]>::to_vec)
        .ok_or_else(|| Error::Format(format!("IDX labels truncated: expected {n}")))
}

/// Serializes `[n, h, w, 1]` images in `[0, 1]` as an IDX image file.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let (n, h, w, c) = images.nhwc()?;
    if c != 1 {
        return invalid("IDX images are single-channel");
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// MNIST-style image and label pair.
pub fn load_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let mut d = load_idx(images)?;
    let l = load_idx_labels(labels)?;
    d = Dataset::new(d.images, Some(l), Split::Train)?;
    Ok(d)
}

/// One or more CIFAR-10 binary batches: 3073-byte records, label then
/// channel-planar 32×32 pixels.
pub fn load_cifar_batches<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = fs::read(p.as_ref())?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                p.as_ref().display(),
                bytes.len()
            )));
        }
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        for rec in bytes.chunks(CIFAR_RECORD) {
            labels.push(rec[0]);
            let px = &rec[1..];
            for i in 0..plane {
                for ch in 0..3 {
                    images.push(f64::from(px[ch * plane + i]) / 255.0);
                }
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return invalid("no CIFAR batches given");
    }
    Dataset::new(Tensor::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], images)?, Some(labels), Split::Train)
}

/// Every PNG/PPM/PGM file in `dir` (sorted by name); all must share one size.
pub fn load_image_dir(dir: impl AsRef<Path>, channels: usize) -> Result<Dataset> {
    if channels != 1 && channels != 3 {
        return invalid("image directories load as 1 or 3 channels");
    }
    let mut paths: Vec<_> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm" | "pnm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return invalid(format!("no images in {}", dir.as_ref().display()));
    }
    let mut data = Vec::new();
    let mut size = None;
    for p in &paths {
        let img = image::open(p)?;
        let dims = (img.height() as usize, img.width() as usize);
        if *size.get_or_insert(dims) != dims {
            return invalid(format!("{} is {:?}, expected {:?}", p.display(), dims, size.unwrap_or(dims)));
        }
        if channels == 1 {
            data.extend(scale_bytes(img.to_luma8().as_raw()));
        } else {
            data.extend(scale_bytes(img.to_rgb8().as_raw()));
        }
    }
    let (h, w) = size.unwrap_or((0, 0));
    Dataset::new(Tensor::new(vec![paths.len(), h, w, channels], data)?, None, Split::Train)
}

/// Mirrors every image left to right.
pub fn flip_horizontal(images: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = images.nhwc()?;
    let src = images.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let from = ((b * h + y) * w + x) * c;
                let to = ((b * h + y) * w + (w - 1 - x)) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

/// The dataset followed by its mirrored copy.
pub fn augment_with_flips(d: &Dataset) -> Result<Dataset> {
    let flipped = flip_horizontal(&d.images)?;
    Dataset::new(
        Tensor::stack(&[d.images.clone(), flipped])?,
        d.labels.as_ref().map(|l| l.iter().chain(l).copied().collect()),
        d.split,
    )
}
