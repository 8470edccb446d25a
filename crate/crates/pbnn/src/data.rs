//! Dataset ingestion and batching: FER2013 CSV parsing with the three
//! canonical splits, a deterministic synthetic 7-class stand-in, and
//! seeded minibatch iteration.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const IMAGE_SIDE: usize = 48;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 7;

/// FER2013 label convention.
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Training,
    PublicTest,
    PrivateTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Training, Split::PublicTest, Split::PrivateTest];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Training => "Training",
            Split::PublicTest => "PublicTest",
            Split::PrivateTest => "PrivateTest",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Training" => Ok(Split::Training),
            "PublicTest" => Ok(Split::PublicTest),
            "PrivateTest" => Ok(Split::PrivateTest),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// One 48×48 grayscale image with pixels already scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Normalization {
    /// Keep the raw [0, 1] pixel range.
    UnitRange,
    /// (x − mean) / std, with the statistics taken from the Training split.
    Standardized { mean: f32, std: f32 },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<LabeledImage>,
    normalization: Normalization,
    augment_hflip: bool,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        Dataset {
            images,
            normalization: Normalization::UnitRange,
            augment_hflip: false,
        }
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn class_names(&self) -> &'static [&'static str; NUM_CLASSES] {
        &CLASS_NAMES
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.images.iter().filter(|im| im.split == split).count()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, im)| im.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Switch to standardized normalization; statistics come from the
    /// Training split only.
    pub fn with_standardization(mut self) -> Result<Self> {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for im in self.images.iter().filter(|im| im.split == Split::Training) {
            for &p in &im.pixels {
                sum += p as f64;
                sum_sq += (p as f64) * (p as f64);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptySplit(Split::Training.to_string()));
        }
        let mean = sum / count as f64;
        let var = (sum_sq / count as f64 - mean * mean).max(0.0);
        let std = var.sqrt().max(1e-6);
        self.normalization = Normalization::Standardized {
            mean: mean as f32,
            std: std as f32,
        };
        Ok(self)
    }

    /// Enable deterministic horizontal-flip augmentation on Training batches.
    pub fn with_hflip(mut self, enabled: bool) -> Self {
        self.augment_hflip = enabled;
        self
    }
}

fn parse_row(row: usize, emotion: &str, pixels: &str, usage: &str) -> Result<LabeledImage> {
    let label: u8 = emotion.trim().parse().map_err(|_| Error::Parse {
        row,
        detail: format!("emotion {emotion:?} is not an integer"),
    })?;
    if label as usize >= NUM_CLASSES {
        return Err(Error::Parse {
            row,
            detail: format!("label {label} out of range 0..{NUM_CLASSES}"),
        });
    }
    let split: Split = usage.trim().parse().map_err(|_| Error::Parse {
        row,
        detail: format!("unknown Usage {usage:?}"),
    })?;
    let mut values = Vec::with_capacity(IMAGE_PIXELS);
    for tok in pixels.split_ascii_whitespace() {
        let v: u16 = tok.parse().map_err(|_| Error::Parse {
            row,
            detail: format!("pixel {tok:?} is not an integer"),
        })?;
        if v > 255 {
            return Err(Error::Parse {
                row,
                detail: format!("pixel value {v} out of range 0..=255"),
            });
        }
        values.push(v as f32 / 255.0);
    }
    if values.len() != IMAGE_PIXELS {
        return Err(Error::Parse {
            row,
            detail: format!("expected {IMAGE_PIXELS} pixels, got {}", values.len()),
        });
    }
    Ok(LabeledImage {
        pixels: values,
        label,
        split,
    })
}

/// Parse the public FER2013 CSV distribution: header `emotion,pixels,Usage`,
/// pixels as 2304 space-separated integers 0–255. Rows are streamed; errors
/// carry the 1-based data-row number (the header is row 0).
pub fn parse_fer2013(source: impl Read) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);

    {
        let headers = reader.headers().map_err(|e| Error::Parse {
            row: 0,
            detail: format!("unreadable header: {e}"),
        })?;
        let expected = ["emotion", "pixels", "Usage"];
        let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if got != expected {
            return Err(Error::Parse {
                row: 0,
                detail: format!("header {got:?}, expected {expected:?}"),
            });
        }
    }

    let mut images = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            detail: format!("malformed CSV record: {e}"),
        })?;
        if record.len() != 3 {
            return Err(Error::Parse {
                row,
                detail: format!("expected 3 columns, got {}", record.len()),
            });
        }
        images.push(parse_row(row, &record[0], &record[1], &record[2])?);
    }
    Ok(Dataset::new(images))
}

/// Write a dataset in the FER2013 CSV format (pixels re-quantized to 0–255).
pub fn write_fer2013(dataset: &Dataset, mut sink: impl Write) -> Result<()> {
    writeln!(sink, "emotion,pixels,Usage")?;
    let mut buf = String::with_capacity(IMAGE_PIXELS * 4);
    for im in &dataset.images {
        buf.clear();
        for (i, &p) in im.pixels.iter().enumerate() {
            if i > 0 {
                buf.push(' ');
            }
            let v = (p * 255.0).round().clamp(0.0, 255.0) as u16;
            buf.push_str(&v.to_string());
        }
        writeln!(sink, "{},{},{}", im.label, buf, im.split)?;
    }
    Ok(())
}

/// Class templates: distinct oriented bars/blobs on a dim background.
fn class_template(label: usize) -> Vec<f32> {
    let lo = 0.1f32;
    let hi = 0.9f32;
    let mut img = vec![lo; IMAGE_PIXELS];
    let side = IMAGE_SIDE as isize;
    for r in 0..side {
        for c in 0..side {
            let on = match label {
                0 => (8..16).contains(&r),                       // top bar
                1 => (8..16).contains(&c),                       // left bar
                2 => (r - c).abs() < 4,                          // main diagonal
                3 => {
                    let dr = r - side / 2;
                    let dc = c - side / 2;
                    dr * dr + dc * dc < 100                      // center blob
                }
                4 => (32..40).contains(&r),                      // bottom bar
                5 => (32..40).contains(&c),                      // right bar
                _ => (r + c - (side - 1)).abs() < 4,             // anti-diagonal
            };
            if on {
                img[(r * side + c) as usize] = hi;
            }
        }
    }
    img
}

/// Deterministic synthetic 7-class dataset: per-class templates plus
/// Gaussian pixel noise clipped to [0, 1], split 80/10/10 per class into
/// Training/PublicTest/PrivateTest.
pub fn make_synthetic(n_per_class: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f32>> = (0..NUM_CLASSES).map(class_template).collect();
    let n_train = (n_per_class * 8) / 10;
    let n_public = n_per_class / 10;
    let mut images = Vec::with_capacity(NUM_CLASSES * n_per_class);
    for label in 0..NUM_CLASSES {
        for i in 0..n_per_class {
            let split = if i < n_train {
                Split::Training
            } else if i < n_train + n_public {
                Split::PublicTest
            } else {
                Split::PrivateTest
            };
            let pixels: Vec<f32> = templates[label]
                .iter()
                .map(|&t| {
                    let eps: f64 = rng.sample(StandardNormal);
                    (t as f64 + noise * eps).clamp(0.0, 1.0) as f32
                })
                .collect();
            images.push(LabeledImage {
                pixels,
                label: label as u8,
                split,
            });
        }
    }
    Dataset::new(images)
}

/// The seven class templates, for nearest-template baselines.
pub fn synthetic_templates() -> Vec<Vec<f32>> {
    (0..NUM_CLASSES).map(class_template).collect()
}

fn normalize(p: f32, norm: Normalization) -> f32 {
    match norm {
        Normalization::UnitRange => p,
        Normalization::Standardized { mean, std } => (p - mean) / std,
    }
}

/// Materialize minibatches for one split. Every split is shuffled with the
/// seeded Fisher–Yates shuffle; the final partial batch is dropped on
/// Training (BN needs ≥ 2 samples) and kept on the test splits. Horizontal
/// flips, when enabled, apply to Training only and draw from the same
/// seeded stream.
pub fn batches(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<(Tensor<f32>, Vec<usize>)>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if split == Split::Training && batch_size < 2 {
        return Err(Error::InvalidConfig(
            "Training batches need batch_size >= 2 for batch normalization".into(),
        ));
    }
    let mut indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    indices.shuffle(&mut rng);
    let flips: Vec<bool> = if dataset.augment_hflip && split == Split::Training {
        indices.iter().map(|_| rng.gen::<bool>()).collect()
    } else {
        vec![false; indices.len()]
    };

    let norm = dataset.normalization;
    let mut out = Vec::new();
    let mut start = 0usize;
    while start < indices.len() {
        let end = (start + batch_size).min(indices.len());
        let n = end - start;
        if n < batch_size && split == Split::Training {
            break;
        }
        let mut data = Vec::with_capacity(n * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(n);
        for (&idx, &flip) in indices[start..end].iter().zip(&flips[start..end]) {
            let im = &dataset.images[idx];
            if flip {
                for r in 0..IMAGE_SIDE {
                    for c in (0..IMAGE_SIDE).rev() {
                        data.push(normalize(im.pixels[r * IMAGE_SIDE + c], norm));
                    }
                }
            } else {
                data.extend(im.pixels.iter().map(|&p| normalize(p, norm)));
            }
            labels.push(im.label as usize);
        }
        let tensor = Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
        out.push((tensor, labels));
        start = end;
    }
    Ok(out)
}
