//! Labeled image sets: a seeded synthetic subset plus STL-10 and CIFAR-10 binary readers.
//!
//! Expected layouts under `data_dir`:
//!
//! ```text
//! stl10_binary/{train_X.bin, train_y.bin, test_X.bin, test_y.bin}
//! cifar-10-batches-bin/{data_batch_1.bin .. data_batch_5.bin, test_batch.bin}
//! ```
//!
//! Either directory may carry a `SHA256SUMS` file (`<hex>  <file>` per line);
//! when present every listed file is verified before use.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{DatasetName, ExperimentConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// 8-bit RGB images in CHW order with labels.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pixels: Vec<u8>,
    labels: Vec<u32>,
    image_size: usize,
    num_classes: usize,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<u32>,
        image_size: usize,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = 3 * image_size * image_size;
        if pixels.len() != labels.len() * per {
            return Err(Error::LengthMismatch {
                left: pixels.len(),
                right: labels.len() * per,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&z| z as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                num_classes,
            });
        }
        Ok(Self {
            pixels,
            labels,
            image_size,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &z in &self.labels {
            counts[z as usize] += 1;
        }
        counts
    }

    /// Images `(k, 3, H, W)` scaled to `[0, 1]` and their labels.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Vec<u32>)> {
        let per = 3 * self.image_size * self.image_size;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&p| p as f32 / 255.0));
            labels.push(self.labels[i]);
        }
        let s = self.image_size;
        let t = Tensor::from_vec(data, (indices.len(), 3, s, s), device)?.to_dtype(dtype)?;
        Ok((t, labels))
    }

    /// Consecutive index chunks covering the whole set.
    pub fn chunks(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    /// Keeps only images whose label is below `num_classes`.
    fn restrict_classes(self, num_classes: usize) -> Result<Self> {
        if num_classes >= self.num_classes {
            return Ok(self);
        }
        let per = 3 * self.image_size * self.image_size;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (i, &z) in self.labels.iter().enumerate() {
            if (z as usize) < num_classes {
                pixels.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
                labels.push(z);
            }
        }
        Self::new(pixels, labels, self.image_size, num_classes, self.split)
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (train, eval) = match cfg.dataset {
        DatasetName::ToySubset => {
            let train = toy_subset(cfg.num_classes, cfg.toy_train_per_class, cfg.image_size, cfg.seed, Split::Train)?;
            let eval = toy_subset(cfg.num_classes, cfg.toy_eval_per_class, cfg.image_size, cfg.seed, Split::Eval)?;
            return Ok((train, eval));
        }
        DatasetName::Stl10 => load_stl10(&cfg.data_dir.join("stl10_binary"))?,
        DatasetName::Cifar10 => load_cifar10(&cfg.data_dir.join("cifar-10-batches-bin"))?,
    };
    Ok((
        train.restrict_classes(cfg.num_classes)?,
        eval.restrict_classes(cfg.num_classes)?,
    ))
}

fn hue_color(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Deterministic synthetic set: each class is an oriented two-tone grating with a
/// class-specific palette and frequency; images vary in phase, frequency, contrast,
/// and a randomly placed disc, plus mild pixel noise.
pub fn toy_subset(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
    split: Split,
) -> Result<LabeledImageSet> {
    if num_classes == 0 || image_size == 0 {
        return Err(Error::invalid("num_classes", "toy subset needs classes and pixels"));
    }
    let stream = match split {
        Split::Train => 0x7261_696e,
        Split::Eval => 0x6576_616c,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
    let s = image_size;
    let mut order: Vec<u32> = (0..num_classes as u32)
        .flat_map(|k| std::iter::repeat(k).take(per_class))
        .collect();
    order.shuffle(&mut rng);

    let mut pixels = Vec::with_capacity(order.len() * 3 * s * s);
    for &k in &order {
        let kf = k as f64;
        let theta = PI * kf / num_classes as f64;
        let base_freq = 1.5 + (k % 3) as f64;
        let color_a = hue_color(kf / num_classes as f64, 0.8, 0.9);
        let color_b = hue_color(kf / num_classes as f64 + 0.5, 0.6, 0.25);
        let disc_color = hue_color(kf / num_classes as f64 + 0.25, 0.5, 0.7);

        let phase = rng.gen_range(0.0..2.0 * PI);
        let freq = base_freq * rng.gen_range(0.85..1.15);
        let contrast = rng.gen_range(0.6..1.0);
        let cx = rng.gen_range(0.2..0.8) * s as f64;
        let cy = rng.gen_range(0.2..0.8) * s as f64;
        let radius = rng.gen_range(0.1..0.25) * s as f64;

        let mut img = vec![0f64; 3 * s * s];
        for r in 0..s {
            for c in 0..s {
                let u = (c as f64 * theta.cos() + r as f64 * theta.sin()) / s as f64;
                let t = 0.5 + 0.5 * contrast * (2.0 * PI * freq * u + phase).sin();
                let inside = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt() < radius;
                for ch in 0..3 {
                    let mut v = color_b[ch] + t * (color_a[ch] - color_b[ch]);
                    if inside {
                        v = 0.3 * v + 0.7 * disc_color[ch];
                    }
                    img[ch * s * s + r * s + c] = v;
                }
            }
        }
        for v in img {
            let noisy = v + rng.gen_range(-0.03..0.03);
            pixels.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    LabeledImageSet::new(pixels, order, s, num_classes, split)
}

fn read_file(path: &Path, expected_len: Option<usize>) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingData(format!("{} not found", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    if let Some(len) = expected_len {
        if bytes.len() != len {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
            });
        }
    }
    Ok(bytes)
}

/// Verifies files against `SHA256SUMS` in `dir`, when that manifest exists.
fn verify_manifest(dir: &Path, files: &[&str]) -> Result<()> {
    let manifest = dir.join("SHA256SUMS");
    let Ok(text) = fs::read_to_string(&manifest) else {
        return Ok(());
    };
    let sums: HashMap<&str, &str> = text
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let hash = it.next()?;
            let name = it.next()?.trim_start_matches('*');
            Some((name, hash))
        })
        .collect();
    for name in files {
        let Some(expected) = sums.get(name) else { continue };
        let path = dir.join(name);
        let bytes = read_file(&path, None)?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        if !hex.eq_ignore_ascii_case(expected) {
            return Err(Error::Checksum { path });
        }
    }
    Ok(())
}

fn dataset_dir(dir: &Path) -> Result<PathBuf> {
    if !dir.is_dir() {
        return Err(Error::MissingData(format!(
            "{} does not exist; see the README for the expected layout",
            dir.display()
        )));
    }
    Ok(dir.to_path_buf())
}

const STL_SIDE: usize = 96;
const STL_IMAGE_BYTES: usize = 3 * STL_SIDE * STL_SIDE;

fn stl10_split(dir: &Path, x: &str, y: &str, count: usize, split: Split) -> Result<LabeledImageSet> {
    let raw = read_file(&dir.join(x), Some(count * STL_IMAGE_BYTES))?;
    let raw_labels = read_file(&dir.join(y), Some(count))?;
    let mut pixels = vec![0u8; raw.len()];
    // Stored column-major per channel; convert to row-major CHW.
    for i in 0..count {
        let base = i * STL_IMAGE_BYTES;
        for ch in 0..3 {
            for col in 0..STL_SIDE {
                for row in 0..STL_SIDE {
                    let src = base + ch * STL_SIDE * STL_SIDE + col * STL_SIDE + row;
                    let dst = base + ch * STL_SIDE * STL_SIDE + row * STL_SIDE + col;
                    pixels[dst] = raw[src];
                }
            }
        }
    }
    let labels = raw_labels
        .iter()
        .map(|&z| {
            if (1..=10).contains(&z) {
                Ok(z as u32 - 1)
            } else {
                Err(Error::Checksum {
                    path: dir.join(y),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledImageSet::new(pixels, labels, STL_SIDE, 10, split)
}

pub fn load_stl10(dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let dir = dataset_dir(dir)?;
    verify_manifest(&dir, &["train_X.bin", "train_y.bin", "test_X.bin", "test_y.bin"])?;
    Ok((
        stl10_split(&dir, "train_X.bin", "train_y.bin", 5000, Split::Train)?,
        stl10_split(&dir, "test_X.bin", "test_y.bin", 8000, Split::Eval)?,
    ))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn cifar_files(files: &[String], dir: &Path, split: Split) -> Result<LabeledImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let raw = read_file(&dir.join(f), Some(10_000 * CIFAR_RECORD))?;
        for rec in raw.chunks_exact(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::Checksum { path: dir.join(f) });
            }
            labels.push(rec[0] as u32);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    LabeledImageSet::new(pixels, labels, 32, 10, split)
}

pub fn load_cifar10(dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let dir = dataset_dir(dir)?;
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let test = vec!["test_batch.bin".to_string()];
    let all: Vec<&str> = train.iter().chain(&test).map(|s| s.as_str()).collect();
    verify_manifest(&dir, &all)?;
    Ok((
        cifar_files(&train, &dir, Split::Train)?,
        cifar_files(&test, &dir, Split::Eval)?,
    ))
}
