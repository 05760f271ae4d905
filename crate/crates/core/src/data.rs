//! Image datasets: a seeded synthetic generator and a flat binary loader.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{param_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[count, H, W, C]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return param_err(format!(
                "{} labels for image tensor {:?}",
                labels.len(),
                images.shape()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return param_err(format!("label {bad} outside 0..{classes}"));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (h, w, c) = self.image_shape();
        let n = h * w * c;
        Tensor::new(
            vec![h, w, c],
            self.images.data()[i * n..(i + 1) * n].to_vec(),
        )
        .expect("slice matches image shape")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (h, w, c) = self.image_shape();
        let n = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        Dataset {
            images: Tensor::new(
                vec![indices.len().max(1), h, w, c],
                pad(data, n, indices.len()),
            )
            .expect("consistent subset"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

// A zero-length selection still needs a valid (non-empty) tensor.
fn pad(mut data: Vec<f64>, n: usize, count: usize) -> Vec<f64> {
    if count == 0 {
        data.resize(n, 0.0);
    }
    data
}

/// Oriented sinusoidal gratings, one orientation per class, with per-sample
/// phase and contrast jitter plus pixel noise. Labels cycle `0, 1, …, L−1`,
/// so every class count is within one of `count / L`.
pub fn generate_synthetic(
    rng: &mut SeededRng,
    classes: usize,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Dataset> {
    if classes == 0 || count < classes {
        return param_err(format!(
            "need at least one sample per class ({count} < {classes})"
        ));
    }
    if height == 0 || width == 0 || channels == 0 {
        return param_err("image dimensions must be positive");
    }
    let freq = 2.0;
    let mut data = Vec::with_capacity(count * height * width * channels);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let theta = PI * label as f64 / classes as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        let phase = (rng.uniform() - 0.5) * 1.0;
        let contrast = 0.3 * (0.8 + 0.4 * rng.uniform());
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 / width as f64) * ct + (y as f64 / height as f64) * st;
                for c in 0..channels {
                    let base = 0.5 + contrast * (2.0 * PI * freq * u + phase + c as f64).sin();
                    let noisy = base + 0.05 * rng.standard_normal();
                    data.push(noisy.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(vec![count, height, width, channels], data)?,
        labels,
        classes,
    )
}

fn read_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parameter("truncated header".into()))
}

/// Parses `[count:4][H:4][W:4][C:4]` (little-endian) followed by `count·H·W·C`
/// bytes; pixel values become `byte / 255`.
pub fn decode_images(buf: &[u8]) -> Result<Tensor> {
    let count = read_u32(buf, 0)? as usize;
    let h = read_u32(buf, 4)? as usize;
    let w = read_u32(buf, 8)? as usize;
    let c = read_u32(buf, 12)? as usize;
    let n = count * h * w * c;
    let body = &buf[16..];
    if body.len() != n {
        return param_err(format!("expected {n} pixel bytes, found {}", body.len()));
    }
    Tensor::new(
        vec![count, h, w, c],
        body.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

pub fn encode_images(images: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    for &d in images.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(
        images
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Labels file: `[count:4]` then one byte per label.
pub fn decode_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let count = read_u32(buf, 0)? as usize;
    let body = &buf[4..];
    if body.len() != count {
        return param_err(format!("expected {count} labels, found {}", body.len()));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = (labels.len() as u32).to_le_bytes().to_vec();
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

pub fn load_binary(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let imgs = decode_images(&fs::read(images)?)?;
    let lbls = decode_labels(&fs::read(labels)?)?;
    Dataset::new(imgs, lbls, classes)
}

/// Deals dataset indices to `clients` round-robin: client `k` gets `k, k+n, k+2n, …`.
pub fn shard_round_robin(len: usize, clients: usize) -> Vec<Vec<usize>> {
    let mut shards = vec![Vec::new(); clients];
    for i in 0..len {
        shards[i % clients].push(i);
    }
    shards
}
