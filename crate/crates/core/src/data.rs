//! Self-contained synthetic segmentation data.
//!
//! `shapes-seg` draws squares (class 1) and circles (class 2) over a noisy
//! background (class 0). Scene geometry lives in normalized coordinates and
//! comes from its own stream, so one seed yields the same scenes at every
//! resolution.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPES_SEG_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    ShapesSeg,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes-seg" => Ok(Task::ShapesSeg),
            other => Err(Error::config(format!("unsupported task '{other}' (expected shapes-seg)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `res×res×1`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major per-pixel class indices.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub classes: usize,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the given samples into `[n, res, res, channels]` images and flat labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let first = indices
            .first()
            .and_then(|&i| self.samples.get(i))
            .ok_or_else(|| Error::EmptyData("empty batch".into()))?;
        let shape = first.image.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * first.image.numel());
        let mut labels = Vec::with_capacity(indices.len() * first.labels.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Range(format!("sample {i} of {}", self.samples.len())))?;
            data.extend_from_slice(s.image.data());
            labels.extend_from_slice(&s.labels);
        }
        let mut full = vec![indices.len()];
        full.extend(shape);
        Ok((Tensor::new(full, data)?, labels))
    }

    /// Consecutive batches covering the dataset in order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + '_ {
        let n = self.len();
        let size = batch_size.max(1);
        (0..n.div_ceil(size)).map(move |b| {
            let idx: Vec<usize> = (b * size..((b + 1) * size).min(n)).collect();
            self.batch(&idx)
        })
    }

    /// Leading `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            resolution: self.resolution,
            classes: self.classes,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }

    /// Fraction of pixels per class.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.classes];
        let mut total = 0usize;
        for s in &self.samples {
            for &l in &s.labels {
                counts[l] += 1;
                total += 1;
            }
        }
        counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }
}

struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    size: f64,
    intensity: f32,
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.class {
            1 => dx.abs() <= self.size && dy.abs() <= self.size,
            _ => dx * dx + dy * dy <= self.size * self.size,
        }
    }
}

fn scene(rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| Shape {
            class: rng.random_range(1..=2),
            cx: rng.random_range(0.2..0.8),
            cy: rng.random_range(0.2..0.8),
            size: rng.random_range(0.12..0.25),
            intensity: rng.random_range(0.6..1.0),
        })
        .collect()
}

fn render(shapes: &[Shape], res: usize, noise: &mut ChaCha8Rng) -> SyntheticSample {
    let mut image = Vec::with_capacity(res * res);
    let mut labels = Vec::with_capacity(res * res);
    for py in 0..res {
        for px in 0..res {
            // pixel centers in [0, 1]
            let (x, y) = ((px as f64 + 0.5) / res as f64, (py as f64 + 0.5) / res as f64);
            let mut label = 0;
            let mut value = 0.0f32;
            for s in shapes {
                if s.covers(x, y) {
                    label = s.class;
                    value = s.intensity;
                }
            }
            let jitter: f32 = noise.random_range(0.0..0.3);
            image.push((value * 0.7 + jitter).clamp(0.0, 1.0));
            labels.push(label);
        }
    }
    SyntheticSample {
        image: Tensor::new(vec![res, res, 1], image).expect("res² pixels"),
        labels,
    }
}

/// Generates `count` samples at `resolution`. Identical seeds give
/// bitwise-identical datasets.
pub fn gen_synthetic(task: &str, count: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    let Task::ShapesSeg = task.parse()?;
    if count == 0 || resolution == 0 {
        return Err(Error::config("synthetic data needs count ≥ 1 and a positive resolution"));
    }
    let mut scenes = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(1 + resolution as u64);
    let mut samples = Vec::with_capacity(count);
    while samples.len() < count {
        let shapes = scene(&mut scenes);
        let sample = render(&shapes, resolution, &mut noise);
        // Tiny resolutions can miss every pixel center; redraw in that case.
        if sample.labels.iter().any(|&l| l != 0) {
            samples.push(sample);
        }
    }
    Ok(Dataset {
        resolution,
        classes: SHAPES_SEG_CLASSES,
        samples,
    })
}
