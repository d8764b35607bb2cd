//! Deterministic synthetic classification tasks.
//!
//! Every dataset is a pure function of its [`TaskDatasetSpec`]. Train and
//! eval splits draw from separate ChaCha streams of the same seed, so they
//! never share samples. Labels cycle `i % classes`, which keeps every split
//! balanced to within one sample per class.

use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PackError, Result};
use crate::tensor::Tensor;

const TRAIN_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 1;
const LAYOUT_STREAM: u64 = 2;
const PERMUTATION_STREAM: u64 = 3;

pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Sinusoidal gratings. Class `k` draws its orientation from the `k`-th
    /// equal slice of `[band_start, band_start + band_width)` degrees.
    Gratings {
        band_start: f32,
        band_width: f32,
        #[serde(default = "default_frequency")]
        frequency: f32,
        #[serde(default = "default_phase_jitter")]
        phase_jitter: f32,
        #[serde(default = "default_noise")]
        noise: f32,
    },
    /// Each class is a fixed constellation of Gaussian bumps whose centers
    /// jitter per sample.
    GaussianBlobs {
        #[serde(default = "default_blobs")]
        blobs: usize,
        #[serde(default = "default_jitter")]
        jitter: f32,
        #[serde(default = "default_noise")]
        noise: f32,
    },
    /// A base generator with its pixels shuffled by a fixed permutation.
    /// No seed means the identity permutation.
    PermutedBase {
        base: Box<Generator>,
        #[serde(default)]
        permutation_seed: Option<u64>,
    },
}

fn default_frequency() -> f32 {
    3.0
}
fn default_phase_jitter() -> f32 {
    0.5
}
fn default_noise() -> f32 {
    0.3
}
fn default_blobs() -> usize {
    3
}
fn default_jitter() -> f32 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDatasetSpec {
    pub name: String,
    pub generator: Generator,
    pub classes: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Per-sample shape `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(PackError::dim(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.shape()[0]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(PackError::input(format!(
                "label {bad} with {classes} classes"
            )));
        }
        Ok(Self {
            inputs,
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

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.gather_rows(rows)?;
        Ok((x, rows.iter().map(|&r| self.labels[r]).collect()))
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(
            self.inputs.slice_rows(0, n)?,
            self.labels[..n].to_vec(),
            self.classes,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn generate_dataset(spec: &TaskDatasetSpec) -> Result<TaskData> {
    if spec.classes < 2 {
        return Err(PackError::input(format!(
            "task {} needs at least 2 classes, got {}",
            spec.name, spec.classes
        )));
    }
    if spec.train_samples == 0 || spec.eval_samples == 0 {
        return Err(PackError::input(format!(
            "task {} has an empty split",
            spec.name
        )));
    }
    if spec.input_shape.contains(&0) {
        return Err(PackError::dim(format!(
            "input shape {:?} has a zero extent",
            spec.input_shape
        )));
    }
    let train = split(spec, spec.train_samples, TRAIN_STREAM)?;
    let eval = split(spec, spec.eval_samples, EVAL_STREAM)?;
    Ok(TaskData { train, eval })
}

fn split(spec: &TaskDatasetSpec, n: usize, stream_id: u64) -> Result<Dataset> {
    let [c, h, w] = spec.input_shape;
    let per = c * h * w;
    let mut rng = stream(spec.seed, stream_id);
    let sampler = Sampler::new(&spec.generator, spec)?;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.classes;
        data.extend(sampler.draw(label, &mut rng));
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, spec.classes)
}

enum Sampler {
    Gratings {
        bands: Vec<(f32, f32)>,
        frequency: f32,
        phase_jitter: f32,
        noise: f32,
        shape: [usize; 3],
    },
    Blobs {
        centers: Vec<Vec<(f32, f32)>>,
        jitter: f32,
        noise: f32,
        shape: [usize; 3],
    },
    Permuted {
        base: Box<Sampler>,
        perm: Option<Vec<usize>>,
    },
}

impl Sampler {
    fn new(g: &Generator, spec: &TaskDatasetSpec) -> Result<Self> {
        let shape = spec.input_shape;
        Ok(match g {
            Generator::Gratings {
                band_start,
                band_width,
                frequency,
                phase_jitter,
                noise,
            } => {
                if *band_width <= 0.0 {
                    return Err(PackError::input("orientation band width must be positive"));
                }
                let slice = band_width / spec.classes as f32;
                let bands = (0..spec.classes)
                    .map(|k| {
                        let lo = band_start + slice * k as f32;
                        (lo, lo + slice)
                    })
                    .collect();
                Sampler::Gratings {
                    bands,
                    frequency: *frequency,
                    phase_jitter: *phase_jitter,
                    noise: *noise,
                    shape,
                }
            }
            Generator::GaussianBlobs {
                blobs,
                jitter,
                noise,
            } => {
                let mut rng = stream(spec.seed, LAYOUT_STREAM);
                let (h, w) = (shape[1] as f32, shape[2] as f32);
                let centers = (0..spec.classes)
                    .map(|_| {
                        (0..(*blobs).max(1))
                            .map(|_| {
                                (
                                    rng.random_range(0.15 * h..0.85 * h),
                                    rng.random_range(0.15 * w..0.85 * w),
                                )
                            })
                            .collect()
                    })
                    .collect();
                Sampler::Blobs {
                    centers,
                    jitter: *jitter,
                    noise: *noise,
                    shape,
                }
            }
            Generator::PermutedBase {
                base,
                permutation_seed,
            } => {
                let perm = permutation_seed.map(|s| {
                    let mut p: Vec<usize> = (0..shape.iter().product()).collect();
                    p.shuffle(&mut stream(s, PERMUTATION_STREAM));
                    p
                });
                Sampler::Permuted {
                    base: Box::new(Sampler::new(base, spec)?),
                    perm,
                }
            }
        })
    }

    fn draw(&self, label: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Sampler::Gratings {
                bands,
                frequency,
                phase_jitter,
                noise,
                shape,
            } => {
                let (lo, hi) = bands[label];
                let theta = rng.random_range(lo..hi).to_radians();
                let phase = phase_jitter * rng.random_range(-PI..PI);
                let [c, h, w] = *shape;
                let (s, co) = theta.sin_cos();
                let k = 2.0 * PI * frequency / h.max(w) as f32;
                let mut out = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let (y, x) = (i as f32 - h as f32 / 2.0, j as f32 - w as f32 / 2.0);
                            let n: f32 = StandardNormal.sample(rng);
                            out.push((k * (x * co + y * s) + phase).cos() + noise * n);
                        }
                    }
                }
                out
            }
            Sampler::Blobs {
                centers,
                jitter,
                noise,
                shape,
            } => {
                let [c, h, w] = *shape;
                let pts: Vec<(f32, f32)> = centers[label]
                    .iter()
                    .map(|&(cy, cx)| {
                        let dy: f32 = StandardNormal.sample(rng);
                        let dx: f32 = StandardNormal.sample(rng);
                        (cy + jitter * dy, cx + jitter * dx)
                    })
                    .collect();
                let sigma2 = 2.0 * (h.min(w) as f32 / 8.0).powi(2);
                let mut out = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let v: f32 = pts
                                .iter()
                                .map(|&(py, px)| {
                                    let d = (i as f32 - py).powi(2) + (j as f32 - px).powi(2);
                                    (-d / sigma2).exp()
                                })
                                .sum();
                            let n: f32 = StandardNormal.sample(rng);
                            out.push(v + noise * n);
                        }
                    }
                }
                out
            }
            Sampler::Permuted { base, perm } => {
                let x = base.draw(label, rng);
                match perm {
                    Some(p) => p.iter().map(|&i| x[i]).collect(),
                    None => x,
                }
            }
        }
    }
}
