//! Seeded synthetic image/text pairs with latent classes and caption noise.
//!
//! Each class owns one prototype per modality. A sample's image is its class
//! prototype plus isotropic noise; its text is drawn the same way from the
//! text prototype of its class, except that with probability `swap_prob` the
//! caption comes from a different, uniformly chosen class. Such captions say
//! nothing about the image they are paired with.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub image_raw: Vec<f64>,
    pub text_raw: Vec<f64>,
    pub class_id: usize,
    pub caption_noisy: bool,
    pub noisy_source_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub samples: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub within_class_sigma: f64,
    pub swap_prob: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            samples: 2000,
            image_dim: 64,
            text_dim: 48,
            within_class_sigma: 0.1,
            swap_prob: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.samples < self.classes {
            return Err(Error::InvalidSpec(format!(
                "{} samples cannot cover {} classes",
                self.samples, self.classes
            )));
        }
        if self.image_dim == 0 || self.text_dim == 0 {
            return Err(Error::InvalidSpec(
                "raw dimensions must be at least 1".into(),
            ));
        }
        if !(self.within_class_sigma >= 0.0) || !self.within_class_sigma.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "within_class_sigma {} must be a finite non-negative number",
                self.within_class_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.swap_prob) {
            return Err(Error::InvalidSpec(format!(
                "swap_prob {} must lie in [0, 1)",
                self.swap_prob
            )));
        }
        Ok(())
    }
}

/// Class prototypes shared by every split drawn from one spec.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub image_prototypes: Matrix,
    pub text_prototypes: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: World,
    pub pairs: Vec<SyntheticPair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn image_matrix(&self, idx: &[usize]) -> Matrix {
        rows_to_matrix(idx.iter().map(|&i| self.pairs[i].image_raw.as_slice()))
    }

    pub fn text_matrix(&self, idx: &[usize]) -> Matrix {
        rows_to_matrix(idx.iter().map(|&i| self.pairs[i].text_raw.as_slice()))
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.class_id).collect()
    }

    pub fn noisy_fraction(&self) -> f64 {
        self.pairs.iter().filter(|p| p.caption_noisy).count() as f64 / self.pairs.len() as f64
    }
}

fn rows_to_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Matrix {
    let rows: Vec<&[f64]> = rows.collect();
    Matrix::from_rows(&rows).expect("raw vectors are finite and equally long")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * gaussian(rng)).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian draws")
}

// Independent streams derived from one seed.
const WORLD_STREAM: u64 = 0x5743_4c44;
const TRAIN_STREAM: u64 = 0x5452_4149;
const EVAL_STREAM: u64 = 0x4556_414c;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

pub fn build_world(spec: &DatasetSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = stream(spec.seed, WORLD_STREAM);
    let image_prototypes = gaussian_matrix(&mut rng, spec.classes, spec.image_dim, 1.0);
    let text_prototypes = gaussian_matrix(&mut rng, spec.classes, spec.text_dim, 1.0);
    Ok(World {
        image_prototypes,
        text_prototypes,
    })
}

fn observe(rng: &mut ChaCha8Rng, prototype: &[f64], sigma: f64) -> Vec<f64> {
    prototype
        .iter()
        .map(|&p| p + sigma * gaussian(rng))
        .collect()
}

fn sample_pairs(
    spec: &DatasetSpec,
    world: &World,
    n: usize,
    swap_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<SyntheticPair> {
    let k = spec.classes;
    (0..n)
        .map(|_| {
            let class_id = rng.random_range(0..k);
            let image_raw = observe(
                rng,
                world.image_prototypes.row(class_id),
                spec.within_class_sigma,
            );
            let noisy = swap_prob > 0.0 && rng.random_bool(swap_prob);
            let text_class = if noisy {
                // uniform over the other k - 1 classes
                let c = rng.random_range(0..k - 1);
                if c >= class_id {
                    c + 1
                } else {
                    c
                }
            } else {
                class_id
            };
            let text_raw = observe(
                rng,
                world.text_prototypes.row(text_class),
                spec.within_class_sigma,
            );
            SyntheticPair {
                image_raw,
                text_raw,
                class_id,
                caption_noisy: noisy,
                noisy_source_class: noisy.then_some(text_class),
            }
        })
        .collect()
}

/// Training split: `spec.samples` pairs with caption noise `spec.swap_prob`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let world = build_world(spec)?;
    let mut rng = stream(spec.seed, TRAIN_STREAM);
    let pairs = sample_pairs(spec, &world, spec.samples, spec.swap_prob, &mut rng);
    Ok(Dataset { world, pairs })
}

/// Clean held-out split over the same prototypes (no caption noise).
pub fn generate_eval_split(spec: &DatasetSpec, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidSpec(
            "evaluation split must be non-empty".into(),
        ));
    }
    let world = build_world(spec)?;
    let mut rng = stream(spec.seed, EVAL_STREAM);
    let pairs = sample_pairs(spec, &world, n, 0.0, &mut rng);
    Ok(Dataset { world, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub noise_sigma: f64,
    pub coordinate_drop_prob: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            coordinate_drop_prob: 0.1,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "view noise_sigma {} is invalid",
                self.noise_sigma
            )));
        }
        if !(0.0..=0.5).contains(&self.coordinate_drop_prob) {
            return Err(Error::InvalidSpec(format!(
                "coordinate_drop_prob {} must lie in [0, 0.5]",
                self.coordinate_drop_prob
            )));
        }
        Ok(())
    }
}

fn augment_one(raw: &[f64], cfg: &ViewConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    raw.iter()
        .map(|&x| {
            let v = x + cfg.noise_sigma * gaussian(rng);
            if cfg.coordinate_drop_prob > 0.0 && rng.random_bool(cfg.coordinate_drop_prob) {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// Two independently augmented views of a pair's image. Captions are never
/// augmented. The same `seed` always yields the same views.
pub fn augment_views(pair: &SyntheticPair, cfg: &ViewConfig, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v1 = augment_one(&pair.image_raw, cfg, &mut rng);
    let v2 = augment_one(&pair.image_raw, cfg, &mut rng);
    (v1, v2)
}

/// Shuffled index batches for one epoch; the trailing partial batch is
/// dropped.
pub fn sample_batches(
    n: usize,
    batch_size: usize,
    epoch_seed: u64,
) -> impl Iterator<Item = Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    let full = if batch_size == 0 { 0 } else { n / batch_size };
    (0..full).map(move |b| order[b * batch_size..(b + 1) * batch_size].to_vec())
}

/// Writes one JSON object per line: class id, noise flag, source class and
/// both raw vectors.
pub fn export_jsonl<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for p in &dataset.pairs {
        let line = serde_json::to_string(p).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Nearest prototype (Euclidean) for a raw vector; ties go to the lower index.
pub fn nearest_prototype(prototypes: &Matrix, v: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for c in 0..prototypes.rows() {
        let d: f64 = prototypes
            .row(c)
            .iter()
            .zip(v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}
