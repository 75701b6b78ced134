//! Synthetic caches with a known linear generative model.
//!
//! Every view of (plant, day, level) is `day·u_a + leaf·u_l + level·u_v`,
//! plus optional seeded Gaussian noise, with `leaf = ⌈1.5·day⌉` and the three
//! directions mutually orthonormal. Angles never change the noiseless
//! embedding.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::prior::{PriorError, PriorTable};
use crate::store::{Crop, EmbeddingCache, StoreError, ViewRecord};
use crate::{EMBEDDING_DIM, LEVEL_COUNT, VIEWS_PER_LEVEL};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub crops: Vec<Crop>,
    /// Plants per crop, numbered from 1.
    pub n_plants: u32,
    /// Days per plant, numbered from 1.
    pub n_days: u32,
    pub noise_std: f64,
    pub seed: u64,
    /// Use coordinate axes instead of random directions: level on axis 0,
    /// age on axis 1, leaf count on axis 2.
    pub axis_aligned: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            crops: vec![Crop::Mustard, Crop::Radish, Crop::Wheat],
            n_plants: 3,
            n_days: 20,
            noise_std: 0.0,
            seed: 7,
            axis_aligned: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_plants < 2 {
            return Err(SynthError::InvalidSpec(format!("n_plants must be at least 2, got {}", self.n_plants)));
        }
        if self.n_days < 2 {
            return Err(SynthError::InvalidSpec(format!("n_days must be at least 2, got {}", self.n_days)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(SynthError::InvalidSpec(format!("noise_std must be finite and non-negative, got {}", self.noise_std)));
        }
        if self.crops.is_empty() {
            return Err(SynthError::InvalidSpec("at least one crop is required".into()));
        }
        let mut seen = self.crops.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.crops.len() {
            return Err(SynthError::InvalidSpec("crops must be distinct".into()));
        }
        Ok(())
    }
}

/// Hidden generative directions, each of length 512.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub age: Vec<f64>,
    pub leaf: Vec<f64>,
    pub level: Vec<f64>,
}

impl Directions {
    /// Seeded Gaussian draws made orthonormal by Gram-Schmidt.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(3);
        while basis.len() < 3 {
            let mut v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.sample(StandardNormal)).collect();
            // two passes keep the result orthogonal to 1e-15 or so
            for _ in 0..2 {
                for b in &basis {
                    let d = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        let level = basis.pop().unwrap();
        let leaf = basis.pop().unwrap();
        let age = basis.pop().unwrap();
        Self { age, leaf, level }
    }

    pub fn axis_aligned() -> Self {
        let axis = |i: usize| {
            let mut v = vec![0.0; EMBEDDING_DIM];
            v[i] = 1.0;
            v
        };
        Self {
            level: axis(0),
            age: axis(1),
            leaf: axis(2),
        }
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let d = [&self.age, &self.leaf, &self.level];
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(d[i], d[j]) - target).abs());
            }
        }
        worst
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn leaf_count_for_day(day: u32) -> u32 {
    (1.5 * day as f64).ceil() as u32
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub cache: EmbeddingCache,
    pub directions: Directions,
}

/// Builds the synthetic cache. Records are ordered by crop, plant, day,
/// level, angle; the truth table is the cache's own record list.
pub fn generate_synthetic_cache(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let directions = if spec.axis_aligned {
        Directions::axis_aligned()
    } else {
        Directions::random(spec.seed)
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(2);

    let n = spec.crops.len() * (spec.n_plants * spec.n_days) as usize * LEVEL_COUNT as usize * VIEWS_PER_LEVEL;
    let mut records = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * EMBEDDING_DIM);
    for crop in &spec.crops {
        for plant in 1..=spec.n_plants {
            for day in 1..=spec.n_days {
                let leaf = leaf_count_for_day(day);
                for level in 1..=LEVEL_COUNT {
                    let clean: Vec<f64> = (0..EMBEDDING_DIM)
                        .map(|k| {
                            day as f64 * directions.age[k]
                                + leaf as f64 * directions.leaf[k]
                                + level as f64 * directions.level[k]
                        })
                        .collect();
                    for angle in 0..VIEWS_PER_LEVEL as u8 {
                        let row = records.len();
                        records.push(ViewRecord {
                            crop: crop.clone(),
                            plant_id: plant,
                            day,
                            level,
                            angle,
                            leaf_count: leaf,
                            embedding_row: row,
                            image_path: format!("{crop}/p{plant}/d{day}/L{level}/a{angle:02}.png"),
                        });
                        if spec.noise_std > 0.0 {
                            data.extend(clean.iter().map(|&c| {
                                let z: f64 = noise_rng.sample(StandardNormal);
                                (c + spec.noise_std * z) as f32
                            }));
                        } else {
                            data.extend(clean.iter().map(|&c| c as f32));
                        }
                    }
                }
            }
        }
    }
    let matrix = Array2::from_shape_vec((records.len(), EMBEDDING_DIM), data).expect("shape matches");
    Ok(SynthOutput {
        cache: EmbeddingCache::new(records, matrix)?,
        directions,
    })
}

/// Five seeded random unit vectors standing in for level text embeddings.
pub fn synthetic_priors(seed: u64) -> Result<PriorTable, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let raw: Vec<Vec<f32>> = (0..LEVEL_COUNT)
        .map(|_| (0..EMBEDDING_DIM).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
        .collect();
    Ok(PriorTable::from_embeddings(raw)?.normalize()?)
}
