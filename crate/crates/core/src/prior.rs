//! Level prompts, the precomputed text-embedding lookup table, and the
//! auxiliary regressor that estimates a level from visual features.
//!
//! Prior files: `<name>.priors.manifest.json` (prompts, normalized flag) and
//! `<name>.priors.f32bin` (5 × 512 little-endian `f32`, level 1 first).

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::{atomic_write, decode_f32_le, encode_f32_le, with_suffix};
use crate::fusion::aggregate_views;
use crate::nn::{fit, EpochLoss, Loss, Mlp, MlpSpec, NnError, TrainConfig};
use crate::store::{group_by_level, EmbeddingCache};
use crate::{EMBEDDING_DIM, LEVEL_COUNT};

pub const PRIOR_FORMAT: &str = "level-priors/1";

/// Allowed deviation of a normalized prior's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Hidden widths of the level regressor (512 → 1024 → 512 → 64 → 1).
pub const LEVEL_HIDDEN: [usize; 3] = [1024, 512, 64];

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("level {0} is outside 1..=5")]
    LevelOutOfRange(i64),
    #[error("prior table needs exactly 5 entries, found {0}")]
    WrongCount(usize),
    #[error("prior embedding for level {level} has dimension {found}, expected 512")]
    WrongDimension { level: u8, found: usize },
    #[error("prompt for level {level} is `{found}`, expected `{expected}`")]
    PromptMismatch { level: u8, found: String, expected: String },
    #[error("prior embedding for level {0} has zero norm")]
    ZeroVector(u8),
    #[error("prior table is not normalized")]
    NotNormalized,
    #[error("prior embedding for level {level} has norm {norm}, expected 1")]
    NormMismatch { level: u8, norm: f64 },
    #[error("prior file {path}: {detail}")]
    File { path: PathBuf, detail: String },
    #[error("level regressor: {0}")]
    Nn(#[from] NnError),
    #[error("level regressor must map 512 inputs to 1 output, got {0:?}")]
    RegressorShape(Vec<usize>),
    #[error("cannot train a level regressor on an empty cache")]
    EmptyCache,
}

/// Text prompt used to embed a height level.
pub fn prompt_for_level(level: u8) -> Result<String, PriorError> {
    if !(1..=LEVEL_COUNT).contains(&level) {
        return Err(PriorError::LevelOutOfRange(level as i64));
    }
    Ok(format!("a plant at approximately level {level}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub level: u8,
    pub prompt: String,
    pub embedding: Vec<f32>,
}

/// The five level-prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTable {
    entries: Vec<PriorEntry>,
    normalized: bool,
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl PriorTable {
    /// Builds a table from five embeddings for levels 1..=5, in order.
    pub fn from_embeddings(embeddings: Vec<Vec<f32>>) -> Result<Self, PriorError> {
        if embeddings.len() != LEVEL_COUNT as usize {
            return Err(PriorError::WrongCount(embeddings.len()));
        }
        let entries = embeddings
            .into_iter()
            .enumerate()
            .map(|(i, embedding)| {
                let level = i as u8 + 1;
                Ok(PriorEntry {
                    level,
                    prompt: prompt_for_level(level)?,
                    embedding,
                })
            })
            .collect::<Result<Vec<_>, PriorError>>()?;
        Self::from_entries(entries, false)
    }

    /// Checks count, ordering, dimension and prompts; if `normalized` is claimed, norms too.
    pub fn from_entries(entries: Vec<PriorEntry>, normalized: bool) -> Result<Self, PriorError> {
        if entries.len() != LEVEL_COUNT as usize {
            return Err(PriorError::WrongCount(entries.len()));
        }
        for (i, e) in entries.iter().enumerate() {
            let level = i as u8 + 1;
            let expected = prompt_for_level(level)?;
            if e.level != level || e.prompt != expected {
                return Err(PriorError::PromptMismatch {
                    level,
                    found: e.prompt.clone(),
                    expected,
                });
            }
            if e.embedding.len() != EMBEDDING_DIM {
                return Err(PriorError::WrongDimension {
                    level,
                    found: e.embedding.len(),
                });
            }
            if normalized {
                let norm = l2_norm(&e.embedding);
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(PriorError::NormMismatch { level, norm });
                }
            }
        }
        Ok(Self { entries, normalized })
    }

    pub fn entries(&self) -> &[PriorEntry] {
        &self.entries
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Divides each embedding by its L2 norm (computed in `f64`).
    pub fn normalize(&self) -> Result<Self, PriorError> {
        let mut entries = self.entries.clone();
        for e in &mut entries {
            let norm = l2_norm(&e.embedding);
            if norm == 0.0 || !norm.is_finite() {
                return Err(PriorError::ZeroVector(e.level));
            }
            for v in &mut e.embedding {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Ok(Self {
            entries,
            normalized: true,
        })
    }

    /// Stored embedding for `level`. Requires a normalized table.
    pub fn lookup(&self, level: u8) -> Result<&[f32], PriorError> {
        if !(1..=LEVEL_COUNT).contains(&level) {
            return Err(PriorError::LevelOutOfRange(level as i64));
        }
        if !self.normalized {
            return Err(PriorError::NotNormalized);
        }
        Ok(&self.entries[level as usize - 1].embedding)
    }

    pub fn write(&self, base: &Path) -> Result<(), PriorError> {
        let (mpath, ppath) = prior_paths(base);
        let manifest = PriorManifest {
            format: PRIOR_FORMAT.to_string(),
            dim: EMBEDDING_DIM,
            normalized: self.normalized,
            prompts: self.entries.iter().map(|e| e.prompt.clone()).collect(),
        };
        let values: Vec<f32> = self.entries.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        atomic_write(&ppath, &encode_f32_le(&values)).map_err(|e| file_err(&ppath, e))?;
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        atomic_write(&mpath, &json).map_err(|e| file_err(&mpath, e))?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorManifest {
    format: String,
    dim: usize,
    normalized: bool,
    prompts: Vec<String>,
}

fn file_err(path: &Path, detail: impl ToString) -> PriorError {
    PriorError::File {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// `(manifest, payload)` paths for a prior table base name.
pub fn prior_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let base = s
        .strip_suffix(".priors.manifest.json")
        .map(PathBuf::from)
        .unwrap_or_else(|| base.to_path_buf());
    (
        with_suffix(&base, ".priors.manifest.json"),
        with_suffix(&base, ".priors.f32bin"),
    )
}

pub fn load_priors(base: &Path) -> Result<PriorTable, PriorError> {
    let (mpath, ppath) = prior_paths(base);
    let text = std::fs::read(&mpath).map_err(|e| file_err(&mpath, e))?;
    let manifest: PriorManifest = serde_json::from_slice(&text).map_err(|e| file_err(&mpath, e))?;
    if manifest.format != PRIOR_FORMAT {
        return Err(file_err(&mpath, format!("unknown format `{}`", manifest.format)));
    }
    if manifest.prompts.len() != LEVEL_COUNT as usize {
        return Err(PriorError::WrongCount(manifest.prompts.len()));
    }
    if manifest.dim != EMBEDDING_DIM {
        return Err(PriorError::WrongDimension {
            level: 1,
            found: manifest.dim,
        });
    }
    let bytes = std::fs::read(&ppath).map_err(|e| file_err(&ppath, e))?;
    let expected = LEVEL_COUNT as usize * EMBEDDING_DIM * 4;
    if bytes.len() != expected {
        return Err(file_err(&ppath, format!("payload is {} bytes, expected {expected}", bytes.len())));
    }
    let values = decode_f32_le(&bytes);
    let entries = manifest
        .prompts
        .into_iter()
        .enumerate()
        .map(|(i, prompt)| PriorEntry {
            level: i as u8 + 1,
            prompt,
            embedding: values[i * EMBEDDING_DIM..(i + 1) * EMBEDDING_DIM].to_vec(),
        })
        .collect();
    PriorTable::from_entries(entries, manifest.normalized)
}

pub fn normalize_priors(table: &PriorTable) -> Result<PriorTable, PriorError> {
    table.normalize()
}

pub fn lookup_prior(table: &PriorTable, level: u8) -> Result<&[f32], PriorError> {
    table.lookup(level)
}

/// Regressor output and the level it selects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelEstimate {
    pub continuous: f32,
    pub quantized: u8,
}

/// Round half up, then clamp to 1..=5. Total on all reals; NaN maps to 1.
pub fn quantize_level(continuous: f64) -> u8 {
    let rounded = (continuous + 0.5).floor();
    if rounded.is_nan() {
        return 1;
    }
    rounded.clamp(1.0, LEVEL_COUNT as f64) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRegressorConfig {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
}

impl Default for LevelRegressorConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
            hidden: LEVEL_HIDDEN.to_vec(),
        }
    }
}

/// Trains the level regressor on the mean embedding of every (plant, day, level)
/// group in `cache`, with MSE against the true level.
pub fn train_level_regressor(
    cache: &EmbeddingCache,
    config: &LevelRegressorConfig,
) -> Result<(Mlp<f32>, Vec<EpochLoss>), PriorError> {
    if cache.is_empty() {
        return Err(PriorError::EmptyCache);
    }
    let groups = group_by_level(cache);
    let mut inputs = Array2::zeros((groups.len(), EMBEDDING_DIM));
    let mut targets = Array2::zeros((groups.len(), 1));
    for (i, g) in groups.iter().enumerate() {
        let mean = aggregate_views(&g.views(cache)).expect("groups are nonempty and 512-d");
        inputs.row_mut(i).assign(&ndarray::ArrayView1::from(&mean[..]));
        targets[[i, 0]] = g.key.level as f32;
    }
    let spec = MlpSpec::with_hidden(EMBEDDING_DIM, &config.hidden, 1)?;
    Ok(fit(&spec, inputs.view(), targets.view(), Loss::Mse, &config.train)?)
}

/// Runs the regressor on a group's mean embedding.
pub fn predict_level(regressor: &Mlp<f32>, mean_embedding: &[f32]) -> Result<LevelEstimate, PriorError> {
    let spec = regressor.spec();
    if spec.input_size() != EMBEDDING_DIM || spec.output_size() != 1 {
        return Err(PriorError::RegressorShape(spec.sizes().to_vec()));
    }
    let out = regressor.predict(mean_embedding)?;
    Ok(LevelEstimate {
        continuous: out[0],
        quantized: quantize_level(out[0] as f64),
    })
}
