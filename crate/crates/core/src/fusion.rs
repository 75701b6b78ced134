//! View aggregation, visual/text fusion and the two age + leaf-count regressors.
//!
//! The unimodal regressor (512 → 1024 → 512 → 64 → 2) sees one image at a time.
//! The level-aware regressor (1024 → 2048 → 1024 → 512 → 64 → 2) sees the mean
//! embedding of a level group concatenated with the unit-norm text prior of
//! that level. Both share one linear output layer for the two targets and are
//! trained on `MSE(age) + MSE(leaf_count)`.

use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::nn::{fit, EpochLoss, Loss, Mlp, MlpSpec, NnError};
use crate::prior::{predict_level, PriorError, PriorTable, UNIT_NORM_TOLERANCE};
use crate::store::{EmbeddingCache, GroupKey, LevelGroup};
use crate::EMBEDDING_DIM;

pub use crate::nn::TrainConfig;

pub const FUSED_DIM: usize = 2 * EMBEDDING_DIM;
pub const UNIMODAL_HIDDEN: [usize; 3] = [1024, 512, 64];
pub const MULTIMODAL_HIDDEN: [usize; 4] = [2048, 1024, 512, 64];

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("cannot aggregate an empty view set")]
    EmptyViews,
    #[error("view {index} has dimension {found}, expected {expected}")]
    MixedDimensions { index: usize, expected: usize, found: usize },
    #[error("{what} has dimension {found}, expected {expected}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("text prior has norm {0}, expected a unit vector")]
    UnnormalizedPrior(f64),
    #[error("length mismatch: {preds} predictions, {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("model spec {found:?} does not match the {kind} regressor ({expected})")]
    SpecMismatch { kind: ModelKind, expected: String, found: Vec<usize> },
    #[error("multimodal training and inference need a prior table")]
    MissingPriors,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unimodal,
    Multimodal,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Unimodal => "unimodal",
            ModelKind::Multimodal => "multimodal",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "unimodal" => Some(ModelKind::Unimodal),
            "multimodal" => Some(ModelKind::Multimodal),
            _ => None,
        }
    }

    pub fn input_size(self) -> usize {
        match self {
            ModelKind::Unimodal => EMBEDDING_DIM,
            ModelKind::Multimodal => FUSED_DIM,
        }
    }

    pub fn default_spec(self) -> MlpSpec {
        let hidden: &[usize] = match self {
            ModelKind::Unimodal => &UNIMODAL_HIDDEN,
            ModelKind::Multimodal => &MULTIMODAL_HIDDEN,
        };
        MlpSpec::with_hidden(self.input_size(), hidden, 2).expect("static spec")
    }

    /// Input width and the two-output head; hidden widths are free.
    pub fn check_spec(self, spec: &MlpSpec) -> Result<(), FusionError> {
        if spec.input_size() != self.input_size() || spec.output_size() != 2 {
            return Err(FusionError::SpecMismatch {
                kind: self,
                expected: format!("{} inputs, 2 outputs", self.input_size()),
                found: spec.sizes().to_vec(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub age: f32,
    pub leaf_count: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub age: f32,
    pub leaf_count: f32,
}

/// The mean visual embedding of one level group with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSample {
    pub key: GroupKey,
    pub visual: Vec<f32>,
    pub view_count: usize,
    pub targets: Targets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelSourceKind {
    Metadata,
    Regressor,
}

/// Where the level used to pick a text prior comes from.
#[derive(Debug, Clone, Copy)]
pub enum LevelSource<'a> {
    Metadata,
    Regressor(&'a Mlp<f32>),
}

impl LevelSource<'_> {
    pub fn kind(&self) -> LevelSourceKind {
        match self {
            LevelSource::Metadata => LevelSourceKind::Metadata,
            LevelSource::Regressor(_) => LevelSourceKind::Regressor,
        }
    }
}

/// The 1024-d fused input: visual mean first, text prior second.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSample {
    pub fused: Vec<f32>,
    pub level_used: u8,
    pub level_source: LevelSourceKind,
}

impl FusedSample {
    pub fn visual(&self) -> &[f32] {
        &self.fused[..EMBEDDING_DIM]
    }

    pub fn text(&self) -> &[f32] {
        &self.fused[EMBEDDING_DIM..]
    }
}

fn check_views(views: &[&[f32]]) -> Result<usize, FusionError> {
    let first = views.first().ok_or(FusionError::EmptyViews)?;
    let dim = first.len();
    for (index, v) in views.iter().enumerate() {
        if v.len() != dim {
            return Err(FusionError::MixedDimensions {
                index,
                expected: dim,
                found: v.len(),
            });
        }
    }
    Ok(dim)
}

/// Element-wise mean over the given views, summed in list order (in `f64`)
/// and divided by the number of views actually present.
pub fn aggregate_views(views: &[&[f32]]) -> Result<Vec<f32>, FusionError> {
    let dim = check_views(views)?;
    let mut acc = vec![0.0f64; dim];
    for v in views {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += x as f64;
        }
    }
    let n = views.len() as f64;
    Ok(acc.into_iter().map(|s| (s / n) as f32).collect())
}

/// [`aggregate_views`] after sorting by angle, so the result does not depend on
/// the order the views arrive in.
pub fn aggregate_views_canonical(views: &[(u8, &[f32])]) -> Result<Vec<f32>, FusionError> {
    let mut sorted: Vec<(u8, &[f32])> = views.to_vec();
    sorted.sort_by_key(|(angle, _)| *angle);
    let ordered: Vec<&[f32]> = sorted.into_iter().map(|(_, v)| v).collect();
    aggregate_views(&ordered)
}

/// Concatenates a visual embedding with a unit-norm text prior.
pub fn fuse(visual: &[f32], text_prior: &[f32]) -> Result<Vec<f32>, FusionError> {
    if visual.len() != EMBEDDING_DIM {
        return Err(FusionError::DimensionMismatch {
            what: "visual embedding",
            expected: EMBEDDING_DIM,
            found: visual.len(),
        });
    }
    if text_prior.len() != EMBEDDING_DIM {
        return Err(FusionError::DimensionMismatch {
            what: "text prior",
            expected: EMBEDDING_DIM,
            found: text_prior.len(),
        });
    }
    let norm = text_prior.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(FusionError::UnnormalizedPrior(norm));
    }
    let mut out = Vec::with_capacity(FUSED_DIM);
    out.extend_from_slice(visual);
    out.extend_from_slice(text_prior);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeLoss {
    pub total: f64,
    pub age: f64,
    pub leaf_count: f64,
}

/// `MSE(age) + MSE(leaf_count)` with both components.
pub fn composite_loss(preds: &[Prediction], targets: &[Targets]) -> Result<CompositeLoss, FusionError> {
    if preds.len() != targets.len() {
        return Err(FusionError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(FusionError::Nn(NnError::Empty));
    }
    let p = Array2::from_shape_fn((preds.len(), 2), |(i, j)| {
        (if j == 0 { preds[i].age } else { preds[i].leaf_count }) as f64
    });
    let t = Array2::from_shape_fn((targets.len(), 2), |(i, j)| {
        (if j == 0 { targets[i].age } else { targets[i].leaf_count }) as f64
    });
    let (v, _) = Loss::PerOutputMse.evaluate(p.view(), t.view())?;
    Ok(CompositeLoss {
        total: v.total,
        age: v.per_output[0],
        leaf_count: v.per_output[1],
    })
}

fn to_prediction(out: ArrayView1<f32>) -> Prediction {
    Prediction {
        age: out[0],
        leaf_count: out[1],
    }
}

/// Unimodal prediction for one image embedding.
pub fn predict_unimodal(model: &Mlp<f32>, embedding: &[f32]) -> Result<Prediction, FusionError> {
    ModelKind::Unimodal.check_spec(model.spec())?;
    let out = model.predict(embedding)?;
    Ok(Prediction {
        age: out[0],
        leaf_count: out[1],
    })
}

/// Unimodal prediction for a level group: every view is predicted
/// independently and the per-view predictions are averaged in view order.
pub fn predict_unimodal_views(model: &Mlp<f32>, views: &[&[f32]]) -> Result<Prediction, FusionError> {
    ModelKind::Unimodal.check_spec(model.spec())?;
    let dim = check_views(views)?;
    if dim != EMBEDDING_DIM {
        return Err(FusionError::DimensionMismatch {
            what: "image embedding",
            expected: EMBEDDING_DIM,
            found: dim,
        });
    }
    let mut x = Array2::zeros((views.len(), EMBEDDING_DIM));
    for (i, v) in views.iter().enumerate() {
        x.row_mut(i).assign(&ArrayView1::from(*v));
    }
    let out = model.predict_batch(x.view())?;
    let (mut age, mut leaf) = (0.0f64, 0.0f64);
    for row in out.rows() {
        age += row[0] as f64;
        leaf += row[1] as f64;
    }
    let n = views.len() as f64;
    Ok(Prediction {
        age: (age / n) as f32,
        leaf_count: (leaf / n) as f32,
    })
}

/// Level-aware prediction from an arbitrary subset of a group's views.
///
/// `metadata_level` is used when `source` is [`LevelSource::Metadata`];
/// otherwise the regressor's quantized estimate on the view mean is used.
pub fn predict_multimodal_views(
    model: &Mlp<f32>,
    metadata_level: u8,
    views: &[&[f32]],
    priors: &PriorTable,
    source: LevelSource<'_>,
) -> Result<(Prediction, FusedSample), FusionError> {
    ModelKind::Multimodal.check_spec(model.spec())?;
    let visual = aggregate_views(views)?;
    let level = match source {
        LevelSource::Metadata => metadata_level,
        LevelSource::Regressor(r) => predict_level(r, &visual)?.quantized,
    };
    let fused = fuse(&visual, priors.lookup(level)?)?;
    let out = model.predict(&fused)?;
    let sample = FusedSample {
        fused,
        level_used: level,
        level_source: source.kind(),
    };
    Ok((
        Prediction {
            age: out[0],
            leaf_count: out[1],
        },
        sample,
    ))
}

/// Level-aware prediction for a whole group.
pub fn predict_multimodal(
    model: &Mlp<f32>,
    group: &LevelGroup,
    cache: &EmbeddingCache,
    priors: &PriorTable,
    source: LevelSource<'_>,
) -> Result<(Prediction, FusedSample), FusionError> {
    predict_multimodal_views(model, group.key.level, &group.views(cache), priors, source)
}

/// The views of one (possibly partial) level group.
#[derive(Debug, Clone)]
pub struct GroupViews<'a> {
    pub key: &'a GroupKey,
    pub views: Vec<&'a [f32]>,
}

/// Anything that maps level groups to predictions, one per group in order.
///
/// Implementations run every group through one batched forward pass, so two
/// calls with the same groups in the same order give bit-identical results.
pub trait GroupPredictor: Sync {
    fn predict_groups(&self, groups: &[GroupViews<'_>]) -> Result<Vec<Prediction>, FusionError>;
}

fn stack_rows(rows: &[&[f32]], dim: usize, what: &'static str) -> Result<Array2<f32>, FusionError> {
    let mut x = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(FusionError::DimensionMismatch {
                what,
                expected: dim,
                found: r.len(),
            });
        }
        x.row_mut(i).assign(&ArrayView1::from(*r));
    }
    Ok(x)
}

pub struct UnimodalPredictor<'a> {
    pub model: &'a Mlp<f32>,
}

impl GroupPredictor for UnimodalPredictor<'_> {
    /// Every view is predicted independently; a group's prediction is the
    /// mean of its views' predictions, accumulated in view order.
    fn predict_groups(&self, groups: &[GroupViews<'_>]) -> Result<Vec<Prediction>, FusionError> {
        ModelKind::Unimodal.check_spec(self.model.spec())?;
        let mut rows = Vec::new();
        for g in groups {
            if g.views.is_empty() {
                return Err(FusionError::EmptyViews);
            }
            rows.extend(g.views.iter().copied());
        }
        let out = self.model.predict_batch(stack_rows(&rows, EMBEDDING_DIM, "image embedding")?.view())?;
        let mut next = 0;
        Ok(groups
            .iter()
            .map(|g| {
                let (mut age, mut leaf) = (0.0f64, 0.0f64);
                for row in out.rows().into_iter().skip(next).take(g.views.len()) {
                    age += row[0] as f64;
                    leaf += row[1] as f64;
                }
                next += g.views.len();
                let n = g.views.len() as f64;
                Prediction {
                    age: (age / n) as f32,
                    leaf_count: (leaf / n) as f32,
                }
            })
            .collect())
    }
}

pub struct MultimodalPredictor<'a> {
    pub model: &'a Mlp<f32>,
    pub priors: &'a PriorTable,
    pub level_source: LevelSource<'a>,
}

impl MultimodalPredictor<'_> {
    /// The fused input of one group, with the level that selected its prior.
    pub fn fused_sample(&self, group: &GroupViews<'_>) -> Result<FusedSample, FusionError> {
        let visual = aggregate_views(&group.views)?;
        let level = match self.level_source {
            LevelSource::Metadata => group.key.level,
            LevelSource::Regressor(r) => predict_level(r, &visual)?.quantized,
        };
        Ok(FusedSample {
            fused: fuse(&visual, self.priors.lookup(level)?)?,
            level_used: level,
            level_source: self.level_source.kind(),
        })
    }
}

impl GroupPredictor for MultimodalPredictor<'_> {
    fn predict_groups(&self, groups: &[GroupViews<'_>]) -> Result<Vec<Prediction>, FusionError> {
        ModelKind::Multimodal.check_spec(self.model.spec())?;
        let samples = groups.iter().map(|g| self.fused_sample(g)).collect::<Result<Vec<_>, _>>()?;
        let rows: Vec<&[f32]> = samples.iter().map(|s| &s.fused[..]).collect();
        predict_matrix(self.model, stack_rows(&rows, FUSED_DIM, "fused input")?.view())
    }
}

/// Mean embedding and targets for each group.
pub fn aggregate_groups(cache: &EmbeddingCache, groups: &[LevelGroup]) -> Result<Vec<AggregatedSample>, FusionError> {
    groups
        .iter()
        .map(|g| {
            let (age, leaf_count) = g.targets(cache);
            Ok(AggregatedSample {
                key: g.key.clone(),
                visual: aggregate_views(&g.views(cache))?,
                view_count: g.view_count(),
                targets: Targets { age, leaf_count },
            })
        })
        .collect()
}

/// Training data for [`train_model`]; the variant selects the regressor.
pub enum TrainingSet<'a> {
    /// Individual images (unimodal): indices into `cache.records`.
    Images { cache: &'a EmbeddingCache, records: &'a [usize] },
    /// Level groups (multimodal), fused with the prior of their metadata level.
    Groups(&'a [AggregatedSample]),
}

impl TrainingSet<'_> {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainingSet::Images { .. } => ModelKind::Unimodal,
            TrainingSet::Groups(_) => ModelKind::Multimodal,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub model: Mlp<f32>,
    pub history: Vec<EpochLoss>,
}

/// Builds the input and target matrices for a training set.
pub fn training_matrices(
    set: &TrainingSet<'_>,
    priors: Option<&PriorTable>,
) -> Result<(Array2<f32>, Array2<f32>), FusionError> {
    match set {
        TrainingSet::Images { cache, records } => {
            let mut x = Array2::zeros((records.len(), EMBEDDING_DIM));
            let mut y = Array2::zeros((records.len(), 2));
            for (i, &r) in records.iter().enumerate() {
                let rec = &cache.records[r];
                x.row_mut(i).assign(&ArrayView1::from(cache.embedding(rec)));
                y[[i, 0]] = rec.day as f32;
                y[[i, 1]] = rec.leaf_count as f32;
            }
            Ok((x, y))
        }
        TrainingSet::Groups(samples) => {
            let priors = priors.ok_or(FusionError::MissingPriors)?;
            let mut x = Array2::zeros((samples.len(), FUSED_DIM));
            let mut y = Array2::zeros((samples.len(), 2));
            for (i, s) in samples.iter().enumerate() {
                let fused = fuse(&s.visual, priors.lookup(s.key.level)?)?;
                x.row_mut(i).assign(&ArrayView1::from(&fused[..]));
                y[[i, 0]] = s.targets.age;
                y[[i, 1]] = s.targets.leaf_count;
            }
            Ok((x, y))
        }
    }
}

/// Trains the regressor selected by the training set with its default architecture.
pub fn train_model(
    set: &TrainingSet<'_>,
    priors: Option<&PriorTable>,
    config: &TrainConfig,
) -> Result<TrainedModel, FusionError> {
    train_model_with_spec(set, priors, config, &set.kind().default_spec())
}

pub fn train_model_with_spec(
    set: &TrainingSet<'_>,
    priors: Option<&PriorTable>,
    config: &TrainConfig,
    spec: &MlpSpec,
) -> Result<TrainedModel, FusionError> {
    let kind = set.kind();
    kind.check_spec(spec)?;
    let (x, y) = training_matrices(set, priors)?;
    if x.nrows() == 0 {
        return Err(FusionError::EmptyTrainingSet);
    }
    let (model, history) = fit(spec, x.view(), y.view(), Loss::PerOutputMse, config)?;
    Ok(TrainedModel { kind, model, history })
}

/// Predictions for a prepared input matrix (one row per sample).
pub fn predict_matrix(model: &Mlp<f32>, x: ArrayView2<f32>) -> Result<Vec<Prediction>, FusionError> {
    let out = model.predict_batch(x)?;
    Ok(out.rows().into_iter().map(to_prediction).collect())
}
