//! Plant-held-out evaluation, error metrics, view-removal sweeps and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::atomic_write;
use crate::fusion::{FusionError, GroupPredictor, GroupViews, Prediction, Targets};
use crate::store::{Crop, EmbeddingCache, LevelGroup, ViewRecord};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("plant {plant} does not exist for crop {crop}")]
    UnknownPlant { crop: Crop, plant: u32 },
    #[error("hold-out spec `{0}` is not of the form crop:plant")]
    BadHoldOut(String),
    #[error("length mismatch: {preds} predictions, {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("metric over an empty set")]
    Empty,
    #[error("initial value must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("removal percentages must be strictly increasing within [0, 100): {0:?}")]
    InvalidPercentages(Vec<f64>),
    #[error("sweep needs at least one trial")]
    NoTrials,
    #[error("no groups to evaluate")]
    NoGroups,
    #[error("prediction failed: {0}")]
    Prediction(#[from] FusionError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse report: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Records split into train and test by holding out whole plants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSplit {
    pub held_out: BTreeMap<Crop, u32>,
    /// Indices into the record list.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Parses `crop:plant` hold-out specs.
pub fn parse_hold_out(specs: &[String]) -> Result<BTreeMap<Crop, u32>, EvalError> {
    let mut out = BTreeMap::new();
    for s in specs {
        let (crop, plant) = s.split_once(':').ok_or_else(|| EvalError::BadHoldOut(s.clone()))?;
        let crop: Crop = crop.parse().map_err(|_| EvalError::BadHoldOut(s.clone()))?;
        let plant: u32 = plant.trim().parse().map_err(|_| EvalError::BadHoldOut(s.clone()))?;
        out.insert(crop, plant);
    }
    Ok(out)
}

/// Holds out, per crop, every record of one plant. Crops without an entry go
/// entirely to training.
pub fn split_by_plant(records: &[ViewRecord], held_out: &BTreeMap<Crop, u32>) -> Result<PlantSplit, EvalError> {
    let present: BTreeSet<(&Crop, u32)> = records.iter().map(|r| (&r.crop, r.plant_id)).collect();
    for (crop, &plant) in held_out {
        if !present.contains(&(crop, plant)) {
            return Err(EvalError::UnknownPlant {
                crop: crop.clone(),
                plant,
            });
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if held_out.get(&r.crop) == Some(&r.plant_id) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    Ok(PlantSplit {
        held_out: held_out.clone(),
        train,
        test,
    })
}

fn check_lengths(preds: &[f64], targets: &[f64]) -> Result<(), EvalError> {
    if preds.len() != targets.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, targets)?;
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, targets)?;
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len() as f64;
    Ok(mse.sqrt())
}

pub fn mean_over_crops(per_crop: &[f64]) -> Result<f64, EvalError> {
    if per_crop.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(per_crop.iter().sum::<f64>() / per_crop.len() as f64)
}

/// Fixed-point rendering used in tables.
pub fn format_dp(x: f64, dp: usize) -> String {
    format!("{x:.dp$}")
}

/// `(final − initial) / initial × 100`.
pub fn degradation(initial_mae: f64, final_mae: f64) -> Result<f64, EvalError> {
    if initial_mae.is_nan() || initial_mae <= 0.0 {
        return Err(EvalError::NonPositiveBaseline(initial_mae));
    }
    Ok((final_mae - initial_mae) / initial_mae * 100.0)
}

/// Relative reduction of the candidate's degradation versus the baseline's, in percent.
pub fn robustness_gain(baseline: f64, candidate: f64) -> Result<f64, EvalError> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(EvalError::NonPositiveBaseline(baseline));
    }
    Ok((baseline - candidate) / baseline * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropMetrics {
    pub crop: Crop,
    pub samples: usize,
    pub mae_age: f64,
    pub rmse_age: f64,
    pub mae_leaf: f64,
    pub rmse_leaf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// Resolved run configuration, echoed for provenance.
    pub config: serde_json::Value,
    pub crops: Vec<CropMetrics>,
    pub mean_mae_age: f64,
    pub mean_mae_leaf: f64,
}

/// A prediction for one evaluated group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub crop: Crop,
    pub prediction: Prediction,
    pub targets: Targets,
}

fn predict_groups<P: GroupPredictor + ?Sized>(
    predictor: &P,
    cache: &EmbeddingCache,
    groups: &[LevelGroup],
    mut select: impl FnMut(&LevelGroup) -> Vec<usize>,
) -> Result<Vec<GroupResult>, EvalError> {
    let inputs: Vec<GroupViews<'_>> = groups
        .iter()
        .map(|g| GroupViews {
            key: &g.key,
            views: select(g).into_iter().map(|i| cache.row(g.rows[i])).collect(),
        })
        .collect();
    let predictions = predictor.predict_groups(&inputs)?;
    Ok(groups
        .iter()
        .zip(predictions)
        .map(|(g, prediction)| {
            let (age, leaf_count) = g.targets(cache);
            GroupResult {
                crop: g.key.crop.clone(),
                prediction,
                targets: Targets { age, leaf_count },
            }
        })
        .collect())
}

/// Per-crop metrics pooled over all of that crop's groups, crops in sorted order.
pub fn crop_metrics(results: &[GroupResult]) -> Result<Vec<CropMetrics>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoGroups);
    }
    let mut by_crop: BTreeMap<&Crop, Vec<&GroupResult>> = BTreeMap::new();
    for r in results {
        by_crop.entry(&r.crop).or_default().push(r);
    }
    by_crop
        .into_iter()
        .map(|(crop, rs)| {
            let pa: Vec<f64> = rs.iter().map(|r| r.prediction.age as f64).collect();
            let ta: Vec<f64> = rs.iter().map(|r| r.targets.age as f64).collect();
            let pl: Vec<f64> = rs.iter().map(|r| r.prediction.leaf_count as f64).collect();
            let tl: Vec<f64> = rs.iter().map(|r| r.targets.leaf_count as f64).collect();
            Ok(CropMetrics {
                crop: crop.clone(),
                samples: rs.len(),
                mae_age: mae(&pa, &ta)?,
                rmse_age: rmse(&pa, &ta)?,
                mae_leaf: mae(&pl, &tl)?,
                rmse_leaf: rmse(&pl, &tl)?,
            })
        })
        .collect()
}

/// Group-level predictions using every view of every group.
pub fn predict_all<P: GroupPredictor + ?Sized>(
    predictor: &P,
    cache: &EmbeddingCache,
    groups: &[LevelGroup],
) -> Result<Vec<GroupResult>, EvalError> {
    predict_groups(predictor, cache, groups, |g| (0..g.view_count()).collect())
}

/// Full-view evaluation of `groups`; one sample per level group.
pub fn evaluate<P: GroupPredictor + ?Sized>(
    predictor: &P,
    cache: &EmbeddingCache,
    groups: &[LevelGroup],
    model: &str,
    config: serde_json::Value,
) -> Result<EvalReport, EvalError> {
    let crops = crop_metrics(&predict_all(predictor, cache, groups)?)?;
    let mean_mae_age = mean_over_crops(&crops.iter().map(|c| c.mae_age).collect::<Vec<_>>())?;
    let mean_mae_leaf = mean_over_crops(&crops.iter().map(|c| c.mae_leaf).collect::<Vec<_>>())?;
    Ok(EvalReport {
        model: model.to_string(),
        config,
        crops,
        mean_mae_age,
        mean_mae_leaf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub removal_percent: f64,
    /// Cross-crop mean MAE, averaged over trials.
    pub mae_age: f64,
    pub mae_leaf: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub model: String,
    pub points: Vec<SensitivityPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSummary {
    pub age: f64,
    pub leaf: f64,
    pub mean: f64,
}

impl SensitivityCurve {
    /// Degradation from the first (full-view) to the last (most-removed) point.
    pub fn degradation(&self) -> Result<DegradationSummary, EvalError> {
        let (first, last) = match (self.points.first(), self.points.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(EvalError::Empty),
        };
        let age = degradation(first.mae_age, last.mae_age)?;
        let leaf = degradation(first.mae_leaf, last.mae_leaf)?;
        Ok(DegradationSummary {
            age,
            leaf,
            mean: (age + leaf) / 2.0,
        })
    }
}

/// Views dropped from a group of `view_count` at `percent` removal. At least one view always remains.
pub fn views_removed(view_count: usize, percent: f64) -> usize {
    let removed = (percent / 100.0 * view_count as f64).round() as usize;
    removed.min(view_count.saturating_sub(1))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG seed for one (percentage, trial) cell of a sweep.
pub fn trial_seed(seed: u64, percent: f64, trial: usize) -> u64 {
    splitmix64(seed ^ splitmix64(percent.to_bits() ^ splitmix64(trial as u64)))
}

/// Indices of the views kept in a trial, in their original order.
pub fn retained_views(view_count: usize, percent: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let removed = views_removed(view_count, percent);
    if removed == 0 {
        return (0..view_count).collect();
    }
    let mut drop = rand::seq::index::sample(rng, view_count, removed).into_vec();
    drop.sort_unstable();
    let mut drop = drop.into_iter().peekable();
    (0..view_count)
        .filter(|i| {
            if drop.peek() == Some(i) {
                drop.next();
                false
            } else {
                true
            }
        })
        .collect()
}

/// MAE as a function of the share of views removed at inference time.
///
/// For each percentage and trial, every group independently loses
/// `round(p/100 · views)` randomly chosen views (never its last one) and is
/// predicted from the rest. The reported MAEs are cross-crop means, averaged
/// over trials.
pub fn sensitivity_sweep<P: GroupPredictor + ?Sized>(
    predictor: &P,
    cache: &EmbeddingCache,
    groups: &[LevelGroup],
    percentages: &[f64],
    trials: usize,
    seed: u64,
) -> Result<SensitivityCurve, EvalError> {
    if groups.is_empty() {
        return Err(EvalError::NoGroups);
    }
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let valid = percentages.iter().all(|p| (0.0..100.0).contains(p))
        && percentages.windows(2).all(|w| w[0] < w[1]);
    if !valid {
        return Err(EvalError::InvalidPercentages(percentages.to_vec()));
    }
    let mut points = Vec::with_capacity(percentages.len());
    for &p in percentages {
        // running mean: identical trials average to the exact same value
        let (mut age, mut leaf) = (0.0f64, 0.0f64);
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, p, trial));
            let results = predict_groups(predictor, cache, groups, |g| retained_views(g.view_count(), p, &mut rng))?;
            let crops = crop_metrics(&results)?;
            let a = mean_over_crops(&crops.iter().map(|c| c.mae_age).collect::<Vec<_>>())?;
            let l = mean_over_crops(&crops.iter().map(|c| c.mae_leaf).collect::<Vec<_>>())?;
            let k = (trial + 1) as f64;
            age += (a - age) / k;
            leaf += (l - leaf) / k;
        }
        points.push(SensitivityPoint {
            removal_percent: p,
            mae_age: age,
            mae_leaf: leaf,
            trials,
            seed,
        });
    }
    Ok(SensitivityCurve {
        model: String::new(),
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// Six significant digits, plain notation where reasonable.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if (-5..=15).contains(&magnitude) {
        let decimals = (5 - magnitude).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => to_json(report),
        ReportFormat::Csv => {
            let mut s = String::from("crop,samples,mae_age,rmse_age,mae_leaf,rmse_leaf\n");
            for c in &report.crops {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    c.crop,
                    c.samples,
                    sig6(c.mae_age),
                    sig6(c.rmse_age),
                    sig6(c.mae_leaf),
                    sig6(c.rmse_leaf)
                );
            }
            let _ = writeln!(s, "mean,,{},,{},", sig6(report.mean_mae_age), sig6(report.mean_mae_leaf));
            s
        }
        ReportFormat::Markdown => {
            let crops: Vec<String> = report.crops.iter().map(|c| capitalize(&c.crop.to_string())).collect();
            let mut s = String::new();
            let _ = writeln!(s, "## MAE\n");
            let mut header = String::from("| Model |");
            for task in ["Age", "Leaf Count"] {
                for c in &crops {
                    let _ = write!(header, " {task}: {c} |");
                }
                let _ = write!(header, " {task}: Mean |");
            }
            let _ = writeln!(s, "{header}");
            let cols = 2 * (crops.len() + 1);
            let _ = writeln!(s, "|---|{}", "---:|".repeat(cols));
            let mut row = format!("| {} |", report.model);
            for c in &report.crops {
                let _ = write!(row, " {} |", format_dp(c.mae_age, 2));
            }
            let _ = write!(row, " {} |", format_dp(report.mean_mae_age, 2));
            for c in &report.crops {
                let _ = write!(row, " {} |", format_dp(c.mae_leaf, 2));
            }
            let _ = write!(row, " {} |", format_dp(report.mean_mae_leaf, 2));
            let _ = writeln!(s, "{row}");

            let _ = writeln!(s, "\n## Per crop\n");
            let _ = writeln!(s, "| Crop | Samples | MAE Age | RMSE Age | MAE Leaf Count | RMSE Leaf Count |");
            let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|");
            for (c, name) in report.crops.iter().zip(&crops) {
                let _ = writeln!(
                    s,
                    "| {name} | {} | {} | {} | {} | {} |",
                    c.samples,
                    format_dp(c.mae_age, 2),
                    format_dp(c.rmse_age, 2),
                    format_dp(c.mae_leaf, 2),
                    format_dp(c.rmse_leaf, 2)
                );
            }
            s
        }
    }
}

pub fn render_curve(curve: &SensitivityCurve, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => to_json(curve),
        ReportFormat::Csv => {
            let mut s = String::from("removal_percent,mae_age,mae_leaf,trials,seed\n");
            for p in &curve.points {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    sig6(p.removal_percent),
                    sig6(p.mae_age),
                    sig6(p.mae_leaf),
                    p.trials,
                    p.seed
                );
            }
            s
        }
        ReportFormat::Markdown => {
            let mut s = String::from("| Removed (%) | MAE Age | MAE Leaf Count |\n|---:|---:|---:|\n");
            for p in &curve.points {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} |",
                    format_dp(p.removal_percent, 1),
                    format_dp(p.mae_age, 2),
                    format_dp(p.mae_leaf, 2)
                );
            }
            if let Ok(d) = curve.degradation() {
                let _ = writeln!(
                    s,
                    "\nDegradation: age {}%, leaf count {}%, mean {}%",
                    format_dp(d.age, 2),
                    format_dp(d.leaf, 2),
                    format_dp(d.mean, 2)
                );
            }
            s
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    atomic_write(path, text.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    write_text(path, &render_report(report, format))
}

pub fn emit_curve(curve: &SensitivityCurve, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    write_text(path, &render_curve(curve, format))
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let bytes = std::fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_curve(path: &Path) -> Result<SensitivityCurve, EvalError> {
    let bytes = std::fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}
