use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::Serialize;

use phenofuse::codec::{atomic_write, with_suffix};
use phenofuse::config::{ConfigError, RunConfig};
use phenofuse::eval::{
    emit_curve, emit_report, evaluate, parse_hold_out, read_curve, read_report, render_curve, render_report,
    robustness_gain, sensitivity_sweep, split_by_plant, DegradationSummary, EvalError, ReportFormat, SensitivityCurve,
};
use phenofuse::fusion::{
    aggregate_groups, aggregate_views, train_model, GroupPredictor, LevelSource, ModelKind, MultimodalPredictor,
    TrainConfig, TrainingSet, UnimodalPredictor,
};
use phenofuse::nn::{load_checkpoint, save_checkpoint, EpochLoss, Mlp};
use phenofuse::prior::{load_priors, predict_level, train_level_regressor, LevelRegressorConfig, PriorTable, LEVEL_HIDDEN};
use phenofuse::store::{group_by_level, read_cache, validate_cache, write_metadata, Crop, EmbeddingCache, StoreError};
use phenofuse::synth::{generate_synthetic_cache, synthetic_priors, SynthSpec};

use crate::{Cli, Command, ModelArgs, TrainFlags};

/// Relative output paths are resolved against this directory when it is set.
pub const OUTPUT_ROOT_ENV: &str = "PHENOFUSE_OUTPUT_ROOT";

pub const DEFAULT_PERCENTAGES: [f64; 5] = [0.0, 25.0, 50.0, 75.0, 95.8];
pub const DEFAULT_TRIALS: usize = 5;
const SYNTH_DEFAULT_SEED: u64 = 7;
const LEVEL_TAG: &str = "level";

/// A bad flag, missing argument or failed validation (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 1 for usage and validation failures, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(ee) = cause.downcast_ref::<EvalError>() {
            if matches!(
                ee,
                EvalError::BadHoldOut(_)
                    | EvalError::UnknownPlant { .. }
                    | EvalError::InvalidPercentages(_)
                    | EvalError::NoTrials
                    | EvalError::NoGroups
            ) {
                return 1;
            }
        }
        if let Some(se) = cause.downcast_ref::<StoreError>() {
            return if matches!(se, StoreError::Io { .. }) { 2 } else { 1 };
        }
    }
    2
}

pub fn run(cli: Cli) -> Result<u8> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut flags = RunConfig {
        seed: cli.seed,
        ..Default::default()
    };
    match &cli.command {
        Command::ValidateCache(a) => {
            flags.cache = Some(a.cache.clone());
        }
        Command::Synth(a) => {
            flags.out = a.out.clone();
        }
        Command::TrainLevel(a) => {
            flags.cache = a.cache.clone();
            flags.out = a.out.clone();
            flags.hold_out = non_empty(&a.hold_out);
            apply_train_flags(&mut flags, &a.train);
            flags.level_epochs = flags.epochs.take();
        }
        Command::Train(a) => {
            flags.mode = a.mode.clone();
            flags.cache = a.cache.clone();
            flags.priors = a.priors.clone();
            flags.out = a.out.clone();
            flags.hold_out = non_empty(&a.hold_out);
            apply_train_flags(&mut flags, &a.train);
        }
        Command::Eval(a) => apply_model_flags(&mut flags, &a.model),
        Command::Sensitivity(a) => {
            apply_model_flags(&mut flags, &a.model);
            flags.trials = a.trials;
            if !a.percentages.is_empty() {
                flags.percentages = Some(a.percentages.clone());
            }
        }
        Command::Report(_) => {}
    }
    let resolved = file.overlay(flags);
    info!("resolved configuration: {}", serde_json::to_string(&resolved)?);

    match cli.command {
        Command::ValidateCache(_) => validate(&resolved),
        Command::Synth(a) => synth(&resolved, a),
        Command::TrainLevel(_) => train_level(&resolved),
        Command::Train(_) => train(&resolved),
        Command::Eval(_) => eval(&resolved),
        Command::Sensitivity(_) => sensitivity(&resolved),
        Command::Report(a) => report(a),
    }
}

fn non_empty(v: &[String]) -> Option<Vec<String>> {
    (!v.is_empty()).then(|| v.to_vec())
}

fn apply_train_flags(flags: &mut RunConfig, t: &TrainFlags) {
    flags.lr = t.lr;
    flags.batch_size = t.batch_size;
    flags.epochs = t.epochs;
    flags.shuffle = t.shuffle;
}

fn apply_model_flags(flags: &mut RunConfig, m: &ModelArgs) {
    flags.model = m.model.clone();
    flags.cache = m.cache.clone();
    flags.priors = m.priors.clone();
    flags.hold_out = non_empty(&m.hold_out);
    flags.level_source = m.level_source.clone();
    flags.level_model = m.level_model.clone();
    flags.out = m.out.clone();
}

fn need<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| usage(format!("missing required --{flag}")))
}

/// Applies the optional output-root override to a relative output path.
fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn train_config(c: &RunConfig, epochs: Option<usize>, default_epochs: usize) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: c.lr.unwrap_or(d.lr),
        batch_size: c.batch_size.unwrap_or(d.batch_size),
        epochs: epochs.unwrap_or(default_epochs),
        seed: c.seed.unwrap_or(d.seed),
        shuffle: c.shuffle.unwrap_or(d.shuffle),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn hold_out(c: &RunConfig) -> Result<BTreeMap<Crop, u32>> {
    Ok(parse_hold_out(c.hold_out.as_deref().unwrap_or(&[]))?)
}

fn load_cache(c: &RunConfig) -> Result<EmbeddingCache> {
    let path = need(&c.cache, "cache")?;
    let cache = read_cache(path).with_context(|| format!("loading cache {}", path.display()))?;
    info!("loaded {} records from {}", cache.len(), path.display());
    Ok(cache)
}

fn load_prior_table(path: &Path) -> Result<PriorTable> {
    let table = load_priors(path).with_context(|| format!("loading priors {}", path.display()))?;
    Ok(if table.is_normalized() { table } else { table.normalize()? })
}

/// Splits off the held-out plants; returns (train, test) caches.
fn split_cache(cache: &EmbeddingCache, held: &BTreeMap<Crop, u32>) -> Result<(EmbeddingCache, EmbeddingCache)> {
    let split = split_by_plant(&cache.records, held)?;
    Ok((cache.subset(&split.train), cache.subset(&split.test)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    model: &'a str,
    config: &'a RunConfig,
    train: &'a TrainConfig,
    history: &'a [EpochLoss],
    #[serde(skip_serializing_if = "Option::is_none")]
    held_out_level_accuracy: Option<f64>,
}

fn validate(c: &RunConfig) -> Result<u8> {
    let cache = load_cache(c)?;
    let report = validate_cache(&cache);
    for f in &report.findings {
        println!("{f}");
    }
    if report.passed() {
        println!("{} records, no findings", report.records);
        Ok(0)
    } else {
        println!("{} records, {} findings", report.records, report.findings.len());
        Ok(1)
    }
}

fn synth(c: &RunConfig, a: crate::SynthArgs) -> Result<u8> {
    let out = output_path(need(&c.out, "out")?);
    let crops = a
        .crops
        .iter()
        .map(|s| s.parse::<Crop>().map_err(|_| usage(format!("invalid crop `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec {
        crops,
        n_plants: a.plants,
        n_days: a.days,
        noise_std: a.noise,
        seed: c.seed.unwrap_or(SYNTH_DEFAULT_SEED),
        axis_aligned: a.axis_aligned,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let generated = generate_synthetic_cache(&spec)?;
    ensure_parent(&out)?;
    generated.cache.write(&out)?;
    let truth = with_suffix(&out, ".truth.csv");
    write_metadata(&generated.cache.records, &truth)?;
    synthetic_priors(spec.seed)?.write(&out)?;
    println!(
        "wrote {} records to {} (truth table {}, priors alongside)",
        generated.cache.len(),
        out.display(),
        truth.display()
    );
    Ok(0)
}

fn train_level(c: &RunConfig) -> Result<u8> {
    let out = output_path(need(&c.out, "out")?);
    let defaults = LevelRegressorConfig::default();
    let cfg = LevelRegressorConfig {
        train: train_config(c, c.level_epochs, defaults.train.epochs)?,
        hidden: LEVEL_HIDDEN.to_vec(),
    };
    let cache = load_cache(c)?;
    let (train, test) = split_cache(&cache, &hold_out(c)?)?;
    let (model, history) = train_level_regressor(&train, &cfg)?;
    let accuracy = if test.is_empty() {
        None
    } else {
        let groups = group_by_level(&test);
        let mut hits = 0usize;
        for g in &groups {
            let mean = aggregate_views(&g.views(&test))?;
            hits += usize::from(predict_level(&model, &mean)?.quantized == g.key.level);
        }
        let acc = hits as f64 / groups.len() as f64;
        println!("held-out quantized level accuracy: {acc:.4} over {} groups", groups.len());
        Some(acc)
    };
    ensure_parent(&out)?;
    save_checkpoint(&out, &model, None, Some(LEVEL_TAG))?;
    write_json(
        &with_suffix(&out, ".run.json"),
        &RunRecord {
            model: LEVEL_TAG,
            config: c,
            train: &cfg.train,
            history: &history,
            held_out_level_accuracy: accuracy,
        },
    )?;
    if let Some(last) = history.last() {
        println!("final training loss {:.6}", last.total);
    }
    Ok(0)
}

fn parse_mode(s: &str) -> Result<ModelKind> {
    ModelKind::from_tag(s).ok_or_else(|| usage(format!("unknown mode `{s}` (expected unimodal or multimodal)")))
}

fn train(c: &RunConfig) -> Result<u8> {
    let kind = parse_mode(need(&c.mode, "mode")?)?;
    let out = output_path(need(&c.out, "out")?);
    let cfg = train_config(c, c.epochs, TrainConfig::default().epochs)?;
    let priors = match kind {
        ModelKind::Multimodal => Some(load_prior_table(need(&c.priors, "priors")?)?),
        ModelKind::Unimodal => None,
    };
    let cache = load_cache(c)?;
    let (train, _) = split_cache(&cache, &hold_out(c)?)?;
    let trained = match kind {
        ModelKind::Unimodal => {
            let records: Vec<usize> = (0..train.len()).collect();
            train_model(&TrainingSet::Images { cache: &train, records: &records }, None, &cfg)?
        }
        ModelKind::Multimodal => {
            let samples = aggregate_groups(&train, &group_by_level(&train))?;
            train_model(&TrainingSet::Groups(&samples), priors.as_ref(), &cfg)?
        }
    };
    ensure_parent(&out)?;
    save_checkpoint(&out, &trained.model, None, Some(kind.tag()))?;
    if let Some(p) = &priors {
        // evaluation uses this copy unless told otherwise
        p.write(&out)?;
    }
    write_json(
        &with_suffix(&out, ".run.json"),
        &RunRecord {
            model: kind.tag(),
            config: c,
            train: &cfg,
            history: &trained.history,
            held_out_level_accuracy: None,
        },
    )?;
    if let Some(last) = trained.history.last() {
        println!("trained {} model; final loss {:.6}", kind, last.total);
    }
    Ok(0)
}

/// A loaded model ready to predict groups.
struct Loaded {
    kind: ModelKind,
    model: Mlp<f32>,
    priors: Option<PriorTable>,
    level_model: Option<Mlp<f32>>,
}

impl Loaded {
    fn predictor(&self) -> Box<dyn GroupPredictor + '_> {
        match self.kind {
            ModelKind::Unimodal => Box::new(UnimodalPredictor { model: &self.model }),
            ModelKind::Multimodal => Box::new(MultimodalPredictor {
                model: &self.model,
                priors: self.priors.as_ref().expect("multimodal models load priors"),
                level_source: match &self.level_model {
                    Some(m) => LevelSource::Regressor(m),
                    None => LevelSource::Metadata,
                },
            }),
        }
    }
}

fn load_model(c: &RunConfig) -> Result<Loaded> {
    let path = need(&c.model, "model")?;
    let ckpt = load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))?;
    let kind = match ckpt.tag.as_deref().and_then(ModelKind::from_tag) {
        Some(k) => k,
        None => [ModelKind::Unimodal, ModelKind::Multimodal]
            .into_iter()
            .find(|k| k.check_spec(ckpt.model.spec()).is_ok())
            .ok_or_else(|| usage(format!("{} is not a unimodal or multimodal model", path.display())))?,
    };
    kind.check_spec(ckpt.model.spec())?;
    let source = c.level_source.as_deref().unwrap_or("metadata");
    let level_model = match source {
        "metadata" => None,
        "regressor" => {
            let lp = need(&c.level_model, "level-model")?;
            let l = load_checkpoint(lp).with_context(|| format!("loading level model {}", lp.display()))?;
            Some(l.model)
        }
        other => return Err(usage(format!("unknown level source `{other}` (expected metadata or regressor)"))),
    };
    let priors = match kind {
        ModelKind::Multimodal => Some(load_prior_table(c.priors.as_deref().unwrap_or(path))?),
        ModelKind::Unimodal => None,
    };
    if kind == ModelKind::Unimodal && level_model.is_some() {
        return Err(usage("--level-source regressor applies to multimodal models only"));
    }
    Ok(Loaded {
        kind,
        model: ckpt.model,
        priors,
        level_model,
    })
}

/// The groups to evaluate: the held-out plants, or everything when none are given.
fn eval_cache(c: &RunConfig) -> Result<EmbeddingCache> {
    let cache = load_cache(c)?;
    let held = hold_out(c)?;
    if held.is_empty() {
        return Ok(cache);
    }
    Ok(split_cache(&cache, &held)?.1)
}

fn output_dir(c: &RunConfig) -> Result<PathBuf> {
    let dir = output_path(c.out.as_deref().unwrap_or(Path::new(".")));
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn eval(c: &RunConfig) -> Result<u8> {
    let loaded = load_model(c)?;
    let cache = eval_cache(c)?;
    let groups = group_by_level(&cache);
    let report = evaluate(
        loaded.predictor().as_ref(),
        &cache,
        &groups,
        loaded.kind.tag(),
        serde_json::to_value(c)?,
    )?;
    let dir = output_dir(c)?;
    for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
        emit_report(&report, f, &dir.join(format!("report.{}", f.extension())))?;
    }
    println!(
        "{} groups: mean MAE age {:.4}, leaf count {:.4}; reports in {}",
        groups.len(),
        report.mean_mae_age,
        report.mean_mae_leaf,
        dir.display()
    );
    Ok(0)
}

fn sensitivity(c: &RunConfig) -> Result<u8> {
    let loaded = load_model(c)?;
    let cache = eval_cache(c)?;
    let groups = group_by_level(&cache);
    let percentages = c.percentages.clone().unwrap_or_else(|| DEFAULT_PERCENTAGES.to_vec());
    let trials = c.trials.unwrap_or(DEFAULT_TRIALS);
    let mut curve = sensitivity_sweep(
        loaded.predictor().as_ref(),
        &cache,
        &groups,
        &percentages,
        trials,
        c.seed.unwrap_or(0),
    )?;
    curve.model = loaded.kind.tag().to_string();
    let dir = output_dir(c)?;
    for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
        emit_curve(&curve, f, &dir.join(format!("sensitivity.{}", f.extension())))?;
    }
    print!("{}", render_curve(&curve, ReportFormat::Markdown));
    Ok(0)
}

#[derive(Serialize)]
struct Comparison {
    baseline_model: String,
    candidate_model: String,
    baseline_degradation: DegradationSummary,
    candidate_degradation: DegradationSummary,
    robustness_gain: f64,
}

fn render_comparison(cmp: &Comparison, format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(cmp)? + "\n",
        ReportFormat::Csv => {
            let mut s = String::from("model,degradation_age,degradation_leaf,degradation_mean\n");
            for (m, d) in [
                (&cmp.baseline_model, &cmp.baseline_degradation),
                (&cmp.candidate_model, &cmp.candidate_degradation),
            ] {
                s += &format!("{m},{},{},{}\n", d.age, d.leaf, d.mean);
            }
            s + &format!("robustness_gain,,,{}\n", cmp.robustness_gain)
        }
        ReportFormat::Markdown => {
            let mut s = String::from("| Model | Degradation Age (%) | Degradation Leaf Count (%) | Mean (%) |\n|---|---:|---:|---:|\n");
            for (m, d) in [
                (&cmp.baseline_model, &cmp.baseline_degradation),
                (&cmp.candidate_model, &cmp.candidate_degradation),
            ] {
                s += &format!("| {m} | {:.2} | {:.2} | {:.2} |\n", d.age, d.leaf, d.mean);
            }
            let direction = if cmp.robustness_gain >= 0.0 { "more" } else { "less" };
            s + &format!(
                "\n{} is {:.1}% {direction} robust than {}.\n",
                cmp.candidate_model,
                cmp.robustness_gain.abs(),
                cmp.baseline_model
            )
        }
    })
}

fn report(a: crate::ReportArgs) -> Result<u8> {
    let format: ReportFormat = a.format.parse().map_err(usage)?;
    let text = if let Some(base) = &a.baseline {
        let candidate = read_curve(&a.input).with_context(|| format!("reading curve {}", a.input.display()))?;
        let baseline = read_curve(base).with_context(|| format!("reading baseline {}", base.display()))?;
        let (bd, cd) = (degradation_of(&baseline)?, degradation_of(&candidate)?);
        let cmp = Comparison {
            baseline_model: baseline.model.clone(),
            candidate_model: candidate.model.clone(),
            baseline_degradation: bd,
            candidate_degradation: cd,
            robustness_gain: robustness_gain(bd.mean, cd.mean).with_context(|| {
                format!("baseline `{}` does not degrade, so a robustness gain is undefined", baseline.model)
            })?,
        };
        render_comparison(&cmp, format)?
    } else if let Ok(r) = read_report(&a.input) {
        render_report(&r, format)
    } else {
        let curve = read_curve(&a.input)
            .with_context(|| format!("{} is neither an evaluation report nor a sensitivity curve", a.input.display()))?;
        render_curve(&curve, format)
    };
    match a.out {
        Some(p) => {
            let p = output_path(&p);
            ensure_parent(&p)?;
            atomic_write(&p, text.as_bytes()).with_context(|| format!("cannot write {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(0)
}

fn degradation_of(curve: &SensitivityCurve) -> Result<DegradationSummary> {
    if curve.points.len() < 2 {
        return Err(usage(format!("curve for `{}` needs at least two points", curve.model)));
    }
    Ok(curve.degradation()?)
}
