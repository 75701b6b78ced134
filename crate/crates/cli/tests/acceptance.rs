//! Acceptance gate: one PASS/FAIL line per criterion, then a single assertion
//! that all of them passed. Criteria run one after another so that their
//! wall-clock budgets are measured without contention.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phenofuse::eval::{evaluate, format_dp, mean_over_crops, robustness_gain, sensitivity_sweep, split_by_plant};
use phenofuse::fusion::{
    aggregate_groups, aggregate_views, aggregate_views_canonical, train_model, FusionError, GroupPredictor,
    GroupViews, LevelSource, MultimodalPredictor, Prediction, TrainConfig, TrainingSet,
};
use phenofuse::nn::{grad_check, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Loss, Mlp, MlpSpec};
use phenofuse::prior::load_priors;
use phenofuse::store::{group_by_level, read_cache, Crop, EmbeddingCache, LevelGroup};
use phenofuse::synth::{generate_synthetic_cache, synthetic_priors, SynthSpec};

use common::{run_ok, HOLD_OUT};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    check(
        elapsed < budget,
        format!("took {:.1} s, budget {:.0} s", elapsed.as_secs_f64(), budget.as_secs_f64()),
    )
}

fn random_spec(rng: &mut ChaCha8Rng) -> MlpSpec {
    let mut sizes = vec![rng.random_range(1..=32)];
    let depth = rng.random_range(0..=2);
    let caps = [64, 32];
    for cap in caps.iter().take(depth) {
        sizes.push(rng.random_range(1..=*cap));
    }
    sizes.push(2);
    MlpSpec::new(sizes).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut specs: Vec<MlpSpec> = vec![MlpSpec::new(vec![32, 64, 32, 2]).unwrap()];
    while specs.len() < 20 {
        specs.push(random_spec(&mut rng));
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for (i, spec) in specs.iter().enumerate() {
        let model = Mlp::init(spec, 100 + i as u64);
        let batch = rng.random_range(1..=8);
        let x = Array2::from_shape_simple_fn((batch, spec.input_size()), || rng.random_range(-1.0f32..1.0));
        let t = Array2::from_shape_simple_fn((batch, 2), || rng.random_range(-1.0f32..1.0));
        let r = grad_check(&model, x.view(), t.view(), Loss::PerOutputMse, 1e-3).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        skipped += r.skipped_at_kinks;
    }
    check(worst < 1e-4, format!("max relative error {worst:.3e} >= 1e-4"))?;
    check(checked > skipped, "every parameter sat at a ReLU kink")?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "20 networks up to [32,64,32,2], max relative error {worst:.2e}, {checked} parameters checked, {skipped} at kinks, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let n = rng.random_range(1..=24);
        let views: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..512).map(|_| rng.random_range(-10.0f32..10.0)).collect())
            .collect();
        let refs: Vec<&[f32]> = views.iter().map(|v| &v[..]).collect();
        let mut perm = refs.clone();
        perm.shuffle(&mut rng);
        let a = aggregate_views(&refs).map_err(|e| e.to_string())?;
        let b = aggregate_views(&perm).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
        let tagged: Vec<(u8, &[f32])> = refs.iter().enumerate().map(|(i, v)| (i as u8, *v)).collect();
        let mut tagged_perm = tagged.clone();
        tagged_perm.shuffle(&mut rng);
        let c = aggregate_views_canonical(&tagged).map_err(|e| e.to_string())?;
        let d = aggregate_views_canonical(&tagged_perm).map_err(|e| e.to_string())?;
        let same = c.iter().zip(&d).all(|(x, y)| x.to_bits() == y.to_bits());
        check(same, "canonical-order aggregation is not bit-exact under permutation")?;
    }
    check(worst <= 1e-5, format!("permutation changed a coordinate by {worst:.3e}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "100 view sets, max permutation difference {worst:.2e}, canonical mode bit-exact, {:.3} s",
        start.elapsed().as_secs_f64()
    ))
}

/// Closed-form ridge regression from group means (plus intercept) to both targets.
fn ridge_mae(train: &EmbeddingCache, test: &EmbeddingCache, lambda: f64) -> (f64, f64) {
    let design = |cache: &EmbeddingCache| {
        let samples = aggregate_groups(cache, &group_by_level(cache)).unwrap();
        let x = DMatrix::from_fn(samples.len(), 513, |i, j| if j == 512 { 1.0 } else { samples[i].visual[j] as f64 });
        let y = DMatrix::from_fn(samples.len(), 2, |i, j| {
            if j == 0 {
                samples[i].targets.age as f64
            } else {
                samples[i].targets.leaf_count as f64
            }
        });
        (x, y)
    };
    let (x, y) = design(train);
    let gram = x.transpose() * &x + DMatrix::identity(513, 513) * lambda;
    let w = gram.cholesky().expect("ridge system is positive definite").solve(&(x.transpose() * y));
    let (xt, yt) = design(test);
    let err = (xt * w - yt).abs();
    let n = err.nrows() as f64;
    let col_mean = |j: usize| DVector::from(err.column(j)).sum() / n;
    (col_mean(0), col_mean(1))
}

fn synthetic_split(spec: &SynthSpec) -> (EmbeddingCache, EmbeddingCache) {
    let cache = generate_synthetic_cache(spec).unwrap().cache;
    let held: BTreeMap<Crop, u32> = spec.crops.iter().map(|c| (c.clone(), spec.n_plants)).collect();
    let split = split_by_plant(&cache.records, &held).unwrap();
    (cache.subset(&split.train), cache.subset(&split.test))
}

/// Trained default multimodal model and its data, shared with criterion 5.
struct Criterion3 {
    model: Mlp,
    test: EmbeddingCache,
}

fn criterion_3(shared: &mut Option<Criterion3>) -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec::default();
    let (train, test) = synthetic_split(&spec);
    let (ridge_age, ridge_leaf) = ridge_mae(&train, &test, 1e-6);
    check(
        ridge_age < 0.1 && ridge_leaf < 0.1,
        format!("ridge oracle MAE age {ridge_age:.3e}, leaf {ridge_leaf:.3e}, not below 0.1"),
    )?;

    let priors = synthetic_priors(spec.seed).map_err(|e| e.to_string())?;
    let samples = aggregate_groups(&train, &group_by_level(&train)).map_err(|e| e.to_string())?;
    let trained = train_model(&TrainingSet::Groups(&samples), Some(&priors), &TrainConfig::default())
        .map_err(|e| e.to_string())?;
    let predictor = MultimodalPredictor {
        model: &trained.model,
        priors: &priors,
        level_source: LevelSource::Metadata,
    };
    let report = evaluate(&predictor, &test, &group_by_level(&test), "multimodal", serde_json::Value::Null)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    *shared = Some(Criterion3 {
        model: trained.model.clone(),
        test,
    });
    check(
        report.mean_mae_age < 0.5 && report.mean_mae_leaf < 0.5,
        format!(
            "held-out MAE age {:.4}, leaf {:.4}, not both below 0.5",
            report.mean_mae_age, report.mean_mae_leaf
        ),
    )?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "ridge oracle MAE age {ridge_age:.1e} / leaf {ridge_leaf:.1e}; default multimodal training held-out MAE age {:.4} / leaf {:.4}, {:.1} s",
        report.mean_mae_age,
        report.mean_mae_leaf,
        elapsed.as_secs_f64()
    ))
}

fn criterion_4() -> Outcome {
    let age = format_dp(mean_over_crops(&[4.48, 2.44, 4.80]).map_err(|e| e.to_string())?, 2);
    let leaf = format_dp(mean_over_crops(&[4.81, 1.19, 3.23]).map_err(|e| e.to_string())?, 2);
    let gain = format_dp(robustness_gain(21.93, 19.10).map_err(|e| e.to_string())?, 1);
    check(age == "3.91", format!("age mean {age}, expected 3.91"))?;
    check(leaf == "3.08", format!("leaf mean {leaf}, expected 3.08"))?;
    check(gain == "12.9", format!("robustness gain {gain}, expected 12.9"))?;
    Ok(format!("means {age} and {leaf}, robustness gain {gain}%"))
}

/// Delegates to an inner predictor while recording how many views each group received.
struct Recording<'a, P> {
    inner: &'a P,
    counts: Mutex<Vec<usize>>,
}

impl<P: GroupPredictor> GroupPredictor for Recording<'_, P> {
    fn predict_groups(&self, groups: &[GroupViews<'_>]) -> Result<Vec<Prediction>, FusionError> {
        self.counts.lock().unwrap().extend(groups.iter().map(|g| g.views.len()));
        self.inner.predict_groups(groups)
    }
}

fn criterion_5(shared: &Option<Criterion3>) -> Outcome {
    let Criterion3 { model, test } = shared.as_ref().ok_or("criterion 3 produced no model")?;
    let start = Instant::now();
    let priors = synthetic_priors(SynthSpec::default().seed).map_err(|e| e.to_string())?;
    let predictor = MultimodalPredictor {
        model,
        priors: &priors,
        level_source: LevelSource::Metadata,
    };
    let groups: Vec<LevelGroup> = group_by_level(test);
    check(groups.iter().all(|g| g.view_count() == 24), "synthetic groups should have 24 views")?;
    let percentages = [0.0, 25.0, 50.0, 75.0, 95.8];
    let report =
        evaluate(&predictor, test, &groups, "multimodal", serde_json::Value::Null).map_err(|e| e.to_string())?;
    let curve = sensitivity_sweep(&predictor, test, &groups, &percentages, 5, 7).map_err(|e| e.to_string())?;
    let first = &curve.points[0];
    check(
        first.mae_age.to_bits() == report.mean_mae_age.to_bits()
            && first.mae_leaf.to_bits() == report.mean_mae_leaf.to_bits(),
        format!(
            "0% point ({}, {}) differs from evaluation ({}, {})",
            first.mae_age, first.mae_leaf, report.mean_mae_age, report.mean_mae_leaf
        ),
    )?;

    let recorder = Recording {
        inner: &predictor,
        counts: Mutex::new(Vec::new()),
    };
    sensitivity_sweep(&recorder, test, &groups, &[95.8], 5, 7).map_err(|e| e.to_string())?;
    let counts = recorder.counts.into_inner().unwrap();
    check(
        counts.len() == 5 * groups.len() && counts.iter().all(|&c| c == 1),
        "95.8% removal did not leave exactly one view per group",
    )?;

    let again = sensitivity_sweep(&predictor, test, &groups, &percentages, 5, 7).map_err(|e| e.to_string())?;
    check(again == curve, "rerun with the same seed changed the curve")?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "0% point equals evaluation bit-exactly, 95.8% keeps 1 of 24 views in all {} group trials, reruns identical, {:.1} s",
        counts.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    run_ok(d, &["synth", "--axis-aligned", "--out", "sa"])?;
    run_ok(d, &["train-level", "--cache", "sa", "--out", "lv", "--hold-out", HOLD_OUT])?;
    let run: serde_json::Value =
        serde_json::from_slice(&read(&d.join("lv.run.json"))?).map_err(|e| e.to_string())?;
    let accuracy = run["held_out_level_accuracy"].as_f64().ok_or("no level accuracy recorded")?;
    check(accuracy == 1.0, format!("level regressor held-out accuracy {accuracy}, expected 1"))?;
    run_ok(d, &["train", "--mode", "multimodal", "--cache", "sa", "--priors", "sa", "--out", "m", "--hold-out", HOLD_OUT])?;
    run_ok(d, &["eval", "--model", "m", "--cache", "sa", "--hold-out", HOLD_OUT, "--out", "meta"])?;
    run_ok(
        d,
        &[
            "eval", "--model", "m", "--cache", "sa", "--hold-out", HOLD_OUT, "--out", "reg", "--level-source",
            "regressor", "--level-model", "lv",
        ],
    )?;
    for f in ["report.csv", "report.md"] {
        check(read(&d.join("meta").join(f))? == read(&d.join("reg").join(f))?, format!("{f} differs"))?;
    }
    let metrics = |sub: &str| -> Result<serde_json::Value, String> {
        let mut v: serde_json::Value =
            serde_json::from_slice(&read(&d.join(sub).join("report.json"))?).map_err(|e| e.to_string())?;
        v.as_object_mut().ok_or("report is not an object")?.remove("config");
        Ok(v)
    };
    check(metrics("meta")? == metrics("reg")?, "report.json metrics differ")?;
    Ok("level regressor 100% held-out accuracy; regressor-sourced evaluation identical to metadata-sourced".into())
}

fn library_round_trips(dir: &Path) -> Result<(), String> {
    let spec = SynthSpec {
        crops: vec![Crop::Wheat],
        n_plants: 2,
        n_days: 2,
        noise_std: 0.3,
        ..SynthSpec::default()
    };
    let cache = generate_synthetic_cache(&spec).map_err(|e| e.to_string())?.cache;
    cache.write(&dir.join("c")).map_err(|e| e.to_string())?;
    let back = read_cache(&dir.join("c")).map_err(|e| e.to_string())?;
    let bits = |c: &EmbeddingCache| c.matrix.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(back.records == cache.records && bits(&back) == bits(&cache), "cache round trip not bit-exact")?;

    let model = Mlp::init(&MlpSpec::new(vec![6, 5, 2]).unwrap(), 8);
    let optimizer = AdamState::new(&model, AdamConfig::default());
    save_checkpoint(&dir.join("k"), &model, Some(&optimizer), Some("unimodal")).map_err(|e| e.to_string())?;
    let ck = load_checkpoint(&dir.join("k")).map_err(|e| e.to_string())?;
    check(ck.model == model && ck.optimizer.as_ref() == Some(&optimizer), "checkpoint round trip not exact")?;

    let priors = synthetic_priors(4).map_err(|e| e.to_string())?;
    priors.write(&dir.join("p")).map_err(|e| e.to_string())?;
    let pb = load_priors(&dir.join("p")).map_err(|e| e.to_string())?;
    check(pb == priors, "prior round trip not exact")?;
    Ok(())
}

fn pipeline(d: &Path, seed: &str) -> Result<(), String> {
    run_ok(d, &["--seed", seed, "synth", "--plants", "2", "--days", "4", "--noise", "0.2", "--out", "s"])?;
    let hold = "mustard:2,radish:2,wheat:2";
    run_ok(d, &["--seed", seed, "train-level", "--cache", "s", "--out", "lv", "--hold-out", hold, "--epochs", "3"])?;
    for mode in ["unimodal", "multimodal"] {
        run_ok(
            d,
            &[
                "--seed", seed, "train", "--mode", mode, "--cache", "s", "--priors", "s", "--out", mode, "--hold-out", hold,
                "--epochs", "2",
            ],
        )?;
    }
    run_ok(d, &["--seed", seed, "eval", "--model", "multimodal", "--cache", "s", "--hold-out", hold, "--out", "ev"])?;
    run_ok(
        d,
        &["--seed", seed, "sensitivity", "--model", "unimodal", "--cache", "s", "--hold-out", hold, "--out", "sw", "--trials", "2"],
    )?;
    Ok(())
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b, &c] {
        std::fs::create_dir(d).map_err(|e| e.to_string())?;
    }
    pipeline(&a, "5")?;
    pipeline(&b, "5")?;
    pipeline(&c, "6")?;
    let (fa, fb, fc) = (files(&a), files(&b), files(&c));
    check(fa.len() > 20, format!("pipeline wrote only {} files", fa.len()))?;
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        check(na == nb && ba == bb, format!("{na} differs between identical runs"))?;
    }
    check(fa.len() == fb.len(), "runs wrote different file sets")?;
    let ckpt = |fs: &[(String, Vec<u8>)]| fs.iter().find(|(n, _)| n == "multimodal.ckpt.f32bin").map(|(_, b)| b.clone());
    check(ckpt(&fa) != ckpt(&fc), "a different seed produced the same checkpoint")?;

    let rt = tempfile::tempdir().map_err(|e| e.to_string())?;
    library_round_trips(rt.path())?;
    Ok(format!(
        "{} output files byte-identical across reruns; cache, checkpoint and prior round trips bit-exact",
        fa.len()
    ))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    run_ok(d, &["synth", "--seed", "7", "--noise", "0.5", "--out", "s"])?;
    run_ok(d, &["validate-cache", "s"])?;
    run_ok(d, &["train-level", "--cache", "s", "--out", "lv", "--hold-out", HOLD_OUT])?;
    for mode in ["unimodal", "multimodal"] {
        run_ok(d, &["train", "--mode", mode, "--cache", "s", "--priors", "s", "--out", mode, "--hold-out", HOLD_OUT])?;
        run_ok(d, &["eval", "--model", mode, "--cache", "s", "--hold-out", HOLD_OUT, "--out", &format!("eval-{mode}")])?;
        run_ok(
            d,
            &["sensitivity", "--model", mode, "--cache", "s", "--hold-out", HOLD_OUT, "--out", &format!("sens-{mode}")],
        )?;
    }
    run_ok(
        d,
        &[
            "eval", "--model", "multimodal", "--cache", "s", "--hold-out", HOLD_OUT, "--out", "eval-regressor",
            "--level-source", "regressor", "--level-model", "lv",
        ],
    )?;
    run_ok(d, &["report", "eval-multimodal/report.json", "--format", "md", "--out", "table.md"])?;
    let summary = run_ok(
        d,
        &["report", "sens-multimodal/sensitivity.json", "--baseline", "sens-unimodal/sensitivity.json"],
    )?;
    for f in [
        "eval-multimodal/report.json",
        "eval-unimodal/report.csv",
        "sens-multimodal/sensitivity.csv",
        "sens-unimodal/sensitivity.json",
        "table.md",
    ] {
        check(d.join(f).is_file(), format!("{f} missing"))?;
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    let gain_line = summary.lines().last().unwrap_or("").trim().to_string();
    Ok(format!("full pipeline exit 0 in {:.1} s ({gain_line})", start.elapsed().as_secs_f64()))
}

#[test]
fn acceptance() {
    let mut shared = None;
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", criterion_1()),
        (2, "aggregation invariance", criterion_2()),
        (3, "synthetic oracle convergence", criterion_3(&mut shared)),
        (4, "reporting arithmetic", criterion_4()),
        (5, "sensitivity protocol", criterion_5(&shared)),
        (6, "level-path equivalence", criterion_6()),
        (7, "determinism and persistence", criterion_7()),
        (8, "end-to-end CLI smoke", criterion_8()),
    ];
    // written to the raw handle so the lines show even when the harness captures output
    let mut stdout = std::io::stdout().lock();
    let mut failed = Vec::new();
    for (n, name, outcome) in &results {
        let line = match outcome {
            Ok(detail) => format!("[PASS] criterion {n} {name}: {detail}"),
            Err(why) => {
                failed.push(*n);
                format!("[FAIL] criterion {n} {name}: {why}")
            }
        };
        writeln!(stdout, "{line}").unwrap();
    }
    drop(stdout);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
