use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamConfig, AdamState, Loss, Mlp, MlpSpec, NnError};

/// Mini-batch training settings. The last partial batch of an epoch is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(NnError::InvalidConfig(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(NnError::InvalidConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sample-weighted mean loss over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub per_output: Vec<f64>,
}

/// Initializes a model from `config.seed` and trains it.
pub fn fit(
    spec: &MlpSpec,
    inputs: ArrayView2<f32>,
    targets: ArrayView2<f32>,
    loss: Loss,
    config: &TrainConfig,
) -> Result<(Mlp<f32>, Vec<EpochLoss>), NnError> {
    let mut model = Mlp::init(spec, config.seed);
    let history = fit_from(&mut model, inputs, targets, loss, config)?;
    Ok((model, history))
}

/// Trains `model` in place with Adam. Batches are drawn in a seeded shuffled
/// order (a stream separate from initialization) when `config.shuffle` is set.
pub fn fit_from(
    model: &mut Mlp<f32>,
    inputs: ArrayView2<f32>,
    targets: ArrayView2<f32>,
    loss: Loss,
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>, NnError> {
    config.validate()?;
    let n = inputs.nrows();
    if n == 0 {
        return Err(NnError::EmptyTrainingSet);
    }
    if inputs.ncols() != model.spec().input_size() {
        return Err(NnError::DimensionMismatch {
            expected: model.spec().input_size(),
            found: inputs.ncols(),
        });
    }
    if targets.dim() != (n, model.spec().output_size()) {
        return Err(NnError::LengthMismatch {
            pred: n * model.spec().output_size(),
            target: targets.len(),
        });
    }

    let mut optimizer = AdamState::new(model, AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0f64;
        let mut per_output = vec![0.0f64; model.spec().output_size()];
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let x = inputs.select(Axis(0), idx);
            let t = targets.select(Axis(0), idx);
            let (out, tape) = model.forward_batch(x.view())?;
            let (value, grad) = loss.evaluate(out.view(), t.view())?;
            if !value.total.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, batch });
            }
            let w = idx.len() as f64 / n as f64;
            total += value.total as f64 * w;
            for (acc, v) in per_output.iter_mut().zip(&value.per_output) {
                *acc += *v as f64 * w;
            }
            let grads = model.backward(&tape, grad.view())?;
            adam_step(model, &grads, &mut optimizer)?;
        }
        log::debug!("epoch {epoch}: loss {total:.6}");
        history.push(EpochLoss {
            epoch,
            total,
            per_output,
        });
    }
    Ok(history)
}
