use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Gradients, Layer, Mlp, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment accumulators shaped like the model, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Layer<f32>>,
    pub v: Vec<Layer<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Mlp<f32>, config: AdamConfig) -> Self {
        let zeros: Vec<Layer<f32>> = model
            .layers
            .iter()
            .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Moments are stored in `f32`; the per-element
/// arithmetic runs in `f64`. A non-finite gradient aborts before any parameter moves.
pub fn adam_step(model: &mut Mlp<f32>, grads: &Gradients<f32>, state: &mut AdamState) -> Result<(), NnError> {
    if grads.layers.len() != model.layers.len() || state.m.len() != model.layers.len() {
        return Err(NnError::TapeMismatch("gradient/optimizer layer count differs from model".into()));
    }
    for (k, (g, p)) in grads.layers.iter().zip(&model.layers).enumerate() {
        if g.weight.dim() != p.weight.dim() || g.bias.len() != p.bias.len() {
            return Err(NnError::TapeMismatch(format!("gradient shape differs in layer {k}")));
        }
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient { layer: k });
        }
    }

    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let update = |theta: &mut f32, m: &mut f32, v: &mut f32, g: &f32| {
        let g = *g as f64;
        let m1 = beta1 * *m as f64 + (1.0 - beta1) * g;
        let v1 = beta2 * *v as f64 + (1.0 - beta2) * g * g;
        *m = m1 as f32;
        *v = v1 as f32;
        let step = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
        *theta = (*theta as f64 - step) as f32;
    };

    for (((p, g), m), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        Zip::from(&mut p.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .and(&g.weight)
            .for_each(update);
        Zip::from(&mut p.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(update);
    }
    Ok(())
}
