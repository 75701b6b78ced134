//! Model checkpoints: `<base>.ckpt.json` (spec, seed, tag, optimizer flag) and
//! `<base>.ckpt.f32bin` (parameters in layer order, weights then bias; when the
//! optimizer flag is set, the Adam first and then second moments follow in the
//! same order).

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, Layer, Mlp, MlpSpec, NnError};
use crate::codec::{atomic_write, decode_f32_le, encode_f32_le, with_suffix};

pub const CHECKPOINT_FORMAT: &str = "mlp-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    layer_sizes: MlpSpec,
    seed: u64,
    tag: Option<String>,
    param_count: usize,
    optimizer_state: bool,
    adam: Option<AdamManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamManifest {
    config: AdamConfig,
    t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Mlp<f32>,
    pub optimizer: Option<AdamState>,
    /// Free-form role tag, e.g. `unimodal`, `multimodal`, `level`.
    pub tag: Option<String>,
}

/// `(manifest, payload)` paths for a checkpoint base name.
pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let base = s.strip_suffix(".ckpt.json").map(PathBuf::from).unwrap_or_else(|| base.to_path_buf());
    (with_suffix(&base, ".ckpt.json"), with_suffix(&base, ".ckpt.f32bin"))
}

fn ckpt_err(path: &Path, detail: impl ToString) -> NnError {
    NnError::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

fn flatten_layers(layers: &[Layer<f32>], out: &mut Vec<f32>) {
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
}

fn unflatten_layers(spec: &MlpSpec, values: &[f32]) -> Vec<Layer<f32>> {
    let mut off = 0;
    spec.sizes()
        .windows(2)
        .map(|w| {
            let (fi, fo) = (w[0], w[1]);
            let weight = Array2::from_shape_vec((fo, fi), values[off..off + fi * fo].to_vec()).unwrap();
            off += fi * fo;
            let bias = Array1::from(values[off..off + fo].to_vec());
            off += fo;
            Layer { weight, bias }
        })
        .collect()
}

pub fn save_checkpoint(
    base: &Path,
    model: &Mlp<f32>,
    optimizer: Option<&AdamState>,
    tag: Option<&str>,
) -> Result<(), NnError> {
    let (mpath, ppath) = checkpoint_paths(base);
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        layer_sizes: model.spec().clone(),
        seed: model.seed(),
        tag: tag.map(str::to_string),
        param_count: model.spec().param_count(),
        optimizer_state: optimizer.is_some(),
        adam: optimizer.map(|o| AdamManifest {
            config: o.config,
            t: o.t,
        }),
    };
    let mut values = Vec::with_capacity(model.spec().param_count() * if optimizer.is_some() { 3 } else { 1 });
    flatten_layers(&model.layers, &mut values);
    if let Some(o) = optimizer {
        flatten_layers(&o.m, &mut values);
        flatten_layers(&o.v, &mut values);
    }
    atomic_write(&ppath, &encode_f32_le(&values)).map_err(|e| ckpt_err(&ppath, e))?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    atomic_write(&mpath, &json).map_err(|e| ckpt_err(&mpath, e))?;
    Ok(())
}

pub fn load_checkpoint(base: &Path) -> Result<Checkpoint, NnError> {
    let (mpath, ppath) = checkpoint_paths(base);
    let text = std::fs::read(&mpath).map_err(|e| ckpt_err(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| ckpt_err(&mpath, e))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(ckpt_err(&mpath, format!("unknown format `{}`", manifest.format)));
    }
    let spec = manifest.layer_sizes;
    let n = spec.param_count();
    if manifest.param_count != n {
        return Err(ckpt_err(&mpath, format!("param_count {} but spec implies {n}", manifest.param_count)));
    }
    if manifest.optimizer_state != manifest.adam.is_some() {
        return Err(ckpt_err(&mpath, "optimizer flag disagrees with optimizer section"));
    }
    let bytes = std::fs::read(&ppath).map_err(|e| ckpt_err(&ppath, e))?;
    let blocks = if manifest.optimizer_state { 3 } else { 1 };
    let expected = n * blocks * 4;
    if bytes.len() != expected {
        return Err(ckpt_err(&ppath, format!("payload is {} bytes, expected {expected}", bytes.len())));
    }
    let values = decode_f32_le(&bytes);
    let model = Mlp::from_layers(spec.clone(), unflatten_layers(&spec, &values[..n]), manifest.seed)?;
    let optimizer = manifest.adam.map(|a| AdamState {
        config: a.config,
        m: unflatten_layers(&spec, &values[n..2 * n]),
        v: unflatten_layers(&spec, &values[2 * n..]),
        t: a.t,
    });
    Ok(Checkpoint {
        model,
        optimizer,
        tag: manifest.tag,
    })
}
