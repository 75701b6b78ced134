//! Central-difference verification of backprop, run on an `f64` copy of the model.

use ndarray::{Array2, ArrayView2};

use super::{Gradients, Loss, Mlp, NnError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over parameters of |g_a − g_n| / max(|g_a|, |g_n|, 1e−12).
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose ±step perturbation flipped some ReLU on or off. The
    /// loss is not differentiable across that kink, so they are not compared.
    pub skipped_at_kinks: usize,
}

/// Compares analytic gradients against central differences with the given step.
pub fn grad_check(
    model: &Mlp<f32>,
    x: ArrayView2<f32>,
    target: ArrayView2<f32>,
    loss: Loss,
    step: f64,
) -> Result<GradCheckReport, NnError> {
    grad_check_with(model, x, target, loss, step, |m, x, t, loss| {
        let (out, tape) = m.forward_batch(x)?;
        let (_, g) = loss.evaluate(out.view(), t)?;
        m.backward(&tape, g.view())
    })
}

/// [`grad_check`] with a caller-supplied analytic gradient, so a deliberately
/// broken backward pass can be shown to fail.
pub fn grad_check_with<F>(
    model: &Mlp<f32>,
    x: ArrayView2<f32>,
    target: ArrayView2<f32>,
    loss: Loss,
    step: f64,
    analytic: F,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&Mlp<f64>, ArrayView2<f64>, ArrayView2<f64>, Loss) -> Result<Gradients<f64>, NnError>,
{
    let mut m = model.cast::<f64>();
    let x = x.mapv(|v| v as f64);
    let t = target.mapv(|v| v as f64);

    let g_analytic = analytic(&m, x.view(), t.view(), loss)?.flatten();
    let base_mask = relu_mask(&m, x.view())?;

    let eval = |m: &Mlp<f64>| -> Result<(f64, Vec<bool>), NnError> {
        let (out, tape) = m.forward_batch(x.view())?;
        let (v, _) = loss.evaluate(out.view(), t.view())?;
        Ok((v.total, mask_of(&tape.pre_activations)))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for (i, &ga) in g_analytic.iter().enumerate() {
        let orig = *m.param_mut(i);
        *m.param_mut(i) = orig + step;
        let (plus, mask_p) = eval(&m)?;
        *m.param_mut(i) = orig - step;
        let (minus, mask_m) = eval(&m)?;
        *m.param_mut(i) = orig;
        if mask_p != base_mask || mask_m != base_mask {
            report.skipped_at_kinks += 1;
            continue;
        }
        let gn = (plus - minus) / (2.0 * step);
        let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-12);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

fn mask_of(pre: &[Array2<f64>]) -> Vec<bool> {
    let hidden = pre.len().saturating_sub(1);
    pre[..hidden]
        .iter()
        .flat_map(|z| z.iter().map(|&v| v > 0.0))
        .collect()
}

fn relu_mask(m: &Mlp<f64>, x: ArrayView2<f64>) -> Result<Vec<bool>, NnError> {
    let (_, tape) = m.forward_batch(x)?;
    Ok(mask_of(&tape.pre_activations))
}
