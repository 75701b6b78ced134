use ndarray::{Array2, ArrayView2, Axis};

use super::{NnError, Scalar};

/// Mean squared error and its gradient: `mean((p − t)²)`, `2(p − t)/n`.
pub fn mse_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>), NnError> {
    if pred.len() != target.len() {
        return Err(NnError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(NnError::Empty);
    }
    let n = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut sum = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            two * d / n
        })
        .collect();
    Ok((sum / n, grad))
}

/// Batch losses over a `batch × outputs` prediction matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Mean over every element of the batch.
    Mse,
    /// Sum over output columns of each column's batch MSE. With two outputs
    /// this is `MSE(age) + MSE(leaf_count)`.
    PerOutputMse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub total: T,
    /// Batch MSE of each output column.
    pub per_output: Vec<T>,
}

impl Loss {
    /// Loss value and dL/d pred.
    pub fn evaluate<T: Scalar>(
        self,
        pred: ArrayView2<T>,
        target: ArrayView2<T>,
    ) -> Result<(LossValue<T>, Array2<T>), NnError> {
        if pred.dim() != target.dim() {
            return Err(NnError::LengthMismatch {
                pred: pred.len(),
                target: target.len(),
            });
        }
        if pred.is_empty() {
            return Err(NnError::Empty);
        }
        let (batch, outputs) = pred.dim();
        let diff = &pred - &target;
        let per_output: Vec<T> = diff
            .map(|d| *d * *d)
            .sum_axis(Axis(0))
            .iter()
            .map(|&s| s / T::from_f64(batch as f64))
            .collect();
        let sum_cols = per_output.iter().fold(T::zero(), |a, &b| a + b);
        let two = T::from_f64(2.0);
        let (total, scale) = match self {
            Loss::Mse => {
                let k = T::from_f64(outputs as f64);
                (sum_cols / k, two / T::from_f64((batch * outputs) as f64))
            }
            Loss::PerOutputMse => (sum_cols, two / T::from_f64(batch as f64)),
        };
        let grad = diff.mapv(|d| d * scale);
        Ok((LossValue { total, per_output }, grad))
    }
}
