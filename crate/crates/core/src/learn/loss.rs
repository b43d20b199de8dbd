//! Mini-batch losses for the network.
//!
//! The CPC loss is one minus the common part of commuters of the batch:
//!
//! ```text
//! L(y, ŷ) = 1 - 2 Σ min(y_i, ŷ_i) / (Σ y_i + Σ ŷ_i)
//! ```
//!
//! and its gradient with respect to one prediction is
//!
//! ```text
//! ∂L/∂ŷ_j = 2 Σ min(y_i, ŷ_i) / S² - [ŷ_j < y_j] · 2 / S,   S = Σ y_i + Σ ŷ_i
//! ```
//!
//! At `ŷ_j = y_j` the indicator is false.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CpcLoss,
    Mse,
}

impl Loss {
    pub fn value(self, y: &[f64], yhat: &[f64]) -> Result<f64> {
        match self {
            Loss::CpcLoss => cpc_loss(y, yhat),
            Loss::Mse => mse(y, yhat),
        }
    }

    pub fn grad(self, y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
        match self {
            Loss::CpcLoss => cpc_loss_grad(y, yhat),
            Loss::Mse => mse_grad(y, yhat),
        }
    }
}

fn sums(y: &[f64], yhat: &[f64]) -> Result<(f64, f64)> {
    assert_eq!(y.len(), yhat.len(), "targets and predictions differ in length");
    if y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut common = 0.0;
    let mut total = 0.0;
    for (&a, &b) in y.iter().zip(yhat) {
        common += a.min(b);
        total += a + b;
    }
    Ok((common, total))
}

/// CPC loss of one batch. A batch where targets and predictions are all zero
/// has loss 0.
pub fn cpc_loss(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let (common, total) = sums(y, yhat)?;
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * common / total)
}

/// Gradient of [`cpc_loss`] with respect to each prediction. Zero for a
/// degenerate all-zero batch.
pub fn cpc_loss_grad(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    let (common, total) = sums(y, yhat)?;
    if total == 0.0 {
        return Ok(vec![0.0; y.len()]);
    }
    let shared = 2.0 * common / (total * total);
    let under = 2.0 / total;
    Ok(y.iter()
        .zip(yhat)
        .map(|(&a, &b)| if b < a { shared - under } else { shared })
        .collect())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    sums(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / y.len() as f64)
}

pub fn mse_grad(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    sums(y, yhat)?;
    let scale = 2.0 / y.len() as f64;
    Ok(y.iter().zip(yhat).map(|(a, b)| scale * (b - a)).collect())
}
