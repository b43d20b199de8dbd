//! Learned flow models over pair observations: gradient boosted trees and a
//! feed-forward network, plus the randomized hyperparameter search that picks
//! between configurations.

pub mod ann;
pub mod gbt;
pub mod loss;
pub mod search;

use serde::{Deserialize, Serialize};

use crate::classic::ProductionFn;
use crate::dataset::{ObservationSet, Observations};
use crate::error::{Error, Result};
use crate::flows::PredictedFlows;

pub use ann::{fit_ann, AnnModel, AnnSpec};
pub use gbt::{fit_gbt, GbtModel, GbtSpec};
pub use loss::{cpc_loss, cpc_loss_grad, Loss};
pub use search::{random_search, SearchOutcome, SearchSpace, Trial};

/// Hyperparameters of either learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LearnerSpec {
    Gbt(GbtSpec),
    Ann(AnnSpec),
}

impl LearnerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Gbt(_) => "gbt",
            LearnerSpec::Ann(_) => "ann",
        }
    }

    /// Negative sampling factor for the training set.
    pub fn k(&self) -> usize {
        match self {
            LearnerSpec::Gbt(s) => s.k,
            LearnerSpec::Ann(s) => s.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FittedModel {
    Gbt(GbtModel),
    Ann(AnnModel),
}

impl FittedModel {
    pub fn columns(&self) -> &[String] {
        match self {
            FittedModel::Gbt(m) => &m.columns,
            FittedModel::Ann(m) => &m.columns,
        }
    }

    /// Non-negative prediction for one unscaled row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self {
            FittedModel::Gbt(m) => m.predict_raw(row).max(0.0),
            FittedModel::Ann(m) => m.predict_row(row),
        }
    }
}

/// Trains the learner described by `spec`. `seed` only matters for the
/// network.
pub fn fit<O: Observations>(spec: &LearnerSpec, train: &O, seed: u64) -> Result<FittedModel> {
    Ok(match spec {
        LearnerSpec::Gbt(s) => FittedModel::Gbt(fit_gbt(s, train)?),
        LearnerSpec::Ann(s) => FittedModel::Ann(fit_ann(s, train, seed)?),
    })
}

/// Predicts every pair of a full observation set.
pub fn predict(model: &FittedModel, obs: &ObservationSet) -> Result<PredictedFlows> {
    if model.columns() != obs.columns() {
        return Err(Error::SchemaMismatch(format!(
            "model expects {:?}, observations have {:?}",
            model.columns(),
            obs.columns()
        )));
    }
    let values: Vec<f64> = (0..obs.n_rows()).map(|r| model.predict_row(obs.row(r))).collect();
    Ok(PredictedFlows::from_pair_values(
        obs.year(),
        obs.zone_ids().clone(),
        &values,
    ))
}

/// Rescales each origin row of `pred` to sum to `alpha * m_i`. Rows that
/// predict nothing stay empty.
pub fn apply_production(pred: &PredictedFlows, production: ProductionFn, populations: &[f64]) -> PredictedFlows {
    let row_sums = crate::flows::aggregates(pred).outgoing;
    pred.map_entries(|i, _, v| production.outflow(populations[i]) * v / row_sums[i])
}

#[cfg(test)]
pub(crate) mod testing {
    use crate::dataset::SampledObservations;

    pub fn table(rows: &[Vec<f64>], y: &[f64]) -> SampledObservations {
        let w = rows.first().map_or(0, Vec::len);
        let cols = (0..w).map(|c| format!("x{c}")).collect();
        SampledObservations::from_rows(cols, rows, y).unwrap()
    }
}
