//! Randomized hyperparameter search.
//!
//! Each trial samples a configuration, downsamples the training year with the
//! trial's `k`, fits, and scores CPC on the complete validation year. The
//! trial with the highest validation CPC wins; ties go to the earlier trial.
//! Every trial draws from its own seed derived from the master seed and the
//! trial index, so running trials in parallel does not change results.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{default_k_range, downsample, KRange, ObservationSet};
use crate::error::{Error, Result};
use crate::learn::{fit, predict, AnnSpec, GbtSpec, LearnerSpec, Loss};
use crate::metrics::cpc;
use crate::seed;

pub const DEFAULT_TRIALS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtSpace {
    /// Inclusive.
    pub max_depth: (usize, usize),
    /// Inclusive.
    pub n_estimators: (usize, usize),
    /// Learning rate is uniform on `(0, max_learning_rate]`.
    pub max_learning_rate: f64,
}

impl Default for GbtSpace {
    fn default() -> Self {
        GbtSpace {
            max_depth: (2, 7),
            n_estimators: (25, 275),
            max_learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnSpace {
    pub losses: Vec<Loss>,
    pub n_layers: (usize, usize),
    pub layer_width: (usize, usize),
    pub n_epochs: (usize, usize),
    /// Batch size is `2^e` for `e` uniform in this inclusive range.
    pub batch_exponent: (u32, u32),
}

impl Default for AnnSpace {
    fn default() -> Self {
        AnnSpace {
            losses: vec![Loss::CpcLoss, Loss::Mse],
            n_layers: (1, 5),
            layer_width: (16, 128),
            n_epochs: (10, 50),
            batch_exponent: (9, 14),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LearnerSpace {
    Gbt(GbtSpace),
    Ann(AnnSpace),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learner: LearnerSpace,
    /// Negative sampling factor range; chosen from the training density when
    /// absent.
    #[serde(default)]
    pub k: Option<KRange>,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi.max(lo))
}

impl SearchSpace {
    pub fn gbt() -> Self {
        SearchSpace {
            learner: LearnerSpace::Gbt(GbtSpace::default()),
            k: None,
        }
    }

    pub fn ann() -> Self {
        SearchSpace {
            learner: LearnerSpace::Ann(AnnSpace::default()),
            k: None,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng, k_range: KRange) -> LearnerSpec {
        let k = uniform(rng, (k_range.min, k_range.max));
        match &self.learner {
            LearnerSpace::Gbt(s) => LearnerSpec::Gbt(GbtSpec {
                max_depth: uniform(rng, s.max_depth),
                n_estimators: uniform(rng, s.n_estimators),
                // 1 - u is in (0, 1]
                learning_rate: s.max_learning_rate * (1.0 - rng.random::<f64>()),
                k,
            }),
            LearnerSpace::Ann(s) => LearnerSpec::Ann(AnnSpec {
                loss: s.losses[rng.random_range(0..s.losses.len())],
                n_layers: uniform(rng, s.n_layers),
                layer_width: uniform(rng, s.layer_width),
                n_epochs: uniform(rng, s.n_epochs),
                batch_size: 1usize << rng.random_range(s.batch_exponent.0..=s.batch_exponent.1.max(s.batch_exponent.0)),
                k,
            }),
        }
    }
}

/// One evaluated configuration. Serialized as one line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub spec: LearnerSpec,
    /// `None` when the trial failed.
    pub valid_cpc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    best: usize,
}

impl SearchOutcome {
    pub fn best(&self) -> &Trial {
        &self.trials[self.best]
    }

    /// One JSON object per line, in trial order.
    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.trials {
            serde_json::to_writer(&mut w, t)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Samples `n_trials` configurations from `space` and evaluates them.
pub fn random_search(
    space: &SearchSpace,
    train: &ObservationSet,
    valid: &ObservationSet,
    n_trials: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    if n_trials == 0 {
        return Err(Error::InvalidConfig("search needs at least one trial".into()));
    }
    let k_range = space.k.unwrap_or_else(|| default_k_range(train.density()));
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("sample")]));
    let specs: Vec<LearnerSpec> = (0..n_trials).map(|_| space.sample(&mut rng, k_range)).collect();
    evaluate_candidates(&specs, train, valid, seed)
}

/// Evaluates the given configurations as search trials, in order.
pub fn evaluate_candidates(
    specs: &[LearnerSpec],
    train: &ObservationSet,
    valid: &ObservationSet,
    seed: u64,
) -> Result<SearchOutcome> {
    let truth = valid.truth();
    let trials: Vec<Trial> = specs
        .par_iter()
        .enumerate()
        .map(|(index, spec)| {
            let started = Instant::now();
            let trial_seed = seed::derive(seed, &[seed::tag("trial"), index as u64]);
            let result = (|| {
                let sampled = downsample(train, spec.k(), seed::derive(trial_seed, &[0]))?;
                let model = fit(spec, &sampled, seed::derive(trial_seed, &[1]))?;
                let score = cpc(&truth, &predict(&model, valid)?)?;
                if score.is_finite() {
                    Ok(score)
                } else {
                    Err(Error::CalibrationFailed(format!("validation CPC is {score}")))
                }
            })();
            let (valid_cpc, error) = match result {
                Ok(c) => (Some(c), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Trial {
                index,
                spec: *spec,
                valid_cpc,
                error,
                wall_seconds: started.elapsed().as_secs_f64(),
            }
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (k, t) in trials.iter().enumerate() {
        if let Some(c) = t.valid_cpc {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((k, c));
            }
        }
    }
    match best {
        Some((best, _)) => Ok(SearchOutcome { trials, best }),
        None => Err(Error::AllTrialsFailed(
            trials
                .iter()
                .rev()
                .find_map(|t| t.error.clone())
                .unwrap_or_else(|| "no trials".into()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_specs_stay_in_range() {
        let mut rng = seed::rng(4);
        let k = KRange { min: 5, max: 100 };
        for _ in 0..500 {
            match SearchSpace::gbt().sample(&mut rng, k) {
                LearnerSpec::Gbt(s) => {
                    assert!((2..=7).contains(&s.max_depth));
                    assert!((25..=275).contains(&s.n_estimators));
                    assert!(s.learning_rate > 0.0 && s.learning_rate <= 0.5);
                    assert!((5..=100).contains(&s.k));
                }
                other => panic!("{other:?}"),
            }
            match SearchSpace::ann().sample(&mut rng, KRange { min: 1, max: 5 }) {
                LearnerSpec::Ann(s) => {
                    assert!((1..=5).contains(&s.n_layers));
                    assert!((16..=128).contains(&s.layer_width));
                    assert!((10..=50).contains(&s.n_epochs));
                    assert!(s.batch_size.is_power_of_two() && (512..=16384).contains(&s.batch_size));
                    assert!((1..=5).contains(&s.k));
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn search_space_json_round_trip() {
        let s = SearchSpace::ann();
        let back: SearchSpace = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
