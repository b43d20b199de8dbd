//! Year-triplet evaluation protocol.
//!
//! For every window of three consecutive years `(t-2, t-1, t)`:
//!
//! * learners search hyperparameters by training on `t-2` and scoring on
//!   `t-1`, refit the winning configuration on `t-1` and predict `t`;
//! * classic models fit `alpha` and `beta` on `t-1` and predict `t`;
//! * only then is year `t` opened and every prediction scored against it.
//!
//! The test year reaches a triplet as a [`Sealed`] value that records each
//! access in an [`AccessLog`], so the ordering above can be checked after
//! the fact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classic::{calibrate_beta, fit_production_from, predict_matrix, ClassicModelSpec, ModelKind};
use crate::dataset::{build, downsample, FeatureSchema, FeatureVariant, KRange, ObservationSet};
use crate::error::{Error, Result};
use crate::flows::{aggregates, FlowMatrix, FlowValue, PredictedFlows, ZoneTable, POPULATION};
use crate::geo::{pair_features, PairFeatureSet};
use crate::learn::search::{
    random_search, AnnSpace, GbtSpace, LearnerSpace, SearchOutcome, SearchSpace, DEFAULT_TRIALS,
};
use crate::learn::{apply_production, fit, predict, FittedModel, LearnerSpec};
use crate::metrics::{evaluate, EvalReport};
use crate::seed;

/// Suffix of the learner variants rescaled by the production function.
pub const PRODUCTION_SUFFIX: &str = "+production";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Classic(ModelKind),
    Gbt,
    Ann,
}

impl ModelChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ModelChoice::Classic(k) => k.name(),
            ModelChoice::Gbt => "gbt",
            ModelChoice::Ann => "ann",
        }
    }

    pub fn all() -> Vec<ModelChoice> {
        ModelKind::ALL
            .into_iter()
            .map(ModelChoice::Classic)
            .chain([ModelChoice::Gbt, ModelChoice::Ann])
            .collect()
    }

    /// Parses a comma-separated list such as `radiation,gbt,ann`.
    pub fn parse_list(s: &str) -> Result<Vec<ModelChoice>> {
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl std::str::FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gbt" => Ok(ModelChoice::Gbt),
            "ann" => Ok(ModelChoice::Ann),
            other => other.parse().map(ModelChoice::Classic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub models: Vec<ModelChoice>,
    pub features: FeatureVariant,
    /// Also report learners rescaled by the production function.
    pub production: bool,
    pub seed: u64,
    pub trials: usize,
    pub gbt_space: GbtSpace,
    pub ann_space: AnnSpace,
    /// Negative sampling range; chosen from training density when absent.
    pub k: Option<KRange>,
    /// Keep every test-year prediction in the run output.
    pub keep_predictions: bool,
    /// Lower bound on pair distances seen by the classic models; 0 leaves
    /// coincident centroids an error for the gravity models.
    pub distance_floor_km: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            models: ModelChoice::all(),
            features: FeatureVariant::Extended,
            production: true,
            seed: 0,
            trials: DEFAULT_TRIALS,
            gbt_space: GbtSpace::default(),
            ann_space: AnnSpace::default(),
            k: None,
            keep_predictions: false,
            distance_floor_km: 0.0,
        }
    }
}

impl RunConfig {
    fn space(&self, model: ModelChoice) -> Option<SearchSpace> {
        let learner = match model {
            ModelChoice::Gbt => LearnerSpace::Gbt(self.gbt_space.clone()),
            ModelChoice::Ann => LearnerSpace::Ann(self.ann_space.clone()),
            ModelChoice::Classic(_) => return None,
        };
        Some(SearchSpace { learner, k: self.k })
    }
}

/// Ordered record of data accesses within one triplet.
#[derive(Debug, Default)]
pub struct AccessLog(Mutex<Vec<String>>);

impl AccessLog {
    pub fn record(&self, event: impl Into<String>) {
        self.0.lock().expect("access log poisoned").push(event.into());
    }

    pub fn events(&self) -> Vec<String> {
        self.0.lock().expect("access log poisoned").clone()
    }
}

/// A value that logs every time it is read.
pub struct Sealed<'a, T> {
    value: &'a T,
    label: String,
    log: &'a AccessLog,
}

impl<'a, T> Sealed<'a, T> {
    pub fn new(value: &'a T, label: impl Into<String>, log: &'a AccessLog) -> Self {
        Sealed {
            value,
            label: label.into(),
            log,
        }
    }

    pub fn open(&self) -> &'a T {
        self.log.record(format!("open:{}", self.label));
        self.value
    }
}

pub struct Triplet<'a> {
    pub train: &'a FlowMatrix,
    pub valid: &'a FlowMatrix,
    pub test_year: i32,
    pub test: Sealed<'a, FlowMatrix>,
}

/// Inputs shared by every triplet of a run.
pub struct Context<'a> {
    pub zones: &'a ZoneTable,
    pub pairs: &'a PairFeatureSet,
    /// Pairs for the classic models, with the configured distance floor.
    pub classic_pairs: &'a PairFeatureSet,
    pub schema: &'a FeatureSchema,
}

impl<'a> Context<'a> {
    /// Pair features covering both the schema and the classic models.
    pub fn pair_features_for(zones: &ZoneTable, schema: &FeatureSchema) -> Result<PairFeatureSet> {
        let mut vars = schema.intervening_variables();
        if !vars.contains(&POPULATION) {
            vars.push(POPULATION);
        }
        pair_features(zones, &vars)
    }

    fn observations(&self, flows: &FlowMatrix) -> Result<ObservationSet> {
        build(self.zones, self.pairs, flows, self.schema)
    }
}

/// What one model produced for one test year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Calibrated classic parameters or winning learner hyperparameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
    /// `(column, importance)` for tree models, most important first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub importance: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletReport {
    pub train_year: i32,
    pub valid_year: i32,
    pub test_year: i32,
    pub runs: Vec<ModelRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    /// Number of triplets that produced a report.
    pub n: usize,
    pub mean: EvalReport,
    /// Population standard deviation across triplets.
    pub std: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub features: FeatureVariant,
    pub seed: u64,
    pub triplets: Vec<TripletReport>,
    pub summary: Vec<ModelSummary>,
    /// Tree feature importances averaged over triplets, top ten.
    pub top_features: Vec<(String, f64)>,
}

/// A prediction kept for export.
#[derive(Debug, Clone)]
pub struct StoredPrediction {
    pub model: String,
    pub flows: PredictedFlows,
}

pub struct TripletOutput {
    pub report: TripletReport,
    pub searches: Vec<(String, SearchOutcome)>,
    pub predictions: Vec<StoredPrediction>,
}

pub struct RunOutput {
    pub report: RunReport,
    /// Search trials per triplet and learner.
    pub searches: Vec<(i32, String, SearchOutcome)>,
    /// Access events per triplet, in triplet order.
    pub access_logs: Vec<Vec<String>>,
    pub predictions: Vec<(i32, StoredPrediction)>,
}

struct Fitted {
    predictions: Vec<(String, PredictedFlows)>,
    params: Option<serde_json::Value>,
    importance: Option<Vec<(String, f64)>>,
    search: Option<SearchOutcome>,
}

fn fit_classic(ctx: &Context, kind: ModelKind, valid: &FlowMatrix, test_year: i32) -> Result<Fitted> {
    let production = fit_production_from(ctx.zones, valid)?;
    let spec = if kind.has_beta() {
        calibrate_beta(kind, ctx.zones, ctx.classic_pairs, valid, production)?
    } else {
        ClassicModelSpec::radiation(production)
    };
    let pred = predict_matrix(&spec, ctx.zones, ctx.classic_pairs, test_year)?;
    Ok(Fitted {
        predictions: vec![(kind.name().to_string(), pred)],
        params: Some(serde_json::to_value(spec)?),
        importance: None,
        search: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn fit_learner(
    ctx: &Context,
    name: &str,
    space: &SearchSpace,
    trials: usize,
    production: bool,
    train: &FlowMatrix,
    valid: &FlowMatrix,
    test_year: i32,
    seed: u64,
) -> Result<Fitted> {
    let train_obs = ctx.observations(train)?;
    let valid_obs = ctx.observations(valid)?;
    let search = random_search(space, &train_obs, &valid_obs, trials, seed::derive(seed, &[0]))?;
    let spec: LearnerSpec = search.best().spec;
    // the winning configuration is refit on the validation year
    let refit_train = downsample(&valid_obs, spec.k(), seed::derive(seed, &[1]))?;
    let model = fit(&spec, &refit_train, seed::derive(seed, &[2]))?;

    // features do not depend on the flows, so the test rows are built without them
    let test_rows = ctx.observations(&FlowMatrix::new(test_year, ctx.zones.ids().clone()))?;
    let pred = predict(&model, &test_rows)?;
    let mut predictions = Vec::new();
    if production {
        let prod = fit_production_from(ctx.zones, valid)?;
        let scaled = apply_production(&pred, prod, &ctx.zones.populations());
        predictions.push((name.to_string(), pred));
        predictions.push((format!("{name}{PRODUCTION_SUFFIX}"), scaled));
    } else {
        predictions.push((name.to_string(), pred));
    }
    let importance = match &model {
        FittedModel::Gbt(m) => Some(m.ranked_importance()),
        FittedModel::Ann(_) => None,
    };
    Ok(Fitted {
        predictions,
        params: Some(serde_json::to_value(spec)?),
        importance,
        search: Some(search),
    })
}

/// Runs every model on one triplet. A failing model is reported with its
/// error; the others still run.
pub fn run_triplet(ctx: &Context, config: &RunConfig, triplet: &Triplet, seed: u64, log: &AccessLog) -> TripletOutput {
    let fitted: Vec<(ModelChoice, Result<Fitted>)> = config
        .models
        .par_iter()
        .map(|&model| {
            let name = model.name();
            log.record(format!("fit:{name}"));
            let model_seed = seed::derive(seed, &[seed::tag(name)]);
            let result = match model {
                ModelChoice::Classic(kind) => fit_classic(ctx, kind, triplet.valid, triplet.test_year),
                _ => fit_learner(
                    ctx,
                    name,
                    &config.space(model).expect("learner has a search space"),
                    config.trials,
                    config.production,
                    triplet.train,
                    triplet.valid,
                    triplet.test_year,
                    model_seed,
                ),
            };
            log.record(format!("fitted:{name}"));
            log::info!("test year {}: fitted {name}", triplet.test_year);
            (model, result)
        })
        .collect();

    let test = triplet.test.open();
    log::info!("test year {}: evaluating", triplet.test_year);
    let mut runs = Vec::new();
    let mut searches = Vec::new();
    let mut predictions = Vec::new();
    for (model, result) in fitted {
        match result {
            Ok(f) => {
                for (name, pred) in f.predictions {
                    log.record(format!("eval:{name}"));
                    let (report, error) = match evaluate(test, &pred, ctx.pairs) {
                        Ok(r) => (Some(r), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    runs.push(ModelRun {
                        model: name.clone(),
                        report,
                        error,
                        params: f.params.clone(),
                        importance: f.importance.clone(),
                    });
                    if config.keep_predictions {
                        predictions.push(StoredPrediction {
                            model: name,
                            flows: pred,
                        });
                    }
                }
                if let Some(s) = f.search {
                    searches.push((model.name().to_string(), s));
                }
            }
            Err(e) => {
                log::warn!("{} failed on test year {}: {e}", model.name(), triplet.test_year);
                runs.push(ModelRun {
                    model: model.name().to_string(),
                    report: None,
                    error: Some(e.to_string()),
                    params: None,
                    importance: None,
                });
            }
        }
    }
    TripletOutput {
        report: TripletReport {
            train_year: triplet.train.year(),
            valid_year: triplet.valid.year(),
            test_year: triplet.test_year,
            runs,
        },
        searches,
        predictions,
    }
}

/// Slides the triplet window over all years (in year order) and summarizes
/// each model across test years.
pub fn run_all(zones: &ZoneTable, flows: &[FlowMatrix], config: &RunConfig) -> Result<RunOutput> {
    if flows.len() < 3 {
        return Err(Error::InsufficientYears(flows.len()));
    }
    if !(config.distance_floor_km >= 0.0 && config.distance_floor_km.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "distance floor {} km",
            config.distance_floor_km
        )));
    }
    if config.models.is_empty() {
        return Err(Error::InvalidConfig("no models requested".into()));
    }
    let mut flows: Vec<&FlowMatrix> = flows.iter().collect();
    flows.sort_by_key(|m| m.year());
    if flows.windows(2).any(|w| w[0].year() == w[1].year()) {
        return Err(Error::InvalidConfig("duplicate year in flow series".into()));
    }
    if let Some(m) = flows.iter().find(|m| !m.same_universe(zones.ids())) {
        return Err(Error::InvalidConfig(format!(
            "flows for {} use a different zone set",
            m.year()
        )));
    }
    let schema = FeatureSchema::for_variant(config.features, zones);
    let pairs = Context::pair_features_for(zones, &schema)?;
    let floored;
    let classic_pairs = if config.distance_floor_km > 0.0 {
        floored = pairs.with_distance_floor(config.distance_floor_km);
        &floored
    } else {
        &pairs
    };
    let ctx = Context {
        zones,
        pairs: &pairs,
        classic_pairs,
        schema: &schema,
    };

    let logs: Vec<AccessLog> = (0..flows.len() - 2).map(|_| AccessLog::default()).collect();
    let outputs: Vec<TripletOutput> = flows
        .windows(3)
        .zip(&logs)
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(t, (w, log))| {
            let triplet = Triplet {
                train: w[0],
                valid: w[1],
                test_year: w[2].year(),
                test: Sealed::new(w[2], format!("test:{}", w[2].year()), log),
            };
            run_triplet(
                &ctx,
                config,
                &triplet,
                seed::derive(config.seed, &[seed::tag("triplet"), t as u64]),
                log,
            )
        })
        .collect();

    let mut searches = Vec::new();
    let mut predictions = Vec::new();
    let mut triplets = Vec::new();
    for out in outputs {
        let year = out.report.test_year;
        searches.extend(out.searches.into_iter().map(|(m, s)| (year, m, s)));
        predictions.extend(out.predictions.into_iter().map(|p| (year, p)));
        triplets.push(out.report);
    }
    let report = RunReport {
        features: config.features,
        seed: config.seed,
        summary: summarize(&triplets),
        top_features: top_features(&triplets, 10),
        triplets,
    };
    Ok(RunOutput {
        report,
        searches,
        access_logs: logs.iter().map(AccessLog::events).collect(),
        predictions,
    })
}

/// Mean and population standard deviation of `values`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-model aggregates, in order of first appearance.
pub fn summarize(triplets: &[TripletReport]) -> Vec<ModelSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut reports: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    for t in triplets {
        for run in &t.runs {
            if !order.contains(&run.model) {
                order.push(run.model.clone());
            }
            if let Some(r) = run.report {
                reports.entry(run.model.clone()).or_default().push(r);
            }
        }
    }
    order
        .into_iter()
        .filter_map(|model| {
            let rs = reports.get(&model)?;
            let mut mean = [0.0; 6];
            let mut std = [0.0; 6];
            for f in 0..6 {
                let vals: Vec<f64> = rs.iter().map(|r| r.values()[f]).collect();
                (mean[f], std[f]) = mean_std(&vals);
            }
            Some(ModelSummary {
                model,
                n: rs.len(),
                mean: EvalReport::from_values(mean),
                std: EvalReport::from_values(std),
            })
        })
        .collect()
}

fn top_features(triplets: &[TripletReport], n: usize) -> Vec<(String, f64)> {
    let mut total: BTreeMap<String, f64> = BTreeMap::new();
    let mut count = 0usize;
    for t in triplets {
        // one importance table per fitted tree model, shared by its variants
        if let Some(imp) = t
            .runs
            .iter()
            .find(|r| r.model == "gbt")
            .and_then(|r| r.importance.as_ref())
        {
            count += 1;
            for (c, v) in imp {
                *total.entry(c.clone()).or_default() += v;
            }
        }
    }
    if count == 0 {
        return Vec::new();
    }
    let mut v: Vec<(String, f64)> = total.into_iter().map(|(c, s)| (c, s / count as f64)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(n);
    v
}

fn format_metric(mean: f64, std: f64, decimals: usize) -> String {
    format!("{mean:.decimals$} +/- {std:.decimals$}")
}

impl RunReport {
    /// Aligned text table: one row per model, mean +/- std per metric.
    pub fn to_table(&self) -> String {
        let header = ["Model", "CPC", "CPC_d", "RMSE", "r2", "Incoming MAE", "Incoming r2"];
        let decimals = [2, 2, 1, 2, 0, 2];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for s in &self.summary {
            let mut row = vec![s.model.clone()];
            let (m, d) = (s.mean.values(), s.std.values());
            for f in 0..6 {
                row.push(format_metric(m[f], d[f], decimals[f]));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c == 0 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
            if k == 0 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                let _ = writeln!(out, "{}", rule.join("-+-"));
            }
        }
        if !self.top_features.is_empty() {
            let _ = writeln!(out, "\nTop features (gbt importance)");
            for (c, v) in &self.top_features {
                let _ = writeln!(out, "  {c:<40} {v:.4}");
            }
        }
        out
    }
}

/// Per-zone incoming totals, truth minus prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoneError {
    pub zone_id: String,
    pub lat: f64,
    pub lon: f64,
    pub incoming_true: f64,
    pub incoming_pred: f64,
    pub error: f64,
}

pub fn zone_errors<A: FlowValue, B: FlowValue>(
    truth: &FlowMatrix<A>,
    pred: &FlowMatrix<B>,
    zones: &ZoneTable,
) -> Result<Vec<ZoneError>> {
    if !truth.same_universe(zones.ids()) || !pred.same_universe(zones.ids()) {
        return Err(Error::ZoneUniverseMismatch);
    }
    let v = aggregates(truth).incoming;
    let w = aggregates(pred).incoming;
    Ok(zones
        .iter()
        .enumerate()
        .map(|(k, z)| {
            let (t, p) = (v[k].to_f64(), w[k].to_f64());
            ZoneError {
                zone_id: z.id.clone(),
                lat: z.centroid.lat(),
                lon: z.centroid.lon(),
                incoming_true: t,
                incoming_pred: p,
                error: t - p,
            }
        })
        .collect())
}

/// Writes `path` as CSV (`zone_id,lat,lon,incoming_true,incoming_pred,error`)
/// and the same records as a GeoJSON point collection next to it, with a
/// `.geojson` extension.
pub fn export_error_map<A: FlowValue, B: FlowValue>(
    truth: &FlowMatrix<A>,
    pred: &FlowMatrix<B>,
    zones: &ZoneTable,
    path: &Path,
) -> Result<()> {
    let errors = zone_errors(truth, pred, zones)?;
    let mut w = csv::Writer::from_path(path)?;
    for e in &errors {
        w.serialize(e)?;
    }
    w.flush()?;

    let features: Vec<serde_json::Value> = errors
        .iter()
        .map(|e| {
            serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [e.lon, e.lat] },
                "properties": {
                    "zone_id": e.zone_id,
                    "incoming_true": e.incoming_true,
                    "incoming_pred": e.incoming_pred,
                    "error": e.error,
                },
            })
        })
        .collect();
    let collection = serde_json::json!({ "type": "FeatureCollection", "features": features });
    std::fs::write(path.with_extension("geojson"), serde_json::to_vec_pretty(&collection)?)?;
    Ok(())
}
