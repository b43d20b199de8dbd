//! Traditional mobility models: radiation, extended radiation and the two
//! gravity variants, with a proportional production function.
//!
//! Every model is evaluated as an unnormalized destination weight per origin,
//! then each origin's weights are renormalized into probabilities. Weights are
//! handled as logarithms so large `beta` values neither overflow nor
//! underflow the whole row.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{pair_count, FlowMatrix, FlowValue, PredictedFlows, ZoneTable};
use crate::geo::{intervening_name, PairFeatureSet, DISTANCE};
use crate::metrics::cpc;

/// `G_i = alpha * m_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductionFn {
    pub alpha: f64,
}

impl ProductionFn {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(ProductionFn { alpha })
    }

    pub fn outflow(&self, population: f64) -> f64 {
        self.alpha * population
    }
}

/// Least-squares slope through the origin of outgoing migrants against
/// population.
pub fn fit_production(populations: &[f64], outgoing: &[f64]) -> Result<ProductionFn> {
    assert_eq!(populations.len(), outgoing.len());
    let mm: f64 = populations.iter().map(|m| m * m).sum();
    if mm == 0.0 {
        return Err(Error::AllZeroPopulations);
    }
    let mo: f64 = populations.iter().zip(outgoing).map(|(m, o)| m * o).sum();
    ProductionFn::new((mo / mm).max(0.0))
}

/// Fits the production function from a year of observed flows.
pub fn fit_production_from<V: FlowValue>(zones: &ZoneTable, flows: &FlowMatrix<V>) -> Result<ProductionFn> {
    let out: Vec<f64> = crate::flows::aggregates(flows)
        .outgoing
        .into_iter()
        .map(FlowValue::to_f64)
        .collect();
    fit_production(&zones.populations(), &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Radiation,
    ExtRadiation,
    GravityPower,
    GravityExp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Radiation,
        ModelKind::ExtRadiation,
        ModelKind::GravityPower,
        ModelKind::GravityExp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Radiation => "radiation",
            ModelKind::ExtRadiation => "ext_radiation",
            ModelKind::GravityPower => "gravity_power",
            ModelKind::GravityExp => "gravity_exp",
        }
    }

    pub fn has_beta(self) -> bool {
        self != ModelKind::Radiation
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown classic model `{s}`")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A calibrated classic model. Serializes as `{kind, alpha, beta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct ClassicModelSpec {
    kind: ModelKind,
    beta: Option<f64>,
    production: ProductionFn,
}

#[derive(Serialize, Deserialize)]
struct SpecRepr {
    kind: ModelKind,
    alpha: f64,
    #[serde(default)]
    beta: Option<f64>,
}

impl TryFrom<SpecRepr> for ClassicModelSpec {
    type Error = Error;

    fn try_from(r: SpecRepr) -> Result<Self> {
        ClassicModelSpec::new(r.kind, r.beta, ProductionFn::new(r.alpha)?)
    }
}

impl From<ClassicModelSpec> for SpecRepr {
    fn from(s: ClassicModelSpec) -> Self {
        SpecRepr {
            kind: s.kind,
            alpha: s.production.alpha,
            beta: s.beta,
        }
    }
}

impl ClassicModelSpec {
    /// `beta` must be positive for every kind but radiation, which takes none.
    pub fn new(kind: ModelKind, beta: Option<f64>, production: ProductionFn) -> Result<Self> {
        match (kind.has_beta(), beta) {
            (true, Some(b)) if b.is_finite() && b > 0.0 => {}
            (true, _) => return Err(Error::InvalidConfig(format!("{kind} needs beta > 0, got {beta:?}"))),
            (false, None) => {}
            (false, Some(_)) => return Err(Error::InvalidConfig(format!("{kind} takes no beta"))),
        }
        Ok(ClassicModelSpec { kind, beta, production })
    }

    pub fn radiation(production: ProductionFn) -> Self {
        ClassicModelSpec {
            kind: ModelKind::Radiation,
            beta: None,
            production,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn production(&self) -> ProductionFn {
        self.production
    }

    fn with_beta(&self, beta: f64) -> Self {
        ClassicModelSpec {
            beta: Some(beta),
            ..*self
        }
    }
}

/// Inputs one origin needs to score a destination.
#[derive(Debug, Clone, Copy)]
pub struct PairInputs {
    pub origin_mass: f64,
    pub dest_mass: f64,
    /// Population strictly inside the circle from origin to destination.
    pub intervening: f64,
    pub distance_km: f64,
}

fn ln_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Natural log of the unnormalized destination weight; `-inf` for a zero
/// weight.
pub fn ln_kernel(kind: ModelKind, beta: f64, p: PairInputs) -> f64 {
    let PairInputs {
        origin_mass: mi,
        dest_mass: mj,
        intervening: s,
        distance_km: d,
    } = p;
    match kind {
        ModelKind::Radiation => {
            if mi == 0.0 || mj == 0.0 {
                return f64::NEG_INFINITY;
            }
            mi.ln() + mj.ln() - (mi + s).ln() - (mi + mj + s).ln()
        }
        ModelKind::ExtRadiation => {
            // [A - B](C + 1) / ([B + 1][A + 1]) with A = (mi+mj+s)^b, B = (mi+s)^b, C = mi^b
            let a = beta * (mi + mj + s).ln();
            let b = beta * (mi + s).ln();
            let c = beta * mi.ln();
            if mj == 0.0 {
                return f64::NEG_INFINITY;
            }
            (-(b - a).exp_m1()).ln() + ln_sigmoid(a) + softplus(c) - softplus(b)
        }
        ModelKind::GravityPower => mj.ln() - beta * d.ln(),
        ModelKind::GravityExp => mj.ln() - beta * d,
    }
}

fn row_inputs<'a>(
    zones: &'a ZoneTable,
    pairs: &'a PairFeatureSet,
    intervening_col: usize,
    i: usize,
) -> impl Iterator<Item = (usize, PairInputs)> + 'a {
    let mi = zones.zone(i).population;
    (0..zones.len()).filter(move |&j| j != i).map(move |j| {
        (
            j,
            PairInputs {
                origin_mass: mi,
                dest_mass: zones.zone(j).population,
                intervening: pairs.value(intervening_col, i, j),
                distance_km: pairs.distance(i, j),
            },
        )
    })
}

fn check_pairs(zones: &ZoneTable, pairs: &PairFeatureSet) -> Result<usize> {
    if pairs.zone_ids()[..] != zones.ids()[..] {
        return Err(Error::MissingDistance);
    }
    pairs.column_index(DISTANCE)?;
    pairs.column_index(&intervening_name(crate::flows::POPULATION))
}

fn row_probs(
    spec: &ClassicModelSpec,
    zones: &ZoneTable,
    pairs: &PairFeatureSet,
    col: usize,
    i: usize,
) -> Result<Vec<f64>> {
    let beta = spec.beta.unwrap_or(0.0);
    let mut logs = Vec::with_capacity(zones.len().saturating_sub(1));
    for (j, p) in row_inputs(zones, pairs, col, i) {
        if spec.kind == ModelKind::GravityPower && p.distance_km == 0.0 {
            return Err(Error::ZeroDistance(zones.zone(i).id.clone(), zones.zone(j).id.clone()));
        }
        let l = ln_kernel(spec.kind, beta, p);
        logs.push(if l.is_nan() { f64::NEG_INFINITY } else { l });
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ZeroRow(zones.zone(i).id.clone()));
    }
    let mut probs: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// Probability of each destination `j != i` (in zone order) for origin `i`.
pub fn predict_row_probs(
    spec: &ClassicModelSpec,
    zones: &ZoneTable,
    pairs: &PairFeatureSet,
    origin: usize,
) -> Result<Vec<f64>> {
    let col = check_pairs(zones, pairs)?;
    row_probs(spec, zones, pairs, col, origin)
}

/// `T̂_ij = alpha m_i P_ij` for every pair. Origins whose weights are all zero
/// predict nothing.
pub fn predict_matrix(
    spec: &ClassicModelSpec,
    zones: &ZoneTable,
    pairs: &PairFeatureSet,
    year: i32,
) -> Result<PredictedFlows> {
    let col = check_pairs(zones, pairs)?;
    let n = zones.len();
    let rows: Vec<Result<Option<Vec<f64>>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let outflow = spec.production.outflow(zones.zone(i).population);
            if outflow == 0.0 {
                return Ok(None);
            }
            match row_probs(spec, zones, pairs, col, i) {
                Ok(p) => Ok(Some(p.into_iter().map(|p| p * outflow).collect())),
                Err(Error::ZeroRow(id)) => {
                    warn!("{}: no destination has weight from `{id}`", spec.kind);
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut values = vec![0.0; pair_count(n)];
    for (i, row) in rows.into_iter().enumerate() {
        if let Some(row) = row? {
            let start = i * (n - 1);
            values[start..start + row.len()].copy_from_slice(&row);
        }
    }
    Ok(PredictedFlows::from_pair_values(year, zones.ids().clone(), &values))
}

pub const BETA_MIN: f64 = 1e-3;
pub const BETA_MAX: f64 = 1e2;
const BETA_REL_TOL: f64 = 1e-3;
const GRID_POINTS: usize = 50;

/// Chooses beta maximizing the CPC of the model's prediction against
/// `train`. Golden-section search on `ln beta`, checked against a 50-point
/// log grid; when the grid finds a better point the search is repeated
/// inside that point's grid neighborhood.
pub fn calibrate_beta<V: FlowValue>(
    kind: ModelKind,
    zones: &ZoneTable,
    pairs: &PairFeatureSet,
    train: &FlowMatrix<V>,
    production: ProductionFn,
) -> Result<ClassicModelSpec> {
    if !kind.has_beta() {
        return Err(Error::NoBeta(kind.name().to_string()));
    }
    let base = ClassicModelSpec::new(kind, Some(1.0), production)?;
    let score = |ln_beta: f64| -> Result<f64> {
        let pred = predict_matrix(&base.with_beta(ln_beta.exp()), zones, pairs, train.year())?;
        let c = cpc(train, &pred)?;
        Ok(if c.is_finite() { c } else { f64::NEG_INFINITY })
    };

    let (lo, hi) = (BETA_MIN.ln(), BETA_MAX.ln());
    let mut best = golden_max(lo, hi, &score)?;

    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let mut grid_best = (f64::NEG_INFINITY, lo);
    for k in 0..GRID_POINTS {
        let x = lo + step * k as f64;
        let v = score(x)?;
        if v > grid_best.0 {
            grid_best = (v, x);
        }
    }
    if grid_best.0 > best.0 {
        let x = grid_best.1;
        let refined = golden_max((x - step).max(lo), (x + step).min(hi), &score)?;
        best = if refined.0 >= grid_best.0 { refined } else { grid_best };
    }
    if !best.0.is_finite() {
        return Err(Error::CalibrationFailed(format!(
            "{kind}: CPC is not finite anywhere in [{BETA_MIN}, {BETA_MAX}]"
        )));
    }
    ClassicModelSpec::new(kind, Some(best.1.exp()), production)
}

/// Golden-section maximization on `[lo, hi]` until the bracket is narrower
/// than the beta tolerance. Returns `(value, argmax)`.
fn golden_max(mut lo: f64, mut hi: f64, f: &impl Fn(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1)?, f(x2)?);
    // bracket width in ln(beta) is the relative tolerance on beta
    while hi - lo > BETA_REL_TOL {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2)?;
        }
    }
    Ok(if f1 >= f2 { (f1, x1) } else { (f2, x2) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::Zone;
    use crate::geo::{pair_features, Centroid};

    fn table(spec: &[(f64, f64)]) -> ZoneTable {
        let zones = spec
            .iter()
            .enumerate()
            .map(|(k, &(lon, pop))| Zone {
                id: format!("z{k}"),
                centroid: Centroid::new(0.0, lon).unwrap(),
                population: pop,
                features: vec![],
            })
            .collect();
        ZoneTable::new(zones, vec![]).unwrap()
    }

    fn pairs(z: &ZoneTable) -> PairFeatureSet {
        pair_features(z, &["population"]).unwrap()
    }

    fn prod(alpha: f64) -> ProductionFn {
        ProductionFn::new(alpha).unwrap()
    }

    #[test]
    fn production_slope() {
        let m = [100.0, 250.0, 40.0];
        let o: Vec<f64> = m.iter().map(|x| 0.03 * x).collect();
        assert!((fit_production(&m, &o).unwrap().alpha - 0.03).abs() < 1e-15);
        assert_eq!(fit_production(&[100.0], &[5.0]).unwrap().alpha, 0.05);
        assert!(matches!(
            fit_production(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::AllZeroPopulations)
        ));
    }

    #[test]
    fn spec_validation_and_json() {
        assert!(ClassicModelSpec::new(ModelKind::GravityExp, None, prod(0.1)).is_err());
        assert!(ClassicModelSpec::new(ModelKind::GravityExp, Some(-1.0), prod(0.1)).is_err());
        assert!(ClassicModelSpec::new(ModelKind::Radiation, Some(1.0), prod(0.1)).is_err());
        let s = ClassicModelSpec::new(ModelKind::ExtRadiation, Some(0.5), prod(0.02)).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"kind":"ext_radiation","alpha":0.02,"beta":0.5}"#);
        assert_eq!(serde_json::from_str::<ClassicModelSpec>(&json).unwrap(), s);
        let bad = r#"{"kind":"gravity_power","alpha":0.02}"#;
        assert!(serde_json::from_str::<ClassicModelSpec>(bad).is_err());
        let rad: ClassicModelSpec = serde_json::from_str(r#"{"kind":"radiation","alpha":0.1}"#).unwrap();
        assert_eq!(rad.beta(), None);
    }

    #[test]
    fn two_zones_send_everything_to_the_other() {
        let z = table(&[(0.0, 10.0), (1.0, 20.0)]);
        let p = pairs(&z);
        for kind in ModelKind::ALL {
            let spec = ClassicModelSpec::new(kind, kind.has_beta().then_some(1.3), prod(0.1)).unwrap();
            assert_eq!(predict_row_probs(&spec, &z, &p, 0).unwrap(), [1.0], "{kind}");
        }
    }

    #[test]
    fn gravity_power_inverse_distance() {
        // destinations 1 and 2 units of longitude away, equal populations
        let z = table(&[(0.0, 5.0), (1.0, 5.0), (2.0, 5.0)]);
        let p = pairs(&z);
        let spec = ClassicModelSpec::new(ModelKind::GravityPower, Some(1.0), prod(0.1)).unwrap();
        let row = predict_row_probs(&spec, &z, &p, 0).unwrap();
        assert!((row[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((row[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn radiation_on_a_line() {
        let z = table(&[(0.0, 10.0), (1.0, 5.0), (2.0, 7.0)]);
        let p = pairs(&z);
        let spec = ClassicModelSpec::radiation(prod(0.1));
        let row = predict_row_probs(&spec, &z, &p, 0).unwrap();
        assert!((row[0] - 11.0 / 18.0).abs() < 1e-12);
        assert!((row[1] - 7.0 / 18.0).abs() < 1e-12);
        let m = predict_matrix(&spec, &z, &p, 0).unwrap();
        assert!((m.get(0, 1) - 11.0 / 18.0).abs() < 1e-12);
        assert!((m.get(0, 2) - 7.0 / 18.0).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_predicts_nothing() {
        let z = table(&[(0.0, 10.0), (1.0, 5.0), (2.0, 7.0)]);
        let m = predict_matrix(&ClassicModelSpec::radiation(prod(0.0)), &z, &pairs(&z), 0).unwrap();
        assert_eq!(m.nnz(), 0);
    }

    #[test]
    fn zero_rows_and_zero_distance() {
        let z = table(&[(0.0, 10.0), (1.0, 0.0), (2.0, 0.0)]);
        let p = pairs(&z);
        let spec = ClassicModelSpec::new(ModelKind::GravityExp, Some(0.1), prod(0.1)).unwrap();
        assert!(matches!(predict_row_probs(&spec, &z, &p, 0), Err(Error::ZeroRow(_))));
        // origin 0 contributes nothing; origins 1 and 2 have no outflow
        assert_eq!(predict_matrix(&spec, &z, &p, 0).unwrap().nnz(), 0);

        let z = table(&[(0.0, 10.0), (0.0, 5.0), (2.0, 7.0)]);
        let p = pairs(&z);
        let spec = ClassicModelSpec::new(ModelKind::GravityPower, Some(1.0), prod(0.1)).unwrap();
        assert!(matches!(
            predict_row_probs(&spec, &z, &p, 0),
            Err(Error::ZeroDistance(..))
        ));
        assert!(matches!(predict_matrix(&spec, &z, &p, 0), Err(Error::ZeroDistance(..))));
    }

    #[test]
    fn ext_radiation_matches_direct_formula() {
        let direct = |b: f64, mi: f64, mj: f64, s: f64| {
            let a = (mi + mj + s).powf(b);
            let bb = (mi + s).powf(b);
            (a - bb) * (mi.powf(b) + 1.0) / ((bb + 1.0) * (a + 1.0))
        };
        for &(b, mi, mj, s) in &[(0.5, 10.0, 5.0, 3.0), (1.0, 100.0, 1.0, 0.0), (2.0, 3.0, 40.0, 9.0)] {
            let p = PairInputs {
                origin_mass: mi,
                dest_mass: mj,
                intervening: s,
                distance_km: 1.0,
            };
            let k = ln_kernel(ModelKind::ExtRadiation, b, p).exp();
            let d = direct(b, mi, mj, s);
            assert!((k - d).abs() <= 1e-12 * d, "{k} vs {d}");
        }
        // huge beta stays finite in log space
        let p = PairInputs {
            origin_mass: 1e6,
            dest_mass: 1e5,
            intervening: 1e6,
            distance_km: 1.0,
        };
        assert!(ln_kernel(ModelKind::ExtRadiation, 100.0, p).is_finite());
    }

    #[test]
    fn calibration_rejects_radiation() {
        let z = table(&[(0.0, 10.0), (1.0, 5.0)]);
        let t: FlowMatrix = FlowMatrix::new(0, z.ids().clone());
        assert!(matches!(
            calibrate_beta(ModelKind::Radiation, &z, &pairs(&z), &t, prod(0.1)),
            Err(Error::NoBeta(_))
        ));
    }
}
