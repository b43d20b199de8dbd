//! Agreement measures between an observed flow matrix and a prediction.
//!
//! All matrix-level sums run over the `n (n - 1)` ordered off-diagonal pairs,
//! structural zeros included. Sums follow the matrices' (origin, destination)
//! order so results are reproducible bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{aggregates, pair_count, FlowMatrix, FlowValue};
use crate::geo::PairFeatureSet;

/// Width of a distance histogram bin, kilometers.
pub const DISTANCE_BIN_KM: f64 = 2.0;

fn check_universe<A: FlowValue, B: FlowValue>(t: &FlowMatrix<A>, p: &FlowMatrix<B>) -> Result<()> {
    if t.same_universe(p.zone_ids()) {
        Ok(())
    } else {
        Err(Error::ZoneUniverseMismatch)
    }
}

/// Calls `f(i, j, t_ij, p_ij)` for every pair stored in either matrix, in
/// pair order.
fn for_union<A: FlowValue, B: FlowValue>(
    t: &FlowMatrix<A>,
    p: &FlowMatrix<B>,
    mut f: impl FnMut(usize, usize, f64, f64),
) {
    let mut a = t.entries().peekable();
    let mut b = p.entries().peekable();
    loop {
        match (a.peek().copied(), b.peek().copied()) {
            (None, None) => break,
            (Some((i, j, x)), None) => {
                f(i, j, x.to_f64(), 0.0);
                a.next();
            }
            (None, Some((i, j, y))) => {
                f(i, j, 0.0, y.to_f64());
                b.next();
            }
            (Some((i, j, x)), Some((k, l, y))) => match (i, j).cmp(&(k, l)) {
                std::cmp::Ordering::Less => {
                    f(i, j, x.to_f64(), 0.0);
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    f(k, l, 0.0, y.to_f64());
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    f(i, j, x.to_f64(), y.to_f64());
                    a.next();
                    b.next();
                }
            },
        }
    }
}

fn common_part(sum_min: f64, sum_a: f64, sum_b: f64) -> f64 {
    let denom = sum_a + sum_b;
    if denom == 0.0 {
        1.0
    } else {
        2.0 * sum_min / denom
    }
}

/// Common part of commuters: `2 Σ min(T, T̂) / (Σ T + Σ T̂)`. Two empty
/// matrices agree perfectly.
pub fn cpc<A: FlowValue, B: FlowValue>(truth: &FlowMatrix<A>, pred: &FlowMatrix<B>) -> Result<f64> {
    check_universe(truth, pred)?;
    let (mut min, mut st, mut sp) = (0.0, 0.0, 0.0);
    for_union(truth, pred, |_, _, t, p| {
        min += t.min(p);
        st += t;
        sp += p;
    });
    Ok(common_part(min, st, sp))
}

/// Histogram of migrants by trip distance; bin `b` holds distances in
/// `[2b, 2b + 2)` km.
pub fn distance_histogram<V: FlowValue>(
    flows: &FlowMatrix<V>,
    distances: &PairFeatureSet,
) -> Result<BTreeMap<u64, f64>> {
    if !flows.same_universe(distances.zone_ids()) {
        return Err(Error::MissingDistance);
    }
    let mut hist = BTreeMap::new();
    for (i, j, v) in flows.entries() {
        let d = distances.distance(i, j);
        if !(d.is_finite() && d >= 0.0) {
            return Err(Error::MissingDistance);
        }
        *hist.entry((d / DISTANCE_BIN_KM).floor() as u64).or_insert(0.0) += v.to_f64();
    }
    Ok(hist)
}

/// CPC between the 2 km trip-distance histograms of the two matrices.
pub fn cpc_d<A: FlowValue, B: FlowValue>(
    truth: &FlowMatrix<A>,
    pred: &FlowMatrix<B>,
    distances: &PairFeatureSet,
) -> Result<f64> {
    check_universe(truth, pred)?;
    let ht = distance_histogram(truth, distances)?;
    let hp = distance_histogram(pred, distances)?;
    let (mut min, mut st, mut sp) = (0.0, 0.0, 0.0);
    for (bin, &t) in &ht {
        min += t.min(hp.get(bin).copied().unwrap_or(0.0));
        st += t;
    }
    for p in hp.values() {
        sp += p;
    }
    Ok(common_part(min, st, sp))
}

fn squared_error<A: FlowValue, B: FlowValue>(t: &FlowMatrix<A>, p: &FlowMatrix<B>) -> f64 {
    let mut sse = 0.0;
    for_union(t, p, |_, _, a, b| sse += (a - b) * (a - b));
    sse
}

/// Root mean squared error over all `n (n - 1)` ordered pairs.
pub fn rmse<A: FlowValue, B: FlowValue>(truth: &FlowMatrix<A>, pred: &FlowMatrix<B>) -> Result<f64> {
    check_universe(truth, pred)?;
    let pairs = pair_count(truth.n_zones());
    if pairs == 0 {
        return Ok(0.0);
    }
    Ok((squared_error(truth, pred) / pairs as f64).sqrt())
}

/// Coefficient of determination over all ordered pairs.
pub fn r2<A: FlowValue, B: FlowValue>(truth: &FlowMatrix<A>, pred: &FlowMatrix<B>) -> Result<f64> {
    check_universe(truth, pred)?;
    let pairs = pair_count(truth.n_zones());
    if pairs == 0 {
        return Err(Error::DegenerateTruth);
    }
    let mean = truth.total().to_f64() / pairs as f64;
    let mut sst = 0.0;
    for (_, _, v) in truth.entries() {
        let d = v.to_f64() - mean;
        sst += d * d;
    }
    sst += (pairs - truth.nnz()) as f64 * mean * mean;
    if sst == 0.0 {
        return Err(Error::DegenerateTruth);
    }
    Ok(1.0 - squared_error(truth, pred) / sst)
}

/// r² between two vectors.
pub fn vector_r2(truth: &[f64], pred: &[f64]) -> Result<f64> {
    assert_eq!(truth.len(), pred.len());
    if truth.is_empty() {
        return Err(Error::DegenerateTruth);
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let sst: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if sst == 0.0 {
        return Err(Error::DegenerateTruth);
    }
    let sse: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(1.0 - sse / sst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncomingMetrics {
    pub mae: f64,
    pub r2: f64,
}

/// MAE and r² between the per-zone incoming totals of the two matrices.
pub fn incoming_metrics<A: FlowValue, B: FlowValue>(
    truth: &FlowMatrix<A>,
    pred: &FlowMatrix<B>,
) -> Result<IncomingMetrics> {
    check_universe(truth, pred)?;
    let v: Vec<f64> = aggregates(truth).incoming.into_iter().map(FlowValue::to_f64).collect();
    let w: Vec<f64> = aggregates(pred).incoming.into_iter().map(FlowValue::to_f64).collect();
    let mae = if v.is_empty() {
        0.0
    } else {
        v.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum::<f64>() / v.len() as f64
    };
    Ok(IncomingMetrics {
        mae,
        r2: vector_r2(&v, &w)?,
    })
}

/// The six evaluation measures for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cpc: f64,
    pub cpc_d: f64,
    pub rmse: f64,
    pub r2: f64,
    pub incoming_mae: f64,
    pub incoming_r2: f64,
}

impl EvalReport {
    pub const FIELDS: [&'static str; 6] = ["cpc", "cpc_d", "rmse", "r2", "incoming_mae", "incoming_r2"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.cpc,
            self.cpc_d,
            self.rmse,
            self.r2,
            self.incoming_mae,
            self.incoming_r2,
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        EvalReport {
            cpc: v[0],
            cpc_d: v[1],
            rmse: v[2],
            r2: v[3],
            incoming_mae: v[4],
            incoming_r2: v[5],
        }
    }
}

pub fn evaluate<A: FlowValue, B: FlowValue>(
    truth: &FlowMatrix<A>,
    pred: &FlowMatrix<B>,
    distances: &PairFeatureSet,
) -> Result<EvalReport> {
    let incoming = incoming_metrics(truth, pred)?;
    Ok(EvalReport {
        cpc: cpc(truth, pred)?,
        cpc_d: cpc_d(truth, pred, distances)?,
        rmse: rmse(truth, pred)?,
        r2: r2(truth, pred)?,
        incoming_mae: incoming.mae,
        incoming_r2: incoming.r2,
    })
}

/// An [`EvalReport`] tagged with what produced it, serialized flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub year: i32,
    pub features: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{Zone, ZoneTable};
    use crate::geo::{pair_features, Centroid};
    use std::sync::Arc;

    fn ids(n: usize) -> Arc<[String]> {
        (0..n).map(|k| format!("z{k}")).collect()
    }

    fn matrix<V: FlowValue>(n: usize, entries: &[(usize, usize, V)]) -> FlowMatrix<V> {
        let mut m = FlowMatrix::new(0, ids(n));
        for &(i, j, v) in entries {
            m.add(i, j, v).unwrap();
        }
        m
    }

    /// Zones at given longitudes on the equator (1 degree is ~111 km).
    fn line_pairs(lons: &[f64]) -> PairFeatureSet {
        let zones = lons
            .iter()
            .enumerate()
            .map(|(k, &lon)| Zone {
                id: format!("z{k}"),
                centroid: Centroid::new(0.0, lon).unwrap(),
                population: 1.0,
                features: vec![],
            })
            .collect();
        pair_features(&ZoneTable::new(zones, vec![]).unwrap(), &[]).unwrap()
    }

    #[test]
    fn cpc_cases() {
        let t = matrix(3, &[(0, 1, 2u64), (1, 0, 2)]);
        assert_eq!(cpc(&t, &t).unwrap(), 1.0);
        let p = matrix(3, &[(0, 1, 1.0), (1, 0, 1.0), (0, 2, 1.0), (2, 0, 1.0)]);
        assert_eq!(cpc(&t, &p).unwrap(), 0.5);
        let disjoint = matrix(3, &[(1, 2, 4.0)]);
        assert_eq!(cpc(&t, &disjoint).unwrap(), 0.0);
        let e: FlowMatrix = matrix(3, &[]);
        assert_eq!(cpc(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn universe_mismatch() {
        let a = matrix(3, &[(0, 1, 1u64)]);
        let b = matrix(4, &[(0, 1, 1u64)]);
        assert!(matches!(cpc(&a, &b), Err(Error::ZoneUniverseMismatch)));
        assert!(matches!(rmse(&a, &b), Err(Error::ZoneUniverseMismatch)));
        assert!(matches!(r2(&a, &b), Err(Error::ZoneUniverseMismatch)));
        assert!(matches!(incoming_metrics(&a, &b), Err(Error::ZoneUniverseMismatch)));
    }

    #[test]
    fn cpc_d_cases() {
        // 0.009 degrees ~ 1 km, 0.045 degrees ~ 5 km
        let pairs = line_pairs(&[0.0, 0.009, 0.045]);
        assert_eq!(pairs.distance(0, 1).floor(), 1.0);
        assert_eq!(pairs.distance(0, 2).floor(), 5.0);
        let t = matrix(3, &[(0, 1, 6u64)]);
        let far = matrix(3, &[(0, 2, 6.0)]);
        assert_eq!(cpc_d(&t, &t, &pairs).unwrap(), 1.0);
        assert_eq!(cpc_d(&t, &far, &pairs).unwrap(), 0.0);
        // 1 -> 0 has the same length as 0 -> 1
        let moved = matrix(3, &[(1, 0, 6.0)]);
        assert_eq!(cpc_d(&t, &moved, &pairs).unwrap(), 1.0);
        assert_eq!(cpc(&t, &moved).unwrap(), 0.0);
    }

    #[test]
    fn cpc_d_needs_matching_distances() {
        let pairs = line_pairs(&[0.0, 1.0]);
        let t = matrix(3, &[(0, 1, 6u64)]);
        assert!(matches!(cpc_d(&t, &t, &pairs), Err(Error::MissingDistance)));
    }

    #[test]
    fn rmse_cases() {
        let t = matrix(2, &[(0, 1, 3u64)]);
        let e = matrix::<f64>(2, &[]);
        assert!((rmse(&t, &e).unwrap() - (4.5f64).sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        let half = matrix(2, &[(0, 1, 1.5)]);
        let double = matrix(2, &[(0, 1, -3.0)]);
        let r1 = rmse(&t, &half).unwrap();
        let r2 = rmse(&t, &double).unwrap();
        assert!((r2 - 4.0 * r1).abs() < 1e-12);
    }

    #[test]
    fn r2_cases() {
        let t = matrix(3, &[(0, 1, 6u64), (1, 2, 3), (2, 0, 3)]);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        let mean = 12.0 / 6.0;
        let flat = matrix(
            3,
            &[
                (0, 1, mean),
                (0, 2, mean),
                (1, 0, mean),
                (1, 2, mean),
                (2, 0, mean),
                (2, 1, mean),
            ],
        );
        assert!(r2(&t, &flat).unwrap().abs() < 1e-15);
        // truth over pairs (01,02,10,12,20,21) = (6,0,0,3,3,0), mean 2, SST = 16+4+4+1+1+4 = 30
        // prediction (0,6,6,0,0,3): SSE = 36+36+36+9+9+9 = 135
        let bad = matrix(3, &[(0, 2, 6.0), (1, 0, 6.0), (2, 1, 3.0)]);
        assert!((r2(&t, &bad).unwrap() - (1.0 - 135.0 / 30.0)).abs() < 1e-15);
        let constant = matrix::<u64>(2, &[(0, 1, 1), (1, 0, 1)]);
        assert!(matches!(r2(&constant, &constant), Err(Error::DegenerateTruth)));
    }

    #[test]
    fn incoming_cases() {
        // v = (5, 7, 0), v̂ = (4, 9, 0)
        let t = matrix(3, &[(1, 0, 5u64), (0, 1, 7)]);
        let p = matrix(3, &[(1, 0, 4.0), (2, 1, 9.0)]);
        let m = incoming_metrics(&t, &p).unwrap();
        assert!((m.mae - 1.0).abs() < 1e-15);
        let same = incoming_metrics(&t, &t).unwrap();
        assert_eq!((same.mae, same.r2), (0.0, 1.0));
    }

    #[test]
    fn incoming_mass_swap_keeps_cpc_d() {
        // zones 0, 1, 2 with 0 in the middle: 0->1 and 0->2 have equal length
        let pairs = line_pairs(&[0.0, 0.5, -0.5]);
        assert!((pairs.distance(0, 1) - pairs.distance(0, 2)).abs() < 1e-9);
        let t = matrix(3, &[(0, 1, 10u64), (1, 0, 2)]);
        let p = matrix(3, &[(0, 2, 10.0), (1, 0, 2.0)]);
        assert_eq!(cpc_d(&t, &p, &pairs).unwrap(), 1.0);
        assert!(incoming_metrics(&t, &p).unwrap().mae > 0.0);
    }

    #[test]
    fn report_json_is_flat() {
        let rec = EvalRecord {
            model: "radiation".into(),
            year: 2014,
            features: "traditional".into(),
            report: EvalReport::from_values([0.5, 0.6, 1.0, 0.2, 3.0, 0.1]),
        };
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 9);
        for f in EvalReport::FIELDS {
            assert!(obj[f].is_number(), "{f}");
        }
        let back: EvalRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, rec);
    }
}
