//! Pair observations for the learned models.
//!
//! One row per ordered zone pair: origin features, then destination features,
//! then joint pair features, with next year's flow as the target. Training
//! uses a negatively downsampled copy ([`SampledObservations`]); prediction
//! and evaluation only accept the full [`ObservationSet`], and the two are
//! different types so a sampled set cannot reach an evaluation entry point:
//!
//! ```compile_fail
//! # use migra::dataset::{downsample, ObservationSet};
//! # use migra::learn::{predict, FittedModel};
//! fn evaluate(model: &FittedModel, full: &ObservationSet) {
//!     let sampled = downsample(full, 5, 0).unwrap();
//!     let _ = predict(model, &sampled);
//! }
//! ```

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{pair_count, FlowMatrix, PredictedFlows, ZoneTable, POPULATION, ZONE_COUNT};
use crate::geo::{intervening_name, PairFeatureSet, DISTANCE};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureVariant {
    /// Exactly the inputs of the classic models.
    Traditional,
    /// Every zone column, plus the intervening aggregate of each.
    Extended,
}

impl FeatureVariant {
    pub fn name(self) -> &'static str {
        match self {
            FeatureVariant::Traditional => "traditional",
            FeatureVariant::Extended => "extended",
        }
    }
}

impl std::str::FromStr for FeatureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "traditional" => Ok(FeatureVariant::Traditional),
            "extended" => Ok(FeatureVariant::Extended),
            _ => Err(Error::InvalidConfig(format!("unknown feature set `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub origin_features: Vec<String>,
    pub destination_features: Vec<String>,
    /// Columns of a [`PairFeatureSet`].
    pub pair_features: Vec<String>,
    pub variant: FeatureVariant,
}

impl FeatureSchema {
    /// Origin and destination population, distance and intervening population.
    pub fn traditional() -> Self {
        FeatureSchema {
            origin_features: vec![POPULATION.to_string()],
            destination_features: vec![POPULATION.to_string()],
            pair_features: vec![DISTANCE.to_string(), intervening_name(POPULATION)],
            variant: FeatureVariant::Traditional,
        }
    }

    pub fn extended(zones: &ZoneTable) -> Self {
        let cols = zones.column_names();
        let mut pair = vec![DISTANCE.to_string()];
        pair.extend(cols.iter().map(|c| intervening_name(c)));
        if !cols.iter().any(|c| c == ZONE_COUNT) {
            pair.push(intervening_name(ZONE_COUNT));
        }
        FeatureSchema {
            origin_features: cols.clone(),
            destination_features: cols,
            pair_features: pair,
            variant: FeatureVariant::Extended,
        }
    }

    pub fn for_variant(variant: FeatureVariant, zones: &ZoneTable) -> Self {
        match variant {
            FeatureVariant::Traditional => Self::traditional(),
            FeatureVariant::Extended => Self::extended(zones),
        }
    }

    /// Zone variables whose intervening aggregates the schema needs; pass
    /// these to [`crate::geo::pair_features`].
    pub fn intervening_variables(&self) -> Vec<&str> {
        self.pair_features
            .iter()
            .filter_map(|p| p.strip_prefix("intervening_"))
            .collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.origin_features
            .iter()
            .map(|f| format!("origin_{f}"))
            .chain(self.destination_features.iter().map(|f| format!("destination_{f}")))
            .chain(self.pair_features.iter().cloned())
            .collect()
    }

    pub fn width(&self) -> usize {
        self.origin_features.len() + self.destination_features.len() + self.pair_features.len()
    }
}

/// Row-major feature matrix with targets and the zone pair behind each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    columns: Arc<[String]>,
    zone_ids: Arc<[String]>,
    year: i32,
    data: Vec<f64>,
    targets: Vec<f64>,
    pairs: Vec<(u32, u32)>,
}

/// Read access shared by full and sampled observation sets.
pub trait Observations: Sized {
    fn rows(&self) -> &Rows;

    /// Same rows and targets with a different feature matrix.
    fn with_data(&self, data: Vec<f64>) -> Self;

    fn columns(&self) -> &[String] {
        &self.rows().columns
    }

    fn n_cols(&self) -> usize {
        self.rows().columns.len()
    }

    fn n_rows(&self) -> usize {
        self.rows().targets.len()
    }

    fn data(&self) -> &[f64] {
        &self.rows().data
    }

    fn row(&self, r: usize) -> &[f64] {
        let w = self.n_cols();
        &self.rows().data[r * w..(r + 1) * w]
    }

    fn targets(&self) -> &[f64] {
        &self.rows().targets
    }

    /// `(origin, destination)` zone indices of row `r`.
    fn pair(&self, r: usize) -> (usize, usize) {
        let (i, j) = self.rows().pairs[r];
        (i as usize, j as usize)
    }

    fn zone_ids(&self) -> &Arc<[String]> {
        &self.rows().zone_ids
    }

    fn year(&self) -> i32 {
        self.rows().year
    }

    fn positives(&self) -> usize {
        self.targets().iter().filter(|&&t| t > 0.0).count()
    }

    /// Writes `columns..., origin, destination, target`.
    fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.columns().iter().map(String::as_str).collect();
        header.extend(["origin", "destination", "target"]);
        w.write_record(&header)?;
        let ids = self.zone_ids();
        for r in 0..self.n_rows() {
            let (i, j) = self.pair(r);
            let mut rec: Vec<String> = self.row(r).iter().map(f64::to_string).collect();
            rec.push(ids[i].clone());
            rec.push(ids[j].clone());
            rec.push(self.targets()[r].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Every ordered pair, in (origin, destination) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    rows: Rows,
}

/// Positive rows plus `k` resampled zero rows per positive. Training only.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledObservations {
    rows: Rows,
    k: usize,
}

impl Observations for ObservationSet {
    fn rows(&self) -> &Rows {
        &self.rows
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.rows.data.len());
        ObservationSet {
            rows: Rows {
                data,
                ..self.rows.clone()
            },
        }
    }
}

impl Observations for SampledObservations {
    fn rows(&self) -> &Rows {
        &self.rows
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.rows.data.len());
        SampledObservations {
            rows: Rows {
                data,
                ..self.rows.clone()
            },
            k: self.k,
        }
    }
}

impl SampledObservations {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Training rows that do not come from a zone pair enumeration, e.g.
    /// hand-made regression problems. Rows carry no zone pairs.
    pub fn from_rows(columns: Vec<String>, rows: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        if rows.len() != targets.len() || rows.iter().any(|r| r.len() != columns.len()) {
            return Err(Error::SchemaMismatch(format!(
                "{} rows of width {} and {} targets",
                rows.len(),
                columns.len(),
                targets.len()
            )));
        }
        Ok(SampledObservations {
            rows: Rows {
                columns: columns.into(),
                zone_ids: Arc::from(Vec::new()),
                year: 0,
                data: rows.concat(),
                targets: targets.to_vec(),
                pairs: vec![(0, 0); rows.len()],
            },
            k: 1,
        })
    }
}

impl ObservationSet {
    /// The targets as a flow matrix.
    pub fn truth(&self) -> PredictedFlows {
        PredictedFlows::from_pair_values(self.rows.year, self.rows.zone_ids.clone(), &self.rows.targets)
    }

    /// Fraction of rows with a positive target.
    pub fn density(&self) -> f64 {
        if self.n_rows() == 0 {
            0.0
        } else {
            self.positives() as f64 / self.n_rows() as f64
        }
    }
}

/// One observation per ordered pair; targets come from `targets` (zero where
/// it has no entry).
pub fn build(
    zones: &ZoneTable,
    pairs: &PairFeatureSet,
    targets: &FlowMatrix,
    schema: &FeatureSchema,
) -> Result<ObservationSet> {
    if pairs.zone_ids()[..] != zones.ids()[..] || !targets.same_universe(zones.ids()) {
        return Err(Error::ZoneUniverseMismatch);
    }
    let origin: Vec<Vec<f64>> = schema
        .origin_features
        .iter()
        .map(|f| zones.column(f))
        .collect::<Result<_>>()?;
    let dest: Vec<Vec<f64>> = schema
        .destination_features
        .iter()
        .map(|f| zones.column(f))
        .collect::<Result<_>>()?;
    let pair_cols: Vec<usize> = schema
        .pair_features
        .iter()
        .map(|f| pairs.column_index(f))
        .collect::<Result<_>>()?;

    let n = zones.len();
    let width = schema.width();
    let chunks: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity(n.saturating_sub(1) * width);
            for j in (0..n).filter(|&j| j != i) {
                out.extend(origin.iter().map(|c| c[i]));
                out.extend(dest.iter().map(|c| c[j]));
                out.extend(pair_cols.iter().map(|&c| pairs.value(c, i, j)));
            }
            out
        })
        .collect();

    let mut pair_list = Vec::with_capacity(pair_count(n));
    let mut target_vals = Vec::with_capacity(pair_count(n));
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            pair_list.push((i as u32, j as u32));
            target_vals.push(targets.get(i, j) as f64);
        }
    }
    Ok(ObservationSet {
        rows: Rows {
            columns: schema.column_names().into(),
            zone_ids: zones.ids().clone(),
            year: targets.year(),
            data: chunks.concat(),
            targets: target_vals,
            pairs: pair_list,
        },
    })
}

/// Keeps every positive row and adds `k` zero-target rows per positive, drawn
/// uniformly with replacement.
pub fn downsample(obs: &ObservationSet, k: usize, seed: u64) -> Result<SampledObservations> {
    if k == 0 {
        return Err(Error::InvalidConfig("negative sampling factor k must be >= 1".into()));
    }
    let (pos, zeros): (Vec<usize>, Vec<usize>) = (0..obs.n_rows()).partition(|&r| obs.targets()[r] > 0.0);
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    if zeros.is_empty() {
        return Err(Error::InvalidConfig("no zero-target rows to sample from".into()));
    }
    let mut rng = seed::rng(seed);
    let mut picked = pos;
    let n_pos = picked.len();
    picked.extend((0..n_pos * k).map(|_| zeros[rng.random_range(0..zeros.len())]));

    let w = obs.n_cols();
    let mut data = Vec::with_capacity(picked.len() * w);
    for &r in &picked {
        data.extend_from_slice(obs.row(r));
    }
    let src = &obs.rows;
    Ok(SampledObservations {
        rows: Rows {
            columns: src.columns.clone(),
            zone_ids: src.zone_ids.clone(),
            year: src.year,
            data,
            targets: picked.iter().map(|&r| src.targets[r]).collect(),
            pairs: picked.iter().map(|&r| src.pairs[r]).collect(),
        },
        k,
    })
}

/// Inclusive range for the negative sampling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    pub min: usize,
    pub max: usize,
}

/// Sparse data (well under a percent positive) gets `U{5,100}`, dense data
/// (around a fifth positive) `U{1,5}`. The split point is 5% positive.
pub fn default_k_range(density: f64) -> KRange {
    if density < 0.05 {
        KRange { min: 5, max: 100 }
    } else {
        KRange { min: 1, max: 5 }
    }
}

/// Column-wise standardization fitted on training rows. Constant columns are
/// left as they are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// `None` marks a constant column.
    pub std: Vec<Option<f64>>,
}

impl Scaler {
    pub fn fit<O: Observations>(obs: &O) -> Scaler {
        let (n, w) = (obs.n_rows(), obs.n_cols());
        let mut mean = vec![0.0; w];
        let mut std = vec![None; w];
        if n == 0 {
            return Scaler { mean, std };
        }
        for c in 0..w {
            let first = obs.row(0)[c];
            if (0..n).all(|r| obs.row(r)[c] == first) {
                mean[c] = first;
                continue;
            }
            let m = (0..n).map(|r| obs.row(r)[c]).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (obs.row(r)[c] - m).powi(2)).sum::<f64>() / n as f64;
            mean[c] = m;
            std[c] = Some(var.sqrt());
        }
        Scaler { mean, std }
    }

    pub fn transform_row(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            if let Some(s) = s {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn apply<O: Observations>(&self, obs: &O) -> O {
        let mut data = obs.data().to_vec();
        if obs.n_cols() > 0 {
            data.chunks_mut(obs.n_cols()).for_each(|r| self.transform_row(r));
        }
        obs.with_data(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::Zone;
    use crate::geo::{pair_features, Centroid};

    fn setup(n: usize) -> (ZoneTable, PairFeatureSet) {
        let zones = (0..n)
            .map(|k| Zone {
                id: format!("z{k}"),
                centroid: Centroid::new(k as f64 * 0.1, k as f64 * 0.2).unwrap(),
                population: 100.0 * (k + 1) as f64,
                features: vec![k as f64 * 3.0],
            })
            .collect();
        let zones = ZoneTable::new(zones, vec!["income".into()]).unwrap();
        let vars: Vec<String> = FeatureSchema::extended(&zones)
            .intervening_variables()
            .into_iter()
            .map(String::from)
            .collect();
        let refs: Vec<&str> = vars.iter().map(String::as_str).collect();
        let pairs = pair_features(&zones, &refs).unwrap();
        (zones, pairs)
    }

    fn flows(zones: &ZoneTable, entries: &[(usize, usize, u64)]) -> FlowMatrix {
        let mut m = FlowMatrix::new(2001, zones.ids().clone());
        for &(i, j, v) in entries {
            m.add(i, j, v).unwrap();
        }
        m
    }

    #[test]
    fn traditional_rows_and_columns() {
        let (zones, pairs) = setup(3);
        let t = flows(&zones, &[(0, 2, 4), (2, 1, 1)]);
        let obs = build(&zones, &pairs, &t, &FeatureSchema::traditional()).unwrap();
        assert_eq!(obs.n_rows(), 6);
        assert_eq!(obs.n_cols(), 4);
        assert_eq!(
            obs.columns(),
            [
                "origin_population",
                "destination_population",
                "distance",
                "intervening_population"
            ]
        );
        assert_eq!(obs.pair(1), (0, 2));
        assert_eq!(obs.targets()[1], 4.0);
        assert_eq!(obs.row(1)[..2], [100.0, 300.0]);
        assert_eq!(obs.row(1)[2], pairs.distance(0, 2));
        assert_eq!(obs.truth(), t.to_f64());
    }

    #[test]
    fn extended_schema_width() {
        let (zones, pairs) = setup(4);
        let schema = FeatureSchema::extended(&zones);
        // 2 zone columns each side; distance + 2 intervening + zone count
        assert_eq!(schema.width(), 2 * 2 + 4);
        let obs = build(&zones, &pairs, &flows(&zones, &[]), &schema).unwrap();
        assert_eq!(obs.n_cols(), 8);
        assert_eq!(obs.n_rows(), 12);
    }

    #[test]
    fn unknown_feature() {
        let (zones, pairs) = setup(3);
        let mut schema = FeatureSchema::traditional();
        schema.origin_features.push("rainfall".into());
        assert!(matches!(
            build(&zones, &pairs, &flows(&zones, &[]), &schema),
            Err(Error::UnknownFeature(_))
        ));
        let mut schema = FeatureSchema::traditional();
        schema.pair_features.push("intervening_rainfall".into());
        assert!(matches!(
            build(&zones, &pairs, &flows(&zones, &[]), &schema),
            Err(Error::UnknownFeature(_))
        ));
    }

    #[test]
    fn downsample_counts_and_replacement() {
        let (zones, pairs) = setup(5);
        let t = flows(&zones, &[(0, 1, 2), (3, 4, 1)]);
        let obs = build(&zones, &pairs, &t, &FeatureSchema::traditional()).unwrap();
        // 2 positives, 18 zeros; k = 30 needs 60 draws with replacement
        let s = downsample(&obs, 30, 9).unwrap();
        assert_eq!(s.n_rows(), 62);
        assert_eq!(s.positives(), 2);
        assert_eq!(s.k(), 30);
        assert_eq!(downsample(&obs, 30, 9).unwrap(), s);
        let none = build(&zones, &pairs, &flows(&zones, &[]), &FeatureSchema::traditional()).unwrap();
        assert!(matches!(downsample(&none, 3, 0), Err(Error::NoPositives)));
        assert!(downsample(&obs, 0, 0).is_err());
    }

    #[test]
    fn scaler_standardizes_and_keeps_constants() {
        let (zones, pairs) = setup(6);
        let mut schema = FeatureSchema::traditional();
        schema.origin_features.push(ZONE_COUNT.into());
        let obs = build(&zones, &pairs, &flows(&zones, &[]), &schema).unwrap();
        let sc = Scaler::fit(&obs);
        let scaled = sc.apply(&obs);
        let n = scaled.n_rows() as f64;
        for c in 0..scaled.n_cols() {
            let col: Vec<f64> = (0..scaled.n_rows()).map(|r| scaled.row(r)[c]).collect();
            if obs.columns()[c] == "origin_zone_count" {
                assert!(col.iter().all(|&x| x == 1.0));
                assert_eq!(sc.std[c], None);
                continue;
            }
            let m = col.iter().sum::<f64>() / n;
            let s = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9, "column {c}: {m} {s}");
        }
        assert_eq!(scaled.targets(), obs.targets());
    }

    #[test]
    fn scaler_reuses_training_statistics() {
        let (zones, pairs) = setup(5);
        let obs = build(&zones, &pairs, &flows(&zones, &[]), &FeatureSchema::traditional()).unwrap();
        let sc = Scaler::fit(&obs);
        let shifted = obs.with_data(obs.data().iter().map(|x| x + 1000.0).collect());
        let scaled = sc.apply(&shifted);
        let mean0 = (0..scaled.n_rows()).map(|r| scaled.row(r)[0]).sum::<f64>() / scaled.n_rows() as f64;
        assert!(mean0 > 1.0);
    }

    #[test]
    fn csv_export_header() {
        let (zones, pairs) = setup(3);
        let obs = build(
            &zones,
            &pairs,
            &flows(&zones, &[(1, 0, 3)]),
            &FeatureSchema::traditional(),
        )
        .unwrap();
        let mut out = Vec::new();
        obs.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "origin_population,destination_population,distance,intervening_population,origin,destination,target"
        );
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().nth(3).unwrap().ends_with(",z1,z0,3"));
    }

    #[test]
    fn k_ranges_follow_density() {
        assert_eq!(default_k_range(0.005), KRange { min: 5, max: 100 });
        assert_eq!(default_k_range(0.2), KRange { min: 1, max: 5 });
    }
}
