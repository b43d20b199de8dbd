//! Zones, yearly origin/destination flow matrices and their per-zone totals.
//!
//! Zone CSV: `zone_id,lat,lon,population[,feature...]`. Every extra column is
//! a numeric zone feature.
//!
//! Flow CSV: `year,origin_id,destination_id,count`. Rows with a zero count are
//! dropped, repeated `(year, origin, destination)` rows are summed and
//! within-zone rows are rejected.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::ops::Add;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Centroid;

/// Reserved zone column that is 1 for every zone; its intervening aggregate
/// counts the zones in between.
pub const ZONE_COUNT: &str = "zone_count";
pub const POPULATION: &str = "population";

const ZONE_HEADER: [&str; 4] = ["zone_id", "lat", "lon", POPULATION];
/// Columns of a flow file.
pub const FLOW_HEADER: [&str; 4] = ["year", "origin_id", "destination_id", "count"];

/// Number of ordered pairs `(i, j)`, `i != j`, among `n` zones.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1)
}

/// Position of the ordered pair `(i, j)` in origin-major pair order.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < n && j < n);
    i * (n - 1) + if j < i { j } else { j - 1 }
}

/// Inverse of [`pair_index`].
pub fn pair_at(n: usize, p: usize) -> (usize, usize) {
    let i = p / (n - 1);
    let r = p % (n - 1);
    (i, if r < i { r } else { r + 1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub centroid: Centroid,
    pub population: f64,
    pub features: Vec<f64>,
}

/// Zones sorted by id. Row position is the zone index used everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneTable {
    zones: Vec<Zone>,
    feature_names: Vec<String>,
    ids: Arc<[String]>,
    index: HashMap<String, usize>,
}

impl ZoneTable {
    pub fn new(mut zones: Vec<Zone>, feature_names: Vec<String>) -> Result<Self> {
        for name in &feature_names {
            if ZONE_HEADER.contains(&name.as_str()) {
                return Err(Error::InvalidConfig(format!("feature column `{name}` is reserved")));
            }
        }
        for z in &zones {
            if !(z.population.is_finite() && z.population >= 0.0) {
                return Err(Error::InvalidPopulation {
                    zone: z.id.clone(),
                    value: z.population,
                });
            }
            if z.features.len() != feature_names.len() {
                return Err(Error::InvalidConfig(format!(
                    "zone `{}` has {} features, expected {}",
                    z.id,
                    z.features.len(),
                    feature_names.len()
                )));
            }
        }
        zones.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(zones.len());
        for (k, z) in zones.iter().enumerate() {
            if index.insert(z.id.clone(), k).is_some() {
                return Err(Error::DuplicateZone(z.id.clone()));
            }
        }
        let ids = zones.iter().map(|z| z.id.clone()).collect();
        Ok(ZoneTable {
            zones,
            feature_names,
            ids,
            index,
        })
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_csv(std::fs::File::open(path)?, path)
    }

    /// `source` is only used in error messages.
    pub fn read_csv<R: Read>(reader: R, source: impl Into<PathBuf>) -> Result<Self> {
        let source = source.into();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let parse_err = |line: u64, message: String| Error::Parse {
            path: source.clone(),
            line,
            message,
        };
        let mut required = [0usize; 4];
        for (slot, name) in required.iter_mut().zip(ZONE_HEADER) {
            *slot = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))?;
        }
        let extra: Vec<usize> = (0..header.len()).filter(|c| !required.contains(c)).collect();
        let feature_names = extra.iter().map(|&c| header[c].to_string()).collect();

        let mut zones = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let num = |c: usize| -> Result<f64> {
                let raw = &record[c];
                let v: f64 = raw
                    .parse()
                    .map_err(|_| parse_err(line, format!("`{}`: not a number: `{raw}`", &header[c])))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("`{}`: non-finite value", &header[c])));
                }
                Ok(v)
            };
            let centroid =
                Centroid::new(num(required[1])?, num(required[2])?).map_err(|e| parse_err(line, e.to_string()))?;
            zones.push(Zone {
                id: record[required[0]].to_string(),
                centroid,
                population: num(required[3])?,
                features: extra.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            });
        }
        Self::new(zones, feature_names)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = ZONE_HEADER.to_vec();
        header.extend(self.feature_names.iter().map(String::as_str));
        w.write_record(&header)?;
        for z in &self.zones {
            let mut row = vec![
                z.id.clone(),
                z.centroid.lat().to_string(),
                z.centroid.lon().to_string(),
                z.population.to_string(),
            ];
            row.extend(z.features.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn zone(&self, i: usize) -> &Zone {
        &self.zones[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Zone> {
        self.zones.iter()
    }

    pub fn ids(&self) -> &Arc<[String]> {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub(crate) fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::UnknownZone(id.to_string()))
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// `population` followed by the extra feature columns.
    pub fn column_names(&self) -> Vec<String> {
        std::iter::once(POPULATION.to_string())
            .chain(self.feature_names.iter().cloned())
            .collect()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.zones.iter().map(|z| z.population).collect()
    }

    /// Values of a zone variable in zone order. Besides the table's columns,
    /// [`ZONE_COUNT`] is always available unless a column shadows it.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        if name == POPULATION {
            return Ok(self.populations());
        }
        if let Some(c) = self.feature_names.iter().position(|f| f == name) {
            return Ok(self.zones.iter().map(|z| z.features[c]).collect());
        }
        if name == ZONE_COUNT {
            return Ok(vec![1.0; self.len()]);
        }
        Err(Error::UnknownFeature(name.to_string()))
    }
}

/// Numeric type stored in a [`FlowMatrix`]: integer counts for observations,
/// reals for predictions.
pub trait FlowValue:
    Copy + Default + PartialOrd + Add<Output = Self> + Debug + Display + Send + Sync + 'static
{
    fn to_f64(self) -> f64;

    fn is_zero(self) -> bool {
        self == Self::default()
    }
}

impl FlowValue for u64 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl FlowValue for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Sparse year-stamped origin/destination matrix. Only non-zero off-diagonal
/// entries are stored, keyed by zone index.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix<V = u64> {
    year: i32,
    zone_ids: Arc<[String]>,
    entries: BTreeMap<(usize, usize), V>,
}

/// Real-valued model output over the same zone universe.
pub type PredictedFlows = FlowMatrix<f64>;

impl<V: FlowValue> FlowMatrix<V> {
    pub fn new(year: i32, zone_ids: Arc<[String]>) -> Self {
        FlowMatrix {
            year,
            zone_ids,
            entries: BTreeMap::new(),
        }
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn zone_ids(&self) -> &Arc<[String]> {
        &self.zone_ids
    }

    pub fn n_zones(&self) -> usize {
        self.zone_ids.len()
    }

    pub fn same_universe(&self, other_ids: &Arc<[String]>) -> bool {
        Arc::ptr_eq(&self.zone_ids, other_ids) || self.zone_ids[..] == other_ids[..]
    }

    /// Adds `value` to entry `(i, j)`. Zero values are ignored.
    pub fn add(&mut self, i: usize, j: usize, value: V) -> Result<()> {
        let n = self.n_zones();
        if i >= n || j >= n {
            return Err(Error::UnknownZone(format!("index {}", i.max(j))));
        }
        if i == j {
            return Err(Error::DiagonalEntry {
                line: 0,
                zone: self.zone_ids[i].clone(),
            });
        }
        if value.is_zero() {
            return Ok(());
        }
        let slot = self.entries.entry((i, j)).or_default();
        *slot = *slot + value;
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> V {
        self.entries.get(&(i, j)).copied().unwrap_or_default()
    }

    /// Non-zero entries in (origin, destination) order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, V)> + '_ {
        self.entries.iter().map(|(&(i, j), &v)| (i, j, v))
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> V {
        self.entries.values().fold(V::default(), |a, &b| a + b)
    }

    pub fn to_f64(&self) -> PredictedFlows {
        FlowMatrix {
            year: self.year,
            zone_ids: self.zone_ids.clone(),
            entries: self.entries.iter().map(|(&k, &v)| (k, v.to_f64())).collect(),
        }
    }

    /// Writes this matrix as flow CSV rows (with header).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_flows(writer, std::slice::from_ref(self))
    }
}

impl PredictedFlows {
    /// Collects per-pair values (in pair order) into a matrix, skipping zeros.
    pub fn from_pair_values(year: i32, zone_ids: Arc<[String]>, values: &[f64]) -> Self {
        let n = zone_ids.len();
        assert_eq!(values.len(), pair_count(n), "one value per ordered pair");
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(p, &v)| (pair_at(n, p), v))
            .collect();
        FlowMatrix {
            year,
            zone_ids,
            entries,
        }
    }

    /// Applies `f(i, j, value)` to every stored entry; zero results are dropped.
    pub fn map_entries(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        FlowMatrix {
            year: self.year,
            zone_ids: self.zone_ids.clone(),
            entries: self
                .entries
                .iter()
                .map(|(&(i, j), &v)| ((i, j), f(i, j, v)))
                .filter(|(_, v)| *v != 0.0)
                .collect(),
        }
    }
}

/// All years found in a flow file, keyed by year.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowSeries<V = u64> {
    years: BTreeMap<i32, FlowMatrix<V>>,
}

impl<V: FlowValue> FlowSeries<V> {
    pub fn from_matrices(matrices: impl IntoIterator<Item = FlowMatrix<V>>) -> Self {
        FlowSeries {
            years: matrices.into_iter().map(|m| (m.year, m)).collect(),
        }
    }

    pub fn years(&self) -> Vec<i32> {
        self.years.keys().copied().collect()
    }

    pub fn year(&self, year: i32) -> Result<&FlowMatrix<V>> {
        self.years.get(&year).ok_or(Error::MissingYear(year))
    }

    pub fn len(&self) -> usize {
        self.years.len()
    }

    pub fn is_empty(&self) -> bool {
        self.years.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FlowMatrix<V>> {
        self.years.values()
    }

    pub fn into_matrices(self) -> Vec<FlowMatrix<V>> {
        self.years.into_values().collect()
    }
}

/// Reads observed flows for `zones`. Counts must be non-negative integers.
pub fn load_flows(path: impl AsRef<Path>, zones: &ZoneTable) -> Result<FlowSeries> {
    let path = path.as_ref();
    read_flows(std::fs::File::open(path)?, path, zones)
}

pub fn read_flows<R: Read>(reader: R, source: impl Into<PathBuf>, zones: &ZoneTable) -> Result<FlowSeries> {
    read_generic(reader, source.into(), zones, |raw| {
        if raw.starts_with('-') {
            return Err(CountError::Negative);
        }
        raw.parse::<u64>().map_err(|e| CountError::Parse(e.to_string()))
    })
}

/// Reads real-valued predictions written with the same schema.
pub fn load_predicted(path: impl AsRef<Path>, zones: &ZoneTable) -> Result<FlowSeries<f64>> {
    let path = path.as_ref();
    read_predicted(std::fs::File::open(path)?, path, zones)
}

pub fn read_predicted<R: Read>(reader: R, source: impl Into<PathBuf>, zones: &ZoneTable) -> Result<FlowSeries<f64>> {
    read_generic(reader, source.into(), zones, |raw| {
        let v: f64 = raw
            .parse()
            .map_err(|e: std::num::ParseFloatError| CountError::Parse(e.to_string()))?;
        if v < 0.0 {
            Err(CountError::Negative)
        } else if !v.is_finite() {
            Err(CountError::Parse("non-finite".into()))
        } else {
            Ok(v)
        }
    })
}

enum CountError {
    Negative,
    Parse(String),
}

fn read_generic<R: Read, V: FlowValue>(
    reader: R,
    source: PathBuf,
    zones: &ZoneTable,
    parse_count: impl Fn(&str) -> std::result::Result<V, CountError>,
) -> Result<FlowSeries<V>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: source.clone(),
        line,
        message,
    };
    let mut cols = [0usize; 4];
    for (slot, name) in cols.iter_mut().zip(FLOW_HEADER) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))?;
    }

    let mut years: BTreeMap<i32, FlowMatrix<V>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let year: i32 = record[cols[0]]
            .parse()
            .map_err(|_| parse_err(line, format!("bad year `{}`", &record[cols[0]])))?;
        let zone = |c: usize| {
            zones.index_of(&record[c]).ok_or_else(|| Error::UnknownZoneAt {
                line,
                zone: record[c].to_string(),
            })
        };
        let (i, j) = (zone(cols[1])?, zone(cols[2])?);
        let raw = &record[cols[3]];
        let count = parse_count(raw).map_err(|e| match e {
            CountError::Negative => Error::NegativeCount {
                line,
                count: raw.to_string(),
            },
            CountError::Parse(m) => parse_err(line, format!("bad count `{raw}`: {m}")),
        })?;
        if i == j {
            return Err(Error::DiagonalEntry {
                line,
                zone: record[cols[1]].to_string(),
            });
        }
        years
            .entry(year)
            .or_insert_with(|| FlowMatrix::new(year, zones.ids().clone()))
            .add(i, j, count)?;
    }
    Ok(FlowSeries { years })
}

/// Writes matrices as flow CSV, rows sorted by year, origin, destination.
pub fn write_flows<W: Write, V: FlowValue>(writer: W, matrices: &[FlowMatrix<V>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FLOW_HEADER)?;
    let mut sorted: Vec<&FlowMatrix<V>> = matrices.iter().collect();
    sorted.sort_by_key(|m| m.year);
    for m in sorted {
        let year = m.year.to_string();
        for (i, j, v) in m.entries() {
            w.write_record([year.as_str(), &m.zone_ids[i], &m.zone_ids[j], &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Outgoing (row) and incoming (column) totals per zone.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoneAggregates<V = u64> {
    pub outgoing: Vec<V>,
    pub incoming: Vec<V>,
}

pub fn aggregates<V: FlowValue>(flows: &FlowMatrix<V>) -> ZoneAggregates<V> {
    let n = flows.n_zones();
    let mut outgoing = vec![V::default(); n];
    let mut incoming = vec![V::default(); n];
    for (i, j, v) in flows.entries() {
        outgoing[i] = outgoing[i] + v;
        incoming[j] = incoming[j] + v;
    }
    ZoneAggregates { outgoing, incoming }
}
