//! Great-circle geometry over zone centroids and the intervening-opportunity
//! aggregates that the radiation family of models is built on.
//!
//! For an ordered pair of zones `(i, j)` the intervening amount of a zone
//! variable `x` is the sum of `x` over every other zone whose centroid lies
//! strictly closer to `i` than `j` does. Zones at exactly the same distance as
//! `j` are not counted, so a two-zone system always has nothing intervening.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{pair_count, pair_index, ZoneTable};

/// Mean Earth radius (IUGG), kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Name of the distance column in every [`PairFeatureSet`].
pub const DISTANCE: &str = "distance";

/// Column name used for the intervening aggregate of a zone variable.
pub fn intervening_name(variable: &str) -> String {
    format!("intervening_{variable}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    lat: f64,
    lon: f64,
}

impl Centroid {
    /// Degrees. Latitude must lie in `[-90, 90]` and longitude in `[-180, 180)`.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidLatitude(lat));
        }
        if !(-180.0..180.0).contains(&lon) {
            return Err(Error::InvalidLongitude(lon));
        }
        Ok(Centroid { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Haversine distance in kilometers.
pub fn distance_km(a: Centroid, b: Centroid) -> f64 {
    if a == b {
        return 0.0;
    }
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = (b.lat - a.lat).to_radians() / 2.0;
    let dlon = (b.lon - a.lon).to_radians() / 2.0;
    let h = dlat.sin().powi(2) + lat1.cos() * lat2.cos() * dlon.sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterveningQuery {
    pub variable: String,
    pub origin: String,
    pub destination: String,
}

impl InterveningQuery {
    pub fn new(variable: impl Into<String>, origin: impl Into<String>, destination: impl Into<String>) -> Self {
        InterveningQuery {
            variable: variable.into(),
            origin: origin.into(),
            destination: destination.into(),
        }
    }
}

/// Sum of `q.variable` over the zones strictly inside the circle centered on
/// the origin whose radius reaches the destination. Linear scan.
pub fn intervening_sum(zones: &ZoneTable, q: &InterveningQuery) -> Result<f64> {
    let i = zones.require(&q.origin)?;
    let j = zones.require(&q.destination)?;
    if i == j {
        return Err(Error::SameOriginDestination(q.origin.clone()));
    }
    let values = zones.column(&q.variable)?;
    let origin = zones.zone(i).centroid;
    let radius = distance_km(origin, zones.zone(j).centroid);
    Ok(zones
        .iter()
        .enumerate()
        .filter(|&(k, z)| k != i && k != j && distance_km(origin, z.centroid) < radius)
        .map(|(k, _)| values[k])
        .sum())
}

/// Joint features for every ordered pair `(i, j)`, `i != j`: the distance
/// followed by one intervening aggregate per requested variable. Each column
/// is stored in pair order (origin index, then destination index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFeatureSet {
    zone_ids: Arc<[String]>,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl PairFeatureSet {
    pub fn zone_ids(&self) -> &Arc<[String]> {
        &self.zone_ids
    }

    pub fn n_zones(&self) -> usize {
        self.zone_ids.len()
    }

    /// Number of pair rows, `n (n - 1)`.
    pub fn len(&self) -> usize {
        pair_count(self.n_zones())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.columns[self.column_index(name)?])
    }

    pub fn value(&self, column: usize, i: usize, j: usize) -> f64 {
        self.columns[column][pair_index(self.n_zones(), i, j)]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.value(0, i, j)
    }

    /// Copy with every distance raised to at least `km`. Intervening sums are
    /// left as computed from the true distances.
    pub fn with_distance_floor(&self, km: f64) -> PairFeatureSet {
        let mut out = self.clone();
        out.columns[0].iter_mut().for_each(|d| *d = d.max(km));
        out
    }

    /// Rows as `(origin, destination, values)` in pair order.
    pub fn rows(&self) -> impl Iterator<Item = (&str, &str, Vec<f64>)> + '_ {
        let n = self.n_zones();
        (0..n)
            .flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(move |(i, j)| {
                let p = pair_index(n, i, j);
                let values = self.columns.iter().map(|c| c[p]).collect();
                (self.zone_ids[i].as_str(), self.zone_ids[j].as_str(), values)
            })
    }
}

/// Builds the pair feature set for `zones`. Every origin sorts the other zones
/// by distance once, so each variable costs `O(n^2 log n)` overall.
pub fn pair_features(zones: &ZoneTable, variables: &[&str]) -> Result<PairFeatureSet> {
    let values: Vec<Vec<f64>> = variables.iter().map(|v| zones.column(v)).collect::<Result<_>>()?;
    let n = zones.len();

    // (distance, intervening sums) per destination, one vector per origin
    let per_origin: Vec<Vec<(f64, Vec<f64>)>> = (0..n).into_par_iter().map(|i| origin_row(zones, &values, i)).collect();

    let mut columns = vec![vec![0.0; pair_count(n)]; variables.len() + 1];
    for (i, row) in per_origin.into_iter().enumerate() {
        for (j, (d, sums)) in row.into_iter().enumerate() {
            if j == i {
                continue;
            }
            let p = pair_index(n, i, j);
            columns[0][p] = d;
            for (c, s) in sums.into_iter().enumerate() {
                columns[c + 1][p] = s;
            }
        }
    }

    let mut names = vec![DISTANCE.to_string()];
    names.extend(variables.iter().map(|v| intervening_name(v)));
    Ok(PairFeatureSet {
        zone_ids: zones.ids().clone(),
        names,
        columns,
    })
}

fn origin_row(zones: &ZoneTable, values: &[Vec<f64>], i: usize) -> Vec<(f64, Vec<f64>)> {
    let n = zones.len();
    let origin = zones.zone(i).centroid;
    let dist: Vec<f64> = zones.iter().map(|z| distance_km(origin, z.centroid)).collect();
    let mut order: Vec<usize> = (0..n).filter(|&k| k != i).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));

    let mut out = vec![(0.0, vec![0.0; values.len()]); n];
    // running sums over zones strictly closer than the current tie group
    let mut closer = vec![0.0; values.len()];
    let mut g = 0;
    while g < order.len() {
        let d = dist[order[g]];
        let end = g + order[g..].iter().take_while(|&&k| dist[k] == d).count();
        for &j in &order[g..end] {
            out[j] = (d, closer.clone());
        }
        for &k in &order[g..end] {
            for (acc, col) in closer.iter_mut().zip(values) {
                *acc += col[k];
            }
        }
        g = end;
    }
    out
}
