//! Synthetic zones and flows drawn from a classic model, for closed-loop
//! checks where the generating parameters are known.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classic::{predict_matrix, ClassicModelSpec};
use crate::error::{Error, Result};
use crate::flows::{FlowMatrix, Zone, ZoneTable};
use crate::geo::{pair_features, Centroid};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_zones: usize,
    pub n_years: usize,
    pub first_year: i32,
    pub generator: ClassicModelSpec,
    /// Standard deviation of the mean-one log-normal factor applied to each
    /// expected flow before rounding; 0 disables noise.
    pub noise: f64,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    /// Populations are log-uniform in this range.
    pub population_range: (f64, f64),
}

impl SynthConfig {
    pub fn new(seed: u64, n_zones: usize, n_years: usize, generator: ClassicModelSpec) -> Self {
        SynthConfig {
            seed,
            n_zones,
            n_years,
            first_year: 2000,
            generator,
            noise: 0.0,
            lat_range: (35.0, 40.0),
            lon_range: (-100.0, -94.0),
            population_range: (1e4, 1e6),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_zones < 2 {
            return bad("synthetic data needs at least 2 zones");
        }
        if self.n_years == 0 {
            return bad("synthetic data needs at least 1 year");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be a non-negative number");
        }
        let (plo, phi) = self.population_range;
        if !(plo > 0.0 && phi >= plo && phi.is_finite()) {
            return bad("population range must be positive and ordered");
        }
        let (a, b) = self.lat_range;
        let (c, d) = self.lon_range;
        if !(a <= b && c <= d) {
            return bad("coordinate ranges must be ordered");
        }
        Centroid::new(a, c)?;
        Centroid::new(b, d)?;
        Ok(())
    }
}

/// Zone features besides population: `income`, `area` and `coastal`.
pub const SYNTH_FEATURES: [&str; 3] = ["income", "area", "coastal"];

pub fn synth_dataset(config: &SynthConfig) -> Result<(ZoneTable, Vec<FlowMatrix>)> {
    config.validate()?;
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("zones")]));
    let width = config.n_zones.to_string().len();
    let (plo, phi) = config.population_range;
    let mut zones = Vec::with_capacity(config.n_zones);
    for k in 0..config.n_zones {
        let lat = rng.random_range(config.lat_range.0..=config.lat_range.1);
        let lon = rng.random_range(config.lon_range.0..=config.lon_range.1);
        let population = (rng.random_range(plo.ln()..=phi.ln())).exp().round();
        let income = rng.random_range(20_000.0..80_000.0f64).round();
        let area = rng.random_range(100f64.ln()..5000f64.ln()).exp().round();
        let coastal = if rng.random_bool(0.2) { 1.0 } else { 0.0 };
        zones.push(Zone {
            id: format!("Z{k:0width$}"),
            centroid: Centroid::new(lat, lon)?,
            population,
            features: vec![income, area, coastal],
        });
    }
    let zones = ZoneTable::new(zones, SYNTH_FEATURES.iter().map(|s| s.to_string()).collect())?;
    let pairs = pair_features(&zones, &["population"])?;
    let expected = predict_matrix(&config.generator, &zones, &pairs, config.first_year)?;

    let mut years = Vec::with_capacity(config.n_years);
    for y in 0..config.n_years {
        let year = config.first_year + y as i32;
        let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("flows"), y as u64]));
        let mut m = FlowMatrix::new(year, zones.ids().clone());
        for (i, j, mean) in expected.entries() {
            let v = if config.noise > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean * (config.noise * z - config.noise * config.noise / 2.0).exp()
            } else {
                mean
            };
            m.add(i, j, v.round() as u64)?;
        }
        years.push(m);
    }
    Ok((zones, years))
}
