use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("latitude {0} outside [-90, 90]")]
    InvalidLatitude(f64),
    #[error("longitude {0} outside [-180, 180)")]
    InvalidLongitude(f64),
    #[error("unknown zone `{0}`")]
    UnknownZone(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("duplicate zone id `{0}`")]
    DuplicateZone(String),
    #[error("zone `{zone}` has invalid population {value}")]
    InvalidPopulation { zone: String, value: f64 },
    #[error("intervening query needs distinct origin and destination, got `{0}` twice")]
    SameOriginDestination(String),

    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("line {line}: unknown zone `{zone}`")]
    UnknownZoneAt { line: u64, zone: String },
    #[error("line {line}: negative count {count}")]
    NegativeCount { line: u64, count: String },
    #[error("line {line}: within-zone flow for `{zone}`")]
    DiagonalEntry { line: u64, zone: String },
    #[error("no flows recorded for year {0}")]
    MissingYear(i32),

    #[error("flow matrices are defined over different zone sets")]
    ZoneUniverseMismatch,
    #[error("pair features carry no distance for the zones being evaluated")]
    MissingDistance,
    #[error("ground truth is constant, r2 is undefined")]
    DegenerateTruth,

    #[error("every population is zero, production slope is undefined")]
    AllZeroPopulations,
    #[error("all destination weights from zone `{0}` are zero")]
    ZeroRow(String),
    #[error("zones `{0}` and `{1}` are at distance zero, power-law gravity is undefined")]
    ZeroDistance(String, String),
    #[error("model `{0}` has no beta to calibrate")]
    NoBeta(String),
    #[error("beta calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("observation set has no positive rows")]
    NoPositives,
    #[error("observation columns do not match the model: {0}")]
    SchemaMismatch(String),

    #[error("empty batch")]
    EmptyBatch,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("every search trial failed; last error: {0}")]
    AllTrialsFailed(String),

    #[error("need at least 3 years of flows, got {0}")]
    InsufficientYears(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
