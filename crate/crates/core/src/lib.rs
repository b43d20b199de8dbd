//! Origin/destination migration flow prediction.
//!
//! The crate covers the whole workflow: zone and flow ingestion ([`flows`]),
//! great-circle pair features ([`geo`]), the classic gravity and radiation
//! models ([`classic`]), learned models over pair observations ([`dataset`],
//! [`learn`]), the six agreement metrics ([`metrics`]) and the year-triplet
//! evaluation protocol ([`pipeline`]).

pub mod classic;
pub mod dataset;
pub mod error;
pub mod flows;
pub mod geo;
pub mod learn;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
