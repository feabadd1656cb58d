//! Mirror-gradient training for BPR recommenders, plus the metrics and
//! robustness probes used to evaluate it.

pub mod data;
pub mod error;
pub mod exec;
pub mod models;
pub mod optim;
pub mod params;
pub mod probes;

pub use error::{MgError, Result};
pub use exec::Exec;
