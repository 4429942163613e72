//! Inverse counting statistics for monitored Markov and Lindblad systems.

pub mod charpoly;
pub mod cumulants;
pub mod error;
pub mod hypothesis;
pub mod inverse;
pub mod io;
pub mod model;
pub mod par;
pub mod recovery;
pub mod scalar;
pub mod series;
pub mod sim;

pub use error::{IcsError, Result};
