//! Auditing black-box risk scores from labelled audit data.

pub mod baseline;
pub mod calibrate;
pub mod compare;
pub mod data;
pub mod distill;
pub mod error;
pub mod gam;
pub mod metrics;
pub mod missing;
pub mod plot;
pub mod report;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
