//! DeepFM and baseline CTR models over sparse categorical data.

mod binio;
pub mod data;
pub mod deep;
pub mod embedding;
pub mod error;
pub mod fm;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod zoo;

pub use error::{Error, Result};
