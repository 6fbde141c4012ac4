//! Experiment configuration, grids and the drivers behind the CLI.

pub mod config;
mod run;
pub mod sweep;

pub use config::{DataConfig, ModelOverrides, RunConfig, SweepConfig, SyntheticKind, SyntheticSource};
pub use run::*;
pub use sweep::{shape_axis, sweep_points, ShapeKind, SweepAxis, SweepPoint};
