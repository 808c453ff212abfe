//! Experiment configuration, recipes and CSV output.

pub mod config;
pub mod csvout;
pub mod layers;
pub mod recipes;

pub use config::{parse_config, ExperimentConfig, ModelKind, ScheduleKind, TraceLevel};
pub use csvout::{fmt_g9, Cell, Table};
pub use layers::LayerSpec;
pub use recipes::*;
