//! Pipeline behind the `clseg` command: phantom cohorts, training, tiled
//! inference, k-fold cross-validation and evaluation reports, all driven by
//! one [`RunConfig`].

pub mod config;
pub mod error;
pub mod folds;
pub mod pipeline;

pub use config::{ModelVariant, RunConfig, CONFIG_VERSION};
pub use error::{CliError, CliResult};
pub use folds::FoldSplit;
