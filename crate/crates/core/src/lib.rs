pub mod bayes;
pub mod config;
pub mod distributions;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod harness;
pub mod networks;
pub mod oracle;
pub mod sar;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{ImageGrid, LabelMap};
