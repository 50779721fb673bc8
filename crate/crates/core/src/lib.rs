pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod localization;
pub mod losses;
pub mod maps;
pub mod matching;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod shuffle;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
