pub mod autodiff;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod font;
pub mod geometry;
pub mod inference;
pub mod net;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
