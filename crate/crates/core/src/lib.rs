pub mod acoustic;
pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod reflow;
pub mod style_space;
pub mod tensor;
pub mod text;
pub mod toy;
pub mod vocoder;

pub use error::{Error, Result};
#[cfg(test)]
mod testutil;
