//! Encoder-decoder transformer with MSC in front of encoder self-attention.

mod config;
mod decode;
mod transformer;

pub use config::ModelConfig;
pub use transformer::{Model, PaddedIds, CONFIG_FILE};

#[cfg(test)]
mod tests;
