//! Byte-level neural machine translation with multi-scale contextualization.

pub mod autodiff;
pub mod byte_codec;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod msc;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
