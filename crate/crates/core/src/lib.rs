//! Multispectral crop/weed dense classification toolkit.

pub mod autolabel;
pub mod balance;
pub mod cli;
pub mod error;
pub mod eval;
pub mod imgcore;
pub mod manifest;
pub mod net;
pub mod register;
pub mod synth;

pub use error::{Error, Result};
