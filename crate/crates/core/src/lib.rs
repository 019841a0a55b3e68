pub mod audiofront;
pub mod checks;
pub mod config;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod manifest;
pub mod nnblocks;
pub mod numcore;
pub mod qformer;
pub mod toylab;
pub mod toylm;
pub mod trainer;

pub use error::{Error, Result};
