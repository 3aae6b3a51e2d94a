pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod inference;
pub mod model;
pub mod optim;
pub mod synthlang;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
