pub mod adapters;
pub mod budget;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod tasks;
pub mod training;
pub mod tokenizer;

pub use error::{Error, Result};
