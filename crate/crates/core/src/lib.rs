pub mod analogy;
pub mod checkpoint;
pub mod cli;
pub mod datamodel;
pub mod embed;
pub mod evalkit;
pub mod error;
pub mod numkit;
pub mod pipeline;
pub mod repr;

pub use error::{Error, Result};
