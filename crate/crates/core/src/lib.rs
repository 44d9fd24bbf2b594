//! Visual textualization for a frozen grounded detector: a toy
//! vision-language detector, a multi-scale block that turns support images
//! into prompt tokens, and the training, evaluation and CLI around them.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod fusion;
pub mod linalg;
pub mod mstb;
pub mod params;
pub mod prompting;
pub mod synthdata;
pub mod training;
pub mod toyovlm;

pub use error::{Result, VistexError};
