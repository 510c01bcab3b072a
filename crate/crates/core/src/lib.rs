pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod nnsearch;
pub mod par;
pub mod scratch;
pub mod seqcore;
pub mod trainer;

pub use error::{Error, Result};
