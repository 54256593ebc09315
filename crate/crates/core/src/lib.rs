pub mod corpus;
pub mod diffscript;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
