pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiment;
mod jsonnum;
pub mod lti;
pub mod model;
pub mod plant;
pub mod policy;
pub mod ren;
pub mod train;

pub use error::{Error, Result};
