//! Sequential spatial transformers: a policy picks discrete affine warps for
//! each image so that a jointly trained classifier sees an easier input.

pub mod cli;
pub mod dataset;
pub mod environment;
pub mod error;
pub mod geometry;
pub mod models;
pub mod oracle;
pub mod training;

pub use error::{Result, SstnError};
pub use sstn_tensor as tensor;
