//! Double machine learning (DML) and coordinated DML for treatment-effect
//! estimation under a partially linear model.

pub mod analysis;
pub mod cdml;
pub mod datagen;
pub mod dml;
pub mod error;
pub mod forest;
pub mod grad;
pub mod model;
pub mod nets;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
