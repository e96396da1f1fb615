//! The fitted-regressor abstraction shared by the neural, forest and oracle
//! nuisance models.

use std::fmt::Debug;

use ndarray::{Array1, ArrayView2};

use crate::error::{Error, Result};

pub trait Regressor: Send + Sync + Debug {
    /// Number of covariate columns the model expects.
    fn n_features(&self) -> usize;

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>>;

    fn check_dims(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() == self.n_features() {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: self.n_features(),
                got: x.ncols(),
            })
        }
    }
}

/// Regressor returning the same value everywhere.
#[derive(Debug, Clone)]
pub struct Constant {
    pub n_features: usize,
    pub value: f64,
}

impl Regressor for Constant {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_dims(&x)?;
        Ok(Array1::from_elem(x.nrows(), self.value))
    }
}
