//! Forecasting models: the four neural architectures and the linear baselines.

mod checkpoint;
mod config;
pub mod linear;
mod neural;
mod params;

pub use checkpoint::Checkpoint;
pub use config::{Arch, ModelConfig};
pub use linear::{lasso_fit, lasso_select, ols_fit, LassoSelection, LinearKind, LinearModel, LASSO_ALPHAS};
pub use neural::{predict, NeuralNet, PREDICT_CHUNK};
pub use params::{init, is_matrix_param, Gradients, Parameters};

pub(crate) use neural::{forward, Bound};

use crate::error::Result;
use crate::tensor::Tensor;

/// Anything that maps `(n, L)` standardized lag windows to `n` forecasts.
pub trait Forecaster: Sync {
    fn lookback(&self) -> usize;
    fn predict(&self, inputs: &Tensor) -> Result<Vec<f64>>;

    fn predict_one(&self, row: &[f64]) -> Result<f64> {
        let x = Tensor::new(vec![1, row.len()], row.to_vec())?;
        Ok(self.predict(&x)?[0])
    }
}

impl<F: Forecaster + ?Sized> Forecaster for &F {
    fn lookback(&self) -> usize {
        (**self).lookback()
    }

    fn predict(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        (**self).predict(inputs)
    }
}

impl<F: Forecaster + ?Sized + Send> Forecaster for Box<F> {
    fn lookback(&self) -> usize {
        (**self).lookback()
    }

    fn predict(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        (**self).predict(inputs)
    }
}
