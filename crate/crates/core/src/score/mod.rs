//! Score functions `s(x, t) ≈ ∇ log ρ_t(x)`.
//!
//! [`ScoreFunction`] is what the samplers consume. It is implemented by the
//! trained network ([`ScoreModel`]), the analytic Gaussian oracle
//! ([`crate::oracles::GaussianOracleScore`]) and [`ZeroScore`].

mod adam;
mod mlp;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;

use crate::error::Result;

pub use adam::{Adam, AdamConfig};
pub use mlp::{MlpLayout, ScoreModel};
pub use train::{dsm_loss_and_grad, train_round, DataSource, DsmBatch, TrainConfig, TrainState};

pub trait ScoreFunction: Sync {
    fn dim(&self) -> usize;

    /// Scores for every row of `x`, all at grid node `node` (time `t`).
    fn eval_batch(&self, x: &Array2<f64>, node: usize, t: f64) -> Result<Array2<f64>>;
}

impl<S: ScoreFunction + ?Sized> ScoreFunction for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval_batch(&self, x: &Array2<f64>, node: usize, t: f64) -> Result<Array2<f64>> {
        (**self).eval_batch(x, node, t)
    }
}

/// `s ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroScore(pub usize);

impl ScoreFunction for ZeroScore {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval_batch(&self, x: &Array2<f64>, _node: usize, _t: f64) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x.raw_dim()))
    }
}

/// Counts per-sample score evaluations (NFE) of the wrapped function.
pub struct CountingScore<S> {
    inner: S,
    count: AtomicU64,
}

impl<S: ScoreFunction> CountingScore<S> {
    pub fn new(inner: S) -> Self {
        CountingScore {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }
}

impl<S: ScoreFunction> ScoreFunction for CountingScore<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval_batch(&self, x: &Array2<f64>, node: usize, t: f64) -> Result<Array2<f64>> {
        self.count.fetch_add(x.nrows() as u64, Ordering::Relaxed);
        self.inner.eval_batch(x, node, t)
    }
}
