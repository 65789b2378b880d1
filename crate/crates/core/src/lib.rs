//! Variational Schrödinger diffusion models.
//!
//! A multivariate linear forward diffusion `dx = -½ β_t D_t x dt + √β_t dw`
//! whose drift matrices `D_t = I - 2 A_t` are adapted by stochastic
//! approximation, a score network trained by denoising score matching against
//! the closed-form Gaussian transition kernel, and stochastic / deterministic
//! backward samplers.
//!
//! Module map:
//!
//! * [`schedule`] and [`kernel`]: noise schedule and forward transition kernel.
//! * [`drift`] and [`variational`]: drift grids and the stochastic-approximation
//!   update of the variational score `A_t`.
//! * [`score`]: the score network, its hand-written backward pass, and training.
//! * [`sampler`]: backward SDE and probability-flow ODE samplers.
//! * [`oracles`]: analytic Gaussian marginals and moment ODE integration.
//! * [`data`] and [`metrics`]: synthetic datasets, straightness, energy distance.
//! * [`config`], [`checkpoint`], [`pipeline`], [`io`], [`kernel_check`]:
//!   orchestration used by the `vsdm` command line tool.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod drift;
pub mod error;
pub mod io;
pub mod kernel;
pub mod kernel_check;
pub mod linalg;
pub mod metrics;
pub mod oracles;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod variational;

pub use error::{Result, VsdmError};
