//! Ground truth for linear forward diffusions started from Gaussian data:
//! analytic marginals and scores, and RK4 integration of the moment ODEs
//!
//! ```text
//! dM/dt = -½ β D M,    dΣ/dt = -½ β (D Σ + Σ Dᵀ) + β I
//! ```
//!
//! These share no code path with the block-exponential kernel in
//! [`crate::kernel`], so they can be used to check it.

use ndarray::Array2;

use crate::drift::DriftMatrixGrid;
use crate::error::{Result, VsdmError};
use crate::kernel::{self, KernelTable};
use crate::linalg::{self, Mat, Vector};
use crate::rng::{normal, stream_rng, Purpose};
use crate::schedule::BetaSchedule;
use crate::score::ScoreFunction;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMarginal {
    pub mean: Vector,
    pub covariance: Mat,
}

impl GaussianMarginal {
    pub fn new(mean: Vector, covariance: Mat) -> Self {
        GaussianMarginal { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Result<Mat> {
        linalg::inverse(&self.covariance)
            .filter(|p| p.iter().all(|v| v.is_finite()))
            .ok_or_else(|| VsdmError::domain("Gaussian covariance is singular"))
    }

    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        let p = self.precision()?;
        let r = x - &self.mean;
        let det = self.covariance.determinant();
        let d = self.dim() as f64;
        Ok(-0.5 * (r.dot(&(&p * &r)) + det.ln() + d * (2.0 * std::f64::consts::PI).ln()))
    }
}

/// `-Σ⁻¹ (x - m)`.
pub fn gaussian_score(marginal: &GaussianMarginal, x: &Vector) -> Result<Vector> {
    Ok(-(marginal.precision()? * (x - &marginal.mean)))
}

/// Law of `x_t` when `x_0 ~ N(m0, S0)`: `N(M_t m0, M_t S0 M_tᵀ + Σ_{t|0})`.
pub fn propagate_gaussian(
    m0: &Vector,
    s0: &Mat,
    schedule: &BetaSchedule,
    drift: &DriftMatrixGrid,
    t: f64,
) -> Result<GaussianMarginal> {
    let m = kernel::mean_map(schedule, drift, t)?;
    let cond = kernel::covariance_general(schedule, drift, t, &Mat::zeros(m0.len(), m0.len()))?;
    Ok(GaussianMarginal {
        mean: &m * m0,
        covariance: linalg::symmetrize(&(&m * s0 * m.transpose() + cond.covariance)),
    })
}

/// RK4 integration of the mean-map and covariance ODEs from `(I, S0)` to the
/// grid time `t`, with `substeps` steps per grid cell.
pub fn integrate_moment_odes(
    schedule: &BetaSchedule,
    drift: &DriftMatrixGrid,
    t: f64,
    s0: &Mat,
    substeps: usize,
) -> Result<(Mat, Mat)> {
    let n = schedule.node_index(t)?;
    let d = drift.dim();
    let substeps = substeps.max(20);
    let mut m = Mat::identity(d, d);
    let mut s = s0.clone();
    let eye = Mat::identity(d, d);
    for c in 0..n {
        let dm = drift.d(c);
        let t0 = schedule.node_time(c);
        let h = (schedule.node_time(c + 1) - t0) / substeps as f64;
        let fm = |tt: f64, m: &Mat| dm * m * (-0.5 * schedule.beta_unchecked(tt));
        let fs = |tt: f64, s: &Mat| {
            let b = schedule.beta_unchecked(tt);
            (dm * s + s * dm.transpose()) * (-0.5 * b) + &eye * b
        };
        for k in 0..substeps {
            let tt = t0 + k as f64 * h;
            let k1 = fm(tt, &m);
            let k2 = fm(tt + 0.5 * h, &(&m + &k1 * (0.5 * h)));
            let k3 = fm(tt + 0.5 * h, &(&m + &k2 * (0.5 * h)));
            let k4 = fm(tt + h, &(&m + &k3 * h));
            m += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

            let q1 = fs(tt, &s);
            let q2 = fs(tt + 0.5 * h, &(&s + &q1 * (0.5 * h)));
            let q3 = fs(tt + 0.5 * h, &(&s + &q2 * (0.5 * h)));
            let q4 = fs(tt + h, &(&s + &q3 * h));
            s += (q1 + q2 * 2.0 + q3 * 2.0 + q4) * (h / 6.0);
            s = linalg::symmetrize(&s);
        }
    }
    Ok((m, s))
}

/// Euler–Maruyama simulation of the forward SDE from `N(m0, S0)`; returns
/// the sample mean and covariance at grid time `t`.
pub fn simulate_forward_moments(
    m0: &Vector,
    s0: &Mat,
    schedule: &BetaSchedule,
    drift: &DriftMatrixGrid,
    t: f64,
    paths: usize,
    substeps: usize,
    seed: u64,
) -> Result<GaussianMarginal> {
    let n = schedule.node_index(t)?;
    let d = m0.len();
    let l0 = if s0.iter().all(|&v| v == 0.0) {
        Mat::zeros(d, d)
    } else {
        linalg::cholesky_lower(s0)?
    };
    let mut mean = Vector::zeros(d);
    let mut second = Mat::zeros(d, d);
    for p in 0..paths {
        let mut rng = stream_rng(seed, Purpose::Eval, p as u64);
        let z = Vector::from_fn(d, |_, _| normal(&mut rng));
        let mut x = m0 + &l0 * z;
        for c in 0..n {
            let dm = drift.d(c);
            let t0 = schedule.node_time(c);
            let h = (schedule.node_time(c + 1) - t0) / substeps as f64;
            for k in 0..substeps {
                let b = schedule.beta_unchecked(t0 + k as f64 * h);
                let xi = Vector::from_fn(d, |_, _| normal(&mut rng));
                x = &x - dm * &x * (0.5 * b * h) + xi * (b * h).sqrt();
            }
        }
        mean += &x;
        second += &x * x.transpose();
    }
    let np = paths as f64;
    mean /= np;
    let cov = (second - &mean * mean.transpose() * np) / (np - 1.0);
    Ok(GaussianMarginal::new(mean, cov))
}

/// Exact score of the forward marginals when the data are `N(m0, S0)`,
/// precomputed at every grid node.
#[derive(Clone, Debug)]
pub struct GaussianOracleScore {
    marginals: Vec<GaussianMarginal>,
    precisions: Vec<Mat>,
}

impl GaussianOracleScore {
    pub fn new(m0: &Vector, s0: &Mat, table: &KernelTable) -> Result<Self> {
        let mut marginals = Vec::with_capacity(table.steps() + 1);
        let mut precisions = Vec::with_capacity(table.steps() + 1);
        for k in table.kernels() {
            let cov = linalg::symmetrize(&(&k.mean_map * s0 * k.mean_map.transpose() + &k.covariance));
            let g = GaussianMarginal::new(&k.mean_map * m0, cov);
            precisions.push(g.precision()?);
            marginals.push(g);
        }
        Ok(GaussianOracleScore {
            marginals,
            precisions,
        })
    }

    pub fn marginal(&self, node: usize) -> &GaussianMarginal {
        &self.marginals[node]
    }
}

impl ScoreFunction for GaussianOracleScore {
    fn dim(&self) -> usize {
        self.marginals[0].dim()
    }

    fn eval_batch(&self, x: &Array2<f64>, node: usize, _t: f64) -> Result<Array2<f64>> {
        let p = self
            .precisions
            .get(node)
            .ok_or_else(|| VsdmError::domain(format!("oracle has no node {node}")))?;
        let m = &self.marginals[node].mean;
        let d = m.len();
        let mut out = Array2::zeros(x.raw_dim());
        for (r, row) in x.outer_iter().enumerate() {
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += p[(i, j)] * (row[j] - m[j]);
                }
                out[(r, i)] = -acc;
            }
        }
        Ok(out)
    }
}
