//! Cross-validation of the transition kernels against the independent
//! oracles: block exponential vs RK4 moment ODEs, diagonal fast path vs
//! general path, conditional score vs finite differences, and VP closed forms.

use rand::Rng;

use crate::drift::{DriftMatrixGrid, DriftMode};
use crate::error::Result;
use crate::kernel::{self, KernelTable, Symmetrization};
use crate::linalg::{self, Mat, Vector};
use crate::oracles::{self, GaussianMarginal};
use crate::rng::{normal, stream_rng, Purpose};
use crate::schedule::BetaSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelReport {
    pub checks: Vec<CheckResult>,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn max_kernel_error(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with("kernel"))
            .map(|c| c.max_error)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub instances: usize,
    pub max_dim: usize,
    pub seed: u64,
    pub symmetrization: Symmetrization,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            instances: 10,
            max_dim: 4,
            seed: 0,
            symmetrization: Symmetrization::Average,
        }
    }
}

/// Random positive diagonal, or `Q diag(λ) Qᵀ` with `Q` orthogonal.
fn random_drift<R: Rng>(rng: &mut R, dim: usize, full: bool) -> Mat {
    let lambda = Vector::from_fn(dim, |_, _| rng.random_range(0.2..3.0));
    if !full {
        return Mat::from_diagonal(&lambda);
    }
    let g = Mat::from_fn(dim, dim, |_, _| normal(rng));
    let q = g.qr().q();
    &q * Mat::from_diagonal(&lambda) * q.transpose()
}

fn random_spd<R: Rng>(rng: &mut R, dim: usize) -> Mat {
    let g = Mat::from_fn(dim, dim, |_, _| normal(rng));
    &g * g.transpose() / dim as f64 + Mat::identity(dim, dim) * 0.1
}

/// Run every check against `schedule`.
pub fn run_checks(schedule: &BetaSchedule, opts: &CheckOptions) -> Result<KernelReport> {
    let mut rng = stream_rng(opts.seed, Purpose::Eval, 0);
    let steps = schedule.steps;
    let mut ode_err: f64 = 0.0;
    let mut diag_err: f64 = 0.0;
    let mut table_err: f64 = 0.0;
    let mut asym: f64 = 0.0;
    for k in 0..opts.instances {
        let dim = 1 + k % opts.max_dim;
        let full = k % 2 == 1;
        let mode = if full { DriftMode::FullInvariant } else { DriftMode::DiagonalInvariant };
        let d = random_drift(&mut rng, dim, full);
        let grid = DriftMatrixGrid::from_d(mode, steps, vec![d.clone()])?;
        let s0 = random_spd(&mut rng, dim);
        let n = rng.random_range(1..=steps);
        let t = schedule.node_time(n);

        let block = kernel::covariance_general_with(schedule, &grid, t, &s0, opts.symmetrization)?;
        let (m, ode) = oracles::integrate_moment_odes(schedule, &grid, t, &s0, 40)?;
        ode_err = ode_err.max(linalg::rel_frobenius(&block.covariance, &ode, 1e-12));
        ode_err = ode_err.max(linalg::rel_frobenius(&kernel::mean_map(schedule, &grid, t)?, &m, 1e-12));
        asym = asym.max(linalg::max_asymmetry(&block.covariance) / block.covariance.amax().max(1e-300));

        let zero = Mat::zeros(dim, dim);
        let general = kernel::covariance_general_with(schedule, &grid, t, &zero, opts.symmetrization)?;
        let table = KernelTable::build(schedule, &grid)?;
        table_err = table_err.max(linalg::rel_frobenius(&table.kernel(n).covariance, &general.covariance, 1e-12));
        if !full {
            let lambda: Vec<f64> = (0..dim).map(|i| d[(i, i)]).collect();
            let dk = kernel::covariance_diagonal(schedule, &lambda, t, 1e-6)?;
            let dm = Mat::from_diagonal(&Vector::from_vec(dk.variance));
            diag_err = diag_err.max(linalg::rel_frobenius(&general.covariance, &dm, 1e-12));
        }
    }

    // conditional score vs central differences of the Gaussian log-density
    let mut score_err: f64 = 0.0;
    for k in 0..opts.instances {
        let dim = 1 + k % opts.max_dim;
        let grid = DriftMatrixGrid::from_d(DriftMode::FullInvariant, steps, vec![random_drift(&mut rng, dim, true)])?;
        let table = KernelTable::build(schedule, &grid)?;
        let kern = table.kernel(rng.random_range(1..=steps));
        let x0 = Vector::from_fn(dim, |_, _| normal(&mut rng));
        let xt = kern.mean(&x0) + &kern.cholesky * Vector::from_fn(dim, |_, _| normal(&mut rng));
        let g = GaussianMarginal::new(kern.mean(&x0), kern.covariance.clone());
        let s = kern.conditional_score(&xt, &x0)?;
        let scale = s.amax().max(1.0);
        for i in 0..dim {
            let h = 1e-5 * kern.covariance[(i, i)].sqrt();
            let mut up = xt.clone();
            up[i] += h;
            let mut dn = xt.clone();
            dn[i] -= h;
            let fd = (g.log_density(&up)? - g.log_density(&dn)?) / (2.0 * h);
            score_err = score_err.max((fd - s[i]).abs() / scale);
        }
    }

    // D ≡ I reproduces the VP closed forms
    let mut vp_err: f64 = 0.0;
    let vp = KernelTable::build(schedule, &DriftMatrixGrid::identity(2, DriftMode::DiagonalInvariant, steps))?;
    for n in 1..=steps {
        let s2 = schedule.sigma2_node(n);
        let k = vp.kernel(n);
        let want = Mat::identity(2, 2) * -(-s2).exp_m1();
        vp_err = vp_err.max(linalg::rel_frobenius(&k.covariance, &want, 1e-12));
        vp_err = vp_err.max(linalg::rel_frobenius(&k.mean_map, &(Mat::identity(2, 2) * (-0.5 * s2).exp()), 1e-12));
    }

    Ok(KernelReport {
        checks: vec![
            CheckResult { name: "kernel-vs-ode", max_error: ode_err, tolerance: 1e-6 },
            CheckResult { name: "kernel-symmetry", max_error: asym, tolerance: 1e-12 },
            CheckResult { name: "kernel-table-vs-general", max_error: table_err, tolerance: 1e-9 },
            CheckResult { name: "diagonal-vs-general", max_error: diag_err, tolerance: 1e-9 },
            CheckResult { name: "score-vs-fd", max_error: score_err, tolerance: 1e-5 },
            CheckResult { name: "vp-closed-form", max_error: vp_err, tolerance: 1e-10 },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_passes() {
        let r = run_checks(&BetaSchedule::default(), &CheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_kernel_error() <= 1e-6);
    }

    #[test]
    fn corrupted_symmetrization_is_caught() {
        let opts = CheckOptions {
            symmetrization: Symmetrization::Corrupt,
            ..CheckOptions::default()
        };
        let r = run_checks(&BetaSchedule::default(), &opts).unwrap();
        assert!(!r.passed());
    }
}
