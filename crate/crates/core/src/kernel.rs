//! Closed-form Gaussian transition kernel of the forward process
//! `dx = -½ β_t D_t x dt + √β_t dw`.
//!
//! For a drift that is constant on each grid cell the kernel over a cell is
//! exact: the mean map is `exp(-½ ΔB D)` and the covariance comes from the
//! `2d × 2d` block exponential
//!
//! ```text
//! [C; H] = exp([[-½ [βD], [βI]], [0, ½ [βDᵀ]]]) [Σ₀; I],   Σ = C H⁻¹
//! ```
//!
//! Whole-horizon kernels compose cell kernels, which stays exact when the
//! cell matrices do not commute. For time-invariant drifts a single block
//! exponential over `[0, t]` is used instead.

use crate::drift::DriftMatrixGrid;
use crate::error::{Result, VsdmError};
use crate::linalg::{self, Mat, Vector};
use crate::rng::checksum_f64;
use crate::schedule::BetaSchedule;

/// Gaussian law of `x_t` given `x_0`: `N(M_t x_0, Σ_{t|0})`, `Σ = L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionKernel {
    pub time: f64,
    pub mean_map: Mat,
    pub covariance: Mat,
    pub cholesky: Mat,
    /// `L⁻ᵀ`; `None` at `t = 0` where the covariance vanishes.
    pub inv_transpose: Option<Mat>,
    precision: Option<Mat>,
}

impl TransitionKernel {
    pub fn identity(dim: usize) -> Self {
        TransitionKernel {
            time: 0.0,
            mean_map: Mat::identity(dim, dim),
            covariance: Mat::zeros(dim, dim),
            cholesky: Mat::zeros(dim, dim),
            inv_transpose: None,
            precision: None,
        }
    }

    /// Factor a kernel from its mean map and covariance. A zero covariance is
    /// accepted and yields a degenerate (t = 0 like) kernel.
    pub fn from_moments(time: f64, mean_map: Mat, covariance: Mat) -> Result<Self> {
        let d = covariance.nrows();
        if covariance.iter().all(|&v| v == 0.0) {
            return Ok(TransitionKernel {
                time,
                mean_map,
                covariance,
                cholesky: Mat::zeros(d, d),
                inv_transpose: None,
                precision: None,
            });
        }
        let cholesky = linalg::cholesky_lower(&covariance)?;
        let l_inv = cholesky
            .clone()
            .solve_lower_triangular(&Mat::identity(d, d))
            .ok_or_else(|| VsdmError::Kernel("singular Cholesky factor".into()))?;
        let precision = l_inv.transpose() * &l_inv;
        Ok(TransitionKernel {
            time,
            mean_map,
            covariance,
            cholesky,
            inv_transpose: Some(l_inv.transpose()),
            precision: Some(precision),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean_map.nrows()
    }

    pub fn is_degenerate(&self) -> bool {
        self.precision.is_none()
    }

    pub fn precision(&self) -> Option<&Mat> {
        self.precision.as_ref()
    }

    pub fn mean(&self, x0: &Vector) -> Vector {
        &self.mean_map * x0
    }

    /// `x_t = M_t x₀ + L_t ε`.
    pub fn conditional_sample(&self, x0: &Vector, eps: &Vector) -> Vector {
        &self.mean_map * x0 + &self.cholesky * eps
    }

    /// `∇ log ρ_{t|0}(x_t) = -Σ⁻¹ (x_t - M_t x₀)`.
    pub fn conditional_score(&self, xt: &Vector, x0: &Vector) -> Result<Vector> {
        let p = self
            .precision
            .as_ref()
            .ok_or_else(|| VsdmError::domain("conditional score is undefined where Σ_{t|0} = 0"))?;
        Ok(-(p * (xt - &self.mean_map * x0)))
    }

    /// `-L⁻ᵀ ε`, the score at `conditional_sample(x0, ε)`.
    pub fn whitened_score(&self, eps: &Vector) -> Result<Vector> {
        let lt = self
            .inv_transpose
            .as_ref()
            .ok_or_else(|| VsdmError::domain("whitened score is undefined where Σ_{t|0} = 0"))?;
        Ok(-(lt * eps))
    }
}

/// `[βD]_t = ∫₀ᵗ β_s D_s ds` for a grid time `t`.
pub fn beta_d_integral(schedule: &BetaSchedule, drift: &DriftMatrixGrid, t: f64) -> Result<Mat> {
    let n = grid_node(schedule, drift, t)?;
    let d = drift.dim();
    if drift.mode().is_time_invariant() {
        return Ok(drift.d(0) * schedule.sigma2_node(n));
    }
    let mut acc = Mat::zeros(d, d);
    for c in 0..n {
        acc += drift.d(c) * schedule.cell_integral(c);
    }
    Ok(acc)
}

fn grid_node(schedule: &BetaSchedule, drift: &DriftMatrixGrid, t: f64) -> Result<usize> {
    if drift.cells() != schedule.steps {
        return Err(VsdmError::domain(format!(
            "drift grid has {} cells but the schedule has {} steps",
            drift.cells(),
            schedule.steps
        )));
    }
    schedule.node_index(t)
}

/// `M_t = exp(-½ [βD]_t)` when the cell matrices commute (diagonal or
/// time-invariant drifts); otherwise the ordered product of cell maps.
pub fn mean_map(schedule: &BetaSchedule, drift: &DriftMatrixGrid, t: f64) -> Result<Mat> {
    let n = grid_node(schedule, drift, t)?;
    if drift.mode().is_diagonal() || drift.mode().is_time_invariant() {
        let bd = beta_d_integral(schedule, drift, t)?;
        return Ok(linalg::expm(&(bd * -0.5)));
    }
    let d = drift.dim();
    let mut m = Mat::identity(d, d);
    for c in 0..n {
        m = linalg::expm(&(drift.d(c) * (-0.5 * schedule.cell_integral(c)))) * m;
    }
    Ok(m)
}

/// How the covariance `C H⁻¹` is symmetrized. `Corrupt` exists only so the
/// kernel self-check can demonstrate that it catches a broken kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Symmetrization {
    #[default]
    Average,
    #[doc(hidden)]
    Corrupt,
}

/// Output of [`covariance_general`].
#[derive(Clone, Debug)]
pub struct BlockSolution {
    pub c: Mat,
    pub h: Mat,
    pub covariance: Mat,
}

fn block_generator(bd: &Mat, b: f64) -> Mat {
    let d = bd.nrows();
    let mut g = Mat::zeros(2 * d, 2 * d);
    g.view_mut((0, 0), (d, d)).copy_from(&(bd * -0.5));
    g.view_mut((0, d), (d, d)).copy_from(&(Mat::identity(d, d) * b));
    g.view_mut((d, d), (d, d)).copy_from(&(bd.transpose() * 0.5));
    g
}

/// Covariance of `x_t` started from `N(·, Σ₀)` via the block matrix
/// exponential. Time-varying drifts apply one block exponential per cell.
pub fn covariance_general(
    schedule: &BetaSchedule,
    drift: &DriftMatrixGrid,
    t: f64,
    sigma0: &Mat,
) -> Result<BlockSolution> {
    covariance_general_with(schedule, drift, t, sigma0, Symmetrization::Average)
}

pub fn covariance_general_with(
    schedule: &BetaSchedule,
    drift: &DriftMatrixGrid,
    t: f64,
    sigma0: &Mat,
    sym: Symmetrization,
) -> Result<BlockSolution> {
    let n = grid_node(schedule, drift, t)?;
    let d = drift.dim();
    if sigma0.nrows() != d || sigma0.ncols() != d {
        return Err(VsdmError::domain("Σ₀ has the wrong shape"));
    }
    let mut state = Mat::zeros(2 * d, d);
    state.view_mut((0, 0), (d, d)).copy_from(sigma0);
    state.view_mut((d, 0), (d, d)).fill_with_identity();
    if drift.mode().is_time_invariant() {
        let b = schedule.sigma2_node(n);
        state = linalg::expm(&block_generator(&(drift.d(0) * b), b)) * state;
    } else {
        for c in 0..n {
            let b = schedule.cell_integral(c);
            state = linalg::expm(&block_generator(&(drift.d(c) * b), b)) * state;
        }
    }
    let c = state.rows(0, d).into_owned();
    let h = state.rows(d, d).into_owned();
    // Σ = C H⁻¹  ⇔  Hᵀ Σᵀ = Cᵀ
    let raw = h
        .transpose()
        .lu()
        .solve(&c.transpose())
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| {
            VsdmError::Kernel(format!("H_t is numerically singular at t = {t}"))
        })?
        .transpose();
    let covariance = match sym {
        Symmetrization::Average => linalg::symmetrize(&raw),
        Symmetrization::Corrupt => {
            let mut s = raw.clone();
            for i in 0..d {
                for j in (i + 1)..d {
                    s[(i, j)] += 1e-3 * (1.0 + s[(i, i)].abs());
                }
            }
            s[(0, 0)] *= 1.0 + 1e-3;
            s
        }
    };
    Ok(BlockSolution { c, h, covariance })
}

/// Diagonal fast path for `D = diag(λ)`, time-invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalKernel {
    pub mean_diag: Vec<f64>,
    pub variance: Vec<f64>,
    pub cholesky_diag: Vec<f64>,
}

/// `Σ = Λ⁻¹ (I - e^{-σ² Λ})`, `L = Λ^{-1/2} √(I - e^{-σ² Λ})`,
/// mean map `e^{-½ σ² Λ}`, all element-wise.
pub fn covariance_diagonal(
    schedule: &BetaSchedule,
    lambda: &[f64],
    t: f64,
    lambda_min: f64,
) -> Result<DiagonalKernel> {
    if let Some(bad) = lambda.iter().find(|&&l| !(l >= lambda_min)) {
        return Err(VsdmError::domain(format!(
            "eigenvalue {bad} is below the floor {lambda_min}"
        )));
    }
    let s2 = schedule.sigma2_at(t)?;
    Ok(diagonal_step(lambda, s2))
}

fn diagonal_step(lambda: &[f64], s2: f64) -> DiagonalKernel {
    let mut mean_diag = Vec::with_capacity(lambda.len());
    let mut variance = Vec::with_capacity(lambda.len());
    for &l in lambda {
        mean_diag.push((-0.5 * s2 * l).exp());
        // (1 - e^{-x}) / λ without cancellation for small x
        variance.push(-(-s2 * l).exp_m1() / l);
    }
    let cholesky_diag = variance.iter().map(|v| v.sqrt()).collect();
    DiagonalKernel {
        mean_diag,
        variance,
        cholesky_diag,
    }
}

/// Exact one-cell transition `(E, Q)`: `x_{c+1} = E x_c + N(0, Q)`.
fn cell_transition(d_cell: &Mat, b: f64, diagonal: bool) -> Result<(Mat, Mat)> {
    let dim = d_cell.nrows();
    if diagonal {
        let lambda: Vec<f64> = (0..dim).map(|i| d_cell[(i, i)]).collect();
        let k = diagonal_step(&lambda, b);
        return Ok((
            Mat::from_diagonal(&Vector::from_vec(k.mean_diag)),
            Mat::from_diagonal(&Vector::from_vec(k.variance)),
        ));
    }
    let e = linalg::expm(&(d_cell * (-0.5 * b)));
    let block = linalg::expm(&block_generator(&(d_cell * b), b));
    let c = block.view((0, dim), (dim, dim)).into_owned();
    let h = block.view((dim, dim), (dim, dim)).into_owned();
    let q = h
        .transpose()
        .lu()
        .solve(&c.transpose())
        .ok_or_else(|| VsdmError::Kernel("singular H over a grid cell".into()))?
        .transpose();
    Ok((e, linalg::symmetrize(&q)))
}

/// Kernels at every grid node `t_n`, `n = 0..=N`, for one drift grid.
#[derive(Clone, Debug)]
pub struct KernelTable {
    schedule: BetaSchedule,
    kernels: Vec<TransitionKernel>,
}

impl KernelTable {
    pub fn build(schedule: &BetaSchedule, drift: &DriftMatrixGrid) -> Result<Self> {
        if drift.cells() != schedule.steps {
            return Err(VsdmError::domain(format!(
                "drift grid has {} cells but the schedule has {} steps",
                drift.cells(),
                schedule.steps
            )));
        }
        let dim = drift.dim();
        let diagonal = drift.mode().is_diagonal();
        let mut kernels = Vec::with_capacity(schedule.steps + 1);
        kernels.push(TransitionKernel::identity(dim));
        let mut m = Mat::identity(dim, dim);
        let mut sigma = Mat::zeros(dim, dim);
        for c in 0..schedule.steps {
            let (e, q) = cell_transition(drift.d(c), schedule.cell_integral(c), diagonal)?;
            m = &e * m;
            sigma = linalg::symmetrize(&(&e * sigma * e.transpose() + q));
            kernels.push(TransitionKernel::from_moments(
                schedule.node_time(c + 1),
                m.clone(),
                sigma.clone(),
            )?);
        }
        Ok(KernelTable {
            schedule: *schedule,
            kernels,
        })
    }

    pub fn schedule(&self) -> &BetaSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.kernels[0].dim()
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps
    }

    pub fn kernel(&self, n: usize) -> &TransitionKernel {
        &self.kernels[n]
    }

    /// Kernel at the horizon `T`, which defines the prior `N(0, Σ_{T|0})`.
    pub fn prior(&self) -> &TransitionKernel {
        &self.kernels[self.schedule.steps]
    }

    pub fn kernels(&self) -> &[TransitionKernel] {
        &self.kernels
    }

    /// Checksum of the cached Cholesky factors.
    pub fn checksum(&self) -> u64 {
        let flat: Vec<f64> = self
            .kernels
            .iter()
            .flat_map(|k| k.cholesky.iter().copied())
            .collect();
        checksum_f64(&flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::DriftMode;
    use approx::assert_relative_eq;

    fn unit_beta(steps: usize) -> BetaSchedule {
        BetaSchedule::new(1.0, 1.0, 1.0, 1.0, steps).unwrap()
    }

    #[test]
    fn beta_d_integral_examples() {
        let s = BetaSchedule::default();
        let eye = DriftMatrixGrid::identity(2, DriftMode::DiagonalVarying, 100);
        let bd = beta_d_integral(&s, &eye, 0.37).unwrap();
        assert_relative_eq!(bd[(0, 0)], s.sigma2_at(0.37).unwrap(), max_relative = 1e-13);
        assert_eq!(bd[(0, 1)], 0.0);
        assert_eq!(beta_d_integral(&s, &eye, 0.0).unwrap(), Mat::zeros(2, 2));

        let two = DriftMatrixGrid::diagonal(&[2.0], 10).unwrap();
        let bd = beta_d_integral(&unit_beta(10), &two, 0.5).unwrap();
        assert_relative_eq!(bd[(0, 0)], 1.0, max_relative = 1e-14);
        assert!(beta_d_integral(&unit_beta(10), &two, 0.55).is_err());
    }

    /// Classical RK4 on dμ/dt = -½ β D μ with unit β and D = 2.
    fn rk4_scalar_mean(t_end: f64) -> f64 {
        let f = |m: f64| -0.5 * 2.0 * m;
        let steps = 2000;
        let h = t_end / steps as f64;
        let mut m = 1.0;
        for _ in 0..steps {
            let k1 = f(m);
            let k2 = f(m + 0.5 * h * k1);
            let k3 = f(m + 0.5 * h * k2);
            let k4 = f(m + h * k3);
            m += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        m
    }

    /// RK4 on dΣ/dt = -λ Σ + 1 (unit β, Σ₀ = 0).
    fn rk4_scalar_variance(lambda: f64, t_end: f64) -> f64 {
        let f = |v: f64| -lambda * v + 1.0;
        let steps = 2000;
        let h = t_end / steps as f64;
        let mut v = 0.0;
        for _ in 0..steps {
            let k1 = f(v);
            let k2 = f(v + 0.5 * h * k1);
            let k3 = f(v + 0.5 * h * k2);
            let k4 = f(v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        v
    }

    #[test]
    fn mean_map_examples() {
        let s = BetaSchedule::default();
        let eye = DriftMatrixGrid::identity(3, DriftMode::FullInvariant, 100);
        let m = mean_map(&s, &eye, 0.6).unwrap();
        let expect = (-0.5 * s.sigma2_at(0.6).unwrap()).exp();
        assert!((m - Mat::identity(3, 3) * expect).amax() < 1e-14);
        assert_eq!(mean_map(&s, &eye, 0.0).unwrap(), Mat::identity(3, 3));

        let two = DriftMatrixGrid::diagonal(&[2.0], 10).unwrap();
        let m = mean_map(&unit_beta(10), &two, 0.5).unwrap();
        assert_relative_eq!(m[(0, 0)], (-0.5f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(m[(0, 0)], rk4_scalar_mean(0.5), max_relative = 1e-8);
    }

    #[test]
    fn covariance_general_examples() {
        let s = BetaSchedule::default();
        let eye = DriftMatrixGrid::identity(2, DriftMode::FullInvariant, 100);
        let zero = Mat::zeros(2, 2);
        let sol = covariance_general(&s, &eye, 0.8, &zero).unwrap();
        let v = -(-s.sigma2_at(0.8).unwrap()).exp_m1();
        assert!((sol.covariance - Mat::identity(2, 2) * v).amax() < 1e-13);
        let sol0 = covariance_general(&s, &eye, 0.0, &zero).unwrap();
        assert_eq!(sol0.covariance, zero);

        let g = DriftMatrixGrid::diagonal(&[0.5, 2.0], 10).unwrap();
        let sol = covariance_general(&unit_beta(10), &g, 1.0, &zero).unwrap();
        // Σ_ii = (1 - e^{-λ_i σ²}) / λ_i with σ² = 1
        let e1 = 2.0 * (1.0 - (-0.5f64).exp());
        let e2 = 0.5 * (1.0 - (-2.0f64).exp());
        assert_relative_eq!(e1, rk4_scalar_variance(0.5, 1.0), max_relative = 1e-8);
        assert_relative_eq!(e2, rk4_scalar_variance(2.0, 1.0), max_relative = 1e-8);
        assert_relative_eq!(sol.covariance[(0, 0)], e1, max_relative = 1e-12);
        assert_relative_eq!(sol.covariance[(1, 1)], e2, max_relative = 1e-12);
        assert!(sol.covariance[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn diagonal_fast_path_examples() {
        let s = BetaSchedule::default();
        let k = covariance_diagonal(&s, &[1.0, 1.0], 0.4, 1e-3).unwrap();
        let v = (1.0 - (-s.sigma2_at(0.4).unwrap()).exp()).sqrt();
        for l in &k.cholesky_diag {
            assert_relative_eq!(*l, v, max_relative = 1e-14);
        }
        let k0 = covariance_diagonal(&s, &[0.3, 4.0], 0.0, 1e-3).unwrap();
        assert_eq!(k0.cholesky_diag, vec![0.0, 0.0]);
        assert_eq!(k0.mean_diag, vec![1.0, 1.0]);
        assert!(covariance_diagonal(&s, &[1e-4, 1.0], 0.5, 1e-3).is_err());

        // σ² = 1 with unit β at t = 1
        let k = covariance_diagonal(&unit_beta(10), &[0.5, 2.0], 1.0, 1e-3).unwrap();
        let g = DriftMatrixGrid::diagonal(&[0.5, 2.0], 10).unwrap();
        let sol = covariance_general(&unit_beta(10), &g, 1.0, &Mat::zeros(2, 2)).unwrap();
        let l = linalg::cholesky_lower(&sol.covariance).unwrap();
        assert_relative_eq!(k.cholesky_diag[0], (2.0 * (1.0 - (-0.5f64).exp())).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(k.cholesky_diag[1], (0.5 * (1.0 - (-2.0f64).exp())).sqrt(), max_relative = 1e-14);
        assert!((k.cholesky_diag[0] - l[(0, 0)]).abs() < 1e-10);
        assert!((k.cholesky_diag[1] - l[(1, 1)]).abs() < 1e-10);
    }

    #[test]
    fn conditional_sample_and_score_examples() {
        let k = TransitionKernel::from_moments(
            0.5,
            Mat::from_element(1, 1, 0.5),
            Mat::from_element(1, 1, 0.04),
        )
        .unwrap();
        let x = k.conditional_sample(&Vector::from_element(1, 2.0), &Vector::from_element(1, 1.0));
        assert_relative_eq!(x[0], 1.2, max_relative = 1e-15);
        let mu = k.mean(&Vector::from_element(1, 2.0));
        assert_eq!(k.conditional_sample(&Vector::from_element(1, 2.0), &Vector::zeros(1)), mu);
        assert_eq!(
            k.conditional_score(&mu, &Vector::from_element(1, 2.0)).unwrap(),
            Vector::zeros(1)
        );

        let k = TransitionKernel::from_moments(
            1.0,
            Mat::identity(2, 2),
            Mat::from_diagonal(&Vector::from_vec(vec![0.25, 1.0])),
        )
        .unwrap();
        let s = k
            .conditional_score(&Vector::from_vec(vec![1.0, 2.0]), &Vector::zeros(2))
            .unwrap();
        assert_relative_eq!(s[0], -4.0, max_relative = 1e-14);
        assert_relative_eq!(s[1], -2.0, max_relative = 1e-14);

        let t0 = TransitionKernel::identity(2);
        let x0 = Vector::from_vec(vec![0.3, -1.0]);
        assert_eq!(t0.conditional_sample(&x0, &Vector::from_vec(vec![5.0, 5.0])), x0);
        assert!(matches!(t0.conditional_score(&x0, &x0), Err(VsdmError::Domain(_))));
    }

    #[test]
    fn isotropic_table_matches_vp_closed_forms() {
        let s = BetaSchedule::default();
        let table = KernelTable::build(&s, &DriftMatrixGrid::identity(2, DriftMode::DiagonalVarying, 100)).unwrap();
        for n in [1, 17, 100] {
            let k = table.kernel(n);
            let s2 = s.sigma2_node(n);
            assert_relative_eq!(k.mean_map[(1, 1)], (-0.5 * s2).exp(), max_relative = 1e-12);
            assert_relative_eq!(k.covariance[(0, 0)], 1.0 - (-s2).exp(), max_relative = 1e-12);
        }
        assert!(table.kernel(0).is_degenerate());
    }

    #[test]
    fn table_checksum_tracks_drift() {
        let s = BetaSchedule::default();
        let a = KernelTable::build(&s, &DriftMatrixGrid::identity(2, DriftMode::DiagonalVarying, 100)).unwrap();
        let b = KernelTable::build(&s, &DriftMatrixGrid::diagonal(&[1.0, 1.5], 100).unwrap()).unwrap();
        assert_ne!(a.checksum(), b.checksum());
        let a2 = KernelTable::build(&s, &DriftMatrixGrid::identity(2, DriftMode::DiagonalVarying, 100)).unwrap();
        assert_eq!(a.checksum(), a2.checksum());
    }
}
