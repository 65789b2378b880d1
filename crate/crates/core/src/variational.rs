//! The variational drift `A_t` and its stochastic-approximation updates.
//!
//! The per-sample integrand for a linear forward field is
//!
//! ```text
//! Γ = ½β‖Ax‖² + β tr(A) + ½βd + ζ √β ⟨Ax, z⟩,        z = √β s(x, t)
//! ∂Γ/∂A = β A x xᵀ + β I + ζ √β z xᵀ
//! ```
//!
//! The SA step moves `A` against the batch mean of `∂Γ/∂A`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::drift::{a_from_d, d_from_a, DriftMatrixGrid, DriftMode};
use crate::error::{Result, VsdmError};
use crate::linalg::{self, Mat, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    /// Entries of `A` directly (diagonal entries only in diagonal modes).
    Direct,
    /// `D = U diag(λ_min + softplus(ρ)) Uᵀ` with `U` a product of Householder
    /// reflections. Full modes only.
    Svd,
}

impl Parametrization {
    pub fn as_str(self) -> &'static str {
        match self {
            Parametrization::Direct => "direct",
            Parametrization::Svd => "svd",
        }
    }
}

impl fmt::Display for Parametrization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Parametrization {
    type Err = VsdmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" | "diagonal-direct" => Ok(Parametrization::Direct),
            "svd" => Ok(Parametrization::Svd),
            other => Err(VsdmError::Config(format!("unknown parametrization `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Averaging {
    None,
    Polyak,
    Ema { rate: f64 },
}

impl Averaging {
    pub fn validate(&self) -> Result<()> {
        if let Averaging::Ema { rate } = *self {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(VsdmError::Config(format!("EMA rate {rate} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSizeSchedule {
    pub amplitude: f64,
    pub offset: f64,
    pub exponent: f64,
}

impl Default for StepSizeSchedule {
    fn default() -> Self {
        StepSizeSchedule {
            amplitude: 1e-2,
            offset: 0.0,
            exponent: 0.6,
        }
    }
}

impl StepSizeSchedule {
    pub fn new(amplitude: f64, offset: f64, exponent: f64) -> Result<Self> {
        let s = StepSizeSchedule {
            amplitude,
            offset,
            exponent,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.amplitude.is_finite()
            && self.amplitude > 0.0
            && self.offset.is_finite()
            && self.offset >= 0.0
            && self.exponent > 0.5
            && self.exponent <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(VsdmError::Config(format!(
                "step sizes need A > 0, B ≥ 0, a ∈ (1/2, 1]; got ({}, {}, {})",
                self.amplitude, self.offset, self.exponent
            )))
        }
    }

    /// `η_k = A / (k^a + B)` for `k ≥ 1`.
    pub fn eta(&self, k: u64) -> f64 {
        self.amplitude / ((k.max(1) as f64).powf(self.exponent) + self.offset)
    }
}

/// Forward drift `-½ β D x` of cell `cell`.
pub fn forward_drift(grid: &DriftMatrixGrid, cell: usize, x: &Vector, beta: f64) -> Vector {
    grid.d(cell) * x * (-0.5 * beta)
}

/// `½‖z_fwd‖² + div + ζ ⟨z_fwd, z_bwd⟩`.
pub fn gamma_zeta(z_fwd: &[f64], div_fwd: f64, z_bwd: &[f64], zeta: f64) -> f64 {
    let sq: f64 = z_fwd.iter().map(|z| z * z).sum();
    let cross: f64 = z_fwd.iter().zip(z_bwd).map(|(a, b)| a * b).sum();
    0.5 * sq + div_fwd + zeta * cross
}

/// Divergence of `√β z_fwd − f` for `z_fwd = √β A x` and `f = −½βx`.
pub fn linear_divergence(a: &Mat, beta: f64) -> f64 {
    beta * a.trace() + 0.5 * beta * a.nrows() as f64
}

/// Batch mean of `Γ` at drift `a`, from states `x` and backward `z` values.
pub fn gamma_batch_mean(a: &Mat, x: ArrayView2<f64>, z: ArrayView2<f64>, beta: f64, zeta: f64) -> Result<f64> {
    check_batch(x, z, a.nrows())?;
    let div = linear_divergence(a, beta);
    let sb = beta.sqrt();
    let d = a.nrows();
    let mut total = 0.0;
    let mut zf = vec![0.0; d];
    for (xr, zr) in x.outer_iter().zip(z.outer_iter()) {
        for (i, zi) in zf.iter_mut().enumerate() {
            *zi = sb * (0..d).map(|j| a[(i, j)] * xr[j]).sum::<f64>();
        }
        total += gamma_zeta(&zf, div, zr.as_slice().unwrap_or(&zr.to_vec()), zeta);
    }
    Ok(total / x.nrows() as f64)
}

fn check_batch(x: ArrayView2<f64>, z: ArrayView2<f64>, dim: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(VsdmError::domain("variational gradient needs a nonempty batch"));
    }
    if x.dim() != z.dim() || x.ncols() != dim {
        return Err(VsdmError::domain(format!(
            "batch shapes {:?} / {:?} do not match dimension {dim}",
            x.dim(),
            z.dim()
        )));
    }
    Ok(())
}

/// Sufficient statistics of one cell's batch: `Γ` is quadratic in `A`, so
/// the batch enters its gradient only through `E[x xᵀ]` and `E[z xᵀ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMoments {
    pub beta: f64,
    pub xx: Mat,
    pub zx: Mat,
}

impl CellMoments {
    pub fn from_batch(x: ArrayView2<f64>, z: ArrayView2<f64>, beta: f64) -> Result<Self> {
        let d = x.ncols();
        check_batch(x, z, d)?;
        let mut xx = Mat::zeros(d, d);
        let mut zx = Mat::zeros(d, d);
        for (xr, zr) in x.outer_iter().zip(z.outer_iter()) {
            for i in 0..d {
                for j in 0..d {
                    xx[(i, j)] += xr[i] * xr[j];
                    zx[(i, j)] += zr[i] * xr[j];
                }
            }
        }
        let m = x.nrows() as f64;
        Ok(CellMoments {
            beta,
            xx: xx / m,
            zx: zx / m,
        })
    }

    /// `E[∂Γ/∂A]` at `a`.
    pub fn grad_a(&self, a: &Mat, zeta: f64) -> Mat {
        let d = a.nrows();
        (a * &self.xx + Mat::identity(d, d)) * self.beta + &self.zx * (zeta * self.beta.sqrt())
    }
}

fn softplus(r: f64) -> f64 {
    if r > 30.0 {
        r
    } else {
        r.exp().ln_1p()
    }
}

fn sigmoid(r: f64) -> f64 {
    1.0 / (1.0 + (-r).exp())
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Householder vectors (columns of `v`) and log-scales of one stored slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub v: Mat,
    pub rho: Vector,
}

fn householder(v: &[f64]) -> Mat {
    let d = v.len();
    let n: f64 = v.iter().map(|x| x * x).sum();
    let vv = Vector::from_column_slice(v);
    Mat::identity(d, d) - &vv * vv.transpose() * (2.0 / n)
}

impl SvdFactors {
    /// Factors reproducing a symmetric `D` with eigenvalues above `floor`.
    pub fn from_d(d: &Mat, floor: f64) -> Self {
        let dim = d.nrows();
        let eig = nalgebra::SymmetricEigen::new(linalg::symmetrize(d));
        let rho = eig
            .eigenvalues
            .map(|l| softplus_inv((l - floor).max(1e-8)));
        // Reduce the eigenvector matrix Q to a ±1 diagonal R by reflections:
        // H_d…H_1 Q = R, so H_1…H_d = Q R only flips column signs of Q,
        // which leaves U Λ Uᵀ unchanged.
        let mut r = eig.eigenvectors;
        let mut vs = Mat::zeros(dim, dim);
        for k in 0..dim {
            let norm = (k..dim).map(|i| r[(i, k)].powi(2)).sum::<f64>().sqrt();
            let sign = if r[(k, k)] >= 0.0 { 1.0 } else { -1.0 };
            let mut v = vec![0.0; dim];
            v[k] = r[(k, k)] + sign * norm;
            for i in k + 1..dim {
                v[i] = r[(i, k)];
            }
            r = householder(&v) * r;
            vs.set_column(k, &Vector::from_vec(v));
        }
        SvdFactors { v: vs, rho }
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    fn prefixes(&self) -> (Vec<Mat>, Vec<Mat>) {
        let d = self.dim();
        let hs: Vec<Mat> = (0..d).map(|k| householder(self.v.column(k).as_slice())).collect();
        let mut pre = vec![Mat::identity(d, d)];
        for h in &hs {
            let last = pre.last().unwrap() * h;
            pre.push(last);
        }
        (hs, pre)
    }

    pub fn orthogonal(&self) -> Mat {
        self.prefixes().1.pop().unwrap()
    }

    pub fn eigenvalues(&self, floor: f64) -> Vector {
        self.rho.map(|r| floor + softplus(r))
    }

    pub fn d(&self, floor: f64) -> Mat {
        let u = self.orthogonal();
        &u * Mat::from_diagonal(&self.eigenvalues(floor)) * u.transpose()
    }

    pub fn param_count(&self) -> usize {
        self.dim() * self.dim() + self.dim()
    }

    /// Flat layout: Householder vectors column-major, then `ρ`.
    pub fn params(&self) -> Vec<f64> {
        self.v.iter().chain(self.rho.iter()).copied().collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let d = self.dim();
        self.v.as_mut_slice().copy_from_slice(&p[..d * d]);
        self.rho.as_mut_slice().copy_from_slice(&p[d * d..]);
    }

    /// Pull a gradient with respect to `A` back onto the flat parameters.
    pub fn pullback(&self, grad_a: &Mat, floor: f64) -> Vec<f64> {
        let d = self.dim();
        // A = (I − D)/2
        let gd = grad_a * -0.5;
        let (hs, pre) = self.prefixes();
        let u = &pre[d];
        let lam = self.eigenvalues(floor);
        let lmat = Mat::from_diagonal(&lam);
        let utgu = u.transpose() * &gd * u;
        let grho: Vec<f64> = (0..d).map(|i| utgu[(i, i)] * sigmoid(self.rho[i])).collect();
        let gu = (&gd + gd.transpose()) * u * &lmat;
        // suffix products S_k = H_{k+1}…H_d
        let mut suf = vec![Mat::identity(d, d); d + 1];
        for k in (0..d).rev() {
            suf[k] = &hs[k] * &suf[k + 1];
        }
        let mut out = vec![0.0; d * d + d];
        for k in 0..d {
            let gh = pre[k].transpose() * &gu * suf[k + 1].transpose();
            let v = self.v.column(k).into_owned();
            let n = v.dot(&v);
            let sym = (&gh + gh.transpose()) * &v;
            let vgv = v.dot(&(&gh * &v));
            let gv = (sym / n - &v * (2.0 * vgv / (n * n))) * -2.0;
            out[k * d..(k + 1) * d].copy_from_slice(gv.as_slice());
        }
        out[d * d..].copy_from_slice(&grho);
        out
    }
}

/// Current and averaged drift values plus SA bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalScore {
    grid: DriftMatrixGrid,
    parametrization: Parametrization,
    factors: Vec<SvdFactors>,
    floor: f64,
    counters: Vec<u64>,
    averaging: Averaging,
    buffer: Vec<Mat>,
}

impl VariationalScore {
    /// Starts from the given grid; the averaging buffer holds it as iterate 1.
    pub fn new(grid: DriftMatrixGrid, parametrization: Parametrization, floor: f64, averaging: Averaging) -> Result<Self> {
        averaging.validate()?;
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(VsdmError::Config(format!("eigenvalue floor {floor} must be positive")));
        }
        if parametrization == Parametrization::Svd && grid.mode().is_diagonal() {
            return Err(VsdmError::Config("svd parametrization needs a full drift mode".into()));
        }
        let mut grid = grid;
        grid.project(floor);
        let factors = match parametrization {
            Parametrization::Direct => Vec::new(),
            Parametrization::Svd => {
                let f = grid
                    .stored_d()
                    .iter()
                    .map(|d| SvdFactors::from_d(d, floor))
                    .collect::<Vec<_>>();
                // the factorization is symmetric, so refresh the grid from it
                for (d, fa) in grid.stored_d_mut().iter_mut().zip(&f) {
                    *d = fa.d(floor);
                }
                f
            }
        };
        let buffer = grid.stored_d().iter().map(a_from_d).collect();
        Ok(VariationalScore {
            counters: vec![0; grid.stored()],
            grid,
            parametrization,
            factors,
            floor,
            averaging,
            buffer,
        })
    }

    /// Isotropic start `D ≡ I`.
    pub fn isotropic(dim: usize, mode: DriftMode, cells: usize, parametrization: Parametrization, floor: f64, averaging: Averaging) -> Result<Self> {
        Self::new(DriftMatrixGrid::identity(dim, mode, cells), parametrization, floor, averaging)
    }

    pub fn grid(&self) -> &DriftMatrixGrid {
        &self.grid
    }

    pub fn parametrization(&self) -> Parametrization {
        self.parametrization
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn averaging(&self) -> Averaging {
        self.averaging
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn buffer(&self) -> &[Mat] {
        &self.buffer
    }

    pub fn factors(&self) -> &[SvdFactors] {
        &self.factors
    }

    /// Reassemble from checkpointed parts.
    pub fn from_parts(
        grid: DriftMatrixGrid,
        parametrization: Parametrization,
        factors: Vec<SvdFactors>,
        floor: f64,
        counters: Vec<u64>,
        averaging: Averaging,
        buffer: Vec<Mat>,
    ) -> Result<Self> {
        let n = grid.stored();
        let fac_ok = match parametrization {
            Parametrization::Direct => factors.is_empty(),
            Parametrization::Svd => factors.len() == n,
        };
        if counters.len() != n || buffer.len() != n || !fac_ok {
            return Err(VsdmError::Checkpoint("variational state has inconsistent slot counts".into()));
        }
        averaging.validate()?;
        Ok(VariationalScore {
            grid,
            parametrization,
            factors,
            floor,
            counters,
            averaging,
            buffer,
        })
    }

    pub fn param_count(&self, slot: usize) -> usize {
        let d = self.grid.dim();
        match self.parametrization {
            Parametrization::Svd => self.factors[slot].param_count(),
            Parametrization::Direct if self.grid.mode().is_diagonal() => d,
            Parametrization::Direct => d * d,
        }
    }

    /// Flat parameters of a stored slot.
    pub fn params(&self, slot: usize) -> Vec<f64> {
        let a = a_from_d(&self.grid.stored_d()[slot]);
        match self.parametrization {
            Parametrization::Svd => self.factors[slot].params(),
            Parametrization::Direct if self.grid.mode().is_diagonal() => a.diagonal().iter().copied().collect(),
            Parametrization::Direct => a.iter().copied().collect(),
        }
    }

    /// `A` implied by flat parameters, without projection.
    pub fn a_from_params(&self, slot: usize, p: &[f64]) -> Mat {
        let d = self.grid.dim();
        match self.parametrization {
            Parametrization::Svd => {
                let mut f = self.factors[slot].clone();
                f.set_params(p);
                a_from_d(&f.d(self.floor))
            }
            Parametrization::Direct if self.grid.mode().is_diagonal() => Mat::from_diagonal(&Vector::from_column_slice(p)),
            Parametrization::Direct => Mat::from_column_slice(d, d, p),
        }
    }

    fn pullback(&self, slot: usize, grad_a: &Mat) -> Vec<f64> {
        match self.parametrization {
            Parametrization::Svd => self.factors[slot].pullback(grad_a, self.floor),
            Parametrization::Direct if self.grid.mode().is_diagonal() => grad_a.diagonal().iter().copied().collect(),
            Parametrization::Direct => grad_a.iter().copied().collect(),
        }
    }

    /// Batch-mean gradient of `Γ` for `cell`, in the active parametrization.
    pub fn variational_loss_grad(
        &self,
        cell: usize,
        x: ArrayView2<f64>,
        z_bwd: ArrayView2<f64>,
        beta: f64,
        zeta: f64,
    ) -> Result<Vec<f64>> {
        let m = CellMoments::from_batch(x, z_bwd, beta)?;
        Ok(self.pullback(self.grid.slot(cell), &m.grad_a(&self.grid.a(cell), zeta)))
    }

    /// Gradient for a stored slot from per-cell moments; invariant modes
    /// average the contributions of every cell.
    pub fn slot_grad(&self, slot: usize, moments: &[CellMoments], zeta: f64) -> Result<Vec<f64>> {
        if moments.len() != self.grid.cells() {
            return Err(VsdmError::domain(format!(
                "expected moments for {} cells, got {}",
                self.grid.cells(),
                moments.len()
            )));
        }
        let a = a_from_d(&self.grid.stored_d()[slot]);
        let g = if self.grid.mode().is_time_invariant() {
            let mut acc = Mat::zeros(a.nrows(), a.ncols());
            for m in moments {
                acc += m.grad_a(&a, zeta);
            }
            acc / moments.len() as f64
        } else {
            moments[slot].grad_a(&a, zeta)
        };
        Ok(self.pullback(slot, &g))
    }

    /// One SA step on a stored slot: descend with `η_{k+1}`, project onto the
    /// eigenvalue floor, bump the counter and refresh the averaging buffer.
    pub fn sa_update(&mut self, slot: usize, grad: &[f64], sched: &StepSizeSchedule) -> Result<()> {
        if grad.len() != self.param_count(slot) {
            return Err(VsdmError::domain(format!(
                "gradient has {} entries, slot expects {}",
                grad.len(),
                self.param_count(slot)
            )));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(VsdmError::Training("non-finite variational gradient".into()));
        }
        let k = self.counters[slot] + 1;
        let eta = sched.eta(k);
        let mut p = self.params(slot);
        for (pi, gi) in p.iter_mut().zip(grad) {
            *pi -= eta * gi;
        }
        let mut d = d_from_a(&self.a_from_params(slot, &p));
        if self.parametrization == Parametrization::Svd {
            self.factors[slot].set_params(&p);
        } else if self.grid.mode().is_diagonal() {
            for i in 0..d.nrows() {
                d[(i, i)] = d[(i, i)].max(self.floor);
            }
        } else {
            linalg::project_eigen_floor(&mut d, self.floor);
        }
        let a = a_from_d(&d);
        self.grid.stored_d_mut()[slot] = d;
        self.counters[slot] = k;
        // the initial value is iterate 1, so this is iterate k + 1
        let buf = &mut self.buffer[slot];
        match self.averaging {
            Averaging::None => *buf = a,
            Averaging::Polyak => {
                let w = 1.0 / (k + 1) as f64;
                *buf = &*buf * (1.0 - w) + a * w;
            }
            Averaging::Ema { rate } => *buf = &*buf * (1.0 - rate) + a * rate,
        }
        Ok(())
    }

    /// Run `steps` SA updates on every stored slot from fixed moments.
    /// Returns the Frobenius norm of the total change of the raw `A` grid
    /// at each step.
    pub fn stage_update(&mut self, moments: &[CellMoments], zeta: f64, sched: &StepSizeSchedule, steps: usize) -> Result<Vec<f64>> {
        let mut changes = Vec::with_capacity(steps);
        for _ in 0..steps {
            let before = self.grid.stored_d().to_vec();
            for slot in 0..self.grid.stored() {
                let g = self.slot_grad(slot, moments, zeta)?;
                self.sa_update(slot, &g, sched)?;
            }
            let change: f64 = before
                .iter()
                .zip(self.grid.stored_d())
                .map(|(b, d)| ((b - d) * 0.5).norm_squared())
                .sum::<f64>()
                .sqrt();
            changes.push(change);
        }
        Ok(changes)
    }

    /// The grid consumed by kernels and samplers: the averaged buffer when
    /// averaging is on, the raw iterate otherwise.
    pub fn effective_drift_grid(&self) -> DriftMatrixGrid {
        match self.averaging {
            Averaging::None => self.grid.clone(),
            _ => {
                let mut g = self.grid.clone();
                for (d, a) in g.stored_d_mut().iter_mut().zip(&self.buffer) {
                    *d = d_from_a(a);
                }
                g
            }
        }
    }
}

/// Mean `z` values `√β s` for a batch of scores.
pub fn z_from_scores(scores: &Array2<f64>, beta: f64) -> Array2<f64> {
    scores * beta.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, m: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
        let x = Array2::from_shape_fn((m, d), |_| rng.random_range(-2.0..2.0));
        let z = Array2::from_shape_fn((m, d), |_| rng.random_range(-2.0..2.0));
        (x, z)
    }

    #[test]
    fn forward_drift_examples() {
        let g = DriftMatrixGrid::identity(1, DriftMode::DiagonalInvariant, 4);
        let x = Vector::from_vec(vec![3.0]);
        assert_eq!(forward_drift(&g, 0, &x, 2.0)[0], -3.0);
        assert_eq!(forward_drift(&g, 0, &Vector::zeros(1), 2.0)[0], 0.0);
        let g = DriftMatrixGrid::from_a(DriftMode::DiagonalInvariant, 4, vec![Mat::from_element(1, 1, 0.25)]).unwrap();
        let f = forward_drift(&g, 2, &x, 2.0)[0];
        // both forms of the drift
        assert_relative_eq!(f, -0.5 * 2.0 * 3.0 + 2.0 * 0.25 * 3.0, max_relative = 1e-15);
        assert_relative_eq!(f, -1.5, max_relative = 1e-15);
    }

    fn fd_divergence(a: f64, beta: f64, x: f64) -> f64 {
        // field √β·(√β a x) + ½βx
        let field = |x: f64| beta * a * x + 0.5 * beta * x;
        let h = 1e-5;
        (field(x + h) - field(x - h)) / (2.0 * h)
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_zeta(&[0.0, 0.0], 0.0, &[5.0, -1.0], 0.75), 0.0);
        let div = fd_divergence(0.0, 1.0, 0.37);
        assert_relative_eq!(div, linear_divergence(&Mat::zeros(1, 1), 1.0), max_relative = 1e-9);
        assert_relative_eq!(gamma_zeta(&[0.0], div, &[3.3], 0.75), 0.5, max_relative = 1e-9);
        let a = Mat::from_element(1, 1, 0.5);
        let div = fd_divergence(0.5, 1.0, 2.0);
        assert_relative_eq!(div, linear_divergence(&a, 1.0), max_relative = 1e-9);
        assert_relative_eq!(gamma_zeta(&[1.0], div, &[1.0], 0.75), 2.25, max_relative = 1e-9);
    }

    #[test]
    fn scalar_gradient_closed_form() {
        let (beta, a, x, s, zeta) = (1.7f64, 0.3, 1.4, -0.8, 0.75);
        let g = DriftMatrixGrid::from_a(DriftMode::DiagonalInvariant, 1, vec![Mat::from_element(1, 1, a)]).unwrap();
        let vs = VariationalScore::new(g, Parametrization::Direct, 1e-3, Averaging::None).unwrap();
        let xb = array![[x]];
        let zb = array![[beta.sqrt() * s]];
        let grad = vs.variational_loss_grad(0, xb.view(), zb.view(), beta, zeta).unwrap();
        assert_relative_eq!(grad[0], beta * a * x * x + beta + zeta * beta * x * s, max_relative = 1e-14);
    }

    #[test]
    fn zero_batch_gradient_is_divergence_only() {
        let vs = VariationalScore::isotropic(3, DriftMode::FullInvariant, 5, Parametrization::Direct, 1e-3, Averaging::None).unwrap();
        let x = Array2::zeros((4, 3));
        let g = vs.variational_loss_grad(2, x.view(), x.view(), 2.5, 0.75).unwrap();
        let expect = Mat::identity(3, 3) * 2.5;
        assert_eq!(Mat::from_column_slice(3, 3, &g), expect);
        let empty = Array2::zeros((0, 3));
        assert!(vs.variational_loss_grad(0, empty.view(), empty.view(), 1.0, 0.75).is_err());
    }

    fn fd_check(vs: &VariationalScore, rng: &mut ChaCha8Rng) -> f64 {
        let d = vs.grid().dim();
        let (x, z) = random_batch(rng, 16, d);
        let beta = rng.random_range(0.2..5.0);
        let zeta = 0.75;
        let g = vs.variational_loss_grad(0, x.view(), z.view(), beta, zeta).unwrap();
        let p = vs.params(0);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3);
        for i in 0..p.len() {
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let fu = gamma_batch_mean(&vs.a_from_params(0, &up), x.view(), z.view(), beta, zeta).unwrap();
            let fd = gamma_batch_mean(&vs.a_from_params(0, &dn), x.view(), z.view(), beta, zeta).unwrap();
            let num = (fu - fd) / (2.0 * h);
            worst = worst.max((num - g[i]).abs() / scale);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences_in_every_parametrization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let d = rng.random_range(1..=4);
            let diag: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.5)).collect();
            let g = DriftMatrixGrid::diagonal(&diag, 3).unwrap();
            let vs = VariationalScore::new(g, Parametrization::Direct, 1e-3, Averaging::None).unwrap();
            assert!(fd_check(&vs, &mut rng) <= 1e-5);

            let m = Mat::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
            let dfull = &m * m.transpose() + Mat::identity(d, d) * 0.5;
            for p in [Parametrization::Direct, Parametrization::Svd] {
                let g = DriftMatrixGrid::from_d(DriftMode::FullVarying, 3, vec![dfull.clone(); 3]).unwrap();
                let vs = VariationalScore::new(g, p, 1e-3, Averaging::None).unwrap();
                assert!(fd_check(&vs, &mut rng) <= 1e-5, "{p}");
            }
        }
    }

    #[test]
    fn svd_factors_reproduce_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 1..=4 {
            let m = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let dm = &m * m.transpose() + Mat::identity(d, d) * 0.2;
            let f = SvdFactors::from_d(&dm, 1e-3);
            assert!((f.d(1e-3) - &dm).amax() < 1e-10);
            let u = f.orthogonal();
            assert!((u.transpose() * &u - Mat::identity(d, d)).amax() < 1e-12);
        }
    }

    #[test]
    fn step_sizes() {
        let s = StepSizeSchedule::new(1.0, 0.0, 1.0).unwrap();
        assert_eq!(s.eta(1), 1.0);
        assert_eq!(s.eta(2), 0.5);
        assert_relative_eq!(s.eta(3), 1.0 / 3.0);
        assert!(StepSizeSchedule::new(1.0, 0.0, 0.5).is_err());
        assert!(StepSizeSchedule::new(0.0, 0.0, 0.7).is_err());
    }

    proptest! {
        #[test]
        fn step_sizes_decrease_with_divergent_sum(amp in 1e-3f64..10.0, off in 0.0f64..10.0, a in 0.51f64..=1.0) {
            let s = StepSizeSchedule::new(amp, off, a).unwrap();
            for k in 1..200u64 {
                prop_assert!(s.eta(k) > 0.0 && s.eta(k + 1) < s.eta(k));
            }
            // Σ k^{-a} ≥ ∫ = (K^{1-a} − 1)/(1-a) grows without bound for a ≤ 1,
            // while Σ k^{-2a} ≤ 1 + 1/(2a − 1).
            let tail_sq = 1.0 + 1.0 / (2.0 * a - 1.0);
            let sq: f64 = (1..20_000u64).map(|k| (k as f64).powf(-2.0 * a)).sum();
            prop_assert!(sq <= tail_sq);
            let lin: f64 = (1..20_000u64).map(|k| (k as f64).powf(-a)).sum();
            let lower = if a < 1.0 { (20_000f64.powf(1.0 - a) - 1.0) / (1.0 - a) } else { 20_000f64.ln() };
            prop_assert!(lin >= lower);
        }
    }

    #[test]
    fn zero_gradient_only_bumps_counter() {
        let mut vs = VariationalScore::isotropic(2, DriftMode::DiagonalVarying, 4, Parametrization::Direct, 1e-3, Averaging::Polyak).unwrap();
        let before = vs.grid().clone();
        vs.sa_update(1, &[0.0, 0.0], &StepSizeSchedule::default()).unwrap();
        assert_eq!(vs.grid(), &before);
        assert_eq!(vs.counters(), &[0, 1, 0, 0]);
    }

    #[test]
    fn projection_clamps_diagonal() {
        let mut vs = VariationalScore::isotropic(1, DriftMode::DiagonalInvariant, 2, Parametrization::Direct, 1e-3, Averaging::None).unwrap();
        // D = 1 − 2A: push A to (1 − 1e-4)/2
        let sched = StepSizeSchedule::new(1.0, 0.0, 1.0).unwrap();
        vs.sa_update(0, &[-(1.0 - 1e-4) / 2.0], &sched).unwrap();
        assert_eq!(vs.grid().d(0)[(0, 0)], 1e-3);
    }

    #[test]
    fn full_mode_projection_keeps_positive_definite() {
        let mut vs = VariationalScore::isotropic(2, DriftMode::FullInvariant, 2, Parametrization::Direct, 1e-3, Averaging::None).unwrap();
        let sched = StepSizeSchedule::new(1.0, 0.0, 1.0).unwrap();
        vs.sa_update(0, &[-3.0, 1.0, -2.0, 0.4], &sched).unwrap();
        assert!(vs.grid().min_eigenvalue() >= 1e-3 - 1e-12);
    }

    fn scalar_run(avg: Averaging) -> f64 {
        // scalar iterates −2 then −4; positive A = 2 would put D below the floor
        let g = DriftMatrixGrid::from_a(DriftMode::DiagonalInvariant, 1, vec![Mat::from_element(1, 1, -2.0)]).unwrap();
        let mut vs = VariationalScore::new(g, Parametrization::Direct, 1e-3, avg).unwrap();
        let sched = StepSizeSchedule::new(1.0, 0.0, 1.0).unwrap();
        // η_1 = 1, so a gradient of 2 moves A from −2 to −4
        vs.sa_update(0, &[2.0], &sched).unwrap();
        vs.effective_drift_grid().a(0)[(0, 0)]
    }

    #[test]
    fn averaging_examples() {
        assert_relative_eq!(scalar_run(Averaging::None), -4.0);
        assert_relative_eq!(scalar_run(Averaging::Polyak), -3.0);
        assert_relative_eq!(scalar_run(Averaging::Ema { rate: 0.5 }), -3.0);
    }

    #[test]
    fn polyak_and_ema_recursions_hold_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for avg in [Averaging::Polyak, Averaging::Ema { rate: 0.2 }] {
            let mut vs = VariationalScore::isotropic(2, DriftMode::DiagonalInvariant, 3, Parametrization::Direct, 1e-3, avg).unwrap();
            let sched = StepSizeSchedule::new(0.1, 1.0, 0.7).unwrap();
            let mut iterates = vec![vs.grid().a(0)];
            for _ in 0..30 {
                let g = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                vs.sa_update(0, &g, &sched).unwrap();
                iterates.push(vs.grid().a(0));
            }
            let expect = match avg {
                Averaging::Polyak => iterates.iter().fold(Mat::zeros(2, 2), |acc, a| acc + a) / iterates.len() as f64,
                _ => iterates[1..].iter().fold(iterates[0].clone(), |acc, a| acc * 0.8 + a * 0.2),
            };
            assert!((&vs.buffer()[0] - expect).amax() < 1e-13);
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        // β(A Sxx + I) + ζ√β Szx = 0 with Szx = −√β I gives A = −(1−ζ) Sxx⁻¹
        let beta: f64 = 2.0;
        let zeta = 0.75;
        let sxx = Mat::from_diagonal(&Vector::from_vec(vec![4.0, 1.0]));
        let m = CellMoments {
            beta,
            xx: sxx.clone(),
            zx: Mat::identity(2, 2) * -beta.sqrt(),
        };
        let a_star = -(sxx.try_inverse().unwrap()) * (1.0 - zeta);
        let g = DriftMatrixGrid::from_a(DriftMode::DiagonalInvariant, 1, vec![a_star.clone()]).unwrap();
        let mut vs = VariationalScore::new(g, Parametrization::Direct, 1e-3, Averaging::None).unwrap();
        let changes = vs.stage_update(&[m], zeta, &StepSizeSchedule::default(), 5).unwrap();
        assert!(changes.iter().all(|&c| c < 1e-15));
        assert!((vs.grid().a(0) - a_star).amax() < 1e-15);
    }
}
