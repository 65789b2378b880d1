//! Scalar noise schedule `β_t` and its integral `σ_t² = ∫₀ᵗ β_s ds`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VsdmError};

/// `β(t) = β_min + (t/T)^α (β_max - β_min)` on `[0, T]`, discretized on the
/// uniform grid `t_n = n h`, `h = T / N`, `n = 0..=N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
    pub alpha: f64,
    pub steps: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            beta_min: 0.1,
            beta_max: 10.0,
            horizon: 1.0,
            alpha: 1.0,
            steps: 100,
        }
    }
}

impl BetaSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64, alpha: f64, steps: usize) -> Result<Self> {
        let s = BetaSchedule {
            beta_min,
            beta_max,
            horizon,
            alpha,
            steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn linear(beta_min: f64, beta_max: f64, steps: usize) -> Result<Self> {
        Self::new(beta_min, beta_max, 1.0, 1.0, steps)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_min > 0.0
            && self.beta_max >= self.beta_min
            && self.beta_max.is_finite()
            && self.horizon > 0.0
            && self.horizon.is_finite()
            && self.alpha >= 1.0
            && self.alpha.is_finite()
            && self.steps > 0;
        if ok {
            Ok(())
        } else {
            Err(VsdmError::Config(format!("invalid beta schedule {self:?}")))
        }
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node_time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.step()
        }
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        // Allow one ulp-scale overshoot from grid arithmetic.
        let tol = 1e-12 * self.horizon;
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(VsdmError::domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    pub fn beta_at(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.beta_unchecked(t))
    }

    pub(crate) fn beta_unchecked(&self, t: f64) -> f64 {
        let tau = t / self.horizon;
        self.beta_min + tau.powf(self.alpha) * (self.beta_max - self.beta_min)
    }

    pub fn sigma2_at(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.sigma2_unchecked(t))
    }

    pub(crate) fn sigma2_unchecked(&self, t: f64) -> f64 {
        let tau = t / self.horizon;
        let a = self.alpha;
        self.horizon * (tau * self.beta_min + tau.powf(a + 1.0) / (a + 1.0) * (self.beta_max - self.beta_min))
    }

    pub fn beta_node(&self, n: usize) -> f64 {
        self.beta_unchecked(self.node_time(n))
    }

    pub fn sigma2_node(&self, n: usize) -> f64 {
        self.sigma2_unchecked(self.node_time(n))
    }

    /// Exact `∫ β` over cell `c`, i.e. `[t_c, t_{c+1}]`.
    pub fn cell_integral(&self, c: usize) -> f64 {
        self.sigma2_node(c + 1) - self.sigma2_node(c)
    }

    /// Index of the grid node equal to `t`, if `t` lies on the grid.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let t = self.check_time(t)?;
        let x = t / self.step();
        let n = x.round();
        if (x - n).abs() > 1e-9 {
            return Err(VsdmError::domain(format!("time {t} is not on the grid (h = {})", self.step())));
        }
        Ok(n as usize)
    }
}
