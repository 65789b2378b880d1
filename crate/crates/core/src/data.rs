//! Synthetic 2-D datasets with per-axis stretching.
//!
//! Base shapes are standardized to zero mean and unit per-axis standard
//! deviation, then multiplied coordinatewise by the stretch vector.

use std::f64::consts::PI;
use std::sync::OnceLock;

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VsdmError};
use crate::linalg::{self, Mat};
use crate::rng::{normal, stream_rng, Purpose};
use crate::score::DataSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Shape {
    /// Archimedean arm `r = θ/π`, `θ ~ U[π, 4π]`, plus isotropic noise.
    Spiral { noise: f64 },
    /// Uniform over the 8 black cells of a 4×4 board on `[−2, 2]²`.
    Checkerboard,
    /// `N(mean, cov)`, not standardized.
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub shape: Shape,
    pub stretch: Vec<f64>,
    pub seed: u64,
}

const SPIRAL_LO: f64 = PI;
const SPIRAL_HI: f64 = 4.0 * PI;

/// Mean and second moments of the noiseless spiral arm, by composite Simpson.
fn spiral_arm_moments() -> &'static ([f64; 2], [f64; 2]) {
    static M: OnceLock<([f64; 2], [f64; 2])> = OnceLock::new();
    M.get_or_init(|| {
        let n = 20_000;
        let h = (SPIRAL_HI - SPIRAL_LO) / n as f64;
        let mut m = [0.0; 2];
        let mut s = [0.0; 2];
        for k in 0..=n {
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let th = SPIRAL_LO + k as f64 * h;
            let r = th / PI;
            let p = [r * th.cos(), r * th.sin()];
            for i in 0..2 {
                m[i] += w * p[i];
                s[i] += w * p[i] * p[i];
            }
        }
        let norm = h / 3.0 / (SPIRAL_HI - SPIRAL_LO);
        (m.map(|v| v * norm), s.map(|v| v * norm))
    })
}

/// Per-axis variance of the checkerboard before standardization.
const CHECKER_VAR: f64 = 4.0 / 3.0;

impl Dataset {
    pub fn spiral(stretch: Vec<f64>, seed: u64) -> Self {
        Dataset {
            shape: Shape::Spiral { noise: 0.05 },
            stretch,
            seed,
        }
    }

    pub fn checkerboard(stretch: Vec<f64>, seed: u64) -> Self {
        Dataset {
            shape: Shape::Checkerboard,
            stretch,
            seed,
        }
    }

    pub fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>, seed: u64) -> Self {
        let d = mean.len();
        Dataset {
            shape: Shape::Gaussian { mean, cov },
            stretch: vec![1.0; d],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let base = match &self.shape {
            Shape::Spiral { noise } => {
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(VsdmError::Config(format!("spiral noise {noise} must be ≥ 0")));
                }
                2
            }
            Shape::Checkerboard => 2,
            Shape::Gaussian { mean, cov } => {
                if mean.is_empty() || cov.len() != mean.len() || cov.iter().any(|r| r.len() != mean.len()) {
                    return Err(VsdmError::Config("gaussian mean/cov shapes disagree".into()));
                }
                linalg::cholesky_lower(&self.gaussian_cov())
                    .map_err(|_| VsdmError::Config("gaussian covariance is not positive definite".into()))?;
                mean.len()
            }
        };
        if self.stretch.len() != base || self.stretch.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VsdmError::Config(format!(
                "stretch must have {base} positive entries, got {:?}",
                self.stretch
            )));
        }
        Ok(())
    }

    fn gaussian_cov(&self) -> Mat {
        match &self.shape {
            Shape::Gaussian { cov, .. } => {
                let d = cov.len();
                Mat::from_fn(d, d, |i, j| cov[i][j])
            }
            _ => unreachable!(),
        }
    }

    pub fn dim(&self) -> usize {
        self.stretch.len()
    }

    /// Short label such as `spiral-8Y`.
    pub fn label(&self) -> String {
        let base = match self.shape {
            Shape::Spiral { .. } => "spiral",
            Shape::Checkerboard => "checkerboard",
            Shape::Gaussian { .. } => "gaussian",
        };
        let axes = ["X", "Y", "Z"];
        let mut out = base.to_string();
        for (i, s) in self.stretch.iter().enumerate() {
            if *s != 1.0 {
                let name = axes.get(i).map(|a| a.to_string()).unwrap_or_else(|| format!("x{i}"));
                out.push_str(&format!("-{s}{name}"));
            }
        }
        out
    }

    pub fn generate(&self, count: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((count, d));
        match &self.shape {
            Shape::Spiral { noise } => {
                let (m, s) = spiral_arm_moments();
                let sd = [0, 1].map(|i| (s[i] - m[i] * m[i] + noise * noise).sqrt());
                for r in 0..count {
                    let th = rng.random_range(SPIRAL_LO..SPIRAL_HI);
                    let rad = th / PI;
                    let p = [rad * th.cos(), rad * th.sin()];
                    for i in 0..2 {
                        out[(r, i)] = (p[i] + noise * normal(rng) - m[i]) / sd[i];
                    }
                }
            }
            Shape::Checkerboard => {
                let sd = CHECKER_VAR.sqrt();
                for r in 0..count {
                    let cell = rng.random_range(0..8usize);
                    let row = cell / 2;
                    // black cells have even (row + col)
                    let col = 2 * (cell % 2) + row % 2;
                    let x = -2.0 + row as f64 + rng.random::<f64>();
                    let y = -2.0 + col as f64 + rng.random::<f64>();
                    out[(r, 0)] = x / sd;
                    out[(r, 1)] = y / sd;
                }
            }
            Shape::Gaussian { mean, .. } => {
                let l = linalg::cholesky_lower(&self.gaussian_cov()).expect("validated covariance");
                let mut z = vec![0.0; d];
                for r in 0..count {
                    for v in z.iter_mut() {
                        *v = normal(rng);
                    }
                    for i in 0..d {
                        out[(r, i)] = mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>();
                    }
                }
            }
        }
        for (i, s) in self.stretch.iter().enumerate() {
            out.column_mut(i).mapv_inplace(|v| v * s);
        }
        out
    }

    /// Draw from the dataset's own stream `index`.
    pub fn generate_seeded(&self, count: usize, index: u64) -> Array2<f64> {
        self.generate(count, &mut stream_rng(self.seed, Purpose::Data, index))
    }
}

impl DataSource for Dataset {
    fn dim(&self) -> usize {
        Dataset::dim(self)
    }

    fn draw(&self, count: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        self.generate(count, rng)
    }
}
