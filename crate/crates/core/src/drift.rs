//! Piecewise-constant drift matrices `D_c = I - 2 A_c` on the cells of the
//! time grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VsdmError};
use crate::linalg::{self, Mat, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftMode {
    DiagonalInvariant,
    DiagonalVarying,
    FullInvariant,
    FullVarying,
}

impl DriftMode {
    pub fn is_diagonal(self) -> bool {
        matches!(self, DriftMode::DiagonalInvariant | DriftMode::DiagonalVarying)
    }

    pub fn is_time_invariant(self) -> bool {
        matches!(self, DriftMode::DiagonalInvariant | DriftMode::FullInvariant)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DriftMode::DiagonalInvariant => "diagonal-invariant",
            DriftMode::DiagonalVarying => "diagonal-varying",
            DriftMode::FullInvariant => "full-invariant",
            DriftMode::FullVarying => "full-varying",
        }
    }
}

impl fmt::Display for DriftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DriftMode {
    type Err = VsdmError;

    fn from_str(s: &str) -> Result<Self> {
        [
            DriftMode::DiagonalInvariant,
            DriftMode::DiagonalVarying,
            DriftMode::FullInvariant,
            DriftMode::FullVarying,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| VsdmError::Config(format!("unknown drift mode '{s}'")))
    }
}

/// Drift matrices for the `N` cells `[t_c, t_{c+1})`. Time-invariant modes
/// store a single matrix shared by every cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftMatrixGrid {
    dim: usize,
    mode: DriftMode,
    cells: usize,
    values: Vec<Mat>,
}

pub fn a_from_d(d: &Mat) -> Mat {
    (Mat::identity(d.nrows(), d.ncols()) - d) * 0.5
}

pub fn d_from_a(a: &Mat) -> Mat {
    Mat::identity(a.nrows(), a.ncols()) - a * 2.0
}

impl DriftMatrixGrid {
    /// `D ≡ I`, i.e. `A ≡ 0`: the plain variance-preserving diffusion.
    pub fn identity(dim: usize, mode: DriftMode, cells: usize) -> Self {
        let stored = if mode.is_time_invariant() { 1 } else { cells };
        DriftMatrixGrid {
            dim,
            mode,
            cells,
            values: vec![Mat::identity(dim, dim); stored],
        }
    }

    /// Build from explicit per-cell `D` values (one value for invariant modes).
    pub fn from_d(mode: DriftMode, cells: usize, values: Vec<Mat>) -> Result<Self> {
        let stored = if mode.is_time_invariant() { 1 } else { cells };
        if values.len() != stored || cells == 0 {
            return Err(VsdmError::domain(format!(
                "{mode} grid over {cells} cells needs {stored} matrices, got {}",
                values.len()
            )));
        }
        let dim = values[0].nrows();
        for v in &values {
            if v.nrows() != dim || v.ncols() != dim {
                return Err(VsdmError::domain("drift matrices must be square and equally sized"));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(VsdmError::domain("drift matrix has non-finite entries"));
            }
            if mode.is_diagonal() && !is_diagonal(v) {
                return Err(VsdmError::domain("diagonal drift mode with off-diagonal entries"));
            }
        }
        Ok(DriftMatrixGrid {
            dim,
            mode,
            cells,
            values,
        })
    }

    /// Time-invariant diagonal grid `D = diag(λ)`.
    pub fn diagonal(lambda: &[f64], cells: usize) -> Result<Self> {
        let d = Mat::from_diagonal(&Vector::from_column_slice(lambda));
        Self::from_d(DriftMode::DiagonalInvariant, cells, vec![d])
    }

    pub fn from_a(mode: DriftMode, cells: usize, values: Vec<Mat>) -> Result<Self> {
        Self::from_d(mode, cells, values.iter().map(d_from_a).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> DriftMode {
        self.mode
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Number of independently stored matrices.
    pub fn stored(&self) -> usize {
        self.values.len()
    }

    pub fn slot(&self, cell: usize) -> usize {
        if self.mode.is_time_invariant() {
            0
        } else {
            cell
        }
    }

    pub fn d(&self, cell: usize) -> &Mat {
        &self.values[self.slot(cell)]
    }

    pub fn a(&self, cell: usize) -> Mat {
        a_from_d(self.d(cell))
    }

    pub fn stored_d(&self) -> &[Mat] {
        &self.values
    }

    pub fn stored_d_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    /// Clamp every stored matrix to the eigenvalue floor.
    pub fn project(&mut self, floor: f64) {
        let diagonal = self.mode.is_diagonal();
        for v in &mut self.values {
            if diagonal {
                for i in 0..self.dim {
                    v[(i, i)] = v[(i, i)].max(floor);
                }
            } else {
                linalg::project_eigen_floor(v, floor);
            }
        }
    }

    /// Smallest eigenvalue of the symmetric part over all cells.
    pub fn min_eigenvalue(&self) -> f64 {
        self.values
            .iter()
            .map(linalg::min_sym_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }

    /// Diagonal of `D_c` for every cell, scaled by `scale`.
    pub fn diagonal_scales(&self, scale: f64) -> Vec<Vec<f64>> {
        (0..self.cells)
            .map(|c| (0..self.dim).map(|i| self.d(c)[(i, i)] * scale).collect())
            .collect()
    }

    /// Cell-averaged diagonal of `D`, scaled by `scale`.
    pub fn mean_diagonal_scale(&self, scale: f64) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for c in 0..self.cells {
            for (i, a) in acc.iter_mut().enumerate() {
                *a += self.d(c)[(i, i)];
            }
        }
        acc.iter().map(|a| a / self.cells as f64 * scale).collect()
    }

    /// The same piecewise-constant drift on a uniform grid of `cells` cells:
    /// each new cell takes the old cell containing its midpoint.
    pub fn resample(&self, cells: usize) -> Self {
        let values = if self.mode.is_time_invariant() {
            self.values.clone()
        } else {
            (0..cells)
                .map(|j| {
                    let mid = (j as f64 + 0.5) / cells as f64;
                    let old = ((mid * self.cells as f64) as usize).min(self.cells - 1);
                    self.values[old].clone()
                })
                .collect()
        };
        DriftMatrixGrid {
            dim: self.dim,
            mode: self.mode,
            cells,
            values,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.values.iter().all(|v| *v == Mat::identity(self.dim, self.dim))
    }
}

fn is_diagonal(m: &Mat) -> bool {
    m.iter()
        .enumerate()
        .all(|(k, &v)| k % m.nrows() == k / m.nrows() || v == 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_keeps_piecewise_values() {
        let vals: Vec<Mat> = (0..4).map(|c| Mat::identity(1, 1) * (c + 1) as f64).collect();
        let g = DriftMatrixGrid::from_d(DriftMode::DiagonalVarying, 4, vals).unwrap();
        let r = g.resample(8);
        assert_eq!(r.cells(), 8);
        assert_eq!(r.d(3)[(0, 0)], 2.0);
        assert_eq!(r.d(4)[(0, 0)], 3.0);
        let coarse = g.resample(2);
        assert_eq!(coarse.d(0)[(0, 0)], 2.0);
        let inv = DriftMatrixGrid::diagonal(&[2.0], 100).unwrap().resample(8);
        assert_eq!(inv.stored(), 1);
        assert_eq!(inv.cells(), 8);
    }
    use proptest::prelude::*;

    #[test]
    fn identity_grid_has_zero_a() {
        let g = DriftMatrixGrid::identity(3, DriftMode::DiagonalVarying, 10);
        assert_eq!(g.stored(), 10);
        assert_eq!(g.a(4), Mat::zeros(3, 3));
        assert!(g.is_identity());
        let g = DriftMatrixGrid::identity(3, DriftMode::FullInvariant, 10);
        assert_eq!(g.stored(), 1);
        assert_eq!(g.d(9), &Mat::identity(3, 3));
    }

    #[test]
    fn diagonal_mode_rejects_off_diagonal() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(DriftMatrixGrid::from_d(DriftMode::DiagonalInvariant, 4, vec![m.clone()]).is_err());
        assert!(DriftMatrixGrid::from_d(DriftMode::FullInvariant, 4, vec![m]).is_ok());
    }

    #[test]
    fn projection_clamps_diagonal_entries() {
        let mut g = DriftMatrixGrid::diagonal(&[1e-4, 2.0], 5).unwrap();
        g.project(1e-3);
        assert_eq!(g.d(0)[(0, 0)], 1e-3);
        assert_eq!(g.d(0)[(1, 1)], 2.0);
    }

    #[test]
    fn mode_parsing_round_trips() {
        for m in [
            DriftMode::DiagonalInvariant,
            DriftMode::DiagonalVarying,
            DriftMode::FullInvariant,
            DriftMode::FullVarying,
        ] {
            assert_eq!(m.as_str().parse::<DriftMode>().unwrap(), m);
        }
        assert!("bogus".parse::<DriftMode>().is_err());
    }

    proptest! {
        #[test]
        fn a_d_round_trip_is_exact(vals in proptest::collection::vec(-1e3f64..1e3, 9)) {
            // Dyadic values make the affine maps exact in binary floating point.
            let m = Mat::from_row_slice(3, 3, &vals).map(|v| (v * 64.0).round() / 64.0);
            prop_assert_eq!(a_from_d(&d_from_a(&m)), m.clone());
            prop_assert_eq!(d_from_a(&a_from_d(&m)), m);
        }
    }
}
