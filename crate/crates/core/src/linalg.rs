//! Small dense linear algebra on `nalgebra` matrices: the Padé(13)
//! scaling-and-squaring matrix exponential, Cholesky with a single jitter
//! retry, and the eigenvalue-floor projection used for drift matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, VsdmError};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Higham (2005) coefficients of the [13/13] Padé approximant.
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

const THETA13: f64 = 5.371_920_351_148_152;

fn norm1(a: &Mat) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a [13/13] Padé
/// approximant. The scaling exponent is chosen from the 1-norm so that
/// `‖A / 2^s‖₁ ≤ θ₁₃`.
pub fn expm(a: &Mat) -> Mat {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let norm = norm1(a);
    if !norm.is_finite() {
        return Mat::from_element(n, n, f64::NAN);
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a * 2f64.powi(-s);
    let b = &PADE13;
    let ident = Mat::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .unwrap_or_else(|| Mat::from_element(n, n, f64::NAN));
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn max_asymmetry(a: &Mat) -> f64 {
    (a - a.transpose()).amax()
}

/// `‖a - b‖_F / max(‖b‖_F, floor)`.
pub fn rel_frobenius(a: &Mat, b: &Mat, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix. If the
/// first attempt fails, `1e-12 · tr(Σ)/d · I` is added once and the
/// factorization retried.
pub fn cholesky_lower(sigma: &Mat) -> Result<Mat> {
    if let Some(ch) = sigma.clone().cholesky() {
        return Ok(ch.l());
    }
    let d = sigma.nrows();
    let jitter = 1e-12 * sigma.trace() / d as f64;
    if jitter > 0.0 && jitter.is_finite() {
        let bumped = sigma + Mat::identity(d, d) * jitter;
        if let Some(ch) = bumped.cholesky() {
            return Ok(ch.l());
        }
    }
    Err(VsdmError::Kernel(format!(
        "covariance is not positive definite (trace {:.3e})",
        sigma.trace()
    )))
}

pub fn inverse(a: &Mat) -> Option<Mat> {
    a.clone().try_inverse()
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_sym_eigenvalue(a: &Mat) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(a));
    eig.eigenvalues.min()
}

/// Eigenvalues of the symmetric part of `a`.
pub fn sym_eigenvalues(a: &Mat) -> Vector {
    SymmetricEigen::new(symmetrize(a)).eigenvalues
}

/// Project `d` so that its symmetric part has every eigenvalue `≥ floor`.
/// The skew-symmetric part is kept untouched, so `xᵀ D x ≥ floor ‖x‖²`
/// afterwards. Returns whether anything changed.
pub fn project_eigen_floor(d: &mut Mat, floor: f64) -> bool {
    let sym = symmetrize(d);
    let skew = &*d - &sym;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return false;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let q = &eig.eigenvectors;
    let sym = q * Mat::from_diagonal(&clamped) * q.transpose();
    *d = sym + skew;
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn expm_of_zero_and_diagonal() {
        let z = Mat::zeros(3, 3);
        assert_eq!(expm(&z), Mat::identity(3, 3));
        let d = Mat::from_diagonal(&Vector::from_vec(vec![-0.5, 2.0, 30.0]));
        let e = expm(&d);
        for (i, l) in [-0.5f64, 2.0, 30.0].iter().enumerate() {
            assert_relative_eq!(e[(i, i)], l.exp(), max_relative = 1e-13);
        }
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn expm_of_rotation_generator() {
        // exp([[0, -w], [w, 0]]) is a rotation by w.
        for w in [0.1, 1.0, 7.5, 40.0] {
            let a = Mat::from_row_slice(2, 2, &[0.0, -w, w, 0.0]);
            let e = expm(&a);
            let r = Mat::from_row_slice(2, 2, &[w.cos(), -w.sin(), w.sin(), w.cos()]);
            assert!((e - r).amax() < 1e-11, "w = {w}");
        }
    }

    #[test]
    fn expm_of_nilpotent_block() {
        // [[a, b], [0, a]] -> e^a [[1, b], [0, 1]]
        let a = Mat::from_row_slice(2, 2, &[-3.0, 5.0, 0.0, -3.0]);
        let e = expm(&a);
        let expect = Mat::from_row_slice(2, 2, &[1.0, 5.0, 0.0, 1.0]) * (-3.0f64).exp();
        assert!((e - expect).amax() < 1e-14);
    }

    proptest! {
        #[test]
        fn expm_matches_eigendecomposition_for_symmetric(
            vals in proptest::collection::vec(-4.0f64..4.0, 9)
        ) {
            let m = Mat::from_row_slice(3, 3, &vals);
            let s = symmetrize(&m);
            let eig = SymmetricEigen::new(s.clone());
            let expect = &eig.eigenvectors
                * Mat::from_diagonal(&eig.eigenvalues.map(f64::exp))
                * eig.eigenvectors.transpose();
            let got = expm(&s);
            prop_assert!(rel_frobenius(&got, &expect, 1e-300) < 1e-12);
        }

        #[test]
        fn expm_inverse_identity(vals in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let m = Mat::from_row_slice(4, 4, &vals);
            let prod = expm(&m) * expm(&(-&m));
            prop_assert!((prod - Mat::identity(4, 4)).amax() < 1e-10);
        }

        #[test]
        fn projection_enforces_floor(vals in proptest::collection::vec(-3.0f64..3.0, 9)) {
            let mut d = Mat::from_row_slice(3, 3, &vals);
            let skew_before = &d - symmetrize(&d);
            project_eigen_floor(&mut d, 1e-3);
            prop_assert!(min_sym_eigenvalue(&d) >= 1e-3 - 1e-12);
            let skew_after = &d - symmetrize(&d);
            prop_assert!((skew_after - skew_before).amax() < 1e-12);
        }
    }

    #[test]
    fn cholesky_reconstructs_and_rejects() {
        let s = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let l = cholesky_lower(&s).unwrap();
        assert!((&l * l.transpose() - &s).amax() < 1e-14);
        assert_eq!(l[(0, 1)], 0.0);
        let bad = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_lower(&bad), Err(VsdmError::Kernel(_))));
    }
}
