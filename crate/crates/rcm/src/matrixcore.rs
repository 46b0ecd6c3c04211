//! SPD matrix primitives and the log multivariate gamma function.
//!
//! All determinants and inverses go through the Cholesky factorization.
//! Inputs are SPD by model construction, so Cholesky both halves the cost
//! of a general factorization and detects degenerate input.

use ndarray::Array2;
use statrs::function::gamma::ln_gamma;

use crate::error::{RcmError, Result};

/// Relative pivot tolerance: a pivot is accepted if it exceeds
/// `1e-12 * max(diagonal)`.
const PIVOT_RTOL: f64 = 1e-12;

/// A symmetric positive-definite matrix with its lower Cholesky factor
/// cached at construction. Immutable after construction, so values are
/// freely shared between threads.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    entries: Array2<f64>,
    chol: Array2<f64>,
}

impl SpdMatrix {
    /// Symmetrizes `m` as (A + A^T)/2 and factors it. Fails with
    /// `NotPositiveDefinite` if any Cholesky pivot is nonpositive
    /// relative to the diagonal scale.
    pub fn new(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c {
            return Err(RcmError::DimensionMismatch { expected: r, got: c });
        }
        let entries = symmetrize(&m);
        let chol = cholesky(&entries)?;
        Ok(SpdMatrix { entries, chol })
    }

    pub fn identity(p: usize) -> Self {
        SpdMatrix::new(Array2::eye(p)).expect("identity is SPD")
    }

    /// Diagonal matrix from strictly positive entries.
    pub fn from_diag(d: &[f64]) -> Result<Self> {
        SpdMatrix::new(Array2::from_diag(&ndarray::Array1::from(d.to_vec())))
    }

    /// Compound-symmetry matrix: `var` on the diagonal, `cov` off it.
    /// PD iff var > cov and var + (p-1) cov > 0.
    pub fn compound_symmetry(p: usize, var: f64, cov: f64) -> Result<Self> {
        let m = Array2::from_shape_fn((p, p), |(i, j)| if i == j { var } else { cov });
        SpdMatrix::new(m)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Lower-triangular Cholesky factor L with L L^T = self.
    pub fn chol(&self) -> &Array2<f64> {
        &self.chol
    }

    /// log |self| = 2 sum_j ln L_jj.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diag().iter().map(|x| x.ln()).sum::<f64>()
    }

    /// Inverse via two triangular solves, symmetrized as (A + A^T)/2.
    pub fn inverse(&self) -> SpdMatrix {
        let p = self.dim();
        // L Y = I, then L^T X = Y.
        let mut x = Array2::<f64>::zeros((p, p));
        for col in 0..p {
            let mut y = vec![0.0; p];
            for i in 0..p {
                let mut s = if i == col { 1.0 } else { 0.0 };
                for k in 0..i {
                    s -= self.chol[(i, k)] * y[k];
                }
                y[i] = s / self.chol[(i, i)];
            }
            for i in (0..p).rev() {
                let mut s = y[i];
                for k in i + 1..p {
                    s -= self.chol[(k, i)] * x[(k, col)];
                }
                x[(i, col)] = s / self.chol[(i, i)];
            }
        }
        let mut entries = symmetrize(&x);
        // The inverse of an SPD matrix is SPD, but for extreme condition
        // numbers the refactor can trip the pivot tolerance; bump the
        // diagonal by escalating multiples of it until it succeeds.
        let chol = loop {
            match cholesky(&entries) {
                Ok(c) => break c,
                Err(_) => {
                    let scale =
                        entries.diag().iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
                    entries += &(Array2::<f64>::eye(p) * (10.0 * PIVOT_RTOL * scale));
                }
            }
        };
        SpdMatrix { entries, chol }
    }
}

/// (A + A^T)/2.
pub fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    let p = m.nrows();
    Array2::from_shape_fn((p, p), |(i, j)| 0.5 * (m[(i, j)] + m[(j, i)]))
}

/// Lower-triangular L with L L^T = m. Fails on nonpositive pivots,
/// scale-relative to the largest diagonal entry.
pub fn cholesky(m: &Array2<f64>) -> Result<Array2<f64>> {
    let p = m.nrows();
    let max_diag = m.diag().iter().cloned().fold(0.0_f64, f64::max);
    let tol = PIVOT_RTOL * max_diag.max(f64::MIN_POSITIVE);
    let mut l = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) {
            return Err(RcmError::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..p {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Log of the multivariate gamma function:
/// `ln Gamma_p(t) = (p(p-1)/4) ln pi + sum_{j=1..p} ln Gamma(t + (1-j)/2)`.
///
/// Requires t > (p - 1)/2 so every scalar gamma argument is positive.
pub fn log_multigamma(p: usize, t: f64) -> Result<f64> {
    if p == 0 {
        return Err(RcmError::domain("log_multigamma: p must be positive"));
    }
    if !(t > (p as f64 - 1.0) / 2.0) {
        return Err(RcmError::domain(format!(
            "log_multigamma: t = {t} must exceed (p - 1)/2 = {}",
            (p as f64 - 1.0) / 2.0
        )));
    }
    let mut s = 0.25 * (p * (p - 1)) as f64 * std::f64::consts::PI.ln();
    for j in 1..=p {
        s += ln_gamma(t + (1.0 - j as f64) / 2.0);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_identity() {
        let m = SpdMatrix::identity(2);
        assert_abs_diff_eq!(m.chol()[(0, 0)], 1.0);
        assert_abs_diff_eq!(m.chol()[(1, 1)], 1.0);
        assert_abs_diff_eq!(m.chol()[(1, 0)], 0.0);
    }

    #[test]
    fn cholesky_hand_elimination() {
        // [[4,2],[2,3]] -> [[2,0],[1,sqrt 2]]
        let m = SpdMatrix::new(array![[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let l = m.chol();
        assert_abs_diff_eq!(l[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l[(1, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l[(1, 1)], 2.0_f64.sqrt(), epsilon = 1e-14);
        // L L^T reconstructs
        let rec = l.dot(&l.t());
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(rec[(i, j)], m.entries()[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_indefinite_fails() {
        // eigenvalues 3 and -1
        let r = SpdMatrix::new(array![[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(r, Err(RcmError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn log_det_values() {
        assert_abs_diff_eq!(SpdMatrix::identity(3).log_det(), 0.0, epsilon = 1e-14);
        let d = SpdMatrix::from_diag(&[2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(d.log_det(), 6.0_f64.ln(), epsilon = 1e-14);
        let m = SpdMatrix::new(array![[4.0, 2.0], [2.0, 3.0]]).unwrap();
        assert_abs_diff_eq!(m.log_det(), 8.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn inverse_values() {
        let i4 = SpdMatrix::identity(4).inverse();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(i4.entries()[(i, j)], want, epsilon = 1e-14);
            }
        }
        let d = SpdMatrix::from_diag(&[2.0, 5.0]).unwrap().inverse();
        assert_abs_diff_eq!(d.entries()[(0, 0)], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(d.entries()[(1, 1)], 0.2, epsilon = 1e-14);
        // [[4,2],[2,3]]^{-1} = (1/8) [[3,-2],[-2,4]]
        let m = SpdMatrix::new(array![[4.0, 2.0], [2.0, 3.0]]).unwrap().inverse();
        assert_abs_diff_eq!(m.entries()[(0, 0)], 3.0 / 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.entries()[(0, 1)], -2.0 / 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.entries()[(1, 1)], 4.0 / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn multigamma_scalar_case() {
        // p = 1 reduces to the scalar log-gamma
        assert_abs_diff_eq!(log_multigamma(1, 3.0).unwrap(), 2.0_f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn multigamma_p2_term_by_term() {
        // Term-by-term scalar-gamma evaluation: 0.5 ln pi + ln G(2) + ln G(1.5)
        let want = 0.5 * std::f64::consts::PI.ln() + ln_gamma(2.0) + ln_gamma(1.5);
        assert_abs_diff_eq!(log_multigamma(2, 2.0).unwrap(), want, epsilon = 1e-13);
    }

    #[test]
    fn multigamma_domain() {
        assert!(log_multigamma(3, 0.9).is_err());
    }

    #[test]
    fn construction_symmetrizes() {
        let m = SpdMatrix::new(array![[2.0, 0.3 + 1e-13], [0.3, 2.0]]).unwrap();
        assert_eq!(m.entries()[(0, 1)], m.entries()[(1, 0)]);
    }
}
