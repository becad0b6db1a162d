//! Factorized tridiagonal and cyclic tridiagonal solves.

use crate::error::{Error, Result};

/// LU factors of a symmetric tridiagonal matrix (Thomas algorithm).
#[derive(Debug, Clone)]
pub(crate) struct Tridiag {
    sub: Vec<f64>,
    /// Reciprocal pivots.
    inv_piv: Vec<f64>,
    /// Multipliers `l_i = sub_i / piv_{i-1}`.
    mult: Vec<f64>,
}

impl Tridiag {
    /// Factor the matrix with diagonal `diag` and off-diagonal `off`
    /// (`off[i]` couples rows `i` and `i + 1`).
    pub(crate) fn factor(diag: &[f64], off: &[f64]) -> Result<Self> {
        let n = diag.len();
        debug_assert_eq!(off.len() + 1, n.max(1));
        let mut inv_piv = vec![0.0; n];
        let mut mult = vec![0.0; n];
        let mut piv = diag[0];
        for i in 0..n {
            if i > 0 {
                mult[i] = off[i - 1] / piv;
                piv = diag[i] - mult[i] * off[i - 1];
            }
            if !(piv.abs() > 1e-300) || !piv.is_finite() {
                return Err(Error::Numerical(format!("singular tridiagonal system at row {i}")));
            }
            inv_piv[i] = 1.0 / piv;
        }
        Ok(Self {
            sub: off.to_vec(),
            inv_piv,
            mult,
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.inv_piv.len()
    }

    /// Solve in place.
    pub(crate) fn solve(&self, rhs: &mut [f64]) {
        let n = self.len();
        for i in 1..n {
            rhs[i] -= self.mult[i] * rhs[i - 1];
        }
        rhs[n - 1] *= self.inv_piv[n - 1];
        for i in (0..n - 1).rev() {
            rhs[i] = (rhs[i] - self.sub[i] * rhs[i + 1]) * self.inv_piv[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let diag = [4.0, 5.0, 6.0, 3.0];
        let off = [1.0, -2.0, 0.5];
        let x = [1.0, -1.0, 2.0, 0.25];
        let mut b = vec![0.0; 4];
        for i in 0..4 {
            b[i] = diag[i] * x[i];
            if i > 0 {
                b[i] += off[i - 1] * x[i - 1];
            }
            if i < 3 {
                b[i] += off[i] * x[i + 1];
            }
        }
        let f = Tridiag::factor(&diag, &off).unwrap();
        f.solve(&mut b);
        for i in 0..4 {
            assert!((b[i] - x[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_singular() {
        assert!(Tridiag::factor(&[0.0, 1.0], &[0.0]).is_err());
    }
}
