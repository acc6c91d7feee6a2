//! Dense SPD linear algebra on top of `nalgebra`.
//!
//! Every solve in the crate goes through [`SpdFactor`]. There is no pivoted
//! fallback: a non-positive pivot is reported as an error and the caller
//! decides what that means (degenerate design, collapsed variance, ...).

use nalgebra::{DMatrix, DVector};

use super::NumericsError;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const SYMMETRY_RTOL: f64 = 1e-10;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: Matrix,
}

impl SpdFactor {
    /// Factor `a`, checking squareness and symmetry first.
    pub fn new(a: &Matrix) -> Result<Self, NumericsError> {
        check_symmetric(a)?;
        Self::new_unchecked(a)
    }

    /// Factor using only the lower triangle of `a`.
    pub fn new_unchecked(a: &Matrix) -> Result<Self, NumericsError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(NumericsError::DimensionMismatch {
                expected: (n, n),
                found: (a.nrows(), a.ncols()),
            });
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(NumericsError::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solve `L y = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solve `Lᵀ x = y` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve_vec_in_place(&self, b: &mut [f64]) {
        self.forward_in_place(b);
        self.backward_in_place(b);
    }

    pub fn solve(&self, b: &Matrix) -> Result<Matrix, NumericsError> {
        if b.nrows() != self.dim() {
            return Err(NumericsError::DimensionMismatch {
                expected: (self.dim(), b.ncols()),
                found: (b.nrows(), b.ncols()),
            });
        }
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_vec_in_place(col.as_mut_slice());
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::identity(n, n);
        for mut col in inv.column_iter_mut() {
            self.solve_vec_in_place(col.as_mut_slice());
        }
        // symmetrize away round-off
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        inv
    }
}

pub fn check_symmetric(a: &Matrix) -> Result<(), NumericsError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumericsError::DimensionMismatch {
            expected: (n, n),
            found: (a.nrows(), a.ncols()),
        });
    }
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                return Err(NumericsError::NotSymmetric { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Solve `A X = B` for symmetric positive-definite `A`.
pub fn cholesky_solve(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    SpdFactor::new(a)?.solve(b)
}

/// `log |A|` for symmetric positive-definite `A`.
pub fn logdet_spd(a: &Matrix) -> Result<f64, NumericsError> {
    Ok(SpdFactor::new(a)?.logdet())
}
