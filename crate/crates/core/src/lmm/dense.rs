//! Small row-major dense kernels for the per-block hot loops. These avoid
//! allocating nalgebra matrices for every cluster of every evaluation.

/// In-place lower Cholesky of the row-major `n×n` matrix `a` (only the lower
/// triangle is read; the upper triangle is zeroed). A pivot at or below
/// `rel_tol` times its original diagonal entry is reported as `Err(index)`.
pub(crate) fn chol(a: &mut [f64], n: usize, rel_tol: f64) -> Result<f64, usize> {
    chol_ref(a, n, rel_tol, None)
}

/// As [`chol`], but pivots are compared against `reference` instead of the
/// incoming diagonal.
pub(crate) fn chol_ref(a: &mut [f64], n: usize, rel_tol: f64, reference: Option<&[f64]>) -> Result<f64, usize> {
    debug_assert!(a.len() >= n * n);
    let mut logdet = 0.0;
    for j in 0..n {
        let orig = reference.map_or(a[j * n + j], |r| r[j]);
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > rel_tol * orig.abs()) || !d.is_finite() || d <= 0.0 {
            return Err(j);
        }
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        logdet += 2.0 * ljj.ln();
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
        for k in (j + 1)..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(logdet)
}

/// Solve `L y = b` in place for each of the `ncols` columns of the row-major
/// `n×ncols` right-hand side.
pub(crate) fn forward(l: &[f64], n: usize, b: &mut [f64], ncols: usize) {
    for i in 0..n {
        for k in 0..i {
            let lik = l[i * n + k];
            if lik != 0.0 {
                for c in 0..ncols {
                    b[i * ncols + c] -= lik * b[k * ncols + c];
                }
            }
        }
        let inv = 1.0 / l[i * n + i];
        for c in 0..ncols {
            b[i * ncols + c] *= inv;
        }
    }
}

/// Solve `Lᵀ x = b` in place (same layout as [`forward`]).
pub(crate) fn backward(l: &[f64], n: usize, b: &mut [f64], ncols: usize) {
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[k * n + i];
            if lki != 0.0 {
                for c in 0..ncols {
                    b[i * ncols + c] -= lki * b[k * ncols + c];
                }
            }
        }
        let inv = 1.0 / l[i * n + i];
        for c in 0..ncols {
            b[i * ncols + c] *= inv;
        }
    }
}

/// Solve `(L Lᵀ) X = B` in place.
pub(crate) fn chol_solve(l: &[f64], n: usize, b: &mut [f64], ncols: usize) {
    forward(l, n, b, ncols);
    backward(l, n, b, ncols);
}

/// Inverse of `L Lᵀ` as a row-major `n×n` matrix.
pub(crate) fn chol_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    chol_solve(l, n, &mut inv, n);
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}
