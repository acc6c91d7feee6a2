//! Scalar minimization and root bracketing.

use super::NumericsError;

const GOLDEN: f64 = 0.381_966_011_250_105_1; // (3 - sqrt 5) / 2

/// Result of a bounded scalar minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMin {
    pub argmin: f64,
    pub min: f64,
}

fn eval(f: &mut impl FnMut(f64) -> f64, x: f64) -> Result<f64, NumericsError> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumericsError::NonFinite { at: x })
    }
}

/// Brent's bounded minimizer (golden section with parabolic steps).
///
/// The endpoints are evaluated too, so a monotone function returns the
/// boundary at which it is smallest.
pub fn minimize_scalar_bounded(
    mut f: impl FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<ScalarMin, NumericsError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(NumericsError::InvalidBracket { lo, hi });
    }
    let tol = tol.max(1e-15);
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = eval(&mut f, x)?;
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0_f64, 0.0_f64);

    for _ in 0..500 {
        let m = 0.5 * (a + b);
        let tol1 = 1e-10 * x.abs() + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= m { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = eval(&mut f, u)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }

    let mut best = ScalarMin { argmin: x, min: fx };
    for edge in [lo, hi] {
        let fe = eval(&mut f, edge)?;
        if fe < best.min {
            best = ScalarMin { argmin: edge, min: fe };
        }
    }
    Ok(best)
}

/// Bisection for a sign change of `f` on `[lo, hi]`.
pub fn find_root_bisect(
    mut f: impl FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64, NumericsError> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(NumericsError::InvalidBracket { lo, hi });
    }
    let (mut a, mut b) = (lo, hi);
    let mut fa = eval(&mut f, a)?;
    let fb = eval(&mut f, b)?;
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(NumericsError::NoSignChange { lo, hi });
    }
    let tol = tol.max(0.0);
    while b - a > tol {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = eval(&mut f, m)?;
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}
