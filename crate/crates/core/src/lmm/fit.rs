//! Maximizing the restricted likelihood over log-variances.

use super::frame::ModelFrame;
use super::LmmError;
use crate::numerics::minimize_scalar_bounded;

const GRAD_STEP: f64 = 1e-5;
const CURV_STEP: f64 = 1e-3;
const HESS_STEP: f64 = 2e-4;
const GRAD_TOL: f64 = 1e-6;
const REL_CHANGE_TOL: f64 = 1e-8;
/// Relative rounding error assumed for the objective; a central difference
/// cannot resolve gradients below `NOISE_REL·|f|/GRAD_STEP`.
const NOISE_REL: f64 = 1e-13;
/// Random variances at or below `exp(-SNAP_LOG) × var(y)` are set to zero.
const SNAP_LOG: f64 = 20.0;
const LOWER_LOG: f64 = 23.0;
const UPPER_LOG: f64 = 8.0;
const MAX_STEP: f64 = 8.0;

pub(crate) struct OptResult {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Standard error of each log-variance; `None` at the boundary or when
    /// the observed information is not positive definite.
    pub log_se: Vec<Option<f64>>,
}

/// Objective over the free coordinates, with the rest held fixed.
struct Problem<'a> {
    frame: &'a ModelFrame,
    base: Vec<f64>,
    free: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Problem<'_> {
    fn theta(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.base.clone();
        for (k, &i) in self.free.iter().enumerate() {
            t[i] = x[k].exp();
        }
        t
    }

    /// Negative restricted log-likelihood; infeasible points are +∞.
    fn f(&mut self, x: &[f64]) -> f64 {
        match self.frame.reml_loglik(&self.theta(x)) {
            Ok(l) => -l,
            Err(_) => f64::INFINITY,
        }
    }

    fn clamp(&self, x: &mut [f64]) {
        for k in 0..x.len() {
            x[k] = x[k].clamp(self.lo[k], self.hi[k]);
        }
    }

    fn grad(&mut self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xt = x.to_vec();
        for k in 0..x.len() {
            let up = (x[k] + GRAD_STEP).min(self.hi[k]);
            let dn = (x[k] - GRAD_STEP).max(self.lo[k]);
            xt[k] = up;
            let fu = self.f(&xt);
            xt[k] = dn;
            let fd = self.f(&xt);
            xt[k] = x[k];
            g[k] = (fu - fd) / (up - dn);
        }
        g
    }

    fn projected(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                if (x[k] <= self.lo[k] && g[k] > 0.0) || (x[k] >= self.hi[k] && g[k] < 0.0) {
                    0.0
                } else {
                    g[k]
                }
            })
            .collect()
    }

    fn initial_inverse_hessian(&mut self, x: &[f64], f0: f64) -> Vec<f64> {
        let n = x.len();
        let mut h = vec![0.0; n * n];
        let mut xt = x.to_vec();
        for k in 0..n {
            xt[k] = x[k] + CURV_STEP;
            let fu = self.f(&xt);
            xt[k] = x[k] - CURV_STEP;
            let fd = self.f(&xt);
            xt[k] = x[k];
            let c = (fu - 2.0 * f0 + fd) / (CURV_STEP * CURV_STEP);
            h[k * n + k] = if c.is_finite() && c > 1e-6 { 1.0 / c } else { 1.0 };
        }
        h
    }

    /// Projected BFGS with Armijo backtracking and a coordinate-wise bounded
    /// search when the quasi-Newton step fails.
    fn minimize(&mut self, x0: Vec<f64>, max_iter: usize) -> (Vec<f64>, f64, bool, usize) {
        let n = x0.len();
        let mut x = x0;
        self.clamp(&mut x);
        let mut fx = self.f(&x);
        if n == 0 {
            return (x, fx, true, 0);
        }
        let mut g = self.grad(&x);
        let mut hinv = self.initial_inverse_hessian(&x, fx);
        let h0 = hinv.clone();
        let mut iterations = 0;
        let mut converged = false;
        let loose = |f: f64| GRAD_TOL.max(NOISE_REL * f.abs() / GRAD_STEP);

        while iterations < max_iter {
            let pg = self.projected(&x, &g);
            let pg_max = pg.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if pg_max < GRAD_TOL {
                converged = true;
                break;
            }
            iterations += 1;
            // coordinates pinned at an active bound stay fixed this step
            let active: Vec<bool> = (0..n).map(|k| pg[k] == 0.0).collect();
            let mut d = vec![0.0; n];
            for i in 0..n {
                if !active[i] {
                    d[i] = -(0..n).filter(|&j| !active[j]).map(|j| hinv[i * n + j] * g[j]).sum::<f64>();
                }
            }
            let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                hinv.copy_from_slice(&h0);
                for i in 0..n {
                    d[i] = if active[i] { 0.0 } else { -h0[i * n + i] * g[i] };
                }
            }
            let dmax = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if dmax > MAX_STEP {
                d.iter_mut().for_each(|v| *v *= MAX_STEP / dmax);
            }

            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                self.clamp(&mut xn);
                let fnew = self.f(&xn);
                let decrease: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gk, (a, b))| gk * (a - b)).sum();
                if fnew.is_finite() && fnew < fx && fnew <= fx + 1e-4 * decrease.min(0.0) {
                    accepted = Some((xn, fnew));
                    break;
                }
                alpha *= 0.5;
            }
            let (xn, fnew) = match accepted {
                Some(v) => v,
                None => match self.coordinate_search(&x, fx) {
                    Some(v) => {
                        hinv.copy_from_slice(&h0);
                        v
                    }
                    None => {
                        // neither the quasi-Newton step nor any single
                        // coordinate improves the objective beyond rounding:
                        // stationary to working precision
                        converged = true;
                        break;
                    }
                },
            };

            let gn = self.grad(&xn);
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
            if sy > 1e-12 {
                bfgs_update(&mut hinv, &s, &yv, sy);
            }
            let rel = (fx - fnew).abs() / fx.abs().max(1.0);
            x = xn;
            fx = fnew;
            g = gn;
            let pgn = self.projected(&x, &g);
            let pgn_max = pgn.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if pgn_max < GRAD_TOL || (rel < REL_CHANGE_TOL && pgn_max < loose(fx)) {
                converged = true;
                break;
            }
        }
        (x, fx, converged, iterations)
    }

    fn coordinate_search(&mut self, x: &[f64], fx: f64) -> Option<(Vec<f64>, f64)> {
        let mut best = x.to_vec();
        let mut fbest = fx;
        for k in 0..x.len() {
            let lo = (best[k] - MAX_STEP).max(self.lo[k]);
            let hi = (best[k] + MAX_STEP).min(self.hi[k]);
            if !(lo < hi) {
                continue;
            }
            let mut xt = best.clone();
            let r = minimize_scalar_bounded(
                |v| {
                    xt[k] = v;
                    let fv = self.f(&xt);
                    if fv.is_finite() { fv } else { 1e300 }
                },
                lo,
                hi,
                1e-6,
            );
            if let Ok(r) = r {
                if r.min < fbest {
                    best[k] = r.argmin;
                    fbest = r.min;
                }
            }
        }
        (fbest < fx - 1e-12 * fx.abs().max(1.0)).then_some((best, fbest))
    }

    /// Central-difference Hessian of the objective.
    fn hessian(&mut self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let h = HESS_STEP;
        let f0 = self.f(x);
        let mut out = vec![0.0; n * n];
        let mut xt = x.to_vec();
        for i in 0..n {
            xt[i] = x[i] + h;
            let fp = self.f(&xt);
            xt[i] = x[i] - h;
            let fm = self.f(&xt);
            xt[i] = x[i];
            out[i * n + i] = (fp - 2.0 * f0 + fm) / (h * h);
            for j in 0..i {
                let mut eval = |si: f64, sj: f64, xt: &mut Vec<f64>| {
                    xt[i] = x[i] + si * h;
                    xt[j] = x[j] + sj * h;
                    let v = self.f(xt);
                    xt[i] = x[i];
                    xt[j] = x[j];
                    v
                };
                let v = (eval(1.0, 1.0, &mut xt) - eval(1.0, -1.0, &mut xt) - eval(-1.0, 1.0, &mut xt)
                    + eval(-1.0, -1.0, &mut xt))
                    / (4.0 * h * h);
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        out
    }
}

fn bfgs_update(hinv: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| hinv[i * n + j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            hinv[i * n + j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

pub(crate) fn optimize(
    frame: &ModelFrame,
    start: &[f64],
    max_iter: usize,
    with_hessian: bool,
) -> Result<OptResult, LmmError> {
    let nv = frame.vc_names.len();
    let scale = frame.y_var.max(1e-12);
    let ls = scale.ln();
    let snap = (-SNAP_LOG).exp() * scale;
    let mut theta = start.to_vec();
    let mut snapped = vec![false; nv];
    let mut iterations = 0;
    let mut converged;

    // optimize the free set, move boundary variances to zero, repeat
    loop {
        let free: Vec<usize> = (0..nv).filter(|&i| !snapped[i]).collect();
        let mut prob = Problem {
            frame,
            base: theta.clone(),
            lo: vec![ls - LOWER_LOG; free.len()],
            hi: vec![ls + UPPER_LOG; free.len()],
            free,
        };
        let x0: Vec<f64> = prob.free.iter().map(|&i| theta[i].max(snap * 10.0).ln()).collect();
        let (x, fx, conv, it) = prob.minimize(x0, max_iter);
        iterations += it;
        converged = conv;
        let loglik = -fx;
        theta = prob.theta(&x);

        let mut newly = false;
        for i in 0..frame.n_random {
            if snapped[i] {
                continue;
            }
            let mut t0 = theta.clone();
            t0[i] = 0.0;
            let at_zero = frame.reml_loglik(&t0).unwrap_or(f64::NEG_INFINITY);
            if theta[i] <= snap || at_zero >= loglik {
                snapped[i] = true;
                theta[i] = 0.0;
                newly = true;
            }
        }
        if !newly {
            break;
        }
    }
    frame.reml_loglik(&theta)?;

    let mut log_se = vec![None; nv];
    if with_hessian {
        let free: Vec<usize> = (0..nv).filter(|&i| theta[i] > 1e-10).collect();
        let x: Vec<f64> = free.iter().map(|&i| theta[i].ln()).collect();
        let mut prob = Problem {
            frame,
            base: theta.clone(),
            lo: vec![f64::NEG_INFINITY; free.len()],
            hi: vec![f64::INFINITY; free.len()],
            free: free.clone(),
        };
        let h = prob.hessian(&x);
        // h is the Hessian of −ℓ, i.e. the observed information
        let info = crate::numerics::Matrix::from_row_slice(free.len(), free.len(), &h);
        if info.iter().all(|v| v.is_finite()) {
            if let Ok(f) = crate::numerics::SpdFactor::new_unchecked(&info) {
                let cov = f.inverse();
                for (k, &i) in free.iter().enumerate() {
                    let v = cov[(k, k)];
                    if v.is_finite() && v > 0.0 {
                        log_se[i] = Some(v.sqrt());
                    }
                }
            }
        }
    }

    Ok(OptResult { theta, converged, iterations, log_se })
}
