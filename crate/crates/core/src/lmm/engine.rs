//! Restricted log-likelihood by block elimination.
//!
//! Within a block `V = R + Z Λ² Zᵀ` with `R` diagonal. Woodbury turns every
//! product with `V⁻¹` into products with `R⁻¹` and the small matrix
//! `C = I + Λ Zᵀ R⁻¹ Z Λ`, which is block-arrowhead (one small block per
//! cluster bordered by the block-level effects) and is eliminated cluster by
//! cluster. Block-local fixed columns are then eliminated per block, leaving a
//! small global system.

use super::dense;
use super::frame::{ColLoc, ModelFrame};
use super::LmmError;
use crate::numerics::Matrix;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

struct BlockElim {
    nl: usize,
    /// Cholesky of the local-local part of `MᵀV⁻¹M`.
    l: Vec<f64>,
    /// `W_LL⁻¹ [W_LG | W_Ly]`, `nl × (g+1)`.
    k: Vec<f64>,
}

pub(crate) struct Evaluation {
    pub loglik: f64,
    pub beta: Option<(Vec<f64>, Matrix)>,
}

/// Symmetric `W -= Aᵀ B` for `q × w` row-major `a`, `b`.
fn sub_at_b(w_mat: &mut [f64], w: usize, a: &[f64], b: &[f64], q: usize) {
    for k in 0..q {
        let ak = &a[k * w..(k + 1) * w];
        let bk = &b[k * w..(k + 1) * w];
        for i in 0..w {
            let aki = ak[i];
            if aki != 0.0 {
                let row = &mut w_mat[i * w..(i + 1) * w];
                for (r, bkj) in row.iter_mut().zip(bk) {
                    *r -= aki * bkj;
                }
            }
        }
    }
}

impl ModelFrame {
    /// Restricted log-likelihood at the variance vector `theta` (random
    /// variances first, then residual variances, as in `varcomp_names`).
    pub fn reml_loglik(&self, theta: &[f64]) -> Result<f64, LmmError> {
        Ok(self.evaluate(theta, false)?.loglik)
    }

    pub(crate) fn evaluate(&self, theta: &[f64], want_beta: bool) -> Result<Evaluation, LmmError> {
        if theta.len() != self.vc_names.len() {
            return Err(LmmError::InvalidVarComps(format!(
                "expected {} variance components, got {}",
                self.vc_names.len(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LmmError::InvalidVarComps("variances must be finite and non-negative".into()));
        }
        let resid = &theta[self.n_random..];
        if resid.iter().any(|&v| v <= 0.0) {
            return Err(LmmError::NotPositiveDefinite);
        }
        let g = self.global_cols.len();
        let gw = g + 1;
        let (qb, qc) = (self.qb, self.qc);
        let lam_b: Vec<f64> = self.block_vc.iter().map(|&i| theta[i].sqrt()).collect();
        let lam_c: Vec<f64> = self.cluster_vc.iter().map(|&i| theta[i].sqrt()).collect();

        let mut logdet_v = 0.0;
        let mut logdet_loc = 0.0;
        let mut s_glob = vec![0.0; gw * gw];
        let mut elims = Vec::new();
        let mut rinv = Vec::new();
        let (mut ac, mut uc, mut bc) = (vec![0.0; qc * qc], Vec::new(), vec![0.0; qc * qb]);
        let mut aib = vec![0.0; qc * qb];

        for blk in &self.blocks {
            let w = blk.width;
            let nl = blk.local_cols.len();
            let mut wm = vec![0.0; w * w];
            rinv.clear();
            for r in 0..blk.rows {
                let v = resid[blk.resid_group[r]];
                logdet_v += v.ln();
                let ri = 1.0 / v;
                rinv.push(ri);
                let row = &blk.m[r * w..(r + 1) * w];
                for a in 0..w {
                    let va = ri * row[a];
                    if va != 0.0 {
                        let out = &mut wm[a * w..(a + 1) * w];
                        for b in a..w {
                            out[b] += va * row[b];
                        }
                    }
                }
            }
            for a in 0..w {
                for b in 0..a {
                    wm[a * w + b] = wm[b * w + a];
                }
            }

            if qb + qc > 0 {
                let mut ub = vec![0.0; qb * w];
                let mut d = vec![0.0; qb * qb];
                for k in 0..qb {
                    d[k * qb + k] = 1.0;
                }
                for r in 0..blk.rows {
                    let row = &blk.m[r * w..(r + 1) * w];
                    let zr = &blk.zb[r * qb..(r + 1) * qb];
                    for k in 0..qb {
                        let t = lam_b[k] * zr[k] * rinv[r];
                        if t != 0.0 {
                            for (u, x) in ub[k * w..(k + 1) * w].iter_mut().zip(row) {
                                *u += t * x;
                            }
                            for l in 0..qb {
                                d[k * qb + l] += t * lam_b[l] * zr[l];
                            }
                        }
                    }
                }
                uc.resize(qc * w, 0.0);
                for &(s, e) in &blk.clusters {
                    ac.iter_mut().for_each(|x| *x = 0.0);
                    uc.iter_mut().for_each(|x| *x = 0.0);
                    bc.iter_mut().for_each(|x| *x = 0.0);
                    for k in 0..qc {
                        ac[k * qc + k] = 1.0;
                    }
                    for r in s..e {
                        let row = &blk.m[r * w..(r + 1) * w];
                        let zr = &blk.zc[r * qc..(r + 1) * qc];
                        let zbr = &blk.zb[r * qb..(r + 1) * qb];
                        for k in 0..qc {
                            let t = lam_c[k] * zr[k] * rinv[r];
                            if t != 0.0 {
                                for (u, x) in uc[k * w..(k + 1) * w].iter_mut().zip(row) {
                                    *u += t * x;
                                }
                                for l in 0..qc {
                                    ac[k * qc + l] += t * lam_c[l] * zr[l];
                                }
                                for l in 0..qb {
                                    bc[k * qb + l] += t * lam_b[l] * zbr[l];
                                }
                            }
                        }
                    }
                    logdet_v += dense::chol(&mut ac, qc, 0.0).map_err(|_| LmmError::NotPositiveDefinite)?;
                    let mut aiu = uc.clone();
                    dense::chol_solve(&ac, qc, &mut aiu, w);
                    sub_at_b(&mut wm, w, &uc, &aiu, qc);
                    if qb > 0 {
                        aib.copy_from_slice(&bc);
                        dense::chol_solve(&ac, qc, &mut aib, qb);
                        // ub -= Bcᵀ A⁻¹ Uc ; d -= Bcᵀ A⁻¹ Bc
                        for k in 0..qc {
                            for l in 0..qb {
                                let bkl = bc[k * qb + l];
                                if bkl != 0.0 {
                                    for (u, x) in ub[l * w..(l + 1) * w].iter_mut().zip(&aiu[k * w..(k + 1) * w]) {
                                        *u -= bkl * x;
                                    }
                                    for m in 0..qb {
                                        d[l * qb + m] -= bkl * aib[k * qb + m];
                                    }
                                }
                            }
                        }
                    }
                }
                if qb > 0 {
                    logdet_v += dense::chol(&mut d, qb, 0.0).map_err(|_| LmmError::NotPositiveDefinite)?;
                    let mut diu = ub.clone();
                    dense::chol_solve(&d, qb, &mut diu, w);
                    sub_at_b(&mut wm, w, &ub, &diu, qb);
                }
            }

            // eliminate the block-local fixed columns
            let mut l: Vec<f64> = (0..nl * nl).map(|i| wm[(i / nl) * w + i % nl]).collect();
            logdet_loc += dense::chol(&mut l, nl, 0.0).map_err(|_| LmmError::NotPositiveDefinite)?;
            let mut k: Vec<f64> = (0..nl * gw).map(|i| wm[(i / gw) * w + nl + i % gw]).collect();
            dense::chol_solve(&l, nl, &mut k, gw);
            for a in 0..gw {
                for b in 0..gw {
                    let mut s = wm[(nl + a) * w + nl + b];
                    for c in 0..nl {
                        s -= wm[c * w + nl + a] * k[c * gw + b];
                    }
                    s_glob[a * gw + b] += s;
                }
            }
            if want_beta {
                elims.push(BlockElim { nl, l, k });
            }
        }

        let mut lg: Vec<f64> = (0..g * g).map(|i| s_glob[(i / g) * gw + i % g]).collect();
        let logdet_g = dense::chol(&mut lg, g, 0.0).map_err(|_| LmmError::NotPositiveDefinite)?;
        let mut sy: Vec<f64> = (0..g).map(|a| s_glob[a * gw + g]).collect();
        dense::forward(&lg, g, &mut sy, 1);
        let ypy = (s_glob[g * gw + g] - sy.iter().map(|v| v * v).sum::<f64>()).max(0.0);

        let p = self.coef_names.len();
        let loglik =
            -0.5 * (logdet_v + logdet_loc + logdet_g + ypy + (self.n as f64 - p as f64) * LN_2PI);
        if !loglik.is_finite() {
            return Err(LmmError::NotPositiveDefinite);
        }

        let beta = if want_beta {
            let mut beta_g = sy;
            dense::backward(&lg, g, &mut beta_g, 1);
            let cov_g = dense::chol_inverse(&lg, g);
            Some(self.assemble_beta(&elims, &beta_g, &cov_g, g))
        } else {
            None
        };
        Ok(Evaluation { loglik, beta })
    }

    fn assemble_beta(&self, elims: &[BlockElim], beta_g: &[f64], cov_g: &[f64], g: usize) -> (Vec<f64>, Matrix) {
        let gw = g + 1;
        let p = self.coef_names.len();
        // per block: local estimates, W_LL⁻¹, and K_G = W_LL⁻¹ W_LG
        let mut beta_l = Vec::with_capacity(elims.len());
        let mut winv = Vec::with_capacity(elims.len());
        let mut kg = Vec::with_capacity(elims.len());
        for e in elims {
            let nl = e.nl;
            let mut bl = vec![0.0; nl];
            let mut kgb = vec![0.0; nl * g];
            for c in 0..nl {
                let mut s = e.k[c * gw + g];
                for a in 0..g {
                    let kca = e.k[c * gw + a];
                    s -= kca * beta_g[a];
                    kgb[c * g + a] = kca;
                }
                bl[c] = s;
            }
            beta_l.push(bl);
            winv.push(dense::chol_inverse(&e.l, nl));
            kg.push(kgb);
        }
        // K_b Σ_GG for each block
        let kcov: Vec<Vec<f64>> = kg
            .iter()
            .zip(elims)
            .map(|(k, e)| {
                let mut out = vec![0.0; e.nl * g];
                for c in 0..e.nl {
                    for b in 0..g {
                        out[c * g + b] = (0..g).map(|a| k[c * g + a] * cov_g[a * g + b]).sum();
                    }
                }
                out
            })
            .collect();

        let mut beta = vec![0.0; p];
        let mut cov = Matrix::zeros(p, p);
        for (i, loc) in self.col_loc.iter().enumerate() {
            beta[i] = match *loc {
                ColLoc::Global { pos } => beta_g[pos],
                ColLoc::Local { block, pos } => beta_l[block][pos],
            };
        }
        for i in 0..p {
            for j in 0..=i {
                let v = match (self.col_loc[i], self.col_loc[j]) {
                    (ColLoc::Global { pos: a }, ColLoc::Global { pos: b }) => cov_g[a * g + b],
                    (ColLoc::Local { block, pos }, ColLoc::Global { pos: b })
                    | (ColLoc::Global { pos: b }, ColLoc::Local { block, pos }) => -kcov[block][pos * g + b],
                    (ColLoc::Local { block: bi, pos: pi }, ColLoc::Local { block: bj, pos: pj }) => {
                        let cross: f64 = (0..g).map(|a| kcov[bi][pi * g + a] * kg[bj][pj * g + a]).sum();
                        if bi == bj {
                            winv[bi][pi * elims[bi].nl + pj] + cross
                        } else {
                            cross
                        }
                    }
                };
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        (beta, cov)
    }
}
