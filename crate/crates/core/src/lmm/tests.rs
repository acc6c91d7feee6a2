use super::*;
use crate::numerics::{Matrix, RngStream, Vector};
use proptest::prelude::*;

fn lcg_table(seed: u64, trials: usize, per_trial: usize, visits: usize) -> DataTable {
    let mut rng = RngStream::new(seed, 0);
    let (mut trial, mut id, mut t, mut a, mut z, mut y) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut next = 1.0;
    for j in 0..trials {
        let slope = rng.normal(0.0, 0.3);
        for _ in 0..per_trial {
            let u = rng.normal(0.0, 1.0);
            let (aa, zz) = (f64::from(rng.uniform() < 0.5), f64::from(rng.uniform() < 0.4));
            for g in 0..visits {
                let tt = g as f64 * 0.5;
                trial.push((j + 1) as f64);
                id.push(next);
                t.push(tt);
                a.push(aa);
                z.push(zz);
                let noise = rng.normal(0.0, (1.0 + j as f64 * 0.5).sqrt());
                y.push(0.3 * aa * zz * tt * (1.0 + slope) - 0.4 * tt + u + noise + j as f64);
            }
            next += 1.0;
        }
    }
    DataTable::new()
        .with_column("trial", trial)
        .with_column("id", id)
        .with_column("t", t)
        .with_column("a", a)
        .with_column("z", z)
        .with_column("y", y)
}

fn dense_columns(data: &DataTable, names: &[&[&str]]) -> Matrix {
    let n = data.nrows();
    let mut x = Matrix::zeros(n, names.len());
    for (j, vars) in names.iter().enumerate() {
        for i in 0..n {
            x[(i, j)] = vars.iter().map(|v| data.column(v).unwrap()[i]).product();
        }
    }
    x
}

/// Direct dense restricted log-likelihood and GLS estimates.
fn dense_reml(x: &Matrix, y: &Vector, v: &Matrix) -> (f64, Vector, Matrix) {
    let n = x.nrows() as f64;
    let p = x.ncols() as f64;
    let vinv = v.clone().try_inverse().unwrap();
    let xtvx = x.transpose() * &vinv * x;
    let cov = xtvx.clone().try_inverse().unwrap();
    let beta = &cov * x.transpose() * &vinv * y;
    let r = y - x * &beta;
    let quad = (r.transpose() * &vinv * &r)[(0, 0)];
    let ld_v = v.clone().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
    let ld_x = xtvx.cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
    let ll = -0.5 * (ld_v + ld_x + quad + (n - p) * (2.0 * std::f64::consts::PI).ln());
    (ll, beta, cov)
}

#[test]
fn ols_exact_line() {
    let x: Vec<f64> = (0..10).map(f64::from).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
    let data = DataTable::new().with_column("x", x).with_column("y", y);
    let fit = fit_ols(&LmmSpec::new("y", vec![Term::Intercept, Term::Covariate("x".into())]), &data).unwrap();
    assert!((fit.beta_hat[0] - 2.0).abs() < 1e-12);
    assert!((fit.beta_hat[1] - 3.0).abs() < 1e-12);
    assert!(fit.varcomps.get("residual").unwrap() < 1e-20);
}

#[test]
fn intercept_only_gives_mean() {
    let y = vec![1.0, 4.0, 2.0, 8.0, 5.0];
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let s2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let data = DataTable::new().with_column("y", y);
    let fit = fit_ols(&LmmSpec::new("y", vec![Term::Intercept]), &data).unwrap();
    assert!((fit.beta_hat[0] - mean).abs() < 1e-12);
    assert!((fit.beta_cov[(0, 0)] - s2 / n).abs() < 1e-12);
}

#[test]
fn ols_matches_normal_equations() {
    let x1 = vec![0.5, 1.0, 2.5, 3.0, 4.5, 6.0];
    let x2 = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let y = vec![1.2, 0.7, 3.9, 4.1, 2.2, 3.5];
    let data = DataTable::new().with_column("x1", x1).with_column("x2", x2).with_column("y", y.clone());
    let spec = LmmSpec::new("y", vec![Term::Intercept, Term::Covariate("x1".into()), Term::Covariate("x2".into())]);
    let fit = fit_ols(&spec, &data).unwrap();
    let x = dense_columns(&data, &[&[], &["x1"], &["x2"]]);
    let yv = Vector::from_vec(y);
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let beta = &xtx_inv * x.transpose() * &yv;
    let r = &yv - &x * &beta;
    let s2 = r.dot(&r) / 3.0;
    for j in 0..3 {
        assert!((fit.beta_hat[j] - beta[j]).abs() < 1e-10);
        for k in 0..3 {
            assert!((fit.beta_cov[(j, k)] - s2 * xtx_inv[(j, k)]).abs() < 1e-10);
        }
    }
    assert!((fit.varcomps.values[0] - s2).abs() < 1e-10);
}

#[test]
fn ols_errors() {
    let data = DataTable::new()
        .with_column("x", vec![1.0, 2.0, 3.0, 4.0])
        .with_column("x2", vec![2.0, 4.0, 6.0, 8.0])
        .with_column("y", vec![1.0, 0.0, 2.0, 1.0]);
    let spec = LmmSpec::new("y", vec![Term::Intercept, Term::Covariate("x".into()), Term::Covariate("x2".into())]);
    assert!(matches!(fit_ols(&spec, &data), Err(LmmError::RankDeficient { .. })));
    let few = DataTable::new().with_column("x", vec![1.0, 2.0]).with_column("y", vec![1.0, 0.0]);
    let spec = LmmSpec::new("y", vec![Term::Intercept, Term::Covariate("x".into())]);
    assert!(matches!(fit_ols(&spec, &few), Err(LmmError::TooFewRows { .. })));
    let spec = LmmSpec::new("y", vec![Term::Covariate("nope".into())]);
    assert!(matches!(fit_ols(&spec, &few), Err(LmmError::UnknownVariable(_))));
}

#[test]
fn fixed_effects_loglik_matches_direct_formula() {
    let data = lcg_table(3, 2, 15, 1);
    let spec = LmmSpec::new("y", vec![Term::Intercept, Term::Covariate("a".into()), Term::product(&["a", "z"])]);
    let fit = fit_ols(&spec, &data).unwrap();
    let s2 = fit.varcomps.values[0];
    let x = dense_columns(&data, &[&[], &["a"], &["a", "z"]]);
    let y = Vector::from_vec(data.column("y").unwrap());
    let v = Matrix::identity(x.nrows(), x.nrows()) * s2;
    let (ll, _, _) = dense_reml(&x, &y, &v);
    let got = reml_loglik(&spec, &data, &VarComps::from_pairs(&[("residual", s2)])).unwrap();
    assert!((got - ll).abs() < 1e-9 * ll.abs(), "{got} vs {ll}");
    assert!((fit.reml_loglik - ll).abs() < 1e-9 * ll.abs());
}

/// Nested trial/participant model with per-trial fixed columns and
/// trial-specific residual variances, checked against dense linear algebra.
#[test]
fn block_engine_matches_dense_oracle() {
    let data = lcg_table(11, 3, 6, 3);
    let spec = LmmSpec::new(
        "y",
        vec![
            Term::product(&["a", "z", "t"]),
            Term::by_level("trial", &["t"]),
            Term::by_level("trial", &["a"]),
            Term::by_level("trial", &[]),
        ],
    )
    .with_random(RandomBlock::slope("trial", &["a", "z", "t"]))
    .with_random(RandomBlock::intercept("id"))
    .with_residual(Residual::ByGroup("trial".into()));
    let frame = ModelFrame::build(&spec, &data).unwrap();
    assert_eq!(
        frame.varcomp_names(),
        ["trial:a*z*t", "id:intercept", "residual:trial=1", "residual:trial=2", "residual:trial=3"]
    );
    let theta = [0.07, 0.8, 0.9, 1.4, 2.1];

    let n = data.nrows();
    let trial = data.column("trial").unwrap();
    let id = data.column("id").unwrap();
    let azt = dense_columns(&data, &[&["a", "z", "t"]]);
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            if trial[i] == trial[k] {
                v[(i, k)] += theta[0] * azt[(i, 0)] * azt[(k, 0)];
            }
            if id[i] == id[k] {
                v[(i, k)] += theta[1];
            }
        }
        v[(i, i)] += theta[1 + trial[i] as usize];
    }
    let mut x = Matrix::zeros(n, 10);
    for i in 0..n {
        x[(i, 0)] = azt[(i, 0)];
        let j = trial[i] as usize - 1;
        x[(i, 1 + j)] = data.column("t").unwrap()[i];
        x[(i, 4 + j)] = data.column("a").unwrap()[i];
        x[(i, 7 + j)] = 1.0;
    }
    let y = Vector::from_vec(data.column("y").unwrap());
    let (ll, beta, cov) = dense_reml(&x, &y, &v);

    let ev = frame.evaluate(&theta, true).unwrap();
    assert!((ev.loglik - ll).abs() < 1e-9 * ll.abs(), "{} vs {ll}", ev.loglik);
    let (b, c) = ev.beta.unwrap();
    for i in 0..10 {
        assert!((b[i] - beta[i]).abs() < 1e-8, "beta[{i}] {} vs {}", b[i], beta[i]);
        for k in 0..10 {
            assert!((c[(i, k)] - cov[(i, k)]).abs() < 1e-8, "cov[{i},{k}]");
        }
    }
}

fn balanced_groups(seed: u64, groups: usize, m: usize, tau: f64) -> DataTable {
    let mut rng = RngStream::new(seed, 1);
    let (mut g, mut y) = (Vec::new(), Vec::new());
    for i in 0..groups {
        let u = rng.normal(0.0, tau);
        for _ in 0..m {
            g.push(i as f64);
            y.push(5.0 + u + rng.normal(0.0, 1.0));
        }
    }
    DataTable::new().with_column("g", g).with_column("y", y)
}

struct Anova {
    ssb: f64,
    ssw: f64,
    groups: f64,
    m: f64,
}

impl Anova {
    fn new(data: &DataTable, groups: usize, m: usize) -> Self {
        let y = data.column("y").unwrap();
        let grand = y.iter().sum::<f64>() / y.len() as f64;
        let (mut ssb, mut ssw) = (0.0, 0.0);
        for i in 0..groups {
            let gy = &y[i * m..(i + 1) * m];
            let mean = gy.iter().sum::<f64>() / m as f64;
            ssb += m as f64 * (mean - grand).powi(2);
            ssw += gy.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        Anova { ssb, ssw, groups: groups as f64, m: m as f64 }
    }

    fn estimates(&self) -> (f64, f64) {
        let msw = self.ssw / (self.groups * (self.m - 1.0));
        let msb = self.ssb / (self.groups - 1.0);
        (((msb - msw) / self.m).max(0.0), msw)
    }

    /// Closed-form restricted log-likelihood of the balanced one-way layout.
    fn loglik(&self, tau2: f64, s2: f64) -> f64 {
        let (a, m) = (self.groups, self.m);
        let lam = s2 + m * tau2;
        let n = a * m;
        -0.5 * (a * (m - 1.0) * s2.ln() + a * lam.ln() + (a * m / lam).ln() + self.ssw / s2 + self.ssb / lam
            + (n - 1.0) * (2.0 * std::f64::consts::PI).ln())
    }
}

fn one_way_spec() -> LmmSpec {
    LmmSpec::new("y", vec![Term::Intercept]).with_random(RandomBlock::intercept("g"))
}

#[test]
fn balanced_anova_closed_form() {
    let data = balanced_groups(5, 20, 10, 0.8);
    let an = Anova::new(&data, 20, 10);
    let (tau2, s2) = an.estimates();
    assert!(tau2 > 0.0);
    let fit = fit_reml(&one_way_spec(), &data, 40).unwrap();
    assert!(fit.converged);
    assert!((fit.varcomps.values[0] - tau2).abs() < 1e-6, "{} vs {tau2}", fit.varcomps.values[0]);
    assert!((fit.varcomps.values[1] - s2).abs() < 1e-6);
    let ll = an.loglik(tau2, s2);
    assert!((fit.reml_loglik - ll).abs() < 1e-9 * ll.abs());
}

#[test]
fn loglik_grid_peaks_at_anova_estimate() {
    let data = balanced_groups(8, 12, 6, 0.5);
    let an = Anova::new(&data, 12, 6);
    let (tau2, s2) = an.estimates();
    let spec = one_way_spec();
    let frame = ModelFrame::build(&spec, &data).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..=400 {
        let t = k as f64 * 0.005;
        let l = frame.reml_loglik(&[t, s2]).unwrap();
        assert!((l - an.loglik(t, s2)).abs() < 1e-9 * l.abs());
        if l > best.0 {
            best = (l, t);
        }
    }
    assert!((best.1 - tau2).abs() <= 0.0025 + 1e-12, "grid {} vs {tau2}", best.1);
}

#[test]
fn zero_heterogeneity_hits_boundary() {
    // sd of the ANOVA estimate is about sqrt(2/400)/2000 = 3.5e-5
    let data = balanced_groups(21, 400, 2000, 0.0);
    let an = Anova::new(&data, 400, 2000);
    let fit = fit_reml(&one_way_spec(), &data, 40).unwrap();
    assert!(fit.varcomps.values[0] <= 1e-4, "{}", fit.varcomps.values[0]);
    assert!((fit.varcomps.values[0] - an.estimates().0).abs() < 1e-6);
    if an.estimates().0 == 0.0 {
        assert_eq!(fit.varcomps.values[0], 0.0);
        assert_eq!(wald_ci_logvariance(&fit, "g:intercept", 0.95).unwrap(), None);
    }
}

#[test]
fn wald_interval_formula() {
    let (lo, hi) = log_wald_interval(0.05, Some(0.5), 0.95).unwrap();
    assert!((lo - 0.05 * (-0.979_982_f64).exp()).abs() < 1e-7);
    assert!((hi - 0.05 * 0.979_982_f64.exp()).abs() < 1e-6);
    assert_eq!(log_wald_interval(0.0, Some(0.5), 0.95), None);
    assert_eq!(log_wald_interval(0.05, None, 0.95), None);
}

#[test]
fn wald_interval_matches_finite_difference_information() {
    let data = balanced_groups(13, 20, 10, 0.8);
    let an = Anova::new(&data, 20, 10);
    let (tau2, s2) = an.estimates();
    let fit = fit_reml(&one_way_spec(), &data, 40).unwrap();
    let ci = wald_ci_logvariance(&fit, "g:intercept", 0.95).unwrap().unwrap();
    // information of the closed form in log space, step 1e-3
    let f = |a: f64, b: f64| an.loglik(a.exp(), b.exp());
    let (x, y, h) = (tau2.ln(), s2.ln(), 1e-3);
    let hxx = (f(x + h, y) - 2.0 * f(x, y) + f(x - h, y)) / (h * h);
    let hyy = (f(x, y + h) - 2.0 * f(x, y) + f(x, y - h)) / (h * h);
    let hxy = (f(x + h, y + h) - f(x + h, y - h) - f(x - h, y + h) + f(x - h, y - h)) / (4.0 * h * h);
    let det = hxx * hyy - hxy * hxy;
    let se = (-hyy / det).sqrt();
    let z = 1.959_963_984_540_054;
    let (lo, hi) = (tau2 * (-z * se).exp(), tau2 * (z * se).exp());
    assert!((ci.0 / lo - 1.0).abs() < 0.01, "{} vs {lo}", ci.0);
    assert!((ci.1 / hi - 1.0).abs() < 0.01, "{} vs {hi}", ci.1);
    assert!(matches!(wald_ci_logvariance(&fit, "nope", 0.95), Err(LmmError::UnknownComponent(_))));
}

#[test]
fn reml_without_random_effects_is_ols() {
    let data = lcg_table(17, 2, 20, 1);
    let spec = LmmSpec::new("y", vec![Term::Intercept, Term::Covariate("a".into()), Term::Covariate("z".into())]);
    let ols = fit_ols(&spec, &data).unwrap();
    let reml = fit_reml(&spec, &data, 40).unwrap();
    for (a, b) in ols.beta_hat.iter().zip(&reml.beta_hat) {
        assert!((a - b).abs() < 1e-9);
    }
    let x = dense_columns(&data, &[&[], &["a"], &["z"]]);
    let y = Vector::from_vec(data.column("y").unwrap());
    let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
    let r = &y - &x * beta;
    let s2 = r.dot(&r) / (x.nrows() - 3) as f64;
    assert!((reml.varcomps.values[0] - s2).abs() < 1e-12 * s2);
}

#[test]
fn by_group_residuals_separate() {
    // two groups with their own intercept and slope: the joint fit factorizes
    let data = lcg_table(23, 2, 25, 1);
    let joint = LmmSpec::new("y", vec![Term::by_level("trial", &[]), Term::by_level("trial", &["a"])])
        .with_residual(Residual::ByGroup("trial".into()));
    let fit = fit_reml(&joint, &data, 40).unwrap();
    assert!(fit.converged);
    let trial = data.column("trial").unwrap();
    for level in [1.0, 2.0] {
        let keep: Vec<usize> = (0..data.nrows()).filter(|&i| trial[i] == level).collect();
        let mut sub = DataTable::new();
        for name in ["a", "y"] {
            let c = data.column(name).unwrap();
            sub.insert(name, keep.iter().map(|&i| c[i]).collect());
        }
        let alone = fit_ols(&LmmSpec::new("y", vec![Term::Intercept, Term::Covariate("a".into())]), &sub).unwrap();
        let v = fit.varcomps.get(&format!("residual:trial={level}")).unwrap();
        // REML with separate groups uses n_j - p_j degrees of freedom per group
        assert!((v - alone.varcomps.values[0]).abs() < 1e-6, "{v} vs {}", alone.varcomps.values[0]);
    }
}

#[test]
fn gradient_vanishes_at_interior_optimum() {
    let data = lcg_table(29, 4, 15, 5);
    let spec = LmmSpec::new(
        "y",
        vec![Term::Intercept, Term::Covariate("t".into()), Term::product(&["a", "z", "t"]), Term::Covariate("a".into())],
    )
    .with_random(RandomBlock::intercept("id"));
    let fit = fit_reml(&spec, &data, 40).unwrap();
    let frame = ModelFrame::build(&spec, &data).unwrap();
    let theta = fit.varcomps.values.clone();
    let h: f64 = 1e-5;
    for k in 0..theta.len() {
        if theta[k] == 0.0 {
            continue;
        }
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[k] *= h.exp();
        dn[k] *= (-h).exp();
        let g = (frame.reml_loglik(&up).unwrap() - frame.reml_loglik(&dn).unwrap()) / (2.0 * h);
        assert!(g.abs() < 1e-4, "component {k}: gradient {g}");
    }
}

#[test]
fn three_way_term_is_consistent() {
    use crate::simgen::{generate_dataset, ScenarioConfig};
    let cfg = ScenarioConfig::new(2, 400, 0.0);
    let spec = LmmSpec::new(
        "y",
        vec![
            Term::Intercept,
            Term::product(&["a", "z", "t"]),
            Term::product(&["a", "z"]),
            Term::product(&["a", "t"]),
            Term::product(&["z", "t"]),
            Term::Covariate("a".into()),
            Term::Covariate("z".into()),
            Term::Covariate("t".into()),
        ],
    )
    .with_random(RandomBlock::intercept("id"));
    let reps = 20;
    let mut zsum = 0.0;
    for rep in 0..reps {
        let ds = generate_dataset(&cfg, &mut RngStream::for_replicate(4, 900, rep)).unwrap().trial(1);
        let fit = fit_reml(&spec, &ds, 40).unwrap();
        let (b, se) = (fit.coef("a*z*t").unwrap(), fit.coef_se("a*z*t").unwrap());
        assert!(((b - 0.12) / se).abs() < 4.5);
        zsum += (b - 0.12) / se;
    }
    assert!((zsum / (reps as f64).sqrt()).abs() < 3.0);
}

#[test]
fn rank_deficient_by_level_block() {
    // an indicator per trial plus an intercept is collinear
    let data = lcg_table(2, 3, 5, 1);
    let spec = LmmSpec::new("y", vec![Term::Intercept, Term::by_level("trial", &[])])
        .with_random(RandomBlock::slope("trial", &["a"]));
    assert!(matches!(ModelFrame::build(&spec, &data), Err(LmmError::RankDeficient { .. })));
}

#[test]
fn crossed_factors_are_unsupported() {
    let data = DataTable::new()
        .with_column("f", vec![1.0, 1.0, 2.0, 2.0, 1.0, 2.0])
        .with_column("g", vec![1.0, 2.0, 1.0, 2.0, 2.0, 1.0])
        .with_column("y", vec![1.0, 2.0, 3.0, 1.0, 2.0, 0.5]);
    let spec = LmmSpec::new("y", vec![Term::Intercept])
        .with_random(RandomBlock::intercept("f"))
        .with_random(RandomBlock::intercept("g"));
    assert!(matches!(ModelFrame::build(&spec, &data), Err(LmmError::Unsupported(_))));
}

fn permuted_fit(order: &[usize]) -> (Vec<String>, Vec<f64>, f64) {
    let data = lcg_table(31, 3, 12, 1);
    let terms = [
        Term::product(&["a", "z"]),
        Term::by_level("trial", &["a"]),
        Term::by_level("trial", &["z"]),
        Term::by_level("trial", &[]),
    ];
    let spec = LmmSpec::new("y", order.iter().map(|&i| terms[i].clone()).collect())
        .with_random(RandomBlock::slope("trial", &["a", "z"]))
        .with_residual(Residual::ByGroup("trial".into()));
    let fit = fit_reml(&spec, &data, 40).unwrap();
    (fit.coef_names, fit.beta_hat, fit.reml_loglik)
}

#[test]
fn column_order_does_not_matter() {
    let (n0, b0, l0) = permuted_fit(&[0, 1, 2, 3]);
    let (n1, b1, l1) = permuted_fit(&[3, 2, 0, 1]);
    assert!((l0 - l1).abs() < 1e-9 * l0.abs().max(1.0), "{l0} vs {l1}");
    for (name, b) in n0.iter().zip(&b0) {
        let j = n1.iter().position(|x| x == name).unwrap();
        assert!((b - b1[j]).abs() < 1e-6, "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gls_estimate_is_scale_equivariant(c in 0.01f64..100.0, seed in 0u64..1000) {
        let data = lcg_table(seed, 3, 5, 2);
        let spec = LmmSpec::new("y", vec![Term::Intercept, Term::Covariate("t".into()), Term::Covariate("a".into())])
            .with_random(RandomBlock::intercept("id"))
            .with_residual(Residual::ByGroup("trial".into()));
        let theta = [0.6, 1.0, 1.5, 0.7];
        let frame = ModelFrame::build(&spec, &data).unwrap();
        let (b, _) = frame.evaluate(&theta, true).unwrap().beta.unwrap();
        let mut scaled = data.clone();
        scaled.insert("y", data.column("y").unwrap().iter().map(|v| v * c.sqrt()).collect());
        let frame_s = ModelFrame::build(&spec, &scaled).unwrap();
        let theta_s: Vec<f64> = theta.iter().map(|v| v * c).collect();
        let (bs, _) = frame_s.evaluate(&theta_s, true).unwrap().beta.unwrap();
        for (x, y) in b.iter().zip(&bs) {
            prop_assert!((x * c.sqrt() - y).abs() < 1e-8 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn fitted_variances_are_non_negative_and_cov_is_psd(seed in 0u64..500) {
        let data = lcg_table(seed, 3, 8, 1);
        let spec = LmmSpec::new("y", vec![Term::product(&["a", "z"]), Term::by_level("trial", &["a"]), Term::by_level("trial", &[])])
            .with_random(RandomBlock::slope("trial", &["a", "z"]));
        let fit = match fit_reml_with(&spec, &data, FitOptions { max_iter: 40, information: false }) {
            Err(LmmError::RankDeficient { .. }) => return Ok(()),
            other => other.unwrap(),
        };
        prop_assert!(fit.varcomps.values.iter().all(|v| *v >= 0.0));
        let eig = fit.beta_cov.clone().symmetric_eigen();
        let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(eig.eigenvalues.iter().all(|v| *v >= -1e-10 * scale));
        for i in 0..fit.beta_cov.nrows() {
            for j in 0..i {
                prop_assert!((fit.beta_cov[(i, j)] - fit.beta_cov[(j, i)]).abs() < 1e-12);
            }
        }
    }
}
