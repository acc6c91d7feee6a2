//! Declarative model description and its compilation into a block-structured
//! numeric frame.
//!
//! Rows are grouped into independent blocks (levels of the outermost random
//! factor). A fixed-effect column that is nonzero in a single block is stored
//! as a block-local column; everything else is global. Both facts are what
//! make REML evaluations linear in the number of rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dense;
use super::LmmError;
use crate::simgen::IpdDataset;

/// Column access for model building. Factors are numeric columns whose
/// values are integral.
pub trait DataSource {
    fn nrows(&self) -> usize;
    fn column(&self, name: &str) -> Option<Vec<f64>>;
}

impl DataSource for IpdDataset {
    fn nrows(&self) -> usize {
        self.rows.len()
    }

    fn column(&self, name: &str) -> Option<Vec<f64>> {
        let get: fn(&crate::simgen::Observation) -> f64 = match name {
            "trial" => |r| f64::from(r.trial),
            "id" => |r| f64::from(r.id),
            "t" => |r| r.t,
            "a" => |r| f64::from(r.a),
            "z" => |r| f64::from(r.z),
            "y" => |r| r.y,
            "y0" => |r| r.y0,
            _ => return None,
        };
        Some(self.rows.iter().map(get).collect())
    }
}

/// A plain named-column table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataTable {
    nrows: usize,
    columns: BTreeMap<String, Vec<f64>>,
}

impl DataTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_column(mut self, name: &str, values: Vec<f64>) -> Self {
        self.insert(name, values);
        self
    }

    /// Adds or replaces a column. Panics if its length disagrees with the
    /// columns already present.
    pub fn insert(&mut self, name: &str, values: Vec<f64>) {
        if self.columns.is_empty() {
            self.nrows = values.len();
        }
        assert_eq!(values.len(), self.nrows, "column '{name}' has the wrong length");
        self.columns.insert(name.to_string(), values);
    }
}

impl DataSource for DataTable {
    fn nrows(&self) -> usize {
        self.nrows
    }

    fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.columns.get(name).cloned()
    }
}

/// Builder for one or more fixed-effect columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Covariate(String),
    /// Elementwise product of the named columns.
    Product(Vec<String>),
    /// One copy of the product per level of `factor`, zero outside that level.
    /// An empty product gives level indicators.
    ByLevel { factor: String, vars: Vec<String> },
    Indicators { factor: String, drop_first: bool },
}

impl Term {
    pub fn product(vars: &[&str]) -> Self {
        Term::Product(vars.iter().map(|s| s.to_string()).collect())
    }

    pub fn by_level(factor: &str, vars: &[&str]) -> Self {
        Term::ByLevel {
            factor: factor.to_string(),
            vars: vars.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Independent random effects sharing a grouping factor; every column gets
/// its own variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBlock {
    pub factor: String,
    pub intercept: bool,
    pub slopes: Vec<Vec<String>>,
}

impl RandomBlock {
    pub fn intercept(factor: &str) -> Self {
        Self { factor: factor.to_string(), intercept: true, slopes: Vec::new() }
    }

    pub fn slope(factor: &str, vars: &[&str]) -> Self {
        Self {
            factor: factor.to_string(),
            intercept: false,
            slopes: vec![vars.iter().map(|s| s.to_string()).collect()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Residual {
    Common,
    ByGroup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmSpec {
    pub response: String,
    pub fixed: Vec<Term>,
    pub random: Vec<RandomBlock>,
    pub residual: Residual,
}

impl LmmSpec {
    pub fn new(response: &str, fixed: Vec<Term>) -> Self {
        Self {
            response: response.to_string(),
            fixed,
            random: Vec::new(),
            residual: Residual::Common,
        }
    }

    pub fn with_random(mut self, block: RandomBlock) -> Self {
        self.random.push(block);
        self
    }

    pub fn with_residual(mut self, residual: Residual) -> Self {
        self.residual = residual;
        self
    }
}

pub(crate) fn product_name(vars: &[String]) -> String {
    if vars.is_empty() {
        "intercept".to_string()
    } else {
        vars.join("*")
    }
}

fn level_label(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Distinct sorted levels and per-row level index.
fn factor_codes(values: &[f64], name: &str) -> Result<(Vec<f64>, Vec<usize>), LmmError> {
    if values.iter().any(|v| !v.is_finite() || v.fract() != 0.0) {
        return Err(LmmError::InvalidSpec(format!("factor '{name}' must hold integer codes")));
    }
    let mut levels = values.to_vec();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let codes = values
        .iter()
        .map(|v| levels.binary_search_by(|l| l.partial_cmp(v).unwrap()).unwrap())
        .collect();
    Ok((levels, codes))
}

struct Source<'a> {
    data: &'a dyn DataSource,
    cache: BTreeMap<String, Vec<f64>>,
}

impl<'a> Source<'a> {
    fn col(&mut self, name: &str) -> Result<&Vec<f64>, LmmError> {
        if !self.cache.contains_key(name) {
            let v = self
                .data
                .column(name)
                .ok_or_else(|| LmmError::UnknownVariable(name.to_string()))?;
            if v.len() != self.data.nrows() {
                return Err(LmmError::InvalidSpec(format!("column '{name}' has the wrong length")));
            }
            self.cache.insert(name.to_string(), v);
        }
        Ok(&self.cache[name])
    }

    fn product(&mut self, vars: &[String]) -> Result<Vec<f64>, LmmError> {
        let mut out = vec![1.0; self.data.nrows()];
        for v in vars {
            let c = self.col(v)?;
            for (o, x) in out.iter_mut().zip(c) {
                *o *= x;
            }
        }
        Ok(out)
    }
}

/// Fixed-effect columns in spec order, built densely.
fn build_fixed(src: &mut Source<'_>, terms: &[Term]) -> Result<Vec<(String, Vec<f64>)>, LmmError> {
    let mut cols = Vec::new();
    for term in terms {
        match term {
            Term::Intercept => cols.push(("intercept".to_string(), src.product(&[])?)),
            Term::Covariate(v) => {
                let v = vec![v.clone()];
                cols.push((product_name(&v), src.product(&v)?));
            }
            Term::Product(vars) => cols.push((product_name(vars), src.product(vars)?)),
            Term::ByLevel { factor, vars } => {
                let base = src.product(vars)?;
                let (levels, codes) = factor_codes(src.col(factor)?, factor)?;
                for (li, lv) in levels.iter().enumerate() {
                    let name = if vars.is_empty() {
                        format!("{factor}={}", level_label(*lv))
                    } else {
                        format!("{}:{factor}={}", product_name(vars), level_label(*lv))
                    };
                    let col = base
                        .iter()
                        .zip(&codes)
                        .map(|(b, &c)| if c == li { *b } else { 0.0 })
                        .collect();
                    cols.push((name, col));
                }
            }
            Term::Indicators { factor, drop_first } => {
                let (levels, codes) = factor_codes(src.col(factor)?, factor)?;
                let skip = usize::from(*drop_first);
                for (li, lv) in levels.iter().enumerate().skip(skip) {
                    let col = codes.iter().map(|&c| f64::from(u8::from(c == li))).collect();
                    cols.push((format!("{factor}={}", level_label(*lv)), col));
                }
            }
        }
    }
    Ok(cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ColLoc {
    Local { block: usize, pos: usize },
    Global { pos: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct BlockData {
    pub rows: usize,
    /// Fixed-column indices stored locally, in position order.
    pub local_cols: Vec<usize>,
    /// `rows × width` row-major: local columns, global columns, response.
    pub m: Vec<f64>,
    pub width: usize,
    /// Row ranges of the nested clusters (empty without an inner factor).
    pub clusters: Vec<(usize, usize)>,
    /// `rows × qb` block-level random design.
    pub zb: Vec<f64>,
    /// `rows × qc` cluster-level random design.
    pub zc: Vec<f64>,
    pub resid_group: Vec<usize>,
}

/// Numeric, block-ordered model ready for likelihood evaluation.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    pub(crate) n: usize,
    pub(crate) coef_names: Vec<String>,
    pub(crate) col_loc: Vec<ColLoc>,
    pub(crate) global_cols: Vec<usize>,
    pub(crate) blocks: Vec<BlockData>,
    pub(crate) qb: usize,
    pub(crate) qc: usize,
    /// Variance-parameter index of each block-level and cluster-level column.
    pub(crate) block_vc: Vec<usize>,
    pub(crate) cluster_vc: Vec<usize>,
    pub(crate) n_random: usize,
    pub(crate) vc_names: Vec<String>,
    pub(crate) resid_rows: Vec<usize>,
    pub(crate) y_var: f64,
}

impl ModelFrame {
    pub fn build(spec: &LmmSpec, data: &dyn DataSource) -> Result<Self, LmmError> {
        let n = data.nrows();
        let mut src = Source { data, cache: BTreeMap::new() };
        let y = src.col(&spec.response)?.clone();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(LmmError::InvalidSpec("response has non-finite values".into()));
        }
        let fixed = build_fixed(&mut src, &spec.fixed)?;
        let p = fixed.len();
        if p == 0 {
            return Err(LmmError::InvalidSpec("model has no fixed effects".into()));
        }
        if n < p + 1 {
            return Err(LmmError::TooFewRows { rows: n, cols: p });
        }
        for (name, col) in &fixed {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(LmmError::InvalidSpec(format!("column '{name}' has non-finite values")));
            }
        }

        // random factors: at most two, the inner nested in the outer
        let mut factors: Vec<String> = Vec::new();
        for rb in &spec.random {
            if !rb.intercept && rb.slopes.is_empty() {
                return Err(LmmError::InvalidSpec(format!("random block on '{}' has no columns", rb.factor)));
            }
            if !factors.contains(&rb.factor) {
                factors.push(rb.factor.clone());
            }
        }
        let mut codes_of = BTreeMap::new();
        for f in &factors {
            codes_of.insert(f.clone(), factor_codes(src.col(f)?, f)?.1);
        }
        let (outer, inner) = match factors.len() {
            0 => (None, None),
            1 => (Some(factors[0].clone()), None),
            2 => {
                let nested = |fine: &str, coarse: &str| {
                    let (cf, cc) = (&codes_of[fine], &codes_of[coarse]);
                    let mut map = BTreeMap::new();
                    cf.iter().zip(cc).all(|(a, b)| *map.entry(*a).or_insert(*b) == *b)
                };
                if nested(&factors[1], &factors[0]) {
                    (Some(factors[0].clone()), Some(factors[1].clone()))
                } else if nested(&factors[0], &factors[1]) {
                    (Some(factors[1].clone()), Some(factors[0].clone()))
                } else {
                    return Err(LmmError::Unsupported(
                        "random factors must be nested (crossed effects are not supported)".into(),
                    ));
                }
            }
            _ => {
                return Err(LmmError::Unsupported("at most two nested random factors are supported".into()))
            }
        };
        let block_code: Vec<usize> = match &outer {
            Some(f) => codes_of[f].clone(),
            None => vec![0; n],
        };
        let cluster_code: Vec<usize> = match &inner {
            Some(f) => codes_of[f].clone(),
            None => vec![0; n],
        };

        // random design columns and variance names
        let mut vc_names = Vec::new();
        let mut zb_cols: Vec<Vec<f64>> = Vec::new();
        let mut zc_cols: Vec<Vec<f64>> = Vec::new();
        let (mut block_vc, mut cluster_vc) = (Vec::new(), Vec::new());
        for rb in &spec.random {
            let mut cols: Vec<Vec<String>> = Vec::new();
            if rb.intercept {
                cols.push(Vec::new());
            }
            cols.extend(rb.slopes.iter().cloned());
            for vars in cols {
                let name = format!("{}:{}", rb.factor, product_name(&vars));
                if vc_names.contains(&name) {
                    return Err(LmmError::InvalidSpec(format!("duplicate random column '{name}'")));
                }
                let z = src.product(&vars)?;
                let idx = vc_names.len();
                vc_names.push(name);
                if Some(&rb.factor) == outer.as_ref() {
                    zb_cols.push(z);
                    block_vc.push(idx);
                } else {
                    zc_cols.push(z);
                    cluster_vc.push(idx);
                }
            }
        }
        let n_random = vc_names.len();

        // residual groups
        let (resid_code, n_resid) = match &spec.residual {
            Residual::Common => {
                vc_names.push("residual".into());
                (vec![0; n], 1)
            }
            Residual::ByGroup(f) => {
                let (levels, codes) = factor_codes(src.col(f)?, f)?;
                for lv in &levels {
                    vc_names.push(format!("residual:{f}={}", level_label(*lv)));
                }
                (codes, levels.len())
            }
        };
        let mut resid_rows = vec![0usize; n_resid];
        for &g in &resid_code {
            resid_rows[g] += 1;
        }

        // row order: block, then cluster, then original position
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (block_code[i], cluster_code[i], i));
        let n_blocks = block_code.iter().copied().max().map_or(0, |m| m + 1);
        let mut block_start = vec![0usize; n_blocks + 1];
        for &b in &block_code {
            block_start[b + 1] += 1;
        }
        for b in 0..n_blocks {
            block_start[b + 1] += block_start[b];
        }

        // local/global classification
        let mut col_loc = Vec::with_capacity(p);
        let mut global_cols = Vec::new();
        let mut local_of_block: Vec<Vec<usize>> = vec![Vec::new(); n_blocks];
        for (j, (_, col)) in fixed.iter().enumerate() {
            let mut owner: Option<usize> = None;
            let mut multi = false;
            for (i, v) in col.iter().enumerate() {
                if *v != 0.0 {
                    match owner {
                        None => owner = Some(block_code[i]),
                        Some(b) if b != block_code[i] => {
                            multi = true;
                            break;
                        }
                        _ => {}
                    }
                }
            }
            match (owner, multi) {
                (None, _) => return Err(LmmError::RankDeficient { column: fixed[j].0.clone() }),
                (Some(b), false) => {
                    col_loc.push(ColLoc::Local { block: b, pos: local_of_block[b].len() });
                    local_of_block[b].push(j);
                }
                _ => {
                    col_loc.push(ColLoc::Global { pos: global_cols.len() });
                    global_cols.push(j);
                }
            }
        }
        let g = global_cols.len();

        let (qb, qc) = (zb_cols.len(), zc_cols.len());
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let rows_idx = &order[block_start[b]..block_start[b + 1]];
            let nl = local_of_block[b].len();
            let width = nl + g + 1;
            let mut m = Vec::with_capacity(rows_idx.len() * width);
            let mut zb = Vec::with_capacity(rows_idx.len() * qb);
            let mut zc = Vec::with_capacity(rows_idx.len() * qc);
            let mut resid_group = Vec::with_capacity(rows_idx.len());
            for &i in rows_idx {
                m.extend(local_of_block[b].iter().map(|&j| fixed[j].1[i]));
                m.extend(global_cols.iter().map(|&j| fixed[j].1[i]));
                m.push(y[i]);
                zb.extend(zb_cols.iter().map(|c| c[i]));
                zc.extend(zc_cols.iter().map(|c| c[i]));
                resid_group.push(resid_code[i]);
            }
            let mut clusters = Vec::new();
            if inner.is_some() {
                let mut s = 0;
                for r in 1..=rows_idx.len() {
                    if r == rows_idx.len() || cluster_code[rows_idx[r]] != cluster_code[rows_idx[s]] {
                        clusters.push((s, r));
                        s = r;
                    }
                }
            }
            blocks.push(BlockData {
                rows: rows_idx.len(),
                local_cols: local_of_block[b].clone(),
                m,
                width,
                clusters,
                zb,
                zc,
                resid_group,
            });
        }

        let mean = y.iter().sum::<f64>() / n as f64;
        let y_var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);

        let frame = ModelFrame {
            n,
            coef_names: fixed.into_iter().map(|(name, _)| name).collect(),
            col_loc,
            global_cols,
            blocks,
            qb,
            qc,
            block_vc,
            cluster_vc,
            n_random,
            vc_names,
            resid_rows,
            y_var,
        };
        frame.check_rank()?;
        Ok(frame)
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_coef(&self) -> usize {
        self.coef_names.len()
    }

    pub fn coef_names(&self) -> &[String] {
        &self.coef_names
    }

    pub fn varcomp_names(&self) -> &[String] {
        &self.vc_names
    }

    pub fn n_random(&self) -> usize {
        self.n_random
    }

    pub fn response_variance(&self) -> f64 {
        self.y_var
    }

    /// Rows in each residual-variance group.
    pub fn residual_group_sizes(&self) -> &[usize] {
        &self.resid_rows
    }

    /// Cholesky of the unit-norm-scaled `XᵀX` via the same local/global
    /// elimination used for likelihoods; any relative pivot below 1e-8 means
    /// the design is rank deficient.
    fn check_rank(&self) -> Result<(), LmmError> {
        const TOL: f64 = 1e-8;
        let p = self.n_coef();
        let mut norm2 = vec![0.0; p];
        for blk in &self.blocks {
            let nl = blk.local_cols.len();
            for r in 0..blk.rows {
                let row = &blk.m[r * blk.width..(r + 1) * blk.width];
                for (k, &j) in blk.local_cols.iter().enumerate() {
                    norm2[j] += row[k] * row[k];
                }
                for (k, &j) in self.global_cols.iter().enumerate() {
                    norm2[j] += row[nl + k] * row[nl + k];
                }
            }
        }
        let scale: Vec<f64> = norm2.iter().map(|s| 1.0 / s.sqrt()).collect();
        let g = self.global_cols.len();
        let mut s_glob = vec![0.0; g * g];
        for blk in &self.blocks {
            let nl = blk.local_cols.len();
            let w = nl + g;
            let mut sc = Vec::with_capacity(w);
            sc.extend(blk.local_cols.iter().map(|&j| scale[j]));
            sc.extend(self.global_cols.iter().map(|&j| scale[j]));
            let mut xtx = vec![0.0; w * w];
            for r in 0..blk.rows {
                let row = &blk.m[r * blk.width..r * blk.width + w];
                for a in 0..w {
                    let va = row[a] * sc[a];
                    if va != 0.0 {
                        for b in a..w {
                            xtx[a * w + b] += va * row[b] * sc[b];
                        }
                    }
                }
            }
            for a in 0..w {
                for b in 0..a {
                    xtx[a * w + b] = xtx[b * w + a];
                }
            }
            let mut ll: Vec<f64> = (0..nl * nl).map(|i| xtx[(i / nl) * w + i % nl]).collect();
            dense::chol(&mut ll, nl, TOL)
                .map_err(|k| LmmError::RankDeficient { column: self.coef_names[blk.local_cols[k]].clone() })?;
            let mut kmat: Vec<f64> = (0..nl * g).map(|i| xtx[(i / g) * w + nl + i % g]).collect();
            dense::chol_solve(&ll, nl, &mut kmat, g);
            for a in 0..g {
                for b in 0..g {
                    let mut s = xtx[(nl + a) * w + nl + b];
                    for k in 0..nl {
                        s -= xtx[k * w + nl + a] * kmat[k * g + b];
                    }
                    s_glob[a * g + b] += s;
                }
            }
        }
        // pivots are measured against the unit diagonal of the scaled XᵀX
        dense::chol_ref(&mut s_glob, g, TOL, Some(&vec![1.0; g]))
            .map_err(|k| LmmError::RankDeficient { column: self.coef_names[self.global_cols[k]].clone() })?;
        Ok(())
    }
}
