//! Poisson pseudo-maximum-likelihood with high-dimensional fixed effects.
//!
//! The estimator runs iteratively reweighted least squares. Each weighted
//! least-squares step partials the fixed effects out of the working response
//! and the covariates by weighted alternating projections, solves the small
//! covariate system, and recovers the per-level fixed-effect values from the
//! projection coefficients. A final block coordinate-ascent pass over the
//! fixed effects makes every level's first-order condition hold to rounding.
//!
//! Identification: every dimension after the first has its reference level
//! pinned to zero, the shift being absorbed by the first dimension.

mod demean;
mod leverage;
mod linalg;
mod summary;

use std::collections::BTreeMap;
use std::fmt::Display;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use demean::{Dim, FeStructure};
pub use summary::{significance_stars, write_summary, SummaryRow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpmlError {
    #[error("invalid estimation input: {0}")]
    InvalidInput(String),
    #[error("no observations left after dropping separated fixed-effect levels")]
    NoObservations,
    #[error("covariate `{column}` is collinear with the fixed effects or other covariates")]
    Collinear { column: String },
    #[error("PPML did not converge in {iterations} iterations (score max-norm {gradient:.3e})")]
    NonConvergence { iterations: usize, gradient: f64 },
    #[error("clustered standard errors need at least 2 clusters, found {0}")]
    TooFewClusters(usize),
}

/// Categorical fixed-effect dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeSpec {
    pub name: String,
    pub labels: Vec<String>,
    /// Level of each observation, indexing `labels`.
    pub index: Vec<u32>,
    /// Level pinned to zero for identification.
    pub reference: Option<u32>,
}

impl FeSpec {
    pub fn new(name: impl Into<String>, labels: Vec<String>, index: Vec<u32>) -> Self {
        FeSpec {
            name: name.into(),
            labels,
            index,
            reference: None,
        }
    }

    /// Builds a dimension from per-observation keys. Levels are the sorted
    /// distinct keys, returned alongside the spec.
    pub fn from_keys<K: Ord + Clone + Display>(
        name: impl Into<String>,
        keys: &[K],
    ) -> (Self, Vec<K>) {
        let mut levels: BTreeMap<K, u32> = keys.iter().map(|k| (k.clone(), 0)).collect();
        for (i, v) in levels.values_mut().enumerate() {
            *v = i as u32;
        }
        let index = keys.iter().map(|k| levels[k]).collect();
        let ordered: Vec<K> = levels.into_keys().collect();
        let labels = ordered.iter().map(ToString::to_string).collect();
        (FeSpec::new(name, labels, index), ordered)
    }

    pub fn with_reference(mut self, level: Option<u32>) -> Self {
        self.reference = level;
        self
    }

    pub fn n_levels(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub values: Vec<f64>,
}

impl Covariate {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Covariate {
            name: name.into(),
            values,
        }
    }
}

/// Everything one PPML fit consumes.
#[derive(Debug, Clone, Default)]
pub struct PpmlData {
    pub y: Vec<f64>,
    pub covariates: Vec<Covariate>,
    pub fixed_effects: Vec<FeSpec>,
    /// Additive term on the log scale with coefficient fixed at one.
    pub offset: Option<Vec<f64>>,
    /// Prior weights multiplying each observation's pseudo-likelihood.
    pub weights: Option<Vec<f64>>,
    /// Cluster id per observation; `None` gives heteroskedasticity-robust errors.
    pub cluster: Option<Vec<u32>>,
}

/// Small-sample form of the cluster-robust variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterVariance {
    /// Raw score outer products scaled by `G / (G - 1)`.
    Cr1,
    /// Scores from leverage-adjusted residuals `(I - H_gg)^+ e_g`, scaled by
    /// `(G - 1) / G`: the one-step delete-one-cluster jackknife. The cluster
    /// blocks `H_gg` of the hat matrix include the fixed effects, so the
    /// residual shrinkage caused by many estimated levels is undone.
    #[default]
    Cr3,
}

impl std::str::FromStr for ClusterVariance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cr1" => Ok(ClusterVariance::Cr1),
            "cr3" => Ok(ClusterVariance::Cr3),
            _ => Err(format!("unknown variance `{s}`, expected cr1 or cr3")),
        }
    }
}

impl Display for ClusterVariance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClusterVariance::Cr1 => "cr1",
            ClusterVariance::Cr3 => "cr3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpmlConfig {
    pub max_iter: usize,
    /// Stop when `|dev - dev_old| / (|dev| + 0.1 * mean(y))` falls below this.
    pub tol_deviance: f64,
    /// Stop when the scaled score max-norm falls below this.
    pub tol_gradient: f64,
    /// Relative coefficient change ending the alternating projections.
    pub demean_tol: f64,
    pub max_sweeps: usize,
    pub variance: ClusterVariance,
}

impl Default for PpmlConfig {
    fn default() -> Self {
        PpmlConfig {
            max_iter: 100,
            tol_deviance: 1e-9,
            tol_gradient: 1e-8,
            demean_tol: 1e-10,
            max_sweeps: 100_000,
            variance: ClusterVariance::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeValues {
    pub name: String,
    pub labels: Vec<String>,
    /// `None` for levels dropped by separation.
    pub values: Vec<Option<f64>>,
}

impl FeValues {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .and_then(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatedLevel {
    pub fe: String,
    pub label: String,
    pub n_obs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SeKind {
    Clustered { n_clusters: usize },
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_obs: usize,
    pub iterations: usize,
    pub deviance: f64,
    pub null_deviance: f64,
    /// Squared Pearson correlation of `y` and fitted values.
    pub squared_corr: f64,
    /// `1 - deviance / null_deviance`, the null model being a constant mean.
    pub pseudo_r2: f64,
    pub log_likelihood: f64,
    /// `-2 ll + k ln n` with `k` = covariates + retained fixed-effect levels.
    pub bic: f64,
    pub n_params: usize,
    /// Largest scaled first-order-condition residual at the solution.
    pub max_foc: f64,
}

/// Result of a PPML fit.
#[derive(Debug, Clone)]
pub struct PpmlFit {
    pub coef_names: Vec<String>,
    pub beta: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub se_kind: SeKind,
    pub fe: Vec<FeValues>,
    /// Fitted mean per input observation; zero for separated observations.
    pub fitted: Vec<f64>,
    pub kept: Vec<bool>,
    pub separated: Vec<SeparatedLevel>,
    pub diagnostics: FitDiagnostics,
    pub variance: ClusterVariance,
    // Score ingredients on retained observations, for sandwich errors.
    design: Vec<Vec<f64>>,
    score_resid: Vec<f64>,
    bread: Vec<Vec<f64>>,
    /// Final IRLS weights `prior * mu`.
    irls_weights: Vec<f64>,
    fes: FeStructure,
}

impl PpmlFit {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.coef_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.beta[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.coef_names
            .iter()
            .position(|n| n == name)
            .and_then(|i| self.std_errors.get(i).copied())
    }

    pub fn fe_dim(&self, name: &str) -> Option<&FeValues> {
        self.fe.iter().find(|f| f.name == name)
    }

    /// Cluster-robust sandwich errors with cluster-level score aggregation,
    /// in the small-sample form chosen by [`PpmlFit::variance`]. `cluster`
    /// has one id per input observation.
    pub fn cluster_se(&self, cluster: &[u32]) -> Result<Vec<f64>, PpmlError> {
        if cluster.len() != self.kept.len() {
            return Err(PpmlError::InvalidInput(format!(
                "cluster has {} entries, expected {}",
                cluster.len(),
                self.kept.len()
            )));
        }
        let ids: Vec<u32> = cluster
            .iter()
            .zip(&self.kept)
            .filter(|(_, &k)| k)
            .map(|(&c, _)| c)
            .collect();
        Ok(self.sandwich(&ids)?.0)
    }

    /// Heteroskedasticity-robust errors: every observation its own cluster.
    pub fn robust_se(&self) -> Vec<f64> {
        let ids: Vec<u32> = (0..self.score_resid.len() as u32).collect();
        match self.sandwich(&ids) {
            Ok((se, _)) => se,
            Err(_) => vec![f64::NAN; self.beta.len()],
        }
    }

    fn sandwich(&self, ids: &[u32]) -> Result<(Vec<f64>, usize), PpmlError> {
        let k = self.beta.len();
        // Sort cluster ids so score accumulation order does not depend on
        // observation order.
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| (ids[i], i));
        let mut groups: Vec<&[usize]> = Vec::new();
        let mut pos = 0;
        while pos < order.len() {
            let id = ids[order[pos]];
            let start = pos;
            while pos < order.len() && ids[order[pos]] == id {
                pos += 1;
            }
            groups.push(&order[start..pos]);
        }
        let g = groups.len();
        if g < 2 {
            return Err(PpmlError::TooFewClusters(g));
        }
        let fe_hat = match self.variance {
            ClusterVariance::Cr1 => None,
            ClusterVariance::Cr3 => Some(leverage::FeLeverage::new(&self.fes, &self.irls_weights)),
        };
        let mut meat = vec![vec![0.0; k]; k];
        for obs in &groups {
            let s: Vec<f64> = match &fe_hat {
                None => (0..k)
                    .map(|c| obs.iter().map(|&i| self.design[c][i] * self.score_resid[i]).sum())
                    .collect(),
                Some(lev) => self.adjusted_score(lev, obs),
            };
            for a in 0..k {
                for b in 0..k {
                    meat[a][b] += s[a] * s[b];
                }
            }
        }
        let gf = g as f64;
        let adj = match self.variance {
            ClusterVariance::Cr1 => gf / (gf - 1.0),
            ClusterVariance::Cr3 => (gf - 1.0) / gf,
        };
        let se = (0..k)
            .map(|a| {
                let mut v = 0.0;
                for p in 0..k {
                    for q in 0..k {
                        v += self.bread[a][p] * meat[p][q] * self.bread[q][a];
                    }
                }
                (adj * v).sqrt()
            })
            .collect();
        Ok((se, g))
    }

    /// Cluster score `X*_g' (I - H_gg)^+ e*_g` in the standardized metric
    /// `X* = W^1/2 X`, `e* = W^-1/2 p (y - mu)`.
    fn adjusted_score(&self, lev: &leverage::FeLeverage, obs: &[usize]) -> Vec<f64> {
        let k = self.beta.len();
        let t = obs.len();
        let root: Vec<f64> = obs.iter().map(|&i| self.irls_weights[i].sqrt()).collect();
        let xs = nalgebra::DMatrix::from_fn(t, k, |r, c| root[r] * self.design[c][obs[r]]);
        let bread = nalgebra::DMatrix::from_fn(k, k, |a, b| self.bread[a][b]);
        let h = lev.block(obs) + &xs * bread * xs.transpose();
        let resid = nalgebra::DVector::from_fn(t, |r, _| self.score_resid[obs[r]] / root[r]);
        let keep = nalgebra::DMatrix::<f64>::identity(t, t) - h;
        let adjusted = leverage::psd_pinv(keep) * resid;
        (xs.transpose() * adjusted).iter().copied().collect()
    }

    /// Largest scaled first-order-condition residual of this fit on `data`:
    /// per covariate `|sum x (y - mu)| / sum |x| mu`, per level
    /// `|sum_g (y - mu)| / sum_g mu` (prior weights applied).
    pub fn max_foc_violation(&self, data: &PpmlData) -> f64 {
        let idx: Vec<usize> = (0..self.kept.len()).filter(|&i| self.kept[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| data.y[i]).collect();
        let mu: Vec<f64> = idx.iter().map(|&i| self.fitted[i]).collect();
        let p: Vec<f64> = idx
            .iter()
            .map(|&i| data.weights.as_ref().map_or(1.0, |w| w[i]))
            .collect();
        let xs: Vec<Vec<f64>> = data
            .covariates
            .iter()
            .map(|c| idx.iter().map(|&i| c.values[i]).collect())
            .collect();
        let dims: Vec<Vec<u32>> = data
            .fixed_effects
            .iter()
            .map(|f| idx.iter().map(|&i| f.index[i]).collect())
            .collect();
        let levels: Vec<usize> = data.fixed_effects.iter().map(FeSpec::n_levels).collect();
        score_norm(&y, &mu, &p, &xs, &dims, &levels)
    }
}

fn score_norm(
    y: &[f64],
    mu: &[f64],
    p: &[f64],
    xs: &[Vec<f64>],
    dims: &[Vec<u32>],
    levels: &[usize],
) -> f64 {
    let mut worst = 0.0f64;
    for x in xs {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..y.len() {
            num += p[i] * x[i] * (y[i] - mu[i]);
            den += p[i] * x[i].abs() * mu[i];
        }
        if den > 0.0 {
            worst = worst.max(num.abs() / den);
        }
    }
    for (dim, &n) in dims.iter().zip(levels) {
        let mut num = vec![0.0; n];
        let mut den = vec![0.0; n];
        for i in 0..y.len() {
            let g = dim[i] as usize;
            num[g] += p[i] * (y[i] - mu[i]);
            den[g] += p[i] * mu[i];
        }
        for g in 0..n {
            if den[g] > 0.0 {
                worst = worst.max(num[g].abs() / den[g]);
            }
        }
    }
    worst
}

fn deviance(y: &[f64], mu: &[f64], p: &[f64]) -> f64 {
    let mut d = 0.0;
    for i in 0..y.len() {
        let t = if y[i] > 0.0 { y[i] * (y[i] / mu[i]).ln() } else { 0.0 };
        d += p[i] * (t - (y[i] - mu[i]));
    }
    2.0 * d
}

fn validate(data: &PpmlData) -> Result<usize, PpmlError> {
    let n = data.y.len();
    let bad = |m: String| Err(PpmlError::InvalidInput(m));
    if n == 0 {
        return bad("no observations".into());
    }
    if let Some(i) = data.y.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return bad(format!("response {} at observation {i} is not a finite nonnegative value", data.y[i]));
    }
    for c in &data.covariates {
        if c.values.len() != n {
            return bad(format!("covariate `{}` has {} values, expected {n}", c.name, c.values.len()));
        }
        if c.values.iter().any(|v| !v.is_finite()) {
            return bad(format!("covariate `{}` has non-finite values", c.name));
        }
    }
    for f in &data.fixed_effects {
        if f.index.len() != n {
            return bad(format!("fixed effect `{}` has {} entries, expected {n}", f.name, f.index.len()));
        }
        if f.index.iter().any(|&g| g as usize >= f.labels.len()) {
            return bad(format!("fixed effect `{}` references an unknown level", f.name));
        }
    }
    if let Some(o) = &data.offset {
        if o.len() != n || o.iter().any(|v| !v.is_finite()) {
            return bad("offset must have one finite value per observation".into());
        }
    }
    if let Some(w) = &data.weights {
        if w.len() != n || w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("weights must be positive and finite, one per observation".into());
        }
    }
    if let Some(c) = &data.cluster {
        if c.len() != n {
            return bad("cluster must have one id per observation".into());
        }
    }
    Ok(n)
}

/// Iteratively drops observations in fixed-effect levels whose responses
/// are all zero.
fn separation(data: &PpmlData) -> (Vec<bool>, Vec<SeparatedLevel>) {
    let n = data.y.len();
    let mut kept = vec![true; n];
    let mut separated = Vec::new();
    loop {
        let mut changed = false;
        for f in &data.fixed_effects {
            let mut sum = vec![0.0; f.n_levels()];
            let mut count = vec![0usize; f.n_levels()];
            for i in (0..n).filter(|&i| kept[i]) {
                sum[f.index[i] as usize] += data.y[i];
                count[f.index[i] as usize] += 1;
            }
            for g in 0..f.n_levels() {
                if count[g] > 0 && sum[g] == 0.0 {
                    for i in 0..n {
                        if f.index[i] as usize == g {
                            kept[i] = false;
                        }
                    }
                    warn!(
                        "dropping {} observations of {} level {}: all responses are zero",
                        count[g], f.name, f.labels[g]
                    );
                    separated.push(SeparatedLevel {
                        fe: f.name.clone(),
                        label: f.labels[g].clone(),
                        n_obs: count[g],
                    });
                    changed = true;
                }
            }
        }
        if !changed {
            return (kept, separated);
        }
    }
}

/// Fits `E[y] = exp(offset + X beta + sum of fixed effects)` by PPML.
pub fn fit_ppml(data: &PpmlData, cfg: &PpmlConfig) -> Result<PpmlFit, PpmlError> {
    let n_all = validate(data)?;
    let (kept, separated) = separation(data);
    let idx: Vec<usize> = (0..n_all).filter(|&i| kept[i]).collect();
    let n = idx.len();
    if n == 0 {
        return Err(PpmlError::NoObservations);
    }

    let y: Vec<f64> = idx.iter().map(|&i| data.y[i]).collect();
    let prior: Vec<f64> = idx
        .iter()
        .map(|&i| data.weights.as_ref().map_or(1.0, |w| w[i]))
        .collect();
    let offset: Vec<f64> = idx
        .iter()
        .map(|&i| data.offset.as_ref().map_or(0.0, |o| o[i]))
        .collect();
    let xs: Vec<Vec<f64>> = data
        .covariates
        .iter()
        .map(|c| idx.iter().map(|&i| c.values[i]).collect())
        .collect();
    let k = xs.len();

    // Compact level numbering over retained observations.
    let mut level_maps: Vec<Vec<Option<u32>>> = Vec::new();
    let mut dims = Vec::new();
    for f in &data.fixed_effects {
        // Retained levels are renumbered in label order.
        let mut present = vec![false; f.n_levels()];
        for &i in &idx {
            present[f.index[i] as usize] = true;
        }
        let mut next = 0u32;
        let map: Vec<Option<u32>> = present
            .iter()
            .map(|&p| {
                p.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        let index = idx
            .iter()
            .map(|&i| map[f.index[i] as usize].expect("retained level"))
            .collect();
        dims.push(Dim {
            index,
            n_levels: next as usize,
        });
        level_maps.push(map);
    }
    let fes = FeStructure { dims, n_obs: n };
    let dim_index: Vec<Vec<u32>> = fes.dims.iter().map(|d| d.index.clone()).collect();
    let dim_levels: Vec<usize> = fes.dims.iter().map(|d| d.n_levels).collect();

    let ysum: f64 = y.iter().zip(&prior).map(|(a, b)| a * b).sum();
    let psum: f64 = prior.iter().sum();
    let ybar = ysum / psum;

    // Start from mu = (y + ybar) / 2 and take the first IRLS step from it.
    let mut mu: Vec<f64> = y.iter().map(|v| 0.5 * (v + ybar)).collect();
    let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let mut beta = vec![0.0; k];
    let mut fe_coef = fes.zero_coefs();
    let mut alpha_z = fes.zero_coefs();
    let mut alpha_x: Vec<Vec<Vec<f64>>> = (0..k).map(|_| fes.zero_coefs()).collect();
    let mut dev_old = f64::INFINITY;
    let mut have_params = false;
    let mut iterations = 0;
    let mut gradient = f64::INFINITY;
    let mut converged = false;

    while iterations < cfg.max_iter {
        iterations += 1;
        let w: Vec<f64> = mu.iter().zip(&prior).map(|(m, p)| m * p).collect();
        let lw = fes.level_weights(&w);
        let z: Vec<f64> = (0..n)
            .map(|i| eta[i] - offset[i] + (y[i] - mu[i]) / mu[i])
            .collect();
        let (z_t, _) = fes.backfit(&z, &w, &lw, &mut alpha_z, cfg.demean_tol, cfg.max_sweeps);
        let mut x_t = Vec::with_capacity(k);
        for (c, x) in xs.iter().enumerate() {
            let (xt, _) = fes.backfit(x, &w, &lw, &mut alpha_x[c], cfg.demean_tol, cfg.max_sweeps);
            if iterations == 1 {
                let raw: f64 = x.iter().zip(&w).map(|(a, b)| b * a * a).sum();
                let res: f64 = xt.iter().zip(&w).map(|(a, b)| b * a * a).sum();
                let absorbed = if fes.dims.is_empty() { raw == 0.0 } else { !(res > 1e-9 * raw) };
                if absorbed {
                    return Err(PpmlError::Collinear {
                        column: data.covariates[c].name.clone(),
                    });
                }
            }
            x_t.push(xt);
        }
        let new_beta = if k > 0 {
            let (xtx, xtz) = normal_equations(&x_t, &z_t, &w);
            let l = linalg::cholesky(&xtx, 1e-10).map_err(|c| PpmlError::Collinear {
                column: data.covariates[c].name.clone(),
            })?;
            linalg::chol_solve(&l, &xtz)
        } else {
            Vec::new()
        };
        let mut new_fe = alpha_z.clone();
        for (c, b) in new_beta.iter().enumerate() {
            for (d, lv) in new_fe.iter_mut().enumerate() {
                for (g, v) in lv.iter_mut().enumerate() {
                    *v -= b * alpha_x[c][d][g];
                }
            }
        }

        // Step halving guards against deviance increases far from the optimum.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let (b, f) = if have_params && step < 1.0 {
                (
                    blend(&beta, &new_beta, step),
                    fe_coef
                        .iter()
                        .zip(&new_fe)
                        .map(|(a, c)| blend(a, c, step))
                        .collect(),
                )
            } else {
                (new_beta.clone(), new_fe.clone())
            };
            let e = linear_predictor(&offset, &xs, &b, &fes, &f);
            let m: Vec<f64> = e.iter().map(|v| v.exp()).collect();
            let dev = deviance(&y, &m, &prior);
            if dev.is_finite()
                && m.iter().all(|v| *v > 0.0 && v.is_finite())
                && (!have_params || dev <= dev_old + 1e-10 * (dev_old + 0.1 * ybar))
            {
                accepted = Some((b, f, e, m, dev));
                break;
            }
            if !have_params {
                break;
            }
            step *= 0.5;
        }
        let Some((b, f, e, m, dev)) = accepted else {
            return Err(PpmlError::NonConvergence {
                iterations,
                gradient,
            });
        };
        beta = b;
        fe_coef = f;
        eta = e;
        mu = m;
        have_params = true;
        gradient = score_norm(&y, &mu, &prior, &xs, &dim_index, &dim_levels);
        let dev_change = (dev - dev_old).abs() / (dev.abs() + 0.1 * ybar);
        dev_old = dev;
        if gradient <= cfg.tol_gradient || dev_change <= cfg.tol_deviance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PpmlError::NonConvergence {
            iterations,
            gradient,
        });
    }

    polish_fixed_effects(&fes, &y, &prior, &mut fe_coef, &mut mu, &mut eta);
    normalize(&fes, data, &level_maps, &mut fe_coef);
    eta = linear_predictor(&offset, &xs, &beta, &fes, &fe_coef);
    mu = eta.iter().map(|v| v.exp()).collect();
    let max_foc = score_norm(&y, &mu, &prior, &xs, &dim_index, &dim_levels);

    // Sandwich ingredients at the final weights.
    let w: Vec<f64> = mu.iter().zip(&prior).map(|(m, p)| m * p).collect();
    let lw = fes.level_weights(&w);
    let design: Vec<Vec<f64>> = xs
        .iter()
        .zip(alpha_x.iter_mut())
        .map(|(x, a)| fes.backfit(x, &w, &lw, a, cfg.demean_tol, cfg.max_sweeps).0)
        .collect();
    let bread = if k > 0 {
        let (xtx, _) = normal_equations(&design, &vec![0.0; n], &w);
        let l = linalg::cholesky(&xtx, 1e-12).map_err(|c| PpmlError::Collinear {
            column: data.covariates[c].name.clone(),
        })?;
        linalg::chol_inverse(&l)
    } else {
        Vec::new()
    };
    let score_resid: Vec<f64> = (0..n).map(|i| prior[i] * (y[i] - mu[i])).collect();

    let dev = deviance(&y, &mu, &prior);
    let null_mu = vec![ybar; n];
    let null_dev = deviance(&y, &null_mu, &prior);
    let log_likelihood: f64 = (0..n)
        .map(|i| prior[i] * (y[i] * mu[i].ln() - mu[i] - ln_gamma(y[i] + 1.0)))
        .sum();
    let n_params = k + dim_levels.iter().sum::<usize>();
    let diagnostics = FitDiagnostics {
        n_obs: n,
        iterations,
        deviance: dev,
        null_deviance: null_dev,
        squared_corr: squared_correlation(&y, &mu),
        pseudo_r2: if null_dev > 0.0 { 1.0 - dev / null_dev } else { f64::NAN },
        log_likelihood,
        bic: -2.0 * log_likelihood + n_params as f64 * (n as f64).ln(),
        n_params,
        max_foc,
    };

    let mut fitted = vec![0.0; n_all];
    for (c, &i) in idx.iter().enumerate() {
        fitted[i] = mu[c];
    }
    let fe = data
        .fixed_effects
        .iter()
        .zip(&level_maps)
        .zip(&fe_coef)
        .map(|((f, map), coef)| FeValues {
            name: f.name.clone(),
            labels: f.labels.clone(),
            values: map.iter().map(|c| c.map(|c| coef[c as usize])).collect(),
        })
        .collect();

    let mut fit = PpmlFit {
        coef_names: data.covariates.iter().map(|c| c.name.clone()).collect(),
        beta,
        std_errors: Vec::new(),
        se_kind: SeKind::Robust,
        fe,
        fitted,
        kept,
        separated,
        diagnostics,
        variance: cfg.variance,
        design,
        score_resid,
        bread,
        irls_weights: w,
        fes,
    };
    if k > 0 {
        match &data.cluster {
            Some(c) => {
                fit.std_errors = fit.cluster_se(c)?;
                let ids: std::collections::BTreeSet<u32> = c
                    .iter()
                    .zip(&fit.kept)
                    .filter(|(_, &k)| k)
                    .map(|(&c, _)| c)
                    .collect();
                fit.se_kind = SeKind::Clustered {
                    n_clusters: ids.len(),
                };
            }
            None => fit.std_errors = fit.robust_se(),
        }
    }
    Ok(fit)
}

fn blend(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

fn linear_predictor(
    offset: &[f64],
    xs: &[Vec<f64>],
    beta: &[f64],
    fes: &FeStructure,
    coef: &[Vec<f64>],
) -> Vec<f64> {
    let mut e = fes.expand(coef);
    for i in 0..e.len() {
        e[i] += offset[i];
        for (x, b) in xs.iter().zip(beta) {
            e[i] += b * x[i];
        }
    }
    e
}

fn normal_equations(x: &[Vec<f64>], z: &[f64], w: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = x.len();
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xtz = vec![0.0; k];
    for a in 0..k {
        for b in a..k {
            let s: f64 = (0..w.len()).map(|i| w[i] * x[a][i] * x[b][i]).sum();
            xtx[a][b] = s;
            xtx[b][a] = s;
        }
        xtz[a] = (0..w.len()).map(|i| w[i] * x[a][i] * z[i]).sum();
    }
    (xtx, xtz)
}

/// Block coordinate ascent on the fixed effects with covariates held:
/// each update sets one dimension's level totals of fitted to observed.
fn polish_fixed_effects(
    fes: &FeStructure,
    y: &[f64],
    prior: &[f64],
    coef: &mut [Vec<f64>],
    mu: &mut [f64],
    eta: &mut [f64],
) {
    for _ in 0..1000 {
        let mut worst = 0.0f64;
        for (d, dim) in fes.dims.iter().enumerate() {
            let mut obs = vec![0.0; dim.n_levels];
            let mut fit = vec![0.0; dim.n_levels];
            for i in 0..y.len() {
                let g = dim.index[i] as usize;
                obs[g] += prior[i] * y[i];
                fit[g] += prior[i] * mu[i];
            }
            let shift: Vec<f64> = (0..dim.n_levels)
                .map(|g| {
                    worst = worst.max(((obs[g] - fit[g]) / fit[g]).abs());
                    (obs[g] / fit[g]).ln()
                })
                .collect();
            for g in 0..dim.n_levels {
                coef[d][g] += shift[g];
            }
            for i in 0..y.len() {
                let s = shift[dim.index[i] as usize];
                eta[i] += s;
                mu[i] = eta[i].exp();
            }
        }
        if worst <= 1e-13 {
            break;
        }
    }
}

fn normalize(
    fes: &FeStructure,
    data: &PpmlData,
    level_maps: &[Vec<Option<u32>>],
    coef: &mut [Vec<f64>],
) {
    for d in 1..fes.dims.len() {
        let pinned = data.fixed_effects[d]
            .reference
            .and_then(|r| level_maps[d][r as usize])
            .unwrap_or(0) as usize;
        let c = coef[d][pinned];
        coef[d].iter_mut().for_each(|v| *v -= c);
        coef[0].iter_mut().for_each(|v| *v += c);
    }
}

fn squared_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa > 0.0 && sbb > 0.0 {
        sab * sab / (saa * sbb)
    } else {
        f64::NAN
    }
}

/// Percentage change in trade implied by a log-point coefficient:
/// `(exp(beta) - 1) * 100`.
pub fn percent_effect(beta: f64) -> f64 {
    beta.exp_m1() * 100.0
}
