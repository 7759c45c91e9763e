//! Independent reference solvers shared by the integration tests.
//!
//! Nothing here calls into the production estimators or solvers: PPML is
//! solved by Newton's method on an explicit dummy design, resistances by
//! direct fixed-point iteration on the structural equations, and the full
//! equilibrium by Newton's method on the price equations.

#![allow(dead_code)]

use geppml::ppml::PpmlData;
use nalgebra::{DMatrix, DVector};

/// Explicit design: covariates first, then one dummy per level of every
/// fixed-effect dimension, reduced to a linearly independent column set by
/// greedy Gram-Schmidt in that order.
pub fn dummy_design(data: &PpmlData) -> (DMatrix<f64>, usize) {
    let n = data.y.len();
    let mut columns: Vec<Vec<f64>> = data.covariates.iter().map(|c| c.values.clone()).collect();
    for f in &data.fixed_effects {
        for g in 0..f.labels.len() {
            columns.push(f.index.iter().map(|&l| f64::from(u8::from(l as usize == g))).collect());
        }
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for (k, col) in columns.iter().enumerate() {
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut r = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0 {
            basis.push(r.iter().map(|v| v / norm).collect());
            kept.push(k);
        }
    }
    let k_cov = data.covariates.len();
    assert!(
        (0..k_cov).all(|k| kept.contains(&k)),
        "covariates are collinear with the dummies"
    );
    let x = DMatrix::from_fn(n, kept.len(), |i, c| columns[kept[c]][i]);
    (x, k_cov)
}

/// PPML by full Newton iterations on the dummy design. Returns the
/// covariate coefficients and fitted means.
pub fn newton_ppml(data: &PpmlData) -> (Vec<f64>, Vec<f64>) {
    let (x, k_cov) = dummy_design(data);
    let n = x.nrows();
    let y = DVector::from_column_slice(&data.y);
    let offset = DVector::from_column_slice(
        &data.offset.clone().unwrap_or_else(|| vec![0.0; n]),
    );
    // Start from least squares on a log-transformed response.
    let ybar = y.mean();
    let z = DVector::from_fn(n, |i, _| ((y[i] + ybar) / 2.0).ln() - offset[i]);
    let xtx = x.transpose() * &x;
    let mut b = xtx
        .cholesky()
        .expect("full-rank design")
        .solve(&(x.transpose() * z));
    let objective = |eta: &DVector<f64>| -> f64 {
        (0..n).map(|i| y[i] * eta[i] - eta[i].exp()).sum()
    };
    let mut eta = &x * &b + &offset;
    let mut obj = objective(&eta);
    for _ in 0..200 {
        let mu = eta.map(f64::exp);
        let g = x.transpose() * (&y - &mu);
        let xw = DMatrix::from_fn(n, x.ncols(), |i, c| x[(i, c)] * mu[i]);
        let h = x.transpose() * xw;
        let step = h.cholesky().expect("positive definite Hessian").solve(&g);
        let mut t = 1.0;
        loop {
            let cand = &b + &step * t;
            let cand_eta = &x * &cand + &offset;
            let cand_obj = objective(&cand_eta);
            if cand_obj >= obj - 1e-12 * obj.abs() || t < 1e-10 {
                b = cand;
                eta = cand_eta;
                obj = cand_obj;
                break;
            }
            t /= 2.0;
        }
        if step.amax() * t < 1e-13 {
            break;
        }
    }
    let mu = eta.map(f64::exp);
    (b.rows(0, k_cov).iter().copied().collect(), mu.iter().copied().collect())
}

/// Structural resistances for given costs and margins.
///
/// Returns `(P, Pi)` with the reference `P` equal to one, from alternating
/// updates of `a_i = Pi_i^(1-sigma)` and `b_j = P_j^(1-sigma)`.
pub fn resistances(
    cells: &[(usize, usize)],
    trade_cost: &[f64],
    output: &[f64],
    expenditure: &[f64],
    reference: usize,
    sigma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = output.len();
    let world: f64 = output.iter().sum();
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; n];
    for _ in 0..100_000 {
        let mut na = vec![0.0; n];
        for (&(i, j), &t) in cells.iter().zip(trade_cost) {
            na[i] += t * expenditure[j] / (world * b[j]);
        }
        let mut nb = vec![0.0; n];
        for (&(i, j), &t) in cells.iter().zip(trade_cost) {
            nb[j] += t * output[i] / (world * na[i]);
        }
        let change = a
            .iter()
            .zip(&na)
            .chain(b.iter().zip(&nb))
            .map(|(o, v)| (o / v - 1.0).abs())
            .fold(0.0, f64::max);
        a = na;
        b = nb;
        if change < 1e-15 {
            break;
        }
    }
    let c = b[reference];
    let imr = b.iter().map(|v| (v / c).powf(1.0 / (1.0 - sigma))).collect();
    let omr = a.iter().map(|v| (v * c).powf(1.0 / (1.0 - sigma))).collect();
    (imr, omr)
}

/// Structural flows from margins and resistances.
pub fn structural_flows(
    cells: &[(usize, usize)],
    trade_cost: &[f64],
    output: &[f64],
    expenditure: &[f64],
    imr: &[f64],
    omr: &[f64],
    sigma: f64,
) -> Vec<f64> {
    let world: f64 = output.iter().sum();
    cells
        .iter()
        .zip(trade_cost)
        .map(|(&(i, j), t)| {
            output[i] * expenditure[j] / world * t * (omr[i] * imr[j]).powf(sigma - 1.0)
        })
        .collect()
}

/// Full structural equilibrium.
pub struct Equilibrium {
    pub price: Vec<f64>,
    pub output: Vec<f64>,
    pub expenditure: Vec<f64>,
    pub imr: Vec<f64>,
    pub omr: Vec<f64>,
    pub flows: Vec<f64>,
}

/// Expenditure with fixed baseline shares of output, rescaled so world
/// spending equals world output.
pub fn endowment_expenditure(base_y: &[f64], base_e: &[f64], price: &[f64]) -> Vec<f64> {
    let y: f64 = base_y.iter().zip(price).map(|(a, p)| a * p).sum();
    let e: f64 = base_e.iter().zip(price).map(|(a, p)| a * p).sum();
    base_e.iter().zip(price).map(|(a, p)| a * p * y / e).collect()
}

/// Solves the endowment economy under `cf_cost` by Newton's method on
/// `p_i^(1-sigma) = (Y_i/Y)/(Y_i^b/Y^b) * (Pi_i^b/Pi_i)^(1-sigma)` with a
/// finite-difference Jacobian.
pub fn full_equilibrium(
    cells: &[(usize, usize)],
    base_cost: &[f64],
    cf_cost: &[f64],
    base_y: &[f64],
    base_e: &[f64],
    reference: usize,
    sigma: f64,
) -> Equilibrium {
    let n = base_y.len();
    let yw_b: f64 = base_y.iter().sum();
    let (_, omr_b) = resistances(cells, base_cost, base_y, base_e, reference, sigma);
    let residual = |p: &[f64]| -> Vec<f64> {
        let y: Vec<f64> = base_y.iter().zip(p).map(|(q, p)| q * p).collect();
        let e = endowment_expenditure(base_y, base_e, p);
        let yw: f64 = y.iter().sum();
        let (_, omr) = resistances(cells, cf_cost, &y, &e, reference, sigma);
        (0..n)
            .map(|i| {
                let rhs = (y[i] / yw) / (base_y[i] / yw_b)
                    * (omr_b[i] / omr[i]).powf(1.0 - sigma);
                p[i].powf(1.0 - sigma) / rhs - 1.0
            })
            .collect()
    };
    let mut p = vec![1.0; n];
    for _ in 0..100 {
        let f = residual(&p);
        if f.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-13 {
            break;
        }
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-7 * p[k];
            let mut pp = p.clone();
            pp[k] += h;
            let fp = residual(&pp);
            let mut pm = p.clone();
            pm[k] -= h;
            let fm = residual(&pm);
            for i in 0..n {
                jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let step = jac
            .lu()
            .solve(&DVector::from_column_slice(&f))
            .expect("nonsingular Jacobian");
        for k in 0..n {
            p[k] -= step[k];
        }
    }
    let output: Vec<f64> = base_y.iter().zip(&p).map(|(q, p)| q * p).collect();
    let expenditure = endowment_expenditure(base_y, base_e, &p);
    let (imr, omr) = resistances(cells, cf_cost, &output, &expenditure, reference, sigma);
    let flows = structural_flows(cells, cf_cost, &output, &expenditure, &imr, &omr, sigma);
    Equilibrium {
        price: p,
        output,
        expenditure,
        imr,
        omr,
        flows,
    }
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) / y).abs())
        .fold(0.0, f64::max)
}

/// Largest per-level adding-up residual `|sum_g w(y - mu)| / sum_g w mu`
/// over every fixed-effect level of a fit, from the raw data and fitted
/// means alone. Observations dropped by the fit are skipped.
pub fn fe_adding_up(data: &PpmlData, fit: &geppml::ppml::PpmlFit) -> f64 {
    let mut worst = 0.0f64;
    for f in &data.fixed_effects {
        let mut resid = vec![0.0; f.labels.len()];
        let mut mass = vec![0.0; f.labels.len()];
        for i in (0..data.y.len()).filter(|&i| fit.kept[i]) {
            let w = data.weights.as_ref().map_or(1.0, |w| w[i]);
            let g = f.index[i] as usize;
            resid[g] += w * (data.y[i] - fit.fitted[i]);
            mass[g] += w * fit.fitted[i];
        }
        for (r, m) in resid.iter().zip(&mass) {
            if *m > 0.0 {
                worst = worst.max(r.abs() / m);
            }
        }
    }
    worst
}
