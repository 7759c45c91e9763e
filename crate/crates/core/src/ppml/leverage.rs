//! Diagonal blocks of the weighted hat matrix of a fixed-effects design.
//!
//! The fixed-effect normal matrix `M = D' W D` is split into the block of
//! the dimension with the most levels, which is diagonal, and the dense
//! Schur complement `S` over all other levels. With `C` the diagonal block
//! and `B` the cross block,
//!
//! ```text
//! M^- = [ S^+            -S^+ B C^-1                  ]
//!       [ -C^-1 B' S^+   C^-1 + C^-1 B' S^+ B C^-1    ]
//! ```
//!
//! is a generalized inverse, and the hat matrix does not depend on which
//! generalized inverse is used. Only the cost of `S^+` grows cubically, in
//! the number of levels outside the largest dimension.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};

use super::demean::FeStructure;

/// Relative eigenvalue cutoff of the pseudo-inverses.
const PINV_TOL: f64 = 1e-10;

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix.
pub(crate) fn psd_pinv(a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return a;
    }
    let eig = SymmetricEigen::new(a);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = PINV_TOL * top.max(f64::MIN_POSITIVE);
    let inv = eig.eigenvalues.map(|v| if v > cut { 1.0 / v } else { 0.0 });
    let mut out = DMatrix::zeros(n, n);
    for (k, &l) in inv.iter().enumerate() {
        if l != 0.0 {
            let v = eig.eigenvectors.column(k);
            out += l * v * v.transpose();
        }
    }
    out
}

pub(crate) struct FeLeverage<'a> {
    fes: &'a FeStructure,
    w: &'a [f64],
    /// Dimension handled through its diagonal block.
    elim: Option<usize>,
    /// `1 / sum of weights` per level of the eliminated dimension.
    c_inv: Vec<f64>,
    /// Position in `S` of the first level of each dimension; unused for
    /// the eliminated one.
    offset: Vec<usize>,
    /// `B` column per eliminated level as sparse `(position, value)`.
    cross: Vec<Vec<(usize, f64)>>,
    s_pinv: DMatrix<f64>,
}

impl<'a> FeLeverage<'a> {
    pub fn new(fes: &'a FeStructure, w: &'a [f64]) -> Self {
        let elim = (0..fes.dims.len()).max_by_key(|&d| (fes.dims[d].n_levels, std::cmp::Reverse(d)));
        let mut offset = vec![0; fes.dims.len()];
        let mut size = 0;
        for (d, dim) in fes.dims.iter().enumerate() {
            if Some(d) != elim {
                offset[d] = size;
                size += dim.n_levels;
            }
        }
        let mut s = DMatrix::zeros(size, size);
        let mut c_inv = Vec::new();
        let mut cross = Vec::new();
        let kept_levels = |i: usize| -> Vec<usize> {
            fes.dims
                .iter()
                .enumerate()
                .filter(|(d, _)| Some(*d) != elim)
                .map(|(d, dim)| offset[d] + dim.index[i] as usize)
                .collect()
        };
        for i in 0..w.len() {
            let levels = kept_levels(i);
            for &a in &levels {
                for &b in &levels {
                    s[(a, b)] += w[i];
                }
            }
        }
        if let Some(e) = elim {
            let n_levels = fes.dims[e].n_levels;
            let mut c = vec![0.0; n_levels];
            let mut acc: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_levels];
            for i in 0..w.len() {
                let p = fes.dims[e].index[i] as usize;
                c[p] += w[i];
                for a in kept_levels(i) {
                    *acc[p].entry(a).or_insert(0.0) += w[i];
                }
            }
            c_inv = c.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 0.0 }).collect();
            cross = acc.into_iter().map(|m| m.into_iter().collect()).collect();
            for (p, col) in cross.iter().enumerate() {
                for &(a, va) in col {
                    for &(b, vb) in col {
                        s[(a, b)] -= c_inv[p] * va * vb;
                    }
                }
            }
        }
        FeLeverage {
            fes,
            w,
            elim,
            c_inv,
            offset,
            cross,
            s_pinv: psd_pinv(s),
        }
    }

    /// `u_i = k_i - C^-1 B_p(i)`, the observation's row of `D` reduced to
    /// the Schur levels.
    fn reduced_row(&self, i: usize) -> BTreeMap<usize, f64> {
        let mut u = BTreeMap::new();
        for (d, dim) in self.fes.dims.iter().enumerate() {
            if Some(d) != self.elim {
                *u.entry(self.offset[d] + dim.index[i] as usize).or_insert(0.0) += 1.0;
            }
        }
        if let Some(e) = self.elim {
            let p = self.fes.dims[e].index[i] as usize;
            for &(a, v) in &self.cross[p] {
                *u.entry(a).or_insert(0.0) -= self.c_inv[p] * v;
            }
        }
        u
    }

    /// Hat-matrix block `W^1/2 D M^- D' W^1/2` on the observations `obs`.
    pub fn block(&self, obs: &[usize]) -> DMatrix<f64> {
        let t = obs.len();
        let mut h = DMatrix::zeros(t, t);
        if self.fes.dims.is_empty() {
            return h;
        }
        let rows: Vec<Vec<(usize, f64)>> = obs
            .iter()
            .map(|&i| self.reduced_row(i).into_iter().filter(|(_, v)| *v != 0.0).collect())
            .collect();
        for r in 0..t {
            for c in r..t {
                let mut v = 0.0;
                for &(a, ua) in &rows[r] {
                    for &(b, ub) in &rows[c] {
                        v += ua * self.s_pinv[(a, b)] * ub;
                    }
                }
                if let Some(e) = self.elim {
                    let (pr, pc) = (self.fes.dims[e].index[obs[r]], self.fes.dims[e].index[obs[c]]);
                    if pr == pc {
                        v += self.c_inv[pr as usize];
                    }
                }
                v *= (self.w[obs[r]] * self.w[obs[c]]).sqrt();
                h[(r, c)] = v;
                h[(c, r)] = v;
            }
        }
        h
    }
}
