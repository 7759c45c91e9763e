//! Weighted alternating projections over categorical fixed effects.
//!
//! Coefficients are kept per level so that a demeaned vector's fixed-effect
//! component can be recovered, not just the residual.

/// One fixed-effect dimension restricted to retained observations.
#[derive(Debug, Clone)]
pub(crate) struct Dim {
    pub index: Vec<u32>,
    pub n_levels: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct FeStructure {
    pub dims: Vec<Dim>,
    pub n_obs: usize,
}

/// Per-level weight totals for the current IRLS weights.
pub(crate) struct LevelWeights(Vec<Vec<f64>>);

impl FeStructure {
    pub fn level_weights(&self, w: &[f64]) -> LevelWeights {
        LevelWeights(
            self.dims
                .iter()
                .map(|d| {
                    let mut s = vec![0.0; d.n_levels];
                    for (&g, &wi) in d.index.iter().zip(w) {
                        s[g as usize] += wi;
                    }
                    s
                })
                .collect(),
        )
    }

    pub fn zero_coefs(&self) -> Vec<Vec<f64>> {
        self.dims.iter().map(|d| vec![0.0; d.n_levels]).collect()
    }

    /// Sum of fixed-effect coefficients for every observation.
    pub fn expand(&self, coefs: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_obs];
        for (d, c) in self.dims.iter().zip(coefs) {
            for (o, &g) in out.iter_mut().zip(&d.index) {
                *o += c[g as usize];
            }
        }
        out
    }

    /// Projects `v` onto the fixed-effect space by Gauss-Seidel sweeps,
    /// starting from `coefs` (warm start) and updating them in place.
    ///
    /// Returns the residual `v - sum_d coefs_d` and the number of sweeps.
    /// Stops once the largest coefficient change in a sweep falls below
    /// `tol * max|v|`.
    pub fn backfit(
        &self,
        v: &[f64],
        w: &[f64],
        lw: &LevelWeights,
        coefs: &mut [Vec<f64>],
        tol: f64,
        max_sweeps: usize,
    ) -> (Vec<f64>, usize) {
        if self.dims.is_empty() {
            return (v.to_vec(), 0);
        }
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        let mut fitted = self.expand(coefs);
        let mut num: Vec<Vec<f64>> = self.dims.iter().map(|d| vec![0.0; d.n_levels]).collect();
        let single = self.dims.len() == 1;
        let mut sweeps = 0;
        while sweeps < max_sweeps {
            sweeps += 1;
            let mut max_change = 0.0f64;
            for (k, d) in self.dims.iter().enumerate() {
                let acc = &mut num[k];
                acc.iter_mut().for_each(|a| *a = 0.0);
                for i in 0..self.n_obs {
                    let g = d.index[i] as usize;
                    acc[g] += w[i] * (v[i] - fitted[i] + coefs[k][g]);
                }
                let mut delta = vec![0.0; d.n_levels];
                for g in 0..d.n_levels {
                    let ws = lw.0[k][g];
                    if ws > 0.0 {
                        let new = acc[g] / ws;
                        delta[g] = new - coefs[k][g];
                        coefs[k][g] = new;
                        max_change = max_change.max(delta[g].abs());
                    }
                }
                for i in 0..self.n_obs {
                    fitted[i] += delta[d.index[i] as usize];
                }
            }
            if single || max_change <= tol * scale {
                break;
            }
        }
        let resid = v.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        (resid, sweeps)
    }
}
