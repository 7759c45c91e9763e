//! Dense symmetric positive-definite helpers for the small coefficient
//! systems (one row per covariate).

/// Cholesky factor of a symmetric matrix in row-major `k x k` layout.
///
/// Fails with the index of the first column whose pivot is not larger than
/// `rel_tol` times its diagonal entry.
pub(crate) fn cholesky(a: &[Vec<f64>], rel_tol: f64) -> Result<Vec<Vec<f64>>, usize> {
    let k = a.len();
    let mut l = vec![vec![0.0; k]; k];
    for j in 0..k {
        let mut d = a[j][j];
        for p in 0..j {
            d -= l[j][p] * l[j][p];
        }
        if !(d > rel_tol * a[j][j].abs()) || !d.is_finite() {
            return Err(j);
        }
        let djj = d.sqrt();
        l[j][j] = djj;
        for i in (j + 1)..k {
            let mut s = a[i][j];
            for p in 0..j {
                s -= l[i][p] * l[j][p];
            }
            l[i][j] = s / djj;
        }
    }
    Ok(l)
}

pub(crate) fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let k = l.len();
    let mut y = vec![0.0; k];
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i][p] * y[p];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for p in (i + 1)..k {
            s -= l[p][i] * x[p];
        }
        x[i] = s / l[i][i];
    }
    x
}

pub(crate) fn chol_inverse(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = l.len();
    let mut inv = vec![vec![0.0; k]; k];
    for j in 0..k {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        let col = chol_solve(l, &e);
        for i in 0..k {
            inv[i][j] = col[i];
        }
    }
    inv
}
