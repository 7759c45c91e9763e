//! Biproportional balancing of a sparse positive matrix to given margins.

/// Scales `seed` on the listed cells so that row sums match `rows` and
/// column sums match `cols`.
///
/// Returns the balanced cell values and the final maximum relative margin
/// error. The targets must share a common total for an exact solution.
pub fn balance(
    cells: &[(usize, usize)],
    seed: &[f64],
    rows: &[f64],
    cols: &[f64],
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let mut a = vec![1.0; rows.len()];
    let mut b = vec![1.0; cols.len()];
    let mut err = f64::INFINITY;
    let mut acc_r = vec![0.0; rows.len()];
    let mut acc_c = vec![0.0; cols.len()];
    for _ in 0..max_iter {
        acc_r.iter_mut().for_each(|v| *v = 0.0);
        for (&(i, j), &s) in cells.iter().zip(seed) {
            acc_r[i] += s * b[j];
        }
        for i in 0..rows.len() {
            if acc_r[i] > 0.0 {
                a[i] = rows[i] / acc_r[i];
            }
        }
        acc_c.iter_mut().for_each(|v| *v = 0.0);
        for (&(i, j), &s) in cells.iter().zip(seed) {
            acc_c[j] += s * a[i];
        }
        for j in 0..cols.len() {
            if acc_c[j] > 0.0 {
                b[j] = cols[j] / acc_c[j];
            }
        }
        // Columns are exact after the update; measure the row error.
        acc_r.iter_mut().for_each(|v| *v = 0.0);
        for (&(i, j), &s) in cells.iter().zip(seed) {
            acc_r[i] += a[i] * s * b[j];
        }
        err = acc_r
            .iter()
            .zip(rows)
            .filter(|(_, &t)| t > 0.0)
            .map(|(&v, &t)| ((v - t) / t).abs())
            .fold(0.0, f64::max);
        if err <= tol {
            break;
        }
    }
    let values = cells
        .iter()
        .zip(seed)
        .map(|(&(i, j), &s)| a[i] * s * b[j])
        .collect();
    (values, err)
}
