//! Regression-table style summaries of PPML fits.

use std::io::Write;

use statrs::distribution::{ContinuousCDF, Normal};

use super::PpmlFit;

/// One coefficient line of a summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
}

impl SummaryRow {
    /// Two-sided normal p-value of `estimate / std_error`.
    pub fn p_value(&self) -> f64 {
        let z = (self.estimate / self.std_error).abs();
        if !z.is_finite() {
            return if z.is_nan() { f64::NAN } else { 0.0 };
        }
        let normal = Normal::standard();
        2.0 * normal.sf(z)
    }

    /// `label estimate<stars> (se)`, e.g. `FTA 0.4383*** (0.0987)`.
    pub fn display(&self) -> String {
        format!(
            "{} {}{} ({})",
            self.label,
            signif4(self.estimate),
            significance_stars(self.p_value()),
            signif4(self.std_error)
        )
    }
}

/// Stars at the 0.01 / 0.05 / 0.1 levels.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Four significant digits, at most four decimals, trailing zeros kept.
pub(crate) fn signif4(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (3 - mag).clamp(0, 4) as usize;
    format!("{v:.decimals$}")
}

/// Writes a long-format summary: `kind,term,estimate,std_error,p_value,stars`.
///
/// `coef` rows carry estimates, `fe` rows the number of retained levels of
/// each fixed-effect dimension, `stat` rows the fit statistics.
pub fn write_summary(out: impl Write, rows: &[SummaryRow], fit: &PpmlFit) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "kind,term,estimate,std_error,p_value,stars")?;
    for r in rows {
        let p = r.p_value();
        writeln!(
            w,
            "coef,{},{:.16e},{:.16e},{:.16e},{}",
            r.label,
            r.estimate,
            r.std_error,
            p,
            significance_stars(p)
        )?;
    }
    for f in &fit.fe {
        let n = f.values.iter().filter(|v| v.is_some()).count();
        writeln!(w, "fe,{},{},,,", f.name, n)?;
    }
    let d = &fit.diagnostics;
    writeln!(w, "stat,observations,{},,,", d.n_obs)?;
    writeln!(w, "stat,squared_correlation,{:.16e},,,", d.squared_corr)?;
    writeln!(w, "stat,pseudo_r2,{:.16e},,,", d.pseudo_r2)?;
    writeln!(w, "stat,bic,{:.16e},,,", d.bic)?;
    writeln!(w, "stat,deviance,{:.16e},,,", d.deviance)?;
    writeln!(w, "stat,iterations,{},,,", d.iterations)?;
    w.flush()
}
