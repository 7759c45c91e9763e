//! Re-checks the equilibrium conditions of a finished run from its stored
//! artifacts alone.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use crate::panel::CountryCode;

use super::artifacts::{read_economy, read_ge_flows, EconomyRow, GeFlowRow};
use super::manifest::{sha256_file, RunManifest};
use super::{csv_records, parse_f64, ReportError};

pub const TRACE_HEADER: [&str; 4] = ["iteration", "d", "sd", "max_price_change"];

/// One row of a stored convergence trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub d: f64,
    pub sd: f64,
    pub max_price_change: f64,
}

pub fn read_trace(input: impl Read) -> Result<Vec<TraceRecord>, ReportError> {
    let mut out = Vec::new();
    for rec in csv_records(input, "trace", &TRACE_HEADER)? {
        let (line, r) = rec?;
        let iteration = r[0]
            .parse()
            .map_err(|_| ReportError::parse("trace", line, format!("invalid iteration `{}`", &r[0])))?;
        out.push(TraceRecord {
            iteration,
            d: parse_f64(&r[1], "trace", line)?,
            sd: parse_f64(&r[2], "trace", line)?,
            max_price_change: parse_f64(&r[3], "trace", line)?,
        });
    }
    Ok(out)
}

/// Tolerances for the checks. Unset convergence tolerances are taken from
/// the run manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Relative tolerance of the identity checks.
    pub tol: f64,
    pub price_tol: Option<f64>,
    pub sd_tol: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tol: 1e-8,
            price_tol: None,
            sd_tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub magnitude: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} magnitude={:e} tolerance={:e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.magnitude,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub tol: f64,
    pub price_tol: f64,
    pub sd_tol: f64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn check(name: &str, magnitude: f64, tolerance: f64, detail: String) -> Check {
    Check {
        name: name.into(),
        passed: magnitude <= tolerance,
        magnitude,
        tolerance,
        detail,
    }
}

/// Largest relative gap with the key where it occurs.
fn worst<K: fmt::Display>(items: impl Iterator<Item = (K, f64, f64)>) -> (f64, String) {
    let mut best = (0.0, String::new());
    for (key, got, want) in items {
        let gap = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        if gap > best.0 || gap.is_nan() {
            best = (gap, key.to_string());
            if gap.is_nan() {
                best.0 = f64::INFINITY;
            }
        }
    }
    best
}

struct Solution<'a> {
    name: &'static str,
    output: Box<dyn Fn(&EconomyRow) -> f64 + 'a>,
    expenditure: Box<dyn Fn(&EconomyRow) -> f64 + 'a>,
    imr: Box<dyn Fn(&EconomyRow) -> f64 + 'a>,
    omr: Box<dyn Fn(&EconomyRow) -> f64 + 'a>,
    /// Value of production that sales must match.
    sales_target: Box<dyn Fn(&EconomyRow) -> f64 + 'a>,
    flow: Box<dyn Fn(&GeFlowRow) -> f64 + 'a>,
    log_cost: Box<dyn Fn(&GeFlowRow) -> f64 + 'a>,
}

fn solutions<'a>() -> Vec<Solution<'a>> {
    vec![
        Solution {
            name: "bsl",
            output: Box::new(|r| r.output_bsl),
            expenditure: Box::new(|r| r.expenditure_bsl),
            imr: Box::new(|r| r.imr_bsl),
            omr: Box::new(|r| r.omr_bsl),
            sales_target: Box::new(|r| r.output_bsl),
            flow: Box::new(|f| f.flow_bsl),
            log_cost: Box::new(|f| f.log_cost_bsl),
        },
        Solution {
            name: "cond",
            output: Box::new(|r| r.output_cond),
            expenditure: Box::new(|r| r.expenditure_cond),
            imr: Box::new(|r| r.imr_cond),
            omr: Box::new(|r| r.omr_cond),
            sales_target: Box::new(|r| r.output_bsl),
            flow: Box::new(|f| f.flow_cond),
            log_cost: Box::new(|f| f.log_cost_cfl),
        },
        Solution {
            name: "full",
            output: Box::new(|r| r.output_full),
            expenditure: Box::new(|r| r.expenditure_full),
            imr: Box::new(|r| r.imr_full),
            omr: Box::new(|r| r.omr_full),
            // Endowments are fixed, so sales must equal price times baseline output.
            sales_target: Box::new(|r| r.price_full * r.output_bsl),
            flow: Box::new(|f| f.flow_full),
            log_cost: Box::new(|f| f.log_cost_cfl),
        },
    ]
}

/// Runs every check on the run directory `dir`.
pub fn verify_run(dir: &Path, opts: &VerifyOptions) -> Result<VerifyReport, ReportError> {
    let manifest = RunManifest::read(dir)?;
    let open = |name: &str| {
        let path = dir.join(name);
        std::fs::File::open(&path).map_err(|e| ReportError::io(&path, e))
    };
    let economy = read_economy(open("economy.csv")?)?;
    let flows = read_ge_flows(open("flows_ge.csv")?)?;
    let trace = read_trace(open("trace.csv")?)?;

    let missing = |k: &str| ReportError::Inconsistent(format!("manifest lacks `{k}`"));
    let sigma = manifest.config_f64("sigma").ok_or_else(|| missing("sigma"))?;
    let price_tol = opts
        .price_tol
        .or_else(|| manifest.config_f64("price_tol"))
        .ok_or_else(|| missing("price_tol"))?;
    let sd_tol = opts
        .sd_tol
        .or_else(|| manifest.config_f64("sd_tol"))
        .ok_or_else(|| missing("sd_tol"))?;
    let reference: CountryCode = manifest
        .config
        .get("reference")
        .and_then(|v| v.as_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| missing("reference"))?;

    let mut checks = Vec::new();
    for out in &manifest.outputs {
        let path = dir.join(&out.path);
        let ok = sha256_file(&path).map(|d| d == out.sha256).unwrap_or(false);
        checks.push(Check {
            name: format!("digest:{}", out.path),
            passed: ok,
            magnitude: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            detail: if ok { String::new() } else { "content differs from manifest".into() },
        });
    }

    let by_country: BTreeMap<CountryCode, &EconomyRow> =
        economy.iter().map(|r| (r.country, r)).collect();
    for f in &flows {
        for c in [f.exporter, f.importer] {
            if !by_country.contains_key(&c) {
                return Err(ReportError::Inconsistent(format!("flows reference unknown country {c}")));
            }
        }
    }
    let reference_row = by_country
        .get(&reference)
        .ok_or_else(|| ReportError::Inconsistent(format!("reference {reference} not in economy")))?;

    for s in solutions() {
        let world: f64 = economy.iter().map(|r| (s.output)(r)).sum();
        let (gap, at) = worst(flows.iter().map(|f| {
            let (i, j) = (by_country[&f.exporter], by_country[&f.importer]);
            let structural = (s.output)(i) * (s.expenditure)(j) / world
                * ((s.log_cost)(f) + (sigma - 1.0) * ((s.omr)(i).ln() + (s.imr)(j).ln())).exp();
            (format!("{}->{}", f.exporter, f.importer), (s.flow)(f), structural)
        }));
        checks.push(check(&format!("decomposition_{}", s.name), gap, opts.tol, at));

        let mut sales: BTreeMap<CountryCode, f64> = BTreeMap::new();
        let mut purchases: BTreeMap<CountryCode, f64> = BTreeMap::new();
        for f in &flows {
            *sales.entry(f.exporter).or_insert(0.0) += (s.flow)(f);
            *purchases.entry(f.importer).or_insert(0.0) += (s.flow)(f);
        }
        let (gap, at) = worst(economy.iter().map(|r| {
            (r.country, sales.get(&r.country).copied().unwrap_or(0.0), (s.sales_target)(r))
        }));
        let (gap_y, at_y) = worst(economy.iter().map(|r| (r.country, (s.output)(r), (s.sales_target)(r))));
        let (gap, at) = if gap_y > gap { (gap_y, at_y) } else { (gap, at) };
        checks.push(check(&format!("market_clearing_{}", s.name), gap, opts.tol, at));

        let (gap, at) = worst(economy.iter().map(|r| {
            (r.country, purchases.get(&r.country).copied().unwrap_or(0.0), (s.expenditure)(r))
        }));
        checks.push(check(&format!("expenditure_adding_up_{}", s.name), gap, opts.tol, at));

        let p_r = (s.imr)(reference_row);
        checks.push(check(
            &format!("reference_imr_{}", s.name),
            (p_r - 1.0).abs(),
            opts.tol,
            reference.to_string(),
        ));
    }

    let converged = |t: &TraceRecord| t.d <= price_tol && t.sd <= sd_tol;
    let (magnitude, detail) = match trace.split_last() {
        None => (f64::INFINITY, "empty trace".to_string()),
        Some((last, rest)) => {
            if let Some(early) = rest.iter().find(|t| converged(t)) {
                (1.0, format!("criterion already met at iteration {}", early.iteration))
            } else if !converged(last) {
                (1.0, format!("final iteration {} has d={:e}, sd={:e}", last.iteration, last.d, last.sd))
            } else {
                (0.0, format!("stopped at iteration {}", last.iteration))
            }
        }
    };
    checks.push(Check {
        name: "convergence".into(),
        passed: magnitude == 0.0,
        magnitude,
        tolerance: 0.0,
        detail: format!("{detail}; price_tol={price_tol:e}, sd_tol={sd_tol:e}"),
    });

    Ok(VerifyReport {
        tol: opts.tol,
        price_tol,
        sd_tol,
        checks,
    })
}
