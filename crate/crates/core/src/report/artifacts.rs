//! Per-country equilibrium objects and per-cell flows of a simulation run.

use std::io::{Read, Write};

use crate::ge::{GeOutcome, GeProblem};
use crate::panel::{CountryCode, InvalidCountryCode};

use super::{csv_records, parse_f64, ReportError};

pub const ECONOMY_HEADER: [&str; 14] = [
    "country",
    "output_bsl",
    "expenditure_bsl",
    "imr_bsl",
    "omr_bsl",
    "output_cond",
    "expenditure_cond",
    "imr_cond",
    "omr_cond",
    "price_full",
    "output_full",
    "expenditure_full",
    "imr_full",
    "omr_full",
];

pub const GE_FLOWS_HEADER: [&str; 7] = [
    "exporter",
    "importer",
    "log_cost_bsl",
    "log_cost_cfl",
    "flow_bsl",
    "flow_cond",
    "flow_full",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EconomyRow {
    pub country: CountryCode,
    pub output_bsl: f64,
    pub expenditure_bsl: f64,
    pub imr_bsl: f64,
    pub omr_bsl: f64,
    pub output_cond: f64,
    pub expenditure_cond: f64,
    pub imr_cond: f64,
    pub omr_cond: f64,
    pub price_full: f64,
    pub output_full: f64,
    pub expenditure_full: f64,
    pub imr_full: f64,
    pub omr_full: f64,
}

impl EconomyRow {
    fn values(&self) -> [f64; 13] {
        [
            self.output_bsl,
            self.expenditure_bsl,
            self.imr_bsl,
            self.omr_bsl,
            self.output_cond,
            self.expenditure_cond,
            self.imr_cond,
            self.omr_cond,
            self.price_full,
            self.output_full,
            self.expenditure_full,
            self.imr_full,
            self.omr_full,
        ]
    }

    fn from_values(country: CountryCode, v: [f64; 13]) -> Self {
        EconomyRow {
            country,
            output_bsl: v[0],
            expenditure_bsl: v[1],
            imr_bsl: v[2],
            omr_bsl: v[3],
            output_cond: v[4],
            expenditure_cond: v[5],
            imr_cond: v[6],
            omr_cond: v[7],
            price_full: v[8],
            output_full: v[9],
            expenditure_full: v[10],
            imr_full: v[11],
            omr_full: v[12],
        }
    }
}

/// Log trade costs under both indicators and the three flow solutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeFlowRow {
    pub exporter: CountryCode,
    pub importer: CountryCode,
    pub log_cost_bsl: f64,
    pub log_cost_cfl: f64,
    pub flow_bsl: f64,
    pub flow_cond: f64,
    pub flow_full: f64,
}

fn economy_rows(problem: &GeProblem, out: &GeOutcome) -> Vec<EconomyRow> {
    let (b, c, f) = (&out.baseline, &out.conditional, &out.full);
    (0..problem.n_countries())
        .map(|k| EconomyRow {
            country: problem.countries[k],
            output_bsl: b.output[k],
            expenditure_bsl: b.expenditure[k],
            imr_bsl: b.imr[k],
            omr_bsl: b.omr[k],
            output_cond: c.output[k],
            expenditure_cond: c.expenditure[k],
            imr_cond: c.imr[k],
            omr_cond: c.omr[k],
            price_full: f.price[k],
            output_full: f.output[k],
            expenditure_full: f.expenditure[k],
            imr_full: f.imr[k],
            omr_full: f.omr[k],
        })
        .collect()
}

pub fn write_economy(out: impl Write, problem: &GeProblem, outcome: &GeOutcome) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "{}", ECONOMY_HEADER.join(","))?;
    for r in economy_rows(problem, outcome) {
        write!(w, "{}", r.country)?;
        for v in r.values() {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

pub fn read_economy(input: impl Read) -> Result<Vec<EconomyRow>, ReportError> {
    let mut rows = Vec::new();
    for rec in csv_records(input, "economy", &ECONOMY_HEADER)? {
        let (line, r) = rec?;
        let country = code(&r[0], "economy", line)?;
        let mut v = [0.0; 13];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = parse_f64(&r[k + 1], "economy", line)?;
        }
        rows.push(EconomyRow::from_values(country, v));
    }
    Ok(rows)
}

pub fn write_ge_flows(out: impl Write, problem: &GeProblem, outcome: &GeOutcome) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "{}", GE_FLOWS_HEADER.join(","))?;
    let t_b = problem.log_trade_cost(&problem.baseline_fta);
    let t_c = problem.log_trade_cost(&problem.counterfactual_fta);
    for k in 0..problem.cells.len() {
        let (a, b) = problem.pair(k);
        writeln!(
            w,
            "{a},{b},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            t_b[k],
            t_c[k],
            outcome.baseline.flows[k],
            outcome.conditional.flows[k],
            outcome.full.flows[k]
        )?;
    }
    w.flush()
}

pub fn read_ge_flows(input: impl Read) -> Result<Vec<GeFlowRow>, ReportError> {
    let mut rows = Vec::new();
    for rec in csv_records(input, "flows_ge", &GE_FLOWS_HEADER)? {
        let (line, r) = rec?;
        let num = |k: usize| parse_f64(&r[k], "flows_ge", line);
        rows.push(GeFlowRow {
            exporter: code(&r[0], "flows_ge", line)?,
            importer: code(&r[1], "flows_ge", line)?,
            log_cost_bsl: num(2)?,
            log_cost_cfl: num(3)?,
            flow_bsl: num(4)?,
            flow_cond: num(5)?,
            flow_full: num(6)?,
        });
    }
    Ok(rows)
}

fn code(s: &str, file: &str, line: u64) -> Result<CountryCode, ReportError> {
    s.parse()
        .map_err(|e: InvalidCountryCode| ReportError::parse(file, line, e.to_string()))
}
