//! Counterfactual general equilibrium by constrained PPML re-estimation:
//! multilateral resistances, factory-gate prices, income and welfare.
//!
//! Flows follow `X_ij = Y_i E_j / Y * T_ij * Pi_i^(sigma-1) * P_j^(sigma-1)`
//! with `T_ij = t_ij^(1-sigma) exp(beta * fta_ij)`. A PPML fit with exporter
//! and importer effects and offset `ln T` reproduces the output and
//! expenditure margins exactly, so its effects identify both resistances
//! once the reference importer's inward resistance is fixed at one.

use std::io::Write;

use thiserror::Error;

use crate::balance::balance;
use crate::costs::CostMatrix;
use crate::panel::{CountryCode, IntervalPanel, Pair};
use crate::ppml::{fit_ppml, FeSpec, PpmlConfig, PpmlData, PpmlError, PpmlFit};
use crate::scenario::ScenarioIndicators;

pub const EXPORTER: &str = "exporter";
pub const IMPORTER: &str = "importer";

/// Consecutive growing steps treated as divergence.
const DIVERGENCE_STREAK: usize = 5;

#[derive(Debug, Error)]
pub enum GeError {
    #[error(transparent)]
    Ppml(#[from] PpmlError),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("no trade cost for pair {}->{}", .0.0, .0.1)]
    MissingCost(Pair),
    #[error("country {0} has no {1} in the evaluation year")]
    ZeroMargin(CountryCode, &'static str),
    #[error("country {0} is missing from the {1} fixed effects")]
    MissingFe(CountryCode, &'static str),
    #[error("reference country {0} is not in the registry")]
    UnknownReference(CountryCode),
    #[error("at least two countries are required, found {0}")]
    TooFewCountries(usize),
    #[error("scenario indicators do not cover pair {}->{}", .0.0, .0.1)]
    MissingIndicator(Pair),
    #[error("no convergence after {iterations} iterations (d = {d:e}, sd = {sd:e})")]
    NonConvergence {
        iterations: usize,
        d: f64,
        sd: f64,
        trace: Vec<TraceRow>,
    },
    #[error("price changes grew for {DIVERGENCE_STREAK} consecutive iterations (iteration {iteration}, d = {d:e})")]
    Divergence {
        iteration: usize,
        d: f64,
        trace: Vec<TraceRow>,
    },
}

impl GeError {
    /// Iteration trace carried by solver failures.
    pub fn trace(&self) -> Option<&[TraceRow]> {
        match self {
            GeError::NonConvergence { trace, .. } | GeError::Divergence { trace, .. } => Some(trace),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeConfig {
    pub sigma: f64,
    pub price_tol: f64,
    pub sd_tol: f64,
    pub max_outer_iter: usize,
    /// Weight on the newly implied prices; 1 is the undamped update.
    pub damping: f64,
    pub ppml: PpmlConfig,
}

impl Default for GeConfig {
    fn default() -> Self {
        GeConfig {
            sigma: crate::costs::DEFAULT_SIGMA,
            price_tol: 1e-3,
            sd_tol: 1e-3,
            max_outer_iter: 100,
            damping: 0.5,
            ppml: PpmlConfig::default(),
        }
    }
}

impl GeConfig {
    pub fn validate(&self) -> Result<(), GeError> {
        let bad = |m: String| Err(GeError::InvalidConfig(m));
        if !(self.sigma > 1.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must exceed 1, got {}", self.sigma));
        }
        if !(self.price_tol > 0.0 && self.sd_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if self.max_outer_iter == 0 {
            return bad("max_outer_iter must be at least 1".into());
        }
        Ok(())
    }
}

/// The structural system at the evaluation year.
///
/// Cells are every ordered pair of registry countries; the diagonal is
/// included iff the panel carries intra-national flows. Missing flows count
/// as zero.
#[derive(Debug, Clone)]
pub struct GeProblem {
    pub countries: Vec<CountryCode>,
    pub reference: usize,
    pub cells: Vec<(usize, usize)>,
    /// Observed flows per cell.
    pub flows: Vec<f64>,
    /// `ln t^(1-sigma)` per cell.
    pub log_cost: Vec<f64>,
    pub beta: f64,
    pub baseline_fta: Vec<bool>,
    pub counterfactual_fta: Vec<bool>,
    pub year: i32,
}

impl GeProblem {
    pub fn new(
        panel: &IntervalPanel,
        costs: &CostMatrix,
        beta: f64,
        indicators: &ScenarioIndicators,
        reference: CountryCode,
    ) -> Result<Self, GeError> {
        let countries = panel.countries().to_vec();
        if countries.len() < 2 {
            return Err(GeError::TooFewCountries(countries.len()));
        }
        let reference = countries
            .binary_search(&reference)
            .map_err(|_| GeError::UnknownReference(reference))?;
        let diagonal = panel.has_intra_national();
        let mut cells = Vec::new();
        for i in 0..countries.len() {
            for j in 0..countries.len() {
                if i != j || diagonal {
                    cells.push((i, j));
                }
            }
        }
        let pair = |&(i, j): &(usize, usize)| (countries[i], countries[j]);
        let mut flows = vec![0.0; cells.len()];
        for o in panel.cross_section(indicators.year) {
            let i = countries.binary_search(&o.exporter).expect("registry country");
            let j = countries.binary_search(&o.importer).expect("registry country");
            if let Ok(k) = cells.binary_search(&(i, j)) {
                flows[k] = o.flow;
            }
        }
        let log_cost = cells
            .iter()
            .map(|c| costs.log_cost(pair(c)).ok_or(GeError::MissingCost(pair(c))))
            .collect::<Result<Vec<_>, _>>()?;
        let lookup = |m: &std::collections::BTreeMap<Pair, bool>| {
            cells
                .iter()
                .map(|c| m.get(&pair(c)).copied().ok_or(GeError::MissingIndicator(pair(c))))
                .collect::<Result<Vec<_>, _>>()
        };
        let problem = GeProblem {
            baseline_fta: lookup(&indicators.baseline)?,
            counterfactual_fta: lookup(&indicators.counterfactual)?,
            countries,
            reference,
            cells,
            flows,
            log_cost,
            beta,
            year: indicators.year,
        };
        let (y, e) = problem.margins(&problem.flows);
        for (k, c) in problem.countries.iter().enumerate() {
            if !(y[k] > 0.0) {
                return Err(GeError::ZeroMargin(*c, "exports"));
            }
            if !(e[k] > 0.0) {
                return Err(GeError::ZeroMargin(*c, "imports"));
            }
        }
        Ok(problem)
    }

    pub fn n_countries(&self) -> usize {
        self.countries.len()
    }

    pub fn pair(&self, cell: usize) -> Pair {
        let (i, j) = self.cells[cell];
        (self.countries[i], self.countries[j])
    }

    /// Row and column sums of a cell vector.
    pub fn margins(&self, values: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_countries();
        let mut rows = vec![0.0; n];
        let mut cols = vec![0.0; n];
        for (&(i, j), &v) in self.cells.iter().zip(values) {
            rows[i] += v;
            cols[j] += v;
        }
        (rows, cols)
    }

    /// `ln T_ij` under the given agreement indicator.
    pub fn log_trade_cost(&self, fta: &[bool]) -> Vec<f64> {
        self.log_cost
            .iter()
            .zip(fta)
            .map(|(c, &f)| if f { c + self.beta } else { *c })
            .collect()
    }

    /// International exports per country.
    pub fn exports(&self, flows: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_countries()];
        for (&(i, j), &v) in self.cells.iter().zip(flows) {
            if i != j {
                out[i] += v;
            }
        }
        out
    }
}

/// Constrained re-estimation result.
#[derive(Debug, Clone)]
pub struct ConstrainedFit {
    pub fit: PpmlFit,
    pub data: PpmlData,
    /// Exporter effect per country.
    pub exporter_fe: Vec<f64>,
    /// Importer effect per country, zero for the reference.
    pub importer_fe: Vec<f64>,
}

impl ConstrainedFit {
    pub fn flows(&self) -> &[f64] {
        &self.fit.fitted
    }
}

/// PPML of a dependent variable with margins `(output, expenditure)` on
/// exporter and importer effects with the trade costs as offset.
///
/// Only the margins of the dependent variable affect the solution. The
/// observed flows are used when the margins are the observed ones;
/// otherwise `seed` is rebalanced to the requested margins.
pub fn fit_constrained(
    problem: &GeProblem,
    fta: &[bool],
    output: &[f64],
    expenditure: &[f64],
    seed: &[f64],
    cfg: &PpmlConfig,
) -> Result<ConstrainedFit, GeError> {
    let (y0, e0) = problem.margins(&problem.flows);
    let y = if output == y0.as_slice() && expenditure == e0.as_slice() {
        problem.flows.clone()
    } else {
        balance(&problem.cells, seed, output, expenditure, 1e-15, 100_000).0
    };
    let labels: Vec<String> = problem.countries.iter().map(ToString::to_string).collect();
    let data = PpmlData {
        y,
        covariates: Vec::new(),
        fixed_effects: vec![
            FeSpec::new(
                EXPORTER,
                labels.clone(),
                problem.cells.iter().map(|c| c.0 as u32).collect(),
            ),
            FeSpec::new(
                IMPORTER,
                labels,
                problem.cells.iter().map(|c| c.1 as u32).collect(),
            )
            .with_reference(Some(problem.reference as u32)),
        ],
        offset: Some(problem.log_trade_cost(fta)),
        weights: None,
        cluster: None,
    };
    let fit = fit_ppml(&data, cfg)?;
    let values = |dim: usize, name: &'static str| {
        fit.fe[dim]
            .values
            .iter()
            .zip(&problem.countries)
            .map(|(v, c)| v.ok_or(GeError::MissingFe(*c, name)))
            .collect::<Result<Vec<f64>, _>>()
    };
    let exporter_fe = values(0, EXPORTER)?;
    let importer_fe = values(1, IMPORTER)?;
    Ok(ConstrainedFit {
        fit,
        data,
        exporter_fe,
        importer_fe,
    })
}

/// Inward and outward multilateral resistances `(P, Pi)` implied by fixed
/// effects at the given margins, normalized so the reference `P` is one.
pub fn recover_mr(
    exporter_fe: &[f64],
    importer_fe: &[f64],
    output: &[f64],
    expenditure: &[f64],
    reference: usize,
    sigma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let world: f64 = output.iter().sum();
    let chi_r = importer_fe[reference];
    let e_r = expenditure[reference];
    let inv = 1.0 / (sigma - 1.0);
    let imr = importer_fe
        .iter()
        .zip(expenditure)
        .map(|(chi, e)| (inv * (chi - chi_r + (e_r / e).ln())).exp())
        .collect();
    let omr = exporter_fe
        .iter()
        .zip(output)
        .map(|(pi, y)| (inv * (pi + chi_r + (world / (y * e_r)).ln())).exp())
        .collect();
    (imr, omr)
}

/// Resistances of a constrained fit; see [`recover_mr`].
pub fn fit_mr(
    fit: &ConstrainedFit,
    output: &[f64],
    expenditure: &[f64],
    reference: usize,
    sigma: f64,
) -> (Vec<f64>, Vec<f64>) {
    recover_mr(
        &fit.exporter_fe,
        &fit.importer_fe,
        output,
        expenditure,
        reference,
        sigma,
    )
}

/// Structural flows implied by margins, costs and resistances.
pub fn recompose(
    problem: &GeProblem,
    log_trade_cost: &[f64],
    state: &EconomyState,
    sigma: f64,
) -> Vec<f64> {
    let world: f64 = state.output.iter().sum();
    problem
        .cells
        .iter()
        .zip(log_trade_cost)
        .map(|(&(i, j), t)| {
            state.output[i] * state.expenditure[j] / world
                * (t + (sigma - 1.0) * (state.omr[i].ln() + state.imr[j].ln())).exp()
        })
        .collect()
}

/// Largest relative gap between two cell vectors, over positive cells.
pub fn max_relative_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(_, &b)| b > 0.0)
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max)
}

/// Largest relative market-clearing error `|sum_j X_ij - Y_i| / Y_i`.
pub fn market_clearing_error(problem: &GeProblem, flows: &[f64], output: &[f64]) -> f64 {
    let (rows, _) = problem.margins(flows);
    rows.iter()
        .zip(output)
        .map(|(r, y)| ((r - y) / y).abs())
        .fold(0.0, f64::max)
}

/// Per-country equilibrium objects.
#[derive(Debug, Clone, PartialEq)]
pub struct EconomyState {
    pub output: Vec<f64>,
    pub expenditure: Vec<f64>,
    /// Factory-gate price, one at the baseline.
    pub price: Vec<f64>,
    /// Inward multilateral resistance `P_j`.
    pub imr: Vec<f64>,
    /// Outward multilateral resistance `Pi_i`.
    pub omr: Vec<f64>,
    pub world_output: f64,
    /// Fitted flows per cell.
    pub flows: Vec<f64>,
}

fn state_from_fit(
    problem: &GeProblem,
    fit: &ConstrainedFit,
    output: Vec<f64>,
    expenditure: Vec<f64>,
    price: Vec<f64>,
    sigma: f64,
) -> EconomyState {
    let (imr, omr) = fit_mr(fit, &output, &expenditure, problem.reference, sigma);
    EconomyState {
        world_output: output.iter().sum(),
        output,
        expenditure,
        price,
        imr,
        omr,
        flows: fit.flows().to_vec(),
    }
}

/// The baseline: constrained fit under the observed agreements at the
/// observed margins.
pub fn solve_baseline(problem: &GeProblem, cfg: &GeConfig) -> Result<EconomyState, GeError> {
    cfg.validate()?;
    let (y, e) = problem.margins(&problem.flows);
    let fit = fit_constrained(problem, &problem.baseline_fta, &y, &e, &problem.flows, &cfg.ppml)?;
    let n = problem.n_countries();
    Ok(state_from_fit(problem, &fit, y, e, vec![1.0; n], cfg.sigma))
}

/// Conditional equilibrium: counterfactual agreements, margins held at the
/// baseline.
pub fn conditional_ge(
    problem: &GeProblem,
    baseline: &EconomyState,
    cfg: &GeConfig,
) -> Result<EconomyState, GeError> {
    cfg.validate()?;
    let fit = fit_constrained(
        problem,
        &problem.counterfactual_fta,
        &baseline.output,
        &baseline.expenditure,
        &baseline.flows,
        &cfg.ppml,
    )?;
    Ok(state_from_fit(
        problem,
        &fit,
        baseline.output.clone(),
        baseline.expenditure.clone(),
        baseline.price.clone(),
        cfg.sigma,
    ))
}

/// One outer iteration of the full-endowment loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// `max |s|` with `s = p^m - p^(m-1)`.
    pub d: f64,
    /// Sample standard deviation of `s`.
    pub sd: f64,
    /// `max |p^m - 1|`.
    pub max_price_change: f64,
    /// Market-clearing error of this iteration's fit at its own margins.
    pub market_clearing: f64,
    /// Gap between fitted and structurally recomposed flows.
    pub decomposition: f64,
}

pub fn write_trace(out: impl Write, trace: &[TraceRow]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "iteration,d,sd,max_price_change")?;
    for r in trace {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e}",
            r.iteration, r.d, r.sd, r.max_price_change
        )?;
    }
    w.flush()
}

#[derive(Debug, Clone)]
pub struct FullEndowment {
    pub state: EconomyState,
    pub trace: Vec<TraceRow>,
}

impl FullEndowment {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// Sample standard deviation.
fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (v.len() - 1) as f64).sqrt()
}

/// Expenditure with baseline shares of output, rescaled so world spending
/// moves with world output.
fn expenditure_for(baseline: &EconomyState, price: &[f64]) -> Vec<f64> {
    let y_new: f64 = baseline.output.iter().zip(price).map(|(y, p)| y * p).sum();
    let e_new: f64 = baseline.expenditure.iter().zip(price).map(|(e, p)| e * p).sum();
    let y_old: f64 = baseline.output.iter().sum();
    let e_old: f64 = baseline.expenditure.iter().sum();
    let scale = (y_new / y_old) / (e_new / e_old);
    baseline
        .expenditure
        .iter()
        .zip(price)
        .map(|(e, p)| e * p * scale)
        .collect()
}

/// Full-endowment equilibrium: prices, output and expenditure adjust with
/// physical endowments fixed at the baseline.
///
/// Each iteration re-estimates under the counterfactual agreements at the
/// current margins, infers the implied factory-gate prices from the change
/// in exporter effects, takes a damped step, and updates output and
/// expenditure. A final fit at the converged margins gives the reported
/// state.
pub fn full_endowment_ge(
    problem: &GeProblem,
    baseline: &EconomyState,
    baseline_fit: &ConstrainedFit,
    cfg: &GeConfig,
) -> Result<FullEndowment, GeError> {
    cfg.validate()?;
    let n = problem.n_countries();
    let r = problem.reference;
    let log_t = problem.log_trade_cost(&problem.counterfactual_fta);
    let anchor = |fit: &ConstrainedFit, e_r: f64| -> Vec<f64> {
        fit.exporter_fe
            .iter()
            .map(|pi| pi + fit.importer_fe[r] - e_r.ln())
            .collect()
    };
    let base_anchor = anchor(baseline_fit, baseline.expenditure[r]);

    let mut price = vec![1.0; n];
    let mut output = baseline.output.clone();
    let mut expenditure = baseline.expenditure.clone();
    let mut seed = baseline.flows.clone();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut streak = 0;
    loop {
        let iteration = trace.len() + 1;
        let fit = fit_constrained(
            problem,
            &problem.counterfactual_fta,
            &output,
            &expenditure,
            &seed,
            &cfg.ppml,
        )?;
        let state = state_from_fit(
            problem,
            &fit,
            output.clone(),
            expenditure.clone(),
            price.clone(),
            cfg.sigma,
        );
        let market_clearing = market_clearing_error(problem, fit.flows(), &output);
        let decomposition = max_relative_gap(&recompose(problem, &log_t, &state, cfg.sigma), fit.flows());

        let implied: Vec<f64> = anchor(&fit, expenditure[r])
            .iter()
            .zip(&base_anchor)
            .map(|(a, b)| ((a - b) / (1.0 - cfg.sigma)).exp())
            .collect();
        let next: Vec<f64> = price
            .iter()
            .zip(&implied)
            .map(|(p, q)| p + cfg.damping * (q - p))
            .collect();
        let step: Vec<f64> = next.iter().zip(&price).map(|(a, b)| a - b).collect();
        let d = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let sd = sample_sd(&step);
        price = next;
        output = baseline.output.iter().zip(&price).map(|(q, p)| p * q).collect();
        expenditure = expenditure_for(baseline, &price);
        seed = fit.fit.fitted;
        trace.push(TraceRow {
            iteration,
            d,
            sd,
            max_price_change: price.iter().fold(0.0f64, |m, p| m.max((p - 1.0).abs())),
            market_clearing,
            decomposition,
        });
        log::debug!("full-endowment iteration {iteration}: d = {d:e}, sd = {sd:e}");

        if d <= cfg.price_tol && sd <= cfg.sd_tol {
            break;
        }
        if iteration > 1 && d > trace[iteration - 2].d {
            streak += 1;
        } else {
            streak = 0;
        }
        if streak >= DIVERGENCE_STREAK {
            return Err(GeError::Divergence { iteration, d, trace });
        }
        if iteration >= cfg.max_outer_iter {
            return Err(GeError::NonConvergence {
                iterations: iteration,
                d,
                sd,
                trace,
            });
        }
    }
    let fit = fit_constrained(
        problem,
        &problem.counterfactual_fta,
        &output,
        &expenditure,
        &seed,
        &cfg.ppml,
    )?;
    let state = state_from_fit(problem, &fit, output, expenditure, price, cfg.sigma);
    Ok(FullEndowment { state, trace })
}

/// Per-country percentage changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeRow {
    pub country: CountryCode,
    pub pct_trade_cond: f64,
    pub pct_trade_full: f64,
    pub pct_rgdp: f64,
    pub pct_imr: f64,
    pub pct_omr: f64,
    pub pct_prices: f64,
}

impl OutcomeRow {
    pub fn values(&self) -> [f64; 6] {
        [
            self.pct_trade_cond,
            self.pct_trade_full,
            self.pct_rgdp,
            self.pct_imr,
            self.pct_omr,
            self.pct_prices,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct GeOutcome {
    pub rows: Vec<OutcomeRow>,
    pub trace: Vec<TraceRow>,
    pub sigma: f64,
    pub baseline: EconomyState,
    pub conditional: EconomyState,
    pub full: EconomyState,
}

impl GeOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn final_d(&self) -> f64 {
        self.trace.last().map_or(0.0, |r| r.d)
    }

    pub fn final_sd(&self) -> f64 {
        self.trace.last().map_or(0.0, |r| r.sd)
    }

    pub fn row(&self, country: CountryCode) -> Option<&OutcomeRow> {
        self.rows.iter().find(|r| r.country == country)
    }
}

fn pct(new: f64, old: f64) -> f64 {
    100.0 * (new / old - 1.0)
}

/// Baseline, conditional and full-endowment solutions with the reported
/// percentage changes.
pub fn simulate(problem: &GeProblem, cfg: &GeConfig) -> Result<GeOutcome, GeError> {
    cfg.validate()?;
    let (y, e) = problem.margins(&problem.flows);
    let base_fit = fit_constrained(problem, &problem.baseline_fta, &y, &e, &problem.flows, &cfg.ppml)?;
    let n = problem.n_countries();
    let baseline = state_from_fit(problem, &base_fit, y, e, vec![1.0; n], cfg.sigma);
    let conditional = conditional_ge(problem, &baseline, cfg)?;
    let full = full_endowment_ge(problem, &baseline, &base_fit, cfg)?;

    let x_b = problem.exports(&baseline.flows);
    let x_c = problem.exports(&conditional.flows);
    let x_f = problem.exports(&full.state.flows);
    let f = &full.state;
    let rows = (0..n)
        .map(|k| OutcomeRow {
            country: problem.countries[k],
            pct_trade_cond: pct(x_c[k], x_b[k]),
            pct_trade_full: pct(x_f[k], x_b[k]),
            pct_rgdp: pct(
                f.output[k] / f.imr[k],
                baseline.output[k] / baseline.imr[k],
            ),
            pct_imr: pct(f.imr[k], baseline.imr[k]),
            pct_omr: pct(f.omr[k], baseline.omr[k]),
            pct_prices: pct(f.price[k], baseline.price[k]),
        })
        .collect();
    Ok(GeOutcome {
        rows,
        trace: full.trace,
        sigma: cfg.sigma,
        baseline,
        conditional,
        full: full.state,
    })
}
