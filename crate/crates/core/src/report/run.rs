//! Whole-command pipelines writing run directories.

use std::fs::File;
use std::path::Path;

use thiserror::Error;

use crate::costs::{CostError, COVARIATE_LABELS};
use crate::ge::{simulate, write_trace, GeConfig, GeError, GeOutcome, GeProblem};
use crate::panel::{IntervalPanel, PanelError};
use crate::ppml::{write_summary, SummaryRow};
use crate::scenario::{apply_scenario, ScenarioError, ScenarioFile};

use super::{
    estimate_baseline, write_economy, write_ge_flows, write_outcome, write_outcome_display,
    BaselineState, EstimateOptions, ReportError, RunManifest,
};

pub const STAGE1_SUMMARY: &str = "stage1_summary.csv";
pub const STAGE2_SUMMARY: &str = "stage2_summary.csv";
pub const STATE_FILE: &str = "baseline_state.json";
pub const COSTS_FILE: &str = "costs.csv";
pub const OUTCOME_FILE: &str = "outcome.csv";
pub const OUTCOME_DISPLAY_FILE: &str = "outcome_display.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const ECONOMY_FILE: &str = "economy.csv";
pub const GE_FLOWS_FILE: &str = "flows_ge.csv";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Ge(#[from] GeError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

fn create(dir: &Path, name: &str) -> Result<File, ReportError> {
    let path = dir.join(name);
    File::create(&path).map_err(|e| ReportError::io(&path, e))
}

fn io_err(dir: &Path, name: &str) -> impl Fn(std::io::Error) -> ReportError {
    let path = dir.join(name);
    move |e| ReportError::io(&path, e)
}

/// Human-readable coefficient lines of an estimation run.
#[derive(Debug, Clone)]
pub struct EstimateSummary {
    pub stage1: Vec<SummaryRow>,
    pub stage2: Vec<SummaryRow>,
    pub state: BaselineState,
}

/// Estimates the baseline and writes summaries, costs and the serialized
/// state into `dir`.
pub fn estimate_to_dir(
    panel: &IntervalPanel,
    opts: &EstimateOptions,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<EstimateSummary, RunError> {
    std::fs::create_dir_all(dir).map_err(|e| ReportError::io(dir, e))?;
    let (state, base, stage2) = estimate_baseline(panel, opts)?;

    let stage1_rows = vec![SummaryRow {
        label: "fta".into(),
        estimate: state.beta_fta,
        std_error: state.se_fta,
    }];
    write_summary(create(dir, STAGE1_SUMMARY)?, &stage1_rows, &base.fit)
        .map_err(io_err(dir, STAGE1_SUMMARY))?;
    let stage2_rows: Vec<SummaryRow> = state
        .stage2
        .iter()
        .map(|c| SummaryRow {
            label: c.term.clone(),
            estimate: c.estimate,
            std_error: c.std_error,
        })
        .collect();
    write_summary(create(dir, STAGE2_SUMMARY)?, &stage2_rows, &stage2.fit)
        .map_err(io_err(dir, STAGE2_SUMMARY))?;
    state
        .cost_matrix(state.sigma)?
        .write_csv(create(dir, COSTS_FILE)?)
        .map_err(io_err(dir, COSTS_FILE))?;
    state.write(&dir.join(STATE_FILE))?;

    manifest.set("reference", state.reference.to_string());
    manifest.set("sigma", state.sigma);
    manifest.set("volume_weights", opts.volume_weights);
    manifest.set("variance", opts.ppml.variance.to_string());
    manifest.set("years", state.years.clone());
    for name in [STAGE1_SUMMARY, STAGE2_SUMMARY, COSTS_FILE, STATE_FILE] {
        manifest.add_output(dir, name)?;
    }
    manifest.write(dir)?;

    let display = |rows: &[SummaryRow], labels: &[&str]| {
        rows.iter()
            .zip(labels)
            .map(|(r, l)| SummaryRow {
                label: (*l).into(),
                ..r.clone()
            })
            .collect()
    };
    Ok(EstimateSummary {
        stage1: display(&stage1_rows, &["FTA"]),
        stage2: display(&stage2_rows, &COVARIATE_LABELS),
        state,
    })
}

/// Command-line overrides of scenario-file settings.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeOverrides {
    pub sigma: Option<f64>,
    pub price_tol: Option<f64>,
    pub sd_tol: Option<f64>,
    pub max_outer_iter: Option<usize>,
    pub damping: Option<f64>,
}

/// Effective solver settings: flags, then the scenario file, then the
/// elasticity stored with the baseline and the solver defaults.
pub fn resolve_config(state: &BaselineState, file: &ScenarioFile, o: &GeOverrides) -> GeConfig {
    let d = GeConfig::default();
    let t = &file.tolerances;
    GeConfig {
        sigma: o.sigma.or(file.sigma).unwrap_or(state.sigma),
        price_tol: o.price_tol.or(t.price_tol).unwrap_or(d.price_tol),
        sd_tol: o.sd_tol.or(t.sd_tol).unwrap_or(d.sd_tol),
        max_outer_iter: o.max_outer_iter.or(t.max_outer_iter).unwrap_or(d.max_outer_iter),
        damping: o.damping.or(t.damping).unwrap_or(d.damping),
        ppml: d.ppml,
    }
}

/// Solves a scenario against a stored baseline and writes the run
/// directory. The trace is written even when the solver fails.
pub fn simulate_to_dir(
    state: &BaselineState,
    file: &ScenarioFile,
    cfg: &GeConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(GeProblem, GeOutcome), RunError> {
    std::fs::create_dir_all(dir).map_err(|e| ReportError::io(dir, e))?;
    cfg.validate()?;
    let scenario = &file.scenario;
    manifest.set("scenario_name", scenario.name.clone());
    manifest.set("evaluation_year", scenario.evaluation_year);
    manifest.set("reference", scenario.reference_country.to_string());
    manifest.set("sigma", cfg.sigma);
    manifest.set("price_tol", cfg.price_tol);
    manifest.set("sd_tol", cfg.sd_tol);
    manifest.set("max_outer_iter", cfg.max_outer_iter);
    manifest.set("damping", cfg.damping);
    manifest.set("beta_fta", state.beta_fta);

    let panel = state.panel()?;
    let costs = state.cost_matrix(cfg.sigma)?;
    let indicators = apply_scenario(&panel, scenario)?;
    let problem = GeProblem::new(
        &panel,
        &costs,
        state.beta_fta,
        &indicators,
        scenario.reference_country,
    )?;
    let outcome = match simulate(&problem, cfg) {
        Ok(o) => o,
        Err(e) => {
            if let Some(trace) = e.trace() {
                write_trace(create(dir, TRACE_FILE)?, trace).map_err(io_err(dir, TRACE_FILE))?;
                manifest.add_output(dir, TRACE_FILE)?;
                manifest.set("status", "not converged");
                manifest.write(dir)?;
            }
            return Err(e.into());
        }
    };
    write_outcome(create(dir, OUTCOME_FILE)?, &outcome.rows).map_err(io_err(dir, OUTCOME_FILE))?;
    write_outcome_display(create(dir, OUTCOME_DISPLAY_FILE)?, &outcome.rows)
        .map_err(io_err(dir, OUTCOME_DISPLAY_FILE))?;
    write_trace(create(dir, TRACE_FILE)?, &outcome.trace).map_err(io_err(dir, TRACE_FILE))?;
    write_economy(create(dir, ECONOMY_FILE)?, &problem, &outcome).map_err(io_err(dir, ECONOMY_FILE))?;
    write_ge_flows(create(dir, GE_FLOWS_FILE)?, &problem, &outcome)
        .map_err(io_err(dir, GE_FLOWS_FILE))?;
    manifest.set("status", "converged");
    manifest.set("iterations", outcome.iterations());
    for name in [
        OUTCOME_FILE,
        OUTCOME_DISPLAY_FILE,
        TRACE_FILE,
        ECONOMY_FILE,
        GE_FLOWS_FILE,
    ] {
        manifest.add_output(dir, name)?;
    }
    manifest.write(dir)?;
    Ok((problem, outcome))
}
