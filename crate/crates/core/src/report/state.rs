//! Serialized baseline: everything a simulation needs, so counterfactual
//! runs do not re-read or re-estimate the panel.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costs::{
    complete_costs, costs_from_pair_fe, fit_baseline, fit_stage2, pair_trade_volume, BaselineFit,
    CostCell, CostError, CostMatrix, CostSource, Stage2Fit, Stage2Weights,
};
use crate::panel::{CountryCode, GravityCovariates, IntervalPanel, TradeObservation};
use crate::ppml::PpmlConfig;

use super::ReportError;

const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRecord {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub exporter: CountryCode,
    pub importer: CountryCode,
    pub cost: f64,
    pub source: CostSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub version: u32,
    pub reference: CountryCode,
    pub sigma: f64,
    pub years: Vec<i32>,
    pub countries: Vec<CountryCode>,
    pub beta_fta: f64,
    pub se_fta: f64,
    pub stage2: Vec<CoefficientRecord>,
    pub include_diagonal: bool,
    pub costs: Vec<CostRecord>,
    pub observations: Vec<TradeObservation>,
    pub covariates: Vec<GravityCovariates>,
    pub fta: Vec<(i32, CountryCode, CountryCode)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOptions {
    pub reference: CountryCode,
    pub sigma: f64,
    /// Weight second-stage observations by observed pair trade.
    pub volume_weights: bool,
    pub ppml: PpmlConfig,
}

/// Runs both estimation stages and completes the cost matrix.
pub fn estimate_baseline(
    panel: &IntervalPanel,
    opts: &EstimateOptions,
) -> Result<(BaselineState, BaselineFit, Stage2Fit), CostError> {
    let base = fit_baseline(panel, opts.reference, &opts.ppml)?;
    let pair_costs = costs_from_pair_fe(&base)?;
    let weights = if opts.volume_weights {
        Stage2Weights::PerPair(pair_trade_volume(panel))
    } else {
        Stage2Weights::Uniform
    };
    let stage2 = fit_stage2(&pair_costs, panel.covariates(), &weights, opts.reference, &opts.ppml)?;
    let countries = panel.countries();
    let diagonal = panel.has_intra_national()
        || countries.iter().all(|&c| panel.covariate((c, c)).is_some());
    let matrix = complete_costs(
        &pair_costs,
        &stage2,
        countries,
        panel.covariates(),
        diagonal,
        opts.sigma,
    )?;
    let state = BaselineState {
        version: STATE_VERSION,
        reference: opts.reference,
        sigma: opts.sigma,
        years: panel.years().to_vec(),
        countries: countries.to_vec(),
        beta_fta: base.beta_fta(),
        se_fta: base.se_fta(),
        stage2: stage2
            .fit
            .coef_names
            .iter()
            .zip(&stage2.fit.beta)
            .zip(&stage2.fit.std_errors)
            .map(|((t, &b), &s)| CoefficientRecord {
                term: t.clone(),
                estimate: b,
                std_error: s,
            })
            .collect(),
        include_diagonal: diagonal,
        costs: Vec::new(),
        observations: panel.observations().to_vec(),
        covariates: panel.covariates().values().copied().collect(),
        fta: panel.fta_rows().collect(),
    }
    .with_costs(&matrix);
    Ok((state, base, stage2))
}

impl BaselineState {
    /// Replaces the cost matrix, e.g. with externally calibrated costs.
    pub fn with_costs(mut self, matrix: &CostMatrix) -> Self {
        self.costs = matrix
            .cells()
            .iter()
            .map(|(&(a, b), c)| CostRecord {
                exporter: a,
                importer: b,
                cost: c.value,
                source: c.source,
            })
            .collect();
        self.include_diagonal = matrix.include_diagonal();
        self.sigma = matrix.sigma();
        self
    }

    pub fn panel(&self) -> Result<IntervalPanel, ReportError> {
        IntervalPanel::new(
            self.countries.clone(),
            self.observations.clone(),
            self.covariates.clone(),
            self.fta.clone(),
        )
        .map_err(|e| ReportError::Inconsistent(e.to_string()))
    }

    /// Cost matrix with the given elasticity.
    pub fn cost_matrix(&self, sigma: f64) -> Result<CostMatrix, ReportError> {
        let cells: BTreeMap<_, _> = self
            .costs
            .iter()
            .map(|r| {
                (
                    (r.exporter, r.importer),
                    CostCell {
                        value: r.cost,
                        source: r.source,
                    },
                )
            })
            .collect();
        CostMatrix::new(self.countries.clone(), cells, self.include_diagonal, sigma)
            .map_err(|e| ReportError::Inconsistent(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), ReportError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| ReportError::Json {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| ReportError::io(path, e))
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self, ReportError> {
        let state: BaselineState = serde_json::from_str(text).map_err(|e| ReportError::Json {
            path: path.into(),
            message: e.to_string(),
        })?;
        if state.version != STATE_VERSION {
            return Err(ReportError::Inconsistent(format!(
                "unsupported state version {}",
                state.version
            )));
        }
        Ok(state)
    }

    pub fn read(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReportError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}
