//! Bilateral trade costs: three-way fixed-effects baseline fit, pair-effect
//! costs where identified, and a gravity regression that predicts the rest.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{CountryCode, GravityCovariates, IntervalPanel, Pair, COVARIATE_NAMES};
use crate::ppml::{fit_ppml, Covariate, FeSpec, PpmlConfig, PpmlData, PpmlError, PpmlFit};

pub const FTA_COEF: &str = "fta";
pub const EXPORTER_YEAR: &str = "exporter_year";
pub const IMPORTER_YEAR: &str = "importer_year";
pub const PAIR: &str = "pair";
pub const EXPORTER: &str = "exporter";
pub const IMPORTER: &str = "importer";

/// Display labels of the second-stage covariates, in column order.
pub const COVARIATE_LABELS: [&str; 4] = ["Distance", "Contiguity", "Language", "Colony"];

/// Trade elasticity used when none is configured.
pub const DEFAULT_SIGMA: f64 = 7.0;

#[derive(Debug, Error)]
pub enum CostError {
    #[error(transparent)]
    Ppml(#[from] PpmlError),
    #[error("fit has no `{0}` fixed-effect dimension")]
    MissingFe(&'static str),
    #[error("no gravity covariates for pair {}->{}", .0.0, .0.1)]
    MissingCovariates(Pair),
    #[error("country {0} has no second-stage fixed effect; its costs cannot be predicted")]
    CannotPredict(CountryCode),
    #[error("reference country {0} is not in the panel")]
    UnknownReference(CountryCode),
    #[error("panel contains no observations")]
    EmptyPanel,
    #[error("cost file, line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid cost matrix: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Stage-1 fit: PPML of flows on the agreement indicator with
/// exporter-year, importer-year and pair fixed effects.
#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub fit: PpmlFit,
    /// Pair key of each level of the pair dimension.
    pub pairs: Vec<Pair>,
    pub reference: CountryCode,
}

impl BaselineFit {
    pub fn beta_fta(&self) -> f64 {
        self.fit.coef(FTA_COEF).expect("baseline fit has an fta coefficient")
    }

    pub fn se_fta(&self) -> f64 {
        self.fit.std_error(FTA_COEF).unwrap_or(f64::NAN)
    }
}

/// Assembles the stage-1 estimation problem. Clusters are ordered pairs.
pub fn stage1_data(
    panel: &IntervalPanel,
    reference: CountryCode,
) -> Result<(PpmlData, Vec<Pair>), CostError> {
    if !panel.has_country(reference) {
        return Err(CostError::UnknownReference(reference));
    }
    let obs = panel.observations();
    if obs.is_empty() {
        return Err(CostError::EmptyPanel);
    }
    let last_year = *panel.years().last().expect("nonempty panel has years");
    let exp_keys: Vec<(CountryCode, i32)> = obs.iter().map(|o| (o.exporter, o.year)).collect();
    let imp_keys: Vec<(CountryCode, i32)> = obs.iter().map(|o| (o.importer, o.year)).collect();
    let pair_keys: Vec<Pair> = obs.iter().map(|o| o.pair()).collect();

    let label_cy = |k: &(CountryCode, i32)| format!("{}:{}", k.0, k.1);
    let (exp_fe, _) = FeSpec::from_keys(EXPORTER_YEAR, &labelled(&exp_keys, label_cy));
    let (imp_fe, imp_levels) = FeSpec::from_keys(IMPORTER_YEAR, &labelled(&imp_keys, label_cy));
    let (pair_fe, pair_levels) = FeSpec::from_keys(PAIR, &labelled(&pair_keys, pair_label));
    let imp_ref = imp_levels
        .iter()
        .position(|l| l.key == (reference, last_year))
        .map(|p| p as u32);
    let pair_ref = pair_levels
        .iter()
        .position(|l| l.key == (reference, reference))
        .or_else(|| pair_levels.iter().position(|l| l.key.0 == reference))
        .map(|p| p as u32);

    let cluster = pair_fe.index.clone();
    let data = PpmlData {
        y: obs.iter().map(|o| o.flow).collect(),
        covariates: vec![Covariate::new(
            FTA_COEF,
            obs.iter().map(|o| f64::from(u8::from(o.fta))).collect(),
        )],
        fixed_effects: vec![
            exp_fe,
            imp_fe.with_reference(imp_ref),
            pair_fe.with_reference(pair_ref),
        ],
        offset: None,
        weights: None,
        cluster: Some(cluster),
    };
    Ok((data, pair_levels.into_iter().map(|l| l.key).collect()))
}

/// Key with a display label, ordered by key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Labelled<K> {
    key: K,
    label: String,
}

impl<K> std::fmt::Display for Labelled<K> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label)
    }
}

fn labelled<K: Clone>(keys: &[K], label: impl Fn(&K) -> String) -> Vec<Labelled<K>> {
    keys.iter()
        .map(|k| Labelled {
            key: k.clone(),
            label: label(k),
        })
        .collect()
}

pub fn pair_label(p: &Pair) -> String {
    format!("{}->{}", p.0, p.1)
}

/// Stage 1: estimates the agreement effect and the pair fixed effects.
pub fn fit_baseline(
    panel: &IntervalPanel,
    reference: CountryCode,
    cfg: &PpmlConfig,
) -> Result<BaselineFit, CostError> {
    let (data, pairs) = stage1_data(panel, reference)?;
    let fit = fit_ppml(&data, cfg)?;
    Ok(BaselineFit {
        fit,
        pairs,
        reference,
    })
}

/// `exp(mu_ij)` for every identified pair. Pairs dropped by separation or
/// absent from the panel are not in the result.
pub fn costs_from_pair_fe(baseline: &BaselineFit) -> Result<BTreeMap<Pair, f64>, CostError> {
    let dim = baseline.fit.fe_dim(PAIR).ok_or(CostError::MissingFe(PAIR))?;
    Ok(baseline
        .pairs
        .iter()
        .zip(&dim.values)
        .filter_map(|(&p, v)| v.map(|v| (p, v.exp())))
        .collect())
}

/// Observation weights for the second stage.
#[derive(Debug, Clone, Default)]
pub enum Stage2Weights {
    #[default]
    Uniform,
    /// Per-pair weights, typically observed trade totals.
    PerPair(BTreeMap<Pair, f64>),
}

/// Observed trade per pair summed over the panel years.
pub fn pair_trade_volume(panel: &IntervalPanel) -> BTreeMap<Pair, f64> {
    let mut out = BTreeMap::new();
    for o in panel.observations() {
        *out.entry(o.pair()).or_insert(0.0) += o.flow;
    }
    out
}

/// Stage-2 fit: PPML of pair cost levels on gravity covariates with
/// exporter and importer fixed effects.
#[derive(Debug, Clone)]
pub struct Stage2Fit {
    pub fit: PpmlFit,
    exporter_fe: BTreeMap<CountryCode, f64>,
    importer_fe: BTreeMap<CountryCode, f64>,
}

impl Stage2Fit {
    /// Predicted `t^(1-sigma)` for a pair: `exp(x'b + pi_i + chi_j)`.
    pub fn predict(&self, cov: &GravityCovariates) -> Result<f64, CostError> {
        let pi = self
            .exporter_fe
            .get(&cov.exporter)
            .ok_or(CostError::CannotPredict(cov.exporter))?;
        let chi = self
            .importer_fe
            .get(&cov.importer)
            .ok_or(CostError::CannotPredict(cov.importer))?;
        let xb: f64 = cov
            .values()
            .iter()
            .zip(&self.fit.beta)
            .map(|(x, b)| x * b)
            .sum();
        Ok((xb + pi + chi).exp())
    }

    pub fn coefficients(&self) -> impl Iterator<Item = (&str, f64)> {
        self.fit
            .coef_names
            .iter()
            .map(String::as_str)
            .zip(self.fit.beta.iter().copied())
    }
}

/// Stage 2: regresses identified pair cost levels on `log_dist, cntg, lang,
/// clny` with exporter and importer fixed effects. Errors are clustered by
/// unordered country pair.
pub fn fit_stage2(
    pair_costs: &BTreeMap<Pair, f64>,
    covariates: &BTreeMap<Pair, GravityCovariates>,
    weights: &Stage2Weights,
    reference: CountryCode,
    cfg: &PpmlConfig,
) -> Result<Stage2Fit, CostError> {
    let mut rows = Vec::with_capacity(pair_costs.len());
    for (&pair, &cost) in pair_costs {
        let cov = covariates
            .get(&pair)
            .ok_or(CostError::MissingCovariates(pair))?;
        rows.push((pair, cost, cov));
    }
    let exp_keys: Vec<CountryCode> = rows.iter().map(|r| r.0 .0).collect();
    let imp_keys: Vec<CountryCode> = rows.iter().map(|r| r.0 .1).collect();
    let (exp_fe, exporters) = FeSpec::from_keys(EXPORTER, &exp_keys);
    let (imp_fe, importers) = FeSpec::from_keys(IMPORTER, &imp_keys);
    let imp_ref = importers.iter().position(|&c| c == reference).map(|p| p as u32);
    let covs: Vec<Covariate> = COVARIATE_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| Covariate::new(*name, rows.iter().map(|r| r.2.values()[k]).collect()))
        .collect();
    let unordered: Vec<Pair> = rows
        .iter()
        .map(|r| (r.0 .0.min(r.0 .1), r.0 .0.max(r.0 .1)))
        .collect();
    let (cluster_fe, _) = FeSpec::from_keys("cluster", &labelled(&unordered, pair_label));
    let weights = match weights {
        Stage2Weights::Uniform => None,
        Stage2Weights::PerPair(w) => Some(
            rows.iter()
                .map(|r| w.get(&r.0).copied().unwrap_or(0.0))
                .map(|v| if v > 0.0 { v } else { f64::MIN_POSITIVE })
                .collect(),
        ),
    };
    let data = PpmlData {
        y: rows.iter().map(|r| r.1).collect(),
        covariates: covs,
        fixed_effects: vec![exp_fe, imp_fe.with_reference(imp_ref)],
        offset: None,
        weights,
        cluster: Some(cluster_fe.index),
    };
    let fit = fit_ppml(&data, cfg)?;
    let collect = |name: &str, keys: &[CountryCode]| {
        let dim = fit.fe_dim(name).expect("stage-2 dimension");
        keys.iter()
            .zip(&dim.values)
            .filter_map(|(&c, v)| v.map(|v| (c, v)))
            .collect::<BTreeMap<_, _>>()
    };
    let exporter_fe = collect(EXPORTER, &exporters);
    let importer_fe = collect(IMPORTER, &importers);
    Ok(Stage2Fit {
        fit,
        exporter_fe,
        importer_fe,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostSource {
    Estimated,
    Predicted,
}

impl CostSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            CostSource::Estimated => "estimated",
            CostSource::Predicted => "predicted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostCell {
    /// `t_ij^(1-sigma)`, strictly positive.
    pub value: f64,
    pub source: CostSource,
}

/// Complete bilateral matrix of `t^(1-sigma)` values.
///
/// Covers every ordered pair of distinct registry countries, plus the
/// diagonal when intra-national trade is modelled.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    countries: Vec<CountryCode>,
    cells: BTreeMap<Pair, CostCell>,
    include_diagonal: bool,
    sigma: f64,
}

impl CostMatrix {
    pub fn new(
        countries: Vec<CountryCode>,
        cells: BTreeMap<Pair, CostCell>,
        include_diagonal: bool,
        sigma: f64,
    ) -> Result<Self, CostError> {
        if !(sigma > 1.0 && sigma.is_finite()) {
            return Err(CostError::Invalid(format!("sigma must exceed 1, got {sigma}")));
        }
        let mut countries = countries;
        countries.sort();
        countries.dedup();
        for p in registry_pairs(&countries, include_diagonal) {
            match cells.get(&p) {
                None => {
                    return Err(CostError::Invalid(format!("missing cell {}", pair_label(&p))))
                }
                Some(c) if !(c.value > 0.0 && c.value.is_finite()) => {
                    return Err(CostError::Invalid(format!(
                        "cell {} has non-positive value {}",
                        pair_label(&p),
                        c.value
                    )))
                }
                _ => {}
            }
        }
        let extra = cells
            .keys()
            .find(|(a, b)| countries.binary_search(a).is_err() || countries.binary_search(b).is_err()
                || (a == b && !include_diagonal));
        if let Some(p) = extra {
            return Err(CostError::Invalid(format!("unexpected cell {}", pair_label(p))));
        }
        Ok(CostMatrix {
            countries,
            cells,
            include_diagonal,
            sigma,
        })
    }

    pub fn countries(&self) -> &[CountryCode] {
        &self.countries
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn include_diagonal(&self) -> bool {
        self.include_diagonal
    }

    pub fn get(&self, pair: Pair) -> Option<&CostCell> {
        self.cells.get(&pair)
    }

    /// `ln t_ij^(1-sigma)`.
    pub fn log_cost(&self, pair: Pair) -> Option<f64> {
        self.cells.get(&pair).map(|c| c.value.ln())
    }

    pub fn cells(&self) -> &BTreeMap<Pair, CostCell> {
        &self.cells
    }

    /// Writes `exporter,importer,cost,source` rows.
    pub fn write_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "exporter,importer,cost,source")?;
        for ((a, b), c) in &self.cells {
            writeln!(w, "{a},{b},{:.16e},{}", c.value, c.source.as_str())?;
        }
        w.flush()
    }

    /// Reads a cost file, e.g. an externally calibrated cost vector.
    ///
    /// The registry is the set of countries in the file; the diagonal is
    /// included iff any diagonal cell is present.
    pub fn read_csv(input: impl Read, sigma: f64) -> Result<Self, CostError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let parse_err = |line: u64, message: String| CostError::Parse { line, message };
        let header = reader
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        if header.iter().ne(["exporter", "importer", "cost", "source"]) {
            return Err(parse_err(1, "expected header `exporter,importer,cost,source`".into()));
        }
        let mut cells = BTreeMap::new();
        let mut countries = BTreeSet::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                parse_err(e.position().map_or(0, |p| p.line()), e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 4 {
                return Err(parse_err(line, format!("expected 4 fields, found {}", rec.len())));
            }
            let code = |s: &str| {
                s.parse::<CountryCode>()
                    .map_err(|e| parse_err(line, e.to_string()))
            };
            let (a, b) = (code(&rec[0])?, code(&rec[1])?);
            let value: f64 = rec[2]
                .parse()
                .map_err(|_| parse_err(line, format!("invalid cost `{}`", &rec[2])))?;
            if !(value > 0.0 && value.is_finite()) {
                return Err(parse_err(line, format!("cost must be positive, got {value}")));
            }
            let source = match &rec[3] {
                "estimated" => CostSource::Estimated,
                "predicted" => CostSource::Predicted,
                other => return Err(parse_err(line, format!("unknown source `{other}`"))),
            };
            if cells.insert((a, b), CostCell { value, source }).is_some() {
                return Err(parse_err(line, format!("duplicate pair {a}->{b}")));
            }
            countries.insert(a);
            countries.insert(b);
        }
        let diag = cells.keys().any(|(a, b)| a == b);
        CostMatrix::new(countries.into_iter().collect(), cells, diag, sigma)
    }
}

/// Every ordered pair of registry countries, with or without the diagonal.
pub fn registry_pairs(countries: &[CountryCode], include_diagonal: bool) -> Vec<Pair> {
    countries
        .iter()
        .flat_map(|&a| countries.iter().map(move |&b| (a, b)))
        .filter(|(a, b)| a != b || include_diagonal)
        .collect()
}

/// Keeps estimated cells verbatim and fills every other registry pair with
/// the stage-2 prediction.
pub fn complete_costs(
    pair_costs: &BTreeMap<Pair, f64>,
    stage2: &Stage2Fit,
    countries: &[CountryCode],
    covariates: &BTreeMap<Pair, GravityCovariates>,
    include_diagonal: bool,
    sigma: f64,
) -> Result<CostMatrix, CostError> {
    let mut cells = BTreeMap::new();
    for pair in registry_pairs(countries, include_diagonal) {
        let cell = match pair_costs.get(&pair) {
            Some(&value) => CostCell {
                value,
                source: CostSource::Estimated,
            },
            None => {
                let cov = covariates
                    .get(&pair)
                    .ok_or(CostError::MissingCovariates(pair))?;
                CostCell {
                    value: stage2.predict(cov)?,
                    source: CostSource::Predicted,
                }
            }
        };
        cells.insert(pair, cell);
    }
    CostMatrix::new(countries.to_vec(), cells, include_diagonal, sigma)
}
