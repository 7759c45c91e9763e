//! Counterfactual agreement edits: removals of agreements in force and
//! accessions to new ones.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{CountryCode, IntervalPanel, Pair};

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("edit {0}-{1} pairs a country with itself")]
    SelfPair(CountryCode, CountryCode),
    #[error("pair {0}-{1} is edited more than once")]
    DuplicatePair(CountryCode, CountryCode),
    #[error("country {0} is not in the panel registry")]
    UnknownCountry(CountryCode),
    #[error("evaluation year {0} is not in the panel")]
    MissingYear(i32),
    #[error("member list is empty")]
    NoMembers,
    #[error("{0} is already a member")]
    AlreadyMember(CountryCode),
    #[error("scenario file: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditAction {
    Drop,
    Add,
}

/// Edit of the agreement indicator for both directions of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edit {
    pub a: CountryCode,
    pub b: CountryCode,
    pub action: EditAction,
}

impl Edit {
    fn unordered(&self) -> Pair {
        (self.a.min(self.b), self.a.max(self.b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub edits: Vec<Edit>,
    pub evaluation_year: i32,
    pub reference_country: CountryCode,
}

impl Scenario {
    /// Validates the edit list.
    pub fn new(
        name: impl Into<String>,
        edits: Vec<Edit>,
        evaluation_year: i32,
        reference_country: CountryCode,
    ) -> Result<Self, ScenarioError> {
        let mut seen = BTreeSet::new();
        for e in &edits {
            if e.a == e.b {
                return Err(ScenarioError::SelfPair(e.a, e.b));
            }
            let key = e.unordered();
            if !seen.insert(key) {
                return Err(ScenarioError::DuplicatePair(key.0, key.1));
            }
        }
        Ok(Scenario {
            name: name.into(),
            edits,
            evaluation_year,
            reference_country,
        })
    }

    /// A scenario with no edits.
    pub fn identity(evaluation_year: i32, reference_country: CountryCode) -> Self {
        Scenario {
            name: "identity".into(),
            edits: Vec::new(),
            evaluation_year,
            reference_country,
        }
    }
}

/// Baseline and counterfactual agreement indicators at the evaluation year
/// for every ordered pair of registry countries.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioIndicators {
    pub year: i32,
    pub baseline: BTreeMap<Pair, bool>,
    pub counterfactual: BTreeMap<Pair, bool>,
    /// Directed cells assigned by an edit, in edit order.
    pub touched: Vec<Pair>,
}

impl ScenarioIndicators {
    pub fn is_identity(&self) -> bool {
        self.baseline == self.counterfactual
    }

    pub fn changed(&self) -> impl Iterator<Item = Pair> + '_ {
        self.baseline
            .iter()
            .filter(|(p, v)| self.counterfactual[p] != **v)
            .map(|(p, _)| *p)
    }
}

pub fn apply_scenario(
    panel: &IntervalPanel,
    scenario: &Scenario,
) -> Result<ScenarioIndicators, ScenarioError> {
    let year = scenario.evaluation_year;
    if panel.years().binary_search(&year).is_err() {
        return Err(ScenarioError::MissingYear(year));
    }
    for c in std::iter::once(scenario.reference_country)
        .chain(scenario.edits.iter().flat_map(|e| [e.a, e.b]))
    {
        if !panel.has_country(c) {
            return Err(ScenarioError::UnknownCountry(c));
        }
    }
    let countries = panel.countries();
    let baseline: BTreeMap<Pair, bool> = countries
        .iter()
        .flat_map(|&a| countries.iter().map(move |&b| (a, b)))
        .map(|(a, b)| ((a, b), panel.fta(year, a, b)))
        .collect();
    let mut counterfactual = baseline.clone();
    let mut touched = Vec::with_capacity(2 * scenario.edits.len());
    for e in &scenario.edits {
        let value = e.action == EditAction::Add;
        for p in [(e.a, e.b), (e.b, e.a)] {
            counterfactual.insert(p, value);
            touched.push(p);
        }
    }
    Ok(ScenarioIndicators {
        year,
        baseline,
        counterfactual,
        touched,
    })
}

/// One `add` edit per (acceding, member) pair.
pub fn accession_scenario(
    members: &[CountryCode],
    acceding: CountryCode,
    evaluation_year: i32,
    reference_country: CountryCode,
) -> Result<Scenario, ScenarioError> {
    if members.is_empty() {
        return Err(ScenarioError::NoMembers);
    }
    if members.contains(&acceding) {
        return Err(ScenarioError::AlreadyMember(acceding));
    }
    let edits = members
        .iter()
        .map(|&m| Edit {
            a: acceding,
            b: m,
            action: EditAction::Add,
        })
        .collect();
    Scenario::new(
        format!("{acceding}_accession"),
        edits,
        evaluation_year,
        reference_country,
    )
}

/// Solver settings carried by a scenario file. Unset fields fall back to the
/// solver defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub price_tol: Option<f64>,
    pub sd_tol: Option<f64>,
    pub max_outer_iter: Option<usize>,
    pub damping: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    evaluation_year: i32,
    reference_country: CountryCode,
    #[serde(default)]
    sigma: Option<f64>,
    #[serde(default)]
    drop: Vec<[CountryCode; 2]>,
    #[serde(default)]
    add: Vec<[CountryCode; 2]>,
    #[serde(default)]
    tolerances: Tolerances,
}

/// Parsed scenario file: the scenario plus the elasticity and solver
/// settings it fixes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub sigma: Option<f64>,
    pub tolerances: Tolerances,
}

impl ScenarioFile {
    /// Parses TOML such as
    ///
    /// ```toml
    /// name = "chl_usa_removal"
    /// evaluation_year = 2006
    /// reference_country = "DEU"
    /// sigma = 7.0
    /// drop = [["CHL", "USA"]]
    ///
    /// [tolerances]
    /// price_tol = 1e-3
    /// ```
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.message().to_string()))?;
        if let Some(s) = raw.sigma {
            if !(s > 1.0 && s.is_finite()) {
                return Err(ScenarioError::Parse(format!("sigma must exceed 1, got {s}")));
            }
        }
        let t = &raw.tolerances;
        for (name, v) in [("price_tol", t.price_tol), ("sd_tol", t.sd_tol)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(ScenarioError::Parse(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if let Some(d) = t.damping {
            if !(d > 0.0 && d <= 1.0) {
                return Err(ScenarioError::Parse(format!("damping must lie in (0, 1], got {d}")));
            }
        }
        if t.max_outer_iter == Some(0) {
            return Err(ScenarioError::Parse("max_outer_iter must be at least 1".into()));
        }
        let edits = raw
            .drop
            .iter()
            .map(|p| (p, EditAction::Drop))
            .chain(raw.add.iter().map(|p| (p, EditAction::Add)))
            .map(|([a, b], action)| Edit {
                a: *a,
                b: *b,
                action,
            })
            .collect();
        Ok(ScenarioFile {
            scenario: Scenario::new(raw.name, edits, raw.evaluation_year, raw.reference_country)?,
            sigma: raw.sigma,
            tolerances: raw.tolerances,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        let pick = |action| {
            self.scenario
                .edits
                .iter()
                .filter(|e| e.action == action)
                .map(|e| [e.a, e.b])
                .collect()
        };
        let raw = RawScenario {
            name: self.scenario.name.clone(),
            evaluation_year: self.scenario.evaluation_year,
            reference_country: self.scenario.reference_country,
            sigma: self.sigma,
            drop: pick(EditAction::Drop),
            add: pick(EditAction::Add),
            tolerances: self.tolerances,
        };
        toml::to_string(&raw).expect("scenario serializes")
    }
}
