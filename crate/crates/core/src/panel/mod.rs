//! Bilateral trade panels: country registry, flow records, gravity covariates
//! and the interval panel consumed by the estimators.

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use io::{
    load_panel, read_covariates, read_fta, read_flows, write_covariates, write_flows, write_fta,
    write_panel, FlowRecord, FtaRecord,
};
pub use synth::{read_sidecar, synth_world, GroundTruth, PlantedCosts, SynthConfig, SynthWorld};

/// Ordered (exporter, importer) pair.
pub type Pair = (CountryCode, CountryCode);

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: expected header `{expected}`, found `{found}`")]
    Header {
        file: String,
        expected: String,
        found: String,
    },
    #[error("{file}, line {line}: {message}")]
    Malformed {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}, line {line}: unknown country `{code}`")]
    UnknownCountry {
        file: String,
        line: u64,
        code: CountryCode,
    },
    #[error("{file}, line {line}: duplicate key {key}")]
    Duplicate {
        file: String,
        line: u64,
        key: String,
    },
    #[error("requested years absent from panel: {0:?}")]
    MissingYears(Vec<i32>),
    #[error("invalid year window: {0}")]
    InvalidWindow(String),
    #[error("panel contains no observations")]
    Empty,
    #[error("invalid synthetic world configuration: {0}")]
    InvalidSynth(String),
}

/// Three-letter uppercase country identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CountryCode([u8; 3]);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid country code `{0}`: expected three letters A-Z")]
pub struct InvalidCountryCode(pub String);

impl CountryCode {
    pub fn new(code: &str) -> Result<Self, InvalidCountryCode> {
        code.parse()
    }

    pub fn as_str(&self) -> &str {
        // Only A-Z bytes are ever stored.
        std::str::from_utf8(&self.0).expect("country code is ASCII")
    }
}

impl FromStr for CountryCode {
    type Err = InvalidCountryCode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = s.as_bytes();
        if bytes.len() != 3 || !bytes.iter().all(u8::is_ascii_uppercase) {
            return Err(InvalidCountryCode(s.to_string()));
        }
        Ok(CountryCode([bytes[0], bytes[1], bytes[2]]))
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

impl Serialize for CountryCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CountryCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One exporter -> importer flow in a given year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeObservation {
    pub exporter: CountryCode,
    pub importer: CountryCode,
    pub year: i32,
    /// Nominal value, nonnegative. Zero is a genuine zero flow.
    pub flow: f64,
    pub fta: bool,
}

impl TradeObservation {
    pub fn pair(&self) -> Pair {
        (self.exporter, self.importer)
    }

    pub fn is_intra_national(&self) -> bool {
        self.exporter == self.importer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityCovariates {
    pub exporter: CountryCode,
    pub importer: CountryCode,
    pub log_dist: f64,
    pub cntg: bool,
    pub lang: bool,
    pub clny: bool,
}

impl GravityCovariates {
    pub fn pair(&self) -> Pair {
        (self.exporter, self.importer)
    }

    /// Covariate values in the fixed order `log_dist, cntg, lang, clny`.
    pub fn values(&self) -> [f64; 4] {
        [
            self.log_dist,
            f64::from(u8::from(self.cntg)),
            f64::from(u8::from(self.lang)),
            f64::from(u8::from(self.clny)),
        ]
    }
}

pub const COVARIATE_NAMES: [&str; 4] = ["log_dist", "cntg", "lang", "clny"];

/// Validated, immutable bilateral panel.
///
/// Observations are kept sorted by `(year, exporter, importer)` and that key
/// is unique. A pair-year missing from the observations is a missing flow,
/// not a zero.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalPanel {
    observations: Vec<TradeObservation>,
    years: Vec<i32>,
    countries: Vec<CountryCode>,
    covariates: BTreeMap<Pair, GravityCovariates>,
    fta: BTreeSet<(i32, CountryCode, CountryCode)>,
}

impl IntervalPanel {
    /// Builds a panel from already-parsed parts.
    ///
    /// `countries` is the registry; every observation, covariate row and FTA
    /// row must reference it. The `fta` field of each observation is
    /// overwritten by membership in `fta_rows`.
    pub fn new(
        countries: Vec<CountryCode>,
        mut observations: Vec<TradeObservation>,
        covariates: Vec<GravityCovariates>,
        fta_rows: Vec<(i32, CountryCode, CountryCode)>,
    ) -> Result<Self, PanelError> {
        let registry: BTreeSet<CountryCode> = countries.iter().copied().collect();
        if registry.len() != countries.len() {
            return Err(PanelError::Malformed {
                file: "registry".into(),
                line: 0,
                message: "duplicate country in registry".into(),
            });
        }
        let check = |code: CountryCode, file: &str| -> Result<(), PanelError> {
            if registry.contains(&code) {
                Ok(())
            } else {
                Err(PanelError::UnknownCountry {
                    file: file.into(),
                    line: 0,
                    code,
                })
            }
        };
        let mut fta = BTreeSet::new();
        for &(year, a, b) in &fta_rows {
            check(a, "fta")?;
            check(b, "fta")?;
            fta.insert((year, a, b));
        }
        let mut cov_map = BTreeMap::new();
        for c in covariates {
            check(c.exporter, "covariates")?;
            check(c.importer, "covariates")?;
            validate_covariates(&c).map_err(|message| PanelError::Malformed {
                file: "covariates".into(),
                line: 0,
                message,
            })?;
            if cov_map.insert(c.pair(), c).is_some() {
                return Err(PanelError::Duplicate {
                    file: "covariates".into(),
                    line: 0,
                    key: format!("{}->{}", c.exporter, c.importer),
                });
            }
        }
        for obs in &mut observations {
            check(obs.exporter, "flows")?;
            check(obs.importer, "flows")?;
            if !(obs.flow.is_finite() && obs.flow >= 0.0) {
                return Err(PanelError::Malformed {
                    file: "flows".into(),
                    line: 0,
                    message: format!(
                        "flow {} for {}->{} in {} must be finite and nonnegative",
                        obs.flow, obs.exporter, obs.importer, obs.year
                    ),
                });
            }
            obs.fta = fta.contains(&(obs.year, obs.exporter, obs.importer));
        }
        observations.sort_by_key(|o| (o.year, o.exporter, o.importer));
        for w in observations.windows(2) {
            if (w[0].year, w[0].exporter, w[0].importer) == (w[1].year, w[1].exporter, w[1].importer)
            {
                return Err(PanelError::Duplicate {
                    file: "flows".into(),
                    line: 0,
                    key: format!("{}->{} {}", w[1].exporter, w[1].importer, w[1].year),
                });
            }
        }
        let years: Vec<i32> = observations
            .iter()
            .map(|o| o.year)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut countries = countries;
        countries.sort();
        Ok(IntervalPanel {
            observations,
            years,
            countries,
            covariates: cov_map,
            fta,
        })
    }

    pub fn observations(&self) -> &[TradeObservation] {
        &self.observations
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    /// Sorted country registry.
    pub fn countries(&self) -> &[CountryCode] {
        &self.countries
    }

    pub fn covariates(&self) -> &BTreeMap<Pair, GravityCovariates> {
        &self.covariates
    }

    pub fn covariate(&self, pair: Pair) -> Option<&GravityCovariates> {
        self.covariates.get(&pair)
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn has_country(&self, code: CountryCode) -> bool {
        self.countries.binary_search(&code).is_ok()
    }

    /// Baseline FTA indicator for a directed pair in a given year.
    pub fn fta(&self, year: i32, exporter: CountryCode, importer: CountryCode) -> bool {
        self.fta.contains(&(year, exporter, importer))
    }

    pub fn fta_rows(&self) -> impl Iterator<Item = (i32, CountryCode, CountryCode)> + '_ {
        self.fta.iter().copied()
    }

    /// Whether any intra-national (exporter = importer) record is present.
    pub fn has_intra_national(&self) -> bool {
        self.observations.iter().any(TradeObservation::is_intra_national)
    }

    /// Observations of a single year.
    pub fn cross_section(&self, year: i32) -> &[TradeObservation] {
        let lo = self.observations.partition_point(|o| o.year < year);
        let hi = self.observations.partition_point(|o| o.year <= year);
        &self.observations[lo..hi]
    }

    /// Restricts the panel to `{start, start + interval, ..., <= end}`.
    ///
    /// Every requested year must be present; all pairs are preserved.
    pub fn build_interval_panel(
        &self,
        start_year: i32,
        end_year: i32,
        interval: i32,
    ) -> Result<IntervalPanel, PanelError> {
        if interval < 1 {
            return Err(PanelError::InvalidWindow(format!(
                "interval must be at least 1, got {interval}"
            )));
        }
        if start_year > end_year {
            return Err(PanelError::InvalidWindow(format!(
                "start year {start_year} is after end year {end_year}"
            )));
        }
        let wanted: Vec<i32> = (start_year..=end_year).step_by(interval as usize).collect();
        let missing: Vec<i32> = wanted
            .iter()
            .copied()
            .filter(|y| self.years.binary_search(y).is_err())
            .collect();
        if !missing.is_empty() {
            return Err(PanelError::MissingYears(missing));
        }
        let keep: BTreeSet<i32> = wanted.iter().copied().collect();
        Ok(IntervalPanel {
            observations: self
                .observations
                .iter()
                .filter(|o| keep.contains(&o.year))
                .copied()
                .collect(),
            years: wanted,
            countries: self.countries.clone(),
            covariates: self.covariates.clone(),
            fta: self
                .fta
                .iter()
                .filter(|(y, _, _)| keep.contains(y))
                .copied()
                .collect(),
        })
    }
}

pub(crate) fn validate_covariates(c: &GravityCovariates) -> Result<(), String> {
    if !c.log_dist.is_finite() {
        return Err(format!(
            "log_dist for {}->{} is not finite",
            c.exporter, c.importer
        ));
    }
    if c.exporter != c.importer && c.log_dist <= 0.0 {
        return Err(format!(
            "log_dist for {}->{} must be positive, got {}",
            c.exporter, c.importer, c.log_dist
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cc(s: &str) -> CountryCode {
        s.parse().unwrap()
    }

    fn toy() -> IntervalPanel {
        let countries = vec![cc("AAA"), cc("BBB"), cc("CCC")];
        let mut obs = Vec::new();
        for year in [2000, 2001, 2002, 2003] {
            for &e in &countries {
                for &i in &countries {
                    obs.push(TradeObservation {
                        exporter: e,
                        importer: i,
                        year,
                        flow: 1.0,
                        fta: false,
                    });
                }
            }
        }
        IntervalPanel::new(countries, obs, vec![], vec![(2002, cc("AAA"), cc("BBB"))]).unwrap()
    }

    #[test]
    fn country_code_validation() {
        assert!("CHL".parse::<CountryCode>().is_ok());
        for bad in ["chl", "CH", "CHLE", "C1L", "", "ÄBC"] {
            assert!(bad.parse::<CountryCode>().is_err(), "{bad}");
        }
    }

    #[test]
    fn interval_selection_and_idempotence() {
        let p = toy();
        let q = p.build_interval_panel(2000, 2002, 2).unwrap();
        assert_eq!(q.years(), &[2000, 2002]);
        assert_eq!(q.observations().len(), 18);
        assert_eq!(q.build_interval_panel(2000, 2002, 2).unwrap(), q);
        assert!(q.fta(2002, cc("AAA"), cc("BBB")));
        assert!(!q.fta(2002, cc("BBB"), cc("AAA")));
    }

    #[test]
    fn degenerate_single_year() {
        let q = toy().build_interval_panel(2001, 2001, 1).unwrap();
        assert_eq!(q.years(), &[2001]);
        assert_eq!(q.cross_section(2001).len(), 9);
    }

    #[test]
    fn missing_year_is_listed() {
        let err = toy().build_interval_panel(1999, 2003, 2).unwrap_err();
        match err {
            PanelError::MissingYears(y) => assert_eq!(y, vec![1999]),
            other => panic!("unexpected {other}"),
        }
        assert!(toy().build_interval_panel(2000, 2002, 0).is_err());
        assert!(toy().build_interval_panel(2003, 2002, 1).is_err());
    }

    #[test]
    fn duplicate_key_rejected() {
        let countries = vec![cc("AAA"), cc("BBB")];
        let o = TradeObservation {
            exporter: cc("AAA"),
            importer: cc("BBB"),
            year: 2000,
            flow: 1.0,
            fta: false,
        };
        let err = IntervalPanel::new(countries, vec![o, o], vec![], vec![]).unwrap_err();
        assert!(matches!(err, PanelError::Duplicate { .. }));
    }

    #[test]
    fn intra_national_is_flagged() {
        let p = toy();
        assert!(p.has_intra_national());
        let n = p
            .observations()
            .iter()
            .filter(|o| o.is_intra_national())
            .count();
        assert_eq!(n, 12);
    }
}
