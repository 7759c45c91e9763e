use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    validate_covariates, CountryCode, GravityCovariates, IntervalPanel, PanelError,
    TradeObservation,
};

pub const FLOWS_HEADER: [&str; 4] = ["exporter", "importer", "year", "flow"];
pub const COVARIATES_HEADER: [&str; 6] = ["exporter", "importer", "log_dist", "cntg", "lang", "clny"];
pub const FTA_HEADER: [&str; 4] = ["exporter", "importer", "year", "fta"];

/// A parsed row of the flows file, with its 1-based line number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRecord {
    pub exporter: CountryCode,
    pub importer: CountryCode,
    pub year: i32,
    pub flow: f64,
    pub line: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtaRecord {
    pub exporter: CountryCode,
    pub importer: CountryCode,
    pub year: i32,
    pub fta: bool,
    pub line: u64,
}

struct Rows<'a> {
    file: &'a str,
    reader: csv::Reader<Box<dyn Read + 'a>>,
    width: usize,
}

impl<'a> Rows<'a> {
    fn open(file: &'a str, input: impl Read + 'a, header: &[&str]) -> Result<Self, PanelError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(Box::new(input) as Box<dyn Read + 'a>);
        let found = reader.headers().map_err(|e| csv_error(file, e))?.clone();
        if found.iter().ne(header.iter().copied()) {
            return Err(PanelError::Header {
                file: file.into(),
                expected: header.join(","),
                found: found.iter().collect::<Vec<_>>().join(","),
            });
        }
        Ok(Rows {
            file,
            reader,
            width: header.len(),
        })
    }

    fn for_each(
        &mut self,
        mut f: impl FnMut(&Fields<'_>) -> Result<(), PanelError>,
    ) -> Result<(), PanelError> {
        let mut record = csv::StringRecord::new();
        loop {
            match self.reader.read_record(&mut record) {
                Ok(false) => return Ok(()),
                Ok(true) => {}
                Err(e) => return Err(csv_error(self.file, e)),
            }
            let line = record.position().map_or(0, |p| p.line());
            if record.len() == 1 && record[0].is_empty() {
                continue;
            }
            if record.len() != self.width {
                return Err(PanelError::Malformed {
                    file: self.file.into(),
                    line,
                    message: format!("expected {} fields, found {}", self.width, record.len()),
                });
            }
            f(&Fields {
                file: self.file,
                line,
                record: &record,
            })?;
        }
    }
}

struct Fields<'a> {
    file: &'a str,
    line: u64,
    record: &'a csv::StringRecord,
}

impl Fields<'_> {
    fn malformed(&self, message: String) -> PanelError {
        PanelError::Malformed {
            file: self.file.into(),
            line: self.line,
            message,
        }
    }

    fn country(&self, idx: usize) -> Result<CountryCode, PanelError> {
        self.record[idx]
            .parse()
            .map_err(|e: super::InvalidCountryCode| self.malformed(e.to_string()))
    }

    fn year(&self, idx: usize) -> Result<i32, PanelError> {
        let raw = &self.record[idx];
        raw.parse()
            .map_err(|_| self.malformed(format!("invalid year `{raw}`")))
    }

    fn real(&self, idx: usize, name: &str) -> Result<f64, PanelError> {
        let raw = &self.record[idx];
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.malformed(format!("invalid {name} `{raw}`"))),
        }
    }

    fn binary(&self, idx: usize, name: &str) -> Result<bool, PanelError> {
        match &self.record[idx] {
            "0" => Ok(false),
            "1" => Ok(true),
            raw => Err(self.malformed(format!("{name} must be 0 or 1, found `{raw}`"))),
        }
    }
}

fn csv_error(file: &str, e: csv::Error) -> PanelError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => PanelError::Io {
            path: file.into(),
            source,
        },
        kind => PanelError::Malformed {
            file: file.into(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Parses a flows file. Rejects negative or non-finite flows and duplicate
/// `(exporter, importer, year)` keys.
pub fn read_flows(input: impl Read, file: &str) -> Result<Vec<FlowRecord>, PanelError> {
    let mut rows = Rows::open(file, input, &FLOWS_HEADER)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    rows.for_each(|f| {
        let exporter = f.country(0)?;
        let importer = f.country(1)?;
        let year = f.year(2)?;
        let flow = f.real(3, "flow")?;
        if flow < 0.0 {
            return Err(f.malformed(format!("negative flow {flow}")));
        }
        if !seen.insert((exporter, importer, year)) {
            return Err(PanelError::Duplicate {
                file: file.into(),
                line: f.line,
                key: format!("{exporter}->{importer} {year}"),
            });
        }
        out.push(FlowRecord {
            exporter,
            importer,
            year,
            flow,
            line: f.line,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Parses a covariates file; each row is paired with its line number.
pub fn read_covariates(
    input: impl Read,
    file: &str,
) -> Result<Vec<(GravityCovariates, u64)>, PanelError> {
    let mut rows = Rows::open(file, input, &COVARIATES_HEADER)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    rows.for_each(|f| {
        let cov = GravityCovariates {
            exporter: f.country(0)?,
            importer: f.country(1)?,
            log_dist: f.real(2, "log_dist")?,
            cntg: f.binary(3, "cntg")?,
            lang: f.binary(4, "lang")?,
            clny: f.binary(5, "clny")?,
        };
        validate_covariates(&cov).map_err(|m| f.malformed(m))?;
        if !seen.insert(cov.pair()) {
            return Err(PanelError::Duplicate {
                file: file.into(),
                line: f.line,
                key: format!("{}->{}", cov.exporter, cov.importer),
            });
        }
        out.push((cov, f.line));
        Ok(())
    })?;
    Ok(out)
}

pub fn read_fta(input: impl Read, file: &str) -> Result<Vec<FtaRecord>, PanelError> {
    let mut rows = Rows::open(file, input, &FTA_HEADER)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    rows.for_each(|f| {
        let rec = FtaRecord {
            exporter: f.country(0)?,
            importer: f.country(1)?,
            year: f.year(2)?,
            fta: f.binary(3, "fta")?,
            line: f.line,
        };
        if !seen.insert((rec.exporter, rec.importer, rec.year)) {
            return Err(PanelError::Duplicate {
                file: file.into(),
                line: f.line,
                key: format!("{}->{} {}", rec.exporter, rec.importer, rec.year),
            });
        }
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>, PanelError> {
    File::open(path).map(BufReader::new).map_err(|source| PanelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads and joins the three input files into a validated panel.
///
/// The registry is the set of countries appearing in the flows file.
pub fn load_panel(
    flows_file: &Path,
    covariates_file: &Path,
    fta_file: &Path,
) -> Result<IntervalPanel, PanelError> {
    let flows_name = flows_file.display().to_string();
    let cov_name = covariates_file.display().to_string();
    let fta_name = fta_file.display().to_string();

    let flows = read_flows(open(flows_file)?, &flows_name)?;
    if flows.is_empty() {
        return Err(PanelError::Empty);
    }
    let registry: BTreeSet<CountryCode> = flows
        .iter()
        .flat_map(|r| [r.exporter, r.importer])
        .collect();
    let known = |code: CountryCode, file: &str, line: u64| {
        if registry.contains(&code) {
            Ok(())
        } else {
            Err(PanelError::UnknownCountry {
                file: file.into(),
                line,
                code,
            })
        }
    };

    let covariates = read_covariates(open(covariates_file)?, &cov_name)?;
    for (c, line) in &covariates {
        known(c.exporter, &cov_name, *line)?;
        known(c.importer, &cov_name, *line)?;
    }
    let fta = read_fta(open(fta_file)?, &fta_name)?;
    for r in &fta {
        known(r.exporter, &fta_name, r.line)?;
        known(r.importer, &fta_name, r.line)?;
    }

    let observations = flows
        .iter()
        .map(|r| TradeObservation {
            exporter: r.exporter,
            importer: r.importer,
            year: r.year,
            flow: r.flow,
            fta: false,
        })
        .collect();
    IntervalPanel::new(
        registry.into_iter().collect(),
        observations,
        covariates.into_iter().map(|(c, _)| c).collect(),
        fta.iter()
            .filter(|r| r.fta)
            .map(|r| (r.year, r.exporter, r.importer))
            .collect(),
    )
}

fn io_err(path: &str) -> impl Fn(std::io::Error) -> PanelError + '_ {
    move |source| PanelError::Io {
        path: path.into(),
        source,
    }
}

pub fn write_flows(out: impl Write, panel: &IntervalPanel) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{}", FLOWS_HEADER.join(","))?;
    for o in panel.observations() {
        writeln!(w, "{},{},{},{}", o.exporter, o.importer, o.year, o.flow)?;
    }
    w.flush()
}

pub fn write_covariates(out: impl Write, panel: &IntervalPanel) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{}", COVARIATES_HEADER.join(","))?;
    for c in panel.covariates().values() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.exporter,
            c.importer,
            c.log_dist,
            u8::from(c.cntg),
            u8::from(c.lang),
            u8::from(c.clny)
        )?;
    }
    w.flush()
}

pub fn write_fta(out: impl Write, panel: &IntervalPanel) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{}", FTA_HEADER.join(","))?;
    let mut rows: Vec<_> = panel.fta_rows().collect();
    rows.sort_by_key(|&(y, e, i)| (e, i, y));
    for (year, e, i) in rows {
        writeln!(w, "{e},{i},{year},1")?;
    }
    w.flush()
}

/// Writes `flows.csv`, `covariates.csv` and `fta.csv` into `dir`.
pub fn write_panel(dir: &Path, panel: &IntervalPanel) -> Result<(), PanelError> {
    std::fs::create_dir_all(dir).map_err(io_err(&dir.display().to_string()))?;
    let create = |name: &str| {
        let path = dir.join(name);
        File::create(&path).map_err(|source| PanelError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    let d = dir.display().to_string();
    write_flows(create("flows.csv")?, panel).map_err(io_err(&d))?;
    write_covariates(create("covariates.csv")?, panel).map_err(io_err(&d))?;
    write_fta(create("fta.csv")?, panel).map_err(io_err(&d))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_flow_names_line() {
        let data = "exporter,importer,year,flow\nAAA,BBB,2000,1.5\nBBB,AAA,2000,-2\n";
        match read_flows(data.as_bytes(), "flows.csv").unwrap_err() {
            PanelError::Malformed { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("negative"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        for (data, line) in [
            ("exporter,importer,year,flow\nAAA,BBB,2000\n", 2),
            ("exporter,importer,year,flow\nAAA,BBB,2000,1\nAAA,bbb,2000,1\n", 3),
            ("exporter,importer,year,flow\nAAA,BBB,20x0,1\n", 2),
            ("exporter,importer,year,flow\nAAA,BBB,2000,nan\n", 2),
        ] {
            match read_flows(data.as_bytes(), "f") {
                Err(PanelError::Malformed { line: l, .. }) => assert_eq!(l, line, "{data}"),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn header_mismatch() {
        let data = "exporter,importer,flow,year\n";
        assert!(matches!(
            read_flows(data.as_bytes(), "f"),
            Err(PanelError::Header { .. })
        ));
    }

    #[test]
    fn duplicate_flow_key() {
        let data = "exporter,importer,year,flow\nAAA,BBB,2000,1\nAAA,BBB,2000,2\n";
        assert!(matches!(
            read_flows(data.as_bytes(), "f"),
            Err(PanelError::Duplicate { line: 3, .. })
        ));
    }

    #[test]
    fn covariate_rules() {
        let ok = "exporter,importer,log_dist,cntg,lang,clny\nAAA,BBB,7.2,0,1,0\nAAA,AAA,-1,0,1,0\n";
        assert_eq!(read_covariates(ok.as_bytes(), "c").unwrap().len(), 2);
        let bad = "exporter,importer,log_dist,cntg,lang,clny\nAAA,BBB,0,0,1,0\n";
        assert!(read_covariates(bad.as_bytes(), "c").is_err());
        let bad = "exporter,importer,log_dist,cntg,lang,clny\nAAA,BBB,1,2,1,0\n";
        assert!(read_covariates(bad.as_bytes(), "c").is_err());
    }

    #[test]
    fn fta_rows_parse() {
        let data = "exporter,importer,year,fta\nCHL,USA,2004,1\nUSA,CHL,2004,1\n";
        let rows = read_fta(data.as_bytes(), "fta").unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.fta));
    }
}
