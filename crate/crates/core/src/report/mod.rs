//! Run artifacts: outcome tables, equilibrium dumps, the serialized
//! baseline, run manifests and the post-hoc verifier.

mod artifacts;
mod format;
mod manifest;
mod run;
mod state;
mod verify;

use std::io::Read;

use thiserror::Error;

pub use artifacts::{
    read_economy, read_ge_flows, write_economy, write_ge_flows, EconomyRow, GeFlowRow,
    ECONOMY_HEADER, GE_FLOWS_HEADER,
};
pub use format::{
    read_outcome, round2, table_row, write_outcome, write_outcome_display, OUTCOME_HEADER,
};
pub use manifest::{sha256_file, FileDigest, RunManifest, MANIFEST_FILE};
pub use run::{
    estimate_to_dir, resolve_config, simulate_to_dir, EstimateSummary, GeOverrides, RunError,
    COSTS_FILE, ECONOMY_FILE, GE_FLOWS_FILE, OUTCOME_DISPLAY_FILE, OUTCOME_FILE, STAGE1_SUMMARY,
    STAGE2_SUMMARY, STATE_FILE, TRACE_FILE,
};
pub use state::{estimate_baseline, BaselineState, CoefficientRecord, CostRecord, EstimateOptions};
pub use verify::{read_trace, verify_run, Check, TraceRecord, VerifyOptions, VerifyReport, TRACE_HEADER};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{file}, line {line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}: expected header `{expected}`")]
    Header { file: String, expected: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
    #[error("inconsistent state: {0}")]
    Inconsistent(String),
}

impl ReportError {
    pub(crate) fn parse(file: &str, line: u64, message: impl Into<String>) -> Self {
        ReportError::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ReportError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Header-checked CSV records paired with their line numbers.
pub(crate) fn csv_records<'a>(
    input: impl Read + 'a,
    file: &'a str,
    header: &'a [&'a str],
) -> Result<impl Iterator<Item = Result<(u64, csv::StringRecord), ReportError>> + 'a, ReportError>
{
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let found = reader
        .headers()
        .map_err(|e| ReportError::parse(file, 1, e.to_string()))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(ReportError::Header {
            file: file.into(),
            expected: header.join(","),
        });
    }
    Ok(reader.into_records().filter_map(move |rec| match rec {
        Err(e) => Some(Err(ReportError::parse(
            file,
            e.position().map_or(0, |p| p.line()),
            e.to_string(),
        ))),
        Ok(r) if r.len() == 1 && r[0].is_empty() => None,
        Ok(r) => {
            let line = r.position().map_or(0, |p| p.line());
            if r.len() == header.len() {
                Some(Ok((line, r)))
            } else {
                Some(Err(ReportError::parse(
                    file,
                    line,
                    format!("expected {} fields, found {}", header.len(), r.len()),
                )))
            }
        }
    }))
}

pub(crate) fn parse_f64(s: &str, file: &str, line: u64) -> Result<f64, ReportError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ReportError::parse(file, line, format!("invalid number `{s}`")))
}
