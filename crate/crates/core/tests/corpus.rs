//! Runs every decoder over the fuzz corpus seeds and cheap mutations of
//! them. Seeds decode unless named `bad_*`, which must be rejected;
//! mutations may go either way but must never panic.

use std::path::{Path, PathBuf};

use geppml::costs::CostMatrix;
use geppml::panel::{read_covariates, read_flows, read_fta, read_sidecar};
use geppml::report::{read_economy, read_ge_flows, read_outcome, read_trace, BaselineState};
use geppml::scenario::ScenarioFile;

type Decoder = fn(&[u8]) -> bool;

const DECODERS: [(&str, Decoder); 11] = [
    ("flows", |d| read_flows(d, "flows").is_ok()),
    ("covariates", |d| read_covariates(d, "covariates").is_ok()),
    ("fta", |d| read_fta(d, "fta").is_ok()),
    ("sidecar", |d| read_sidecar(d).is_ok()),
    ("costs", |d| CostMatrix::read_csv(d, 7.0).is_ok()),
    ("scenario", |d| std::str::from_utf8(d).is_ok_and(|t| ScenarioFile::parse(t).is_ok())),
    ("outcome", |d| read_outcome(d).is_ok()),
    ("economy", |d| read_economy(d).is_ok()),
    ("ge_flows", |d| read_ge_flows(d).is_ok()),
    ("trace", |d| read_trace(d).is_ok()),
    ("baseline_state", |d| {
        std::str::from_utf8(d).is_ok_and(|t| BaselineState::from_json(t, "state").is_ok_and(|s| {
            s.panel().is_ok() && s.cost_matrix(s.sigma).is_ok()
        }))
    }),
];

fn seeds(target: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
}

/// Prefix truncations, byte flips and spliced-in troublesome tokens.
fn mutations(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let step = (seed.len() / 64).max(1);
    for cut in (0..seed.len()).step_by(step) {
        out.push(seed[..cut].to_vec());
        let mut flipped = seed.to_vec();
        flipped[cut] ^= 0x5a;
        out.push(flipped);
        for token in [&b"NaN"[..], b"-inf", b"\"", b",,", b"\n\n", b"\xff\xfe", b"1e999", b"-0"] {
            let mut spliced = seed[..cut].to_vec();
            spliced.extend_from_slice(token);
            spliced.extend_from_slice(&seed[cut..]);
            out.push(spliced);
        }
    }
    out
}

#[test]
fn seeds_decode() {
    for (target, decode) in DECODERS {
        let files = seeds(target);
        assert!(!files.is_empty(), "no seeds for {target}");
        for f in files {
            let bytes = std::fs::read(&f).unwrap();
            let bad = f.file_name().unwrap().to_string_lossy().starts_with("bad_");
            assert_eq!(decode(&bytes), !bad, "{}", f.display());
        }
    }
}

#[test]
fn mutated_seeds_never_panic() {
    for (target, decode) in DECODERS {
        for f in seeds(target) {
            for m in mutations(&std::fs::read(&f).unwrap()) {
                let _ = decode(&m);
            }
        }
    }
}
