//! End-to-end behaviour of the command-line tool: exit codes, verification
//! of tampered runs, echoed tolerances and cost import/export.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use geppml::report::{read_economy, BaselineState, RunManifest, ECONOMY_HEADER};
use geppml::scenario::{Edit, EditAction, Scenario, ScenarioFile, Tolerances};
use geppml::CountryCode;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geppml")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Synthetic data, an estimated baseline and a scenario file, built once.
struct Fixture {
    data: PathBuf,
    state: PathBuf,
    scenario: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = scratch("fixture");
        let data = root.join("data");
        let est = root.join("estimate");
        let out = run(&["synth", "--countries", "6", "--seed", "11", "--noise-cv", "0.05", "--out", &s(&data)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let out = run(&[
            "estimate",
            "--flows", &s(&data.join("flows.csv")),
            "--covariates", &s(&data.join("covariates.csv")),
            "--fta", &s(&data.join("fta.csv")),
            "--out", &s(&est),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let state = est.join("baseline_state.json");
        let panel = BaselineState::read(&state).unwrap().panel().unwrap();
        let year = *panel.years().last().unwrap();
        let c = panel.countries();
        let (a, b) = c
            .iter()
            .flat_map(|&a| c.iter().map(move |&b| (a, b)))
            .find(|&(a, b)| a < b && !panel.fta(year, a, b))
            .expect("a pair outside any agreement");
        let file = ScenarioFile {
            scenario: Scenario::new("add", vec![Edit { a, b, action: EditAction::Add }], year, c[0]).unwrap(),
            sigma: None,
            tolerances: Tolerances::default(),
        };
        let scenario = root.join("scenario.toml");
        std::fs::write(&scenario, file.to_toml()).unwrap();
        let sim = root.join("simulate");
        let out = run(&["simulate", "--state", &s(&state), "--scenario", &s(&scenario), "--out", &s(&sim)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Fixture {
            data,
            state,
            scenario,
            run: sim,
        }
    })
}

fn estimate_args<'a>(flows: &'a str, cov: &'a str, fta: &'a str, out: &'a str) -> Vec<&'a str> {
    vec!["estimate", "--flows", flows, "--covariates", cov, "--fta", fta, "--out", out]
}

#[test]
fn header_only_flows_are_a_usage_error() {
    let f = fixture();
    let dir = scratch("empty");
    let flows = dir.join("flows.csv");
    let header = std::fs::read_to_string(f.data.join("flows.csv")).unwrap();
    std::fs::write(&flows, format!("{}\n", header.lines().next().unwrap())).unwrap();
    let (cov, fta, out) = (s(&f.data.join("covariates.csv")), s(&f.data.join("fta.csv")), s(&dir.join("out")));
    let flows = s(&flows);
    let res = run(&estimate_args(&flows, &cov, &fta, &out));
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn malformed_flows_are_an_input_error() {
    let f = fixture();
    let dir = scratch("malformed");
    let text = std::fs::read_to_string(f.data.join("flows.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let mut fields: Vec<&str> = lines[1].split(',').collect();
    fields[3] = "lots";
    lines[1] = fields.join(",");
    let flows = dir.join("flows.csv");
    std::fs::write(&flows, lines.join("\n")).unwrap();
    let (cov, fta, out) = (s(&f.data.join("covariates.csv")), s(&f.data.join("fta.csv")), s(&dir.join("out")));
    let flows = s(&flows);
    let res = run(&estimate_args(&flows, &cov, &fta, &out));
    assert_eq!(code(&res), 1);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn unknown_reference_is_a_usage_error() {
    let f = fixture();
    let dir = scratch("reference");
    let (flows, cov, fta) = (
        s(&f.data.join("flows.csv")),
        s(&f.data.join("covariates.csv")),
        s(&f.data.join("fta.csv")),
    );
    let out = s(&dir.join("out"));
    let mut args = estimate_args(&flows, &cov, &fta, &out);
    args.extend(["--reference", "ZZZ"]);
    let res = run(&args);
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn scenario_with_unknown_country_is_a_usage_error() {
    let f = fixture();
    let dir = scratch("scenario");
    let mut file = ScenarioFile::load(&f.scenario).unwrap();
    file.scenario.edits[0].b = CountryCode::new("ZZZ").unwrap();
    let path = dir.join("bad.toml");
    std::fs::write(&path, file.to_toml()).unwrap();
    let res = run(&["simulate", "--state", &s(&f.state), "--scenario", &s(&path), "--out", &s(&dir.join("out"))]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("ZZZ"));
}

#[test]
fn finished_run_verifies() {
    let f = fixture();
    let res = run(&["verify", "--run", &s(&f.run)]);
    let text = String::from_utf8_lossy(&res.stdout);
    assert_eq!(code(&res), 0, "{text}");
    assert!(text.contains("all checks passed"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn tampered_price_fails_verification_at_that_country() {
    let f = fixture();
    let dir = scratch("tampered");
    for entry in std::fs::read_dir(&f.run).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), dir.join(entry.file_name())).unwrap();
    }
    let economy_path = dir.join("economy.csv");
    let rows = read_economy(std::fs::File::open(&economy_path).unwrap()).unwrap();
    let victim = rows[rows.len() - 1].country;
    let col = ECONOMY_HEADER.iter().position(|h| *h == "price_full").unwrap();
    let text = std::fs::read_to_string(&economy_path).unwrap();
    let edited: Vec<String> = text
        .lines()
        .map(|line| {
            let mut fields: Vec<String> = line.split(',').map(str::to_owned).collect();
            if fields[0] == victim.as_str() {
                let v: f64 = fields[col].parse().unwrap();
                fields[col] = format!("{:.16e}", v * 1.01);
            }
            fields.join(",")
        })
        .collect();
    std::fs::write(&economy_path, edited.join("\n") + "\n").unwrap();

    let res = run(&["verify", "--run", &s(&dir)]);
    assert_eq!(code(&res), 5);
    let out = String::from_utf8_lossy(&res.stdout);
    let line = out
        .lines()
        .find(|l| l.starts_with("FAIL market_clearing_full"))
        .unwrap_or_else(|| panic!("no market clearing failure in\n{out}"));
    assert!(line.contains(victim.as_str()), "{line}");
}

#[test]
fn tolerances_are_recorded_and_echoed() {
    let f = fixture();
    let dir = scratch("tolerances");
    let sim = dir.join("run");
    let res = run(&[
        "simulate", "--state", &s(&f.state), "--scenario", &s(&f.scenario), "--out", &s(&sim),
        "--price-tol", "0.0005", "--sd-tol", "0.00025",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let m = RunManifest::read(&sim).unwrap();
    assert_eq!(m.config_f64("price_tol"), Some(0.0005));
    assert_eq!(m.config_f64("sd_tol"), Some(0.00025));

    let res = run(&["verify", "--run", &s(&sim), "--tol", "1e-7"]);
    let out = String::from_utf8_lossy(&res.stdout);
    assert!(out.contains("tol=1e-7 price_tol=5e-4 sd_tol=2.5e-4"), "{out}");
    assert_eq!(code(&res), 0, "{out}");

    // A tolerance below rounding error flips the identity checks.
    let res = run(&["verify", "--run", &s(&sim), "--tol", "1e-300"]);
    let out = String::from_utf8_lossy(&res.stdout);
    assert_eq!(code(&res), 5, "{out}");
    assert!(out.lines().any(|l| l.starts_with("FAIL decomposition_")), "{out}");
}

#[test]
fn non_convergence_exits_four_and_keeps_the_trace() {
    let f = fixture();
    let dir = scratch("nonconvergence");
    let sim = dir.join("run");
    let res = run(&[
        "simulate", "--state", &s(&f.state), "--scenario", &s(&f.scenario), "--out", &s(&sim),
        "--max-iter", "1", "--price-tol", "1e-12", "--sd-tol", "1e-12",
    ]);
    assert_eq!(code(&res), 4, "{}", String::from_utf8_lossy(&res.stderr));
    let trace = std::fs::read_to_string(sim.join("trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2, "{trace}");
    let m = RunManifest::read(&sim).unwrap();
    assert!(m.outputs.iter().any(|o| o.path == "trace.csv"));
}

#[test]
fn exported_costs_import_unchanged() {
    let f = fixture();
    let dir = scratch("costs");
    let first = dir.join("costs.csv");
    let second = dir.join("costs_again.csv");
    let state2 = dir.join("state.json");
    assert_eq!(code(&run(&["costs", "--state", &s(&f.state), "--export", &s(&first)])), 0);
    let res = run(&["costs", "--state", &s(&f.state), "--import", &s(&first), "--out", &s(&state2)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(code(&run(&["costs", "--state", &s(&state2), "--export", &s(&second)])), 0);
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(code(&run(&["simulate", "--state", "x.json"])), 2);
}
