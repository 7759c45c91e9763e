use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use geppml::costs::{CostError, CostMatrix};
use geppml::ge::GeError;
use geppml::panel::{load_panel, synth_world, write_panel, PanelError, SynthConfig};
use geppml::ppml::{ClusterVariance, PpmlConfig, PpmlError};
use geppml::report::{
    estimate_to_dir, resolve_config, simulate_to_dir, table_row, verify_run, BaselineState,
    EstimateOptions, GeOverrides, ReportError, RunError, RunManifest, VerifyOptions,
};
use geppml::scenario::ScenarioFile;
use geppml::CountryCode;

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;
const EXIT_NONCONVERGENCE: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "geppml", version, about = "Structural gravity estimation and FTA counterfactuals")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel with known parameters.
    Synth(SynthArgs),
    /// Estimate the baseline: agreement effect, pair costs and their completion.
    Estimate(EstimateArgs),
    /// Export the cost matrix of a baseline, or replace it with external costs.
    Costs(CostsArgs),
    /// Solve a counterfactual scenario against a baseline.
    Simulate(SimulateArgs),
    /// Re-check equilibrium conditions of a finished run.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    countries: usize,
    #[arg(long, value_delimiter = ',', default_value = "2000,2004,2008")]
    years: Vec<i32>,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 7.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Coefficient of variation of multiplicative noise.
    #[arg(long, default_value_t = 0.0)]
    noise_cv: f64,
    /// Omit intra-national flows.
    #[arg(long)]
    no_intra: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    flows: PathBuf,
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long)]
    fta: PathBuf,
    /// First panel year; the window defaults to all years in the data.
    #[arg(long, requires_all = ["end", "interval"])]
    start: Option<i32>,
    #[arg(long, requires_all = ["start", "interval"])]
    end: Option<i32>,
    #[arg(long, requires_all = ["start", "end"])]
    interval: Option<i32>,
    #[arg(long, default_value = "DEU")]
    reference: CountryCode,
    #[arg(long, default_value_t = geppml::costs::DEFAULT_SIGMA)]
    sigma: f64,
    /// Weight the second stage by observed pair trade.
    #[arg(long)]
    volume_weights: bool,
    /// Cluster-robust variance: cr3 (leverage-adjusted) or cr1.
    #[arg(long, default_value_t = ClusterVariance::Cr3)]
    variance: ClusterVariance,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostsArgs {
    #[arg(long)]
    state: PathBuf,
    /// Write the cost matrix here.
    #[arg(long, conflicts_with = "import")]
    export: Option<PathBuf>,
    /// Replace the cost matrix with this file; requires --out.
    #[arg(long, requires = "out")]
    import: Option<PathBuf>,
    /// Path of the updated baseline state.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    price_tol: Option<f64>,
    #[arg(long)]
    sd_tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    damping: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    run: PathBuf,
    /// Relative tolerance of the identity checks.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    price_tol: Option<f64>,
    #[arg(long)]
    sd_tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => LevelFilter::Warn,
            1 => LevelFilter::Info,
            _ => LevelFilter::Debug,
        })
        .init();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Estimate(a) => estimate(a),
        Command::Costs(a) => costs(a),
        Command::Simulate(a) => simulate(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &RunError) -> u8 {
    match e {
        RunError::Panel(PanelError::Empty | PanelError::InvalidWindow(_) | PanelError::InvalidSynth(_)) => {
            EXIT_USAGE
        }
        RunError::Panel(_) | RunError::Report(_) => EXIT_IO,
        RunError::Cost(CostError::UnknownReference(_) | CostError::EmptyPanel) => EXIT_USAGE,
        RunError::Cost(CostError::Parse { .. } | CostError::Io(_)) => EXIT_IO,
        RunError::Cost(_) => EXIT_ESTIMATION,
        RunError::Scenario(_) => EXIT_USAGE,
        RunError::Ge(GeError::NonConvergence { .. } | GeError::Divergence { .. }) => EXIT_NONCONVERGENCE,
        RunError::Ge(GeError::InvalidConfig(_) | GeError::UnknownReference(_)) => EXIT_USAGE,
        RunError::Ge(GeError::Ppml(PpmlError::NonConvergence { .. })) => EXIT_NONCONVERGENCE,
        RunError::Ge(_) => EXIT_ESTIMATION,
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| ReportError::io(path, e).into()
}

fn synth(a: SynthArgs) -> Result<u8, RunError> {
    let mut cfg = SynthConfig::new(a.countries, a.years, a.beta, a.sigma, a.seed);
    cfg.noise_cv = a.noise_cv;
    cfg.intra_national = !a.no_intra;
    let world = synth_world(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    write_panel(&a.out, &world.panel)?;
    let truth = a.out.join("truth.csv");
    let file = std::fs::File::create(&truth).map_err(io(&truth))?;
    world.truth.write_sidecar(file).map_err(io(&truth))?;

    let mut m = RunManifest::new("synth");
    m.seed = Some(a.seed);
    m.set("countries", a.countries);
    m.set("beta_fta", a.beta);
    m.set("sigma", a.sigma);
    m.set("noise_cv", a.noise_cv);
    m.set("intra_national", !a.no_intra);
    for name in ["flows.csv", "covariates.csv", "fta.csv", "truth.csv"] {
        m.add_output(&a.out, name)?;
    }
    m.write(&a.out)?;
    println!(
        "wrote {} observations for {} countries to {}",
        world.panel.observations().len(),
        world.panel.countries().len(),
        a.out.display()
    );
    Ok(0)
}

fn estimate(a: EstimateArgs) -> Result<u8, RunError> {
    let mut panel = load_panel(&a.flows, &a.covariates, &a.fta)?;
    if let (Some(s), Some(e), Some(k)) = (a.start, a.end, a.interval) {
        panel = panel.build_interval_panel(s, e, k)?;
    }
    let mut m = RunManifest::new("estimate");
    for p in [&a.flows, &a.covariates, &a.fta] {
        m.add_input(p)?;
    }
    let opts = EstimateOptions {
        reference: a.reference,
        sigma: a.sigma,
        volume_weights: a.volume_weights,
        ppml: PpmlConfig {
            variance: a.variance,
            ..PpmlConfig::default()
        },
    };
    let summary = estimate_to_dir(&panel, &opts, &a.out, &mut m)?;
    println!("Stage 1 (exporter-year, importer-year and pair fixed effects)");
    for r in &summary.stage1 {
        println!("{}", r.display());
    }
    println!("Stage 2 (exporter and importer fixed effects)");
    for r in &summary.stage2 {
        println!("{}", r.display());
    }
    println!("Signif. Codes: ***: 0.01, **: 0.05, *: 0.1");
    Ok(0)
}

fn costs(a: CostsArgs) -> Result<u8, RunError> {
    let state = BaselineState::read(&a.state)?;
    if let Some(path) = a.import {
        let file = std::fs::File::open(&path).map_err(io(&path))?;
        let matrix = CostMatrix::read_csv(file, state.sigma)?;
        if matrix.countries() != state.countries.as_slice() {
            return Err(ReportError::Inconsistent(format!(
                "{} covers a different country set than the baseline",
                path.display()
            ))
            .into());
        }
        let out = a.out.expect("clap enforces --out with --import");
        state.with_costs(&matrix).write(&out)?;
        println!("wrote {}", out.display());
    } else {
        let matrix = state.cost_matrix(state.sigma)?;
        match a.export {
            Some(path) => {
                let file = std::fs::File::create(&path).map_err(io(&path))?;
                matrix.write_csv(file).map_err(io(&path))?;
            }
            None => matrix
                .write_csv(std::io::stdout().lock())
                .map_err(io(Path::new("stdout")))?,
        }
    }
    Ok(0)
}

fn simulate(a: SimulateArgs) -> Result<u8, RunError> {
    let state = BaselineState::read(&a.state)?;
    let file = ScenarioFile::load(&a.scenario)?;
    let overrides = GeOverrides {
        sigma: a.sigma,
        price_tol: a.price_tol,
        sd_tol: a.sd_tol,
        max_outer_iter: a.max_iter,
        damping: a.damping,
    };
    let cfg = resolve_config(&state, &file, &overrides);
    let mut m = RunManifest::new("simulate");
    m.add_input(&a.state)?;
    m.set_scenario(&a.scenario)?;
    let (_, outcome) = simulate_to_dir(&state, &file, &cfg, &a.out, &mut m)?;
    println!("{}", geppml::report::OUTCOME_HEADER.join(" "));
    for r in &outcome.rows {
        println!("{}", table_row(r));
    }
    println!(
        "sigma = {}, converged in {} iterations (d = {:e}, sd = {:e})",
        cfg.sigma,
        outcome.iterations(),
        outcome.final_d(),
        outcome.final_sd()
    );
    Ok(0)
}

fn verify(a: VerifyArgs) -> Result<u8, RunError> {
    let opts = VerifyOptions {
        tol: a.tol,
        price_tol: a.price_tol,
        sd_tol: a.sd_tol,
    };
    let report = verify_run(&a.run, &opts)?;
    println!(
        "tolerances: tol={:e} price_tol={:e} sd_tol={:e}",
        report.tol, report.price_tol, report.sd_tol
    );
    for c in &report.checks {
        println!("{c}");
    }
    if report.passed() {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("{} check(s) failed", report.failures().count());
        Ok(EXIT_VERIFY)
    }
}
