//! Synthetic structural-gravity worlds with known parameters.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CountryCode, GravityCovariates, IntervalPanel, Pair, PanelError, TradeObservation};
use crate::balance::balance;

const CODES: [&str; 40] = [
    "DEU", "USA", "CHL", "CHN", "JPN", "AUS", "BRA", "CAN", "MEX", "FRA", "GBR", "ITA", "ESP",
    "KOR", "IND", "ARG", "PER", "COL", "NZL", "SGP", "MYS", "VNM", "ZAF", "NLD", "BEL", "CHE",
    "SWE", "NOR", "POL", "TUR", "IDN", "THA", "PHL", "EGY", "NGA", "KEN", "MAR", "BOL", "URY",
    "ECU",
];

/// Log-linear planted cost function: `ln t^(1-sigma) = b' x_ij`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedCosts {
    pub log_dist: f64,
    pub cntg: f64,
    pub lang: f64,
    pub clny: f64,
}

impl Default for PlantedCosts {
    fn default() -> Self {
        PlantedCosts {
            log_dist: -1.0,
            cntg: 0.5,
            lang: 0.3,
            clny: 0.4,
        }
    }
}

impl PlantedCosts {
    pub fn log_cost(&self, c: &GravityCovariates) -> f64 {
        let x = c.values();
        self.log_dist * x[0] + self.cntg * x[1] + self.lang * x[2] + self.clny * x[3]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.log_dist, self.cntg, self.lang, self.clny]
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_countries: usize,
    pub years: Vec<i32>,
    pub beta_fta: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Coefficient of variation of the mean-one lognormal noise factor.
    pub noise_cv: f64,
    pub intra_national: bool,
    /// Probability that an unordered pair signs an agreement in the window.
    pub fta_share: f64,
    pub costs: PlantedCosts,
}

impl SynthConfig {
    pub fn new(n_countries: usize, years: Vec<i32>, beta_fta: f64, sigma: f64, seed: u64) -> Self {
        SynthConfig {
            n_countries,
            years,
            beta_fta,
            sigma,
            seed,
            noise_cv: 0.0,
            intra_national: true,
            fta_share: 0.4,
            costs: PlantedCosts::default(),
        }
    }
}

/// Parameters and noiseless quantities behind a synthetic panel.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub beta_fta: f64,
    pub sigma: f64,
    pub seed: u64,
    pub noise_cv: f64,
    pub costs: PlantedCosts,
    /// Planted `ln t_ij^(1-sigma)` per ordered pair (FTA term excluded).
    pub log_costs: BTreeMap<Pair, f64>,
    pub output: BTreeMap<(i32, CountryCode), f64>,
    pub expenditure: BTreeMap<(i32, CountryCode), f64>,
    /// Flows before noise, keyed by `(year, exporter, importer)`.
    pub noiseless: BTreeMap<(i32, CountryCode, CountryCode), f64>,
}

impl GroundTruth {
    /// Writes the `param,value` sidecar.
    pub fn write_sidecar(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "param,value")?;
        writeln!(w, "beta_fta,{}", self.beta_fta)?;
        writeln!(w, "sigma,{}", self.sigma)?;
        writeln!(w, "seed,{}", self.seed)?;
        writeln!(w, "noise_cv,{}", self.noise_cv)?;
        writeln!(w, "cost_log_dist,{}", self.costs.log_dist)?;
        writeln!(w, "cost_cntg,{}", self.costs.cntg)?;
        writeln!(w, "cost_lang,{}", self.costs.lang)?;
        writeln!(w, "cost_clny,{}", self.costs.clny)?;
        w.flush()
    }
}

/// Parses a `param,value` sidecar into ordered name/value pairs.
pub fn read_sidecar(input: impl Read) -> Result<Vec<(String, f64)>, PanelError> {
    let mut lines = BufReader::new(input).lines();
    let io = |source| PanelError::Io {
        path: "sidecar".into(),
        source,
    };
    match lines.next() {
        Some(Ok(h)) if h.trim() == "param,value" => {}
        Some(Err(e)) => return Err(io(e)),
        other => {
            return Err(PanelError::Header {
                file: "sidecar".into(),
                expected: "param,value".into(),
                found: other.and_then(Result::ok).unwrap_or_default(),
            })
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| PanelError::Malformed {
            file: "sidecar".into(),
            line: n as u64 + 2,
            message,
        };
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| malformed("expected `param,value`".into()))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| malformed(format!("invalid value `{v}`")))?;
        out.push((k.trim().to_string(), v));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub panel: IntervalPanel,
    pub truth: GroundTruth,
}

fn country_code(idx: usize) -> CountryCode {
    if let Some(c) = CODES.get(idx) {
        return c.parse().expect("static code");
    }
    let k = idx - CODES.len();
    let bytes = [b'Q', b'A' + (k / 26 % 26) as u8, b'A' + (k % 26) as u8];
    std::str::from_utf8(&bytes).unwrap().parse().unwrap()
}

/// Distance below which two countries count as contiguous.
const CONTIGUITY_KM: f64 = 1500.0;

const MAX_COVARIATE_DRAWS: usize = 50;

/// Whether the columns of `x` stay linearly independent after removing
/// exporter and importer effects on the given cells.
fn identified(cells: &[(usize, usize)], x: &[[f64; 4]], n: usize) -> bool {
    let mut resid: Vec<Vec<f64>> = (0..4).map(|k| x.iter().map(|r| r[k]).collect()).collect();
    let norms: Vec<f64> = resid.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    for col in resid.iter_mut() {
        // Alternating projections onto the two-way effect space.
        for _ in 0..500 {
            let mut change = 0.0f64;
            for side in 0..2 {
                let mut sum = vec![0.0; n];
                let mut count = vec![0.0; n];
                for (&(i, j), v) in cells.iter().zip(col.iter()) {
                    let g = if side == 0 { i } else { j };
                    sum[g] += v;
                    count[g] += 1.0;
                }
                for (&(i, j), v) in cells.iter().zip(col.iter_mut()) {
                    let g = if side == 0 { i } else { j };
                    let m = sum[g] / count[g];
                    *v -= m;
                    change = change.max(m.abs());
                }
            }
            if change < 1e-13 {
                break;
            }
        }
    }
    // Gram-Schmidt on the residual columns.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (col, norm0) in resid.iter().zip(&norms) {
        let mut r = col.clone();
        for q in &basis {
            let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-6 * norm0.max(1.0)) {
            return false;
        }
        basis.push(r.iter().map(|v| v / norm).collect());
    }
    true
}

/// Generates a panel from the structural gravity system.
///
/// Per year, flows are `X_ij = a_i * exp(ln t_ij^(1-sigma) + beta * FTA_ijt) * b_j`
/// with `a`, `b` chosen so that exports sum to output and imports to
/// expenditure. Noise, when requested, multiplies each flow by an independent
/// mean-one lognormal factor.
pub fn synth_world(cfg: &SynthConfig) -> Result<SynthWorld, PanelError> {
    let n = cfg.n_countries;
    if n < 3 {
        return Err(PanelError::InvalidSynth(format!(
            "need at least 3 countries, got {n}"
        )));
    }
    if cfg.years.is_empty() {
        return Err(PanelError::InvalidSynth("no years".into()));
    }
    if !(cfg.sigma > 1.0) {
        return Err(PanelError::InvalidSynth(format!(
            "sigma must exceed 1, got {}",
            cfg.sigma
        )));
    }
    if !(cfg.noise_cv >= 0.0) || !cfg.beta_fta.is_finite() {
        return Err(PanelError::InvalidSynth("invalid noise or beta".into()));
    }
    let mut years = cfg.years.clone();
    years.sort_unstable();
    years.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let codes: Vec<CountryCode> = (0..n).map(country_code).collect();

    let pos: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..8000.0), rng.random_range(0.0..8000.0)))
        .collect();
    let internal: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..200.0)).collect();
    // Every binary covariate must vary across international pairs.
    let dist = |i: usize, j: usize| {
        ((pos[i].0 - pos[j].0).powi(2) + (pos[i].1 - pos[j].1).powi(2)).sqrt()
    };
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let by_dist = |a: &&(usize, usize), b: &&(usize, usize)| dist(a.0, a.1).total_cmp(&dist(b.0, b.1));
    let closest = *pairs.iter().min_by(by_dist).expect("at least one pair");
    let farthest = *pairs.iter().max_by(by_dist).expect("at least one pair");
    let mut cntg = vec![vec![false; n]; n];
    for &(i, j) in &pairs {
        let c = dist(i, j) < CONTIGUITY_KM || (i, j) == closest;
        cntg[i][j] = c;
        cntg[j][i] = c;
    }
    cntg[farthest.0][farthest.1] = false;
    cntg[farthest.1][farthest.0] = false;

    let covariate = |i: usize, j: usize, lang: &[Vec<bool>], clny: &[Vec<bool>]| {
        if i == j {
            GravityCovariates {
                exporter: codes[i],
                importer: codes[j],
                log_dist: internal[i].ln(),
                cntg: false,
                lang: true,
                clny: false,
            }
        } else {
            GravityCovariates {
                exporter: codes[i],
                importer: codes[j],
                log_dist: (300.0 + dist(i, j)).ln(),
                cntg: cntg[i][j],
                lang: lang[i][j],
                clny: clny[i][j],
            }
        }
    };
    let cells: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j || cfg.intra_national)
        .collect();

    // Redraw the language and colony links until the cost covariates are
    // identified next to exporter and importer effects.
    let mut lang = vec![vec![false; n]; n];
    let mut clny = vec![vec![false; n]; n];
    for _ in 0..MAX_COVARIATE_DRAWS {
        for &(i, j) in &pairs {
            let l = rng.random_bool(0.2);
            let c = rng.random_bool(0.1);
            lang[i][j] = l;
            lang[j][i] = l;
            clny[i][j] = c;
            clny[j][i] = c;
        }
        for (m, forced) in [(&mut lang, (0, 2)), (&mut clny, (1, 2))] {
            if !pairs.iter().any(|&(i, j)| m[i][j]) {
                m[forced.0][forced.1] = true;
                m[forced.1][forced.0] = true;
            }
            if pairs.iter().all(|&(i, j)| m[i][j]) {
                m[forced.0][forced.1] = false;
                m[forced.1][forced.0] = false;
            }
        }
        let x: Vec<[f64; 4]> = cells
            .iter()
            .map(|&(i, j)| covariate(i, j, &lang, &clny).values())
            .collect();
        if identified(&cells, &x, n) {
            break;
        }
    }

    let mut covariates = Vec::new();
    let mut log_costs = BTreeMap::new();
    for &(i, j) in &cells {
        let cov = covariate(i, j, &lang, &clny);
        log_costs.insert((codes[i], codes[j]), cfg.costs.log_cost(&cov));
        covariates.push(cov);
    }

    // Agreement start index per unordered pair; `None` means never.
    let n_years = years.len();
    let mut start = vec![vec![None; n]; n];
    let mut switching = false;
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(cfg.fta_share.clamp(0.0, 1.0)) {
                let s = rng.random_range(0..n_years);
                switching |= s > 0;
                start[i][j] = Some(s);
                start[j][i] = Some(s);
            }
        }
    }
    if !switching && n_years > 1 {
        start[0][1] = Some(n_years - 1);
        start[1][0] = Some(n_years - 1);
    }

    let log_size: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5f64..1.5)).collect();
    let growth: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.05)).collect();
    let phi: Vec<f64> = (0..n).map(|_| rng.random_range(0.9..1.1)).collect();
    let margins = |base: &[f64], year: i32| {
        let dt = f64::from(year - years[0]);
        let y: Vec<f64> = (0..n).map(|i| base[i] * (growth[i] * dt).exp()).collect();
        let raw_e: Vec<f64> = (0..n).map(|i| phi[i] * y[i]).collect();
        let scale = y.iter().sum::<f64>() / raw_e.iter().sum::<f64>();
        let e: Vec<f64> = raw_e.iter().map(|v| v * scale).collect();
        (y, e)
    };
    // Without domestic sales a country must sell less than everyone else
    // buys, so size dispersion is narrowed until that holds with slack.
    let mut spread = 1.0;
    let base = loop {
        let base: Vec<f64> = log_size.iter().map(|u| 1000.0 * (spread * u).exp()).collect();
        let feasible = cfg.intra_national
            || years.iter().all(|&year| {
                let (y, e) = margins(&base, year);
                let world: f64 = y.iter().sum();
                y.iter().zip(&e).all(|(a, b)| a.max(*b) < 0.45 * world)
            });
        if feasible {
            break base;
        }
        if spread < 1e-3 {
            return Err(PanelError::InvalidSynth(
                "cannot balance flows without intra-national trade".into(),
            ));
        }
        spread *= 0.5;
    };

    let mut output = BTreeMap::new();
    let mut expenditure = BTreeMap::new();
    let mut noiseless = BTreeMap::new();
    let mut observations = Vec::new();
    let mut fta_rows = Vec::new();
    let noise = if cfg.noise_cv > 0.0 {
        let s2 = (1.0 + cfg.noise_cv * cfg.noise_cv).ln();
        Some((Normal::new(0.0, 1.0).unwrap(), s2.sqrt(), s2))
    } else {
        None
    };

    for (t, &year) in years.iter().enumerate() {
        let (y, e) = margins(&base, year);
        let in_force = |i: usize, j: usize| matches!(start[i][j], Some(s) if s <= t);
        let seed: Vec<f64> = cells
            .iter()
            .map(|&(i, j)| {
                let fta = if in_force(i, j) { cfg.beta_fta } else { 0.0 };
                (log_costs[&(codes[i], codes[j])] + fta).exp()
            })
            .collect();
        let (flows, _) = balance(&cells, &seed, &y, &e, 1e-15, 100_000);

        for i in 0..n {
            output.insert((year, codes[i]), y[i]);
            expenditure.insert((year, codes[i]), e[i]);
        }
        for (&(i, j), &x) in cells.iter().zip(&flows) {
            noiseless.insert((year, codes[i], codes[j]), x);
            let flow = match &noise {
                Some((normal, s, s2)) => x * (s * normal.sample(&mut rng) - 0.5 * s2).exp(),
                None => x,
            };
            observations.push(TradeObservation {
                exporter: codes[i],
                importer: codes[j],
                year,
                flow,
                fta: false,
            });
            if in_force(i, j) {
                fta_rows.push((year, codes[i], codes[j]));
            }
        }
    }

    let panel = IntervalPanel::new(codes, observations, covariates, fta_rows)?;
    Ok(SynthWorld {
        panel,
        truth: GroundTruth {
            beta_fta: cfg.beta_fta,
            sigma: cfg.sigma,
            seed: cfg.seed,
            noise_cv: cfg.noise_cv,
            costs: cfg.costs,
            log_costs,
            output,
            expenditure,
            noiseless,
        },
    })
}
