use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use upair_core::calibration::{calibrate, CoefficientsFile};
use upair_core::sim::{rejection_study, CalibrationMode, RejectionTable, ScenarioConfig};
use upair_core::{
    nulldist, run_all, AdjustmentSet, ChiBarMix, FitOptions, RLaw, RStarLaw, TestId, TestReport,
    Theta, UnorderedDataset,
};

const DEFAULT_SEED: u64 = 20_240_917;

#[derive(Parser, Debug)]
#[command(name = "upair", version, about = "Homogeneity tests for unordered paired observations")]
struct Cli {
    /// Base seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the machine-readable result here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Adjustment coefficients file replacing the built-in defaults.
    #[arg(long, global = true)]
    coeffs: Option<PathBuf>,
    /// Monte Carlo replicates for `simulate` and `calibrate`.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Optimizer convergence tolerance on the log-likelihood.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the four tests on a two-column data file.
    Test {
        input: PathBuf,
    },
    /// Evaluate a null distribution.
    Dist {
        #[arg(value_enum)]
        query: Query,
        #[arg(value_enum)]
        law: Law,
        value: f64,
        /// Sample size, required by the adjusted laws.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Rejection-rate study under a chosen parameter.
    Simulate(SimulateArgs),
    /// Re-estimate the finite-sample adjustment coefficients.
    Calibrate {
        /// Comma-separated sample sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 20, 30, 40, 50, 60, 70, 80, 90, 100])]
        grid: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Query {
    Pvalue,
    Quantile,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Law {
    #[value(name = "chibar")]
    Chibar,
    #[value(name = "R")]
    R,
    #[value(name = "Rstar")]
    Rstar,
    #[value(name = "chibar-adjusted")]
    ChibarAdjusted,
    #[value(name = "chibar-star-adjusted")]
    ChibarStarAdjusted,
    #[value(name = "R-adjusted")]
    RAdjusted,
    #[value(name = "Rstar-adjusted")]
    RstarAdjusted,
}

impl Law {
    fn adjusted_test(self) -> Option<TestId> {
        match self {
            Law::ChibarAdjusted => Some(TestId::Rn1),
            Law::ChibarStarAdjusted => Some(TestId::Rn1Star),
            Law::RAdjusted => Some(TestId::Rn2),
            Law::RstarAdjusted => Some(TestId::Rn2Star),
            _ => None,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON scenario file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample sizes; more than one produces a sweep.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long, allow_hyphen_values = true)]
    mu1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mu2: Option<f64>,
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    /// Comma-separated nominal levels.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<f64>,
    /// Comma-separated tests among rn1, rn2, rn1_star, rn2_star.
    #[arg(long, value_delimiter = ',')]
    tests: Vec<String>,
    /// Comma-separated calibrations among raw, adjusted.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Provenance {
    software_version: &'static str,
    seed: u64,
    timestamp_unix: u64,
    input_sha256: Option<String>,
    r_table_seed: u64,
    r_table_size: usize,
    r_table_settings_hash: String,
    coefficients_source: String,
}

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Body<'a> {
    TestReport {
        coefficients: &'a AdjustmentSet,
        report: &'a TestReport,
    },
}

#[derive(Debug, Serialize)]
struct ReportDocument<'a> {
    provenance: Provenance,
    #[serde(flatten)]
    body: Body<'a>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` means output was produced but is incomplete.
fn run(cli: &Cli) -> Result<bool> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::Test { input } => cmd_test(cli, input),
        Command::Dist { query, law, value, n } => cmd_dist(*query, *law, *value, *n, cli).map(|_| true),
        Command::Simulate(args) => cmd_simulate(cli, args).map(|_| true),
        Command::Calibrate { grid } => cmd_calibrate(cli, grid).map(|_| true),
    }
}

fn fit_options(cli: &Cli) -> Result<FitOptions> {
    let mut o = FitOptions { seed: cli.seed, ..FitOptions::default() };
    if let Some(t) = cli.tolerance {
        if !(t > 0.0) {
            bail!("--tolerance must be positive");
        }
        o.tolerance = t;
    }
    Ok(o)
}

fn load_coefficients(cli: &Cli) -> Result<(AdjustmentSet, String)> {
    match &cli.coeffs {
        None => Ok((AdjustmentSet::default(), "built-in".into())),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file = CoefficientsFile::from_json(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok((file.to_set()?, p.display().to_string()))
        }
    }
}

fn provenance(seed: u64, input: Option<&[u8]>, law: &RLaw, coefficients_source: String) -> Provenance {
    Provenance {
        software_version: env!("CARGO_PKG_VERSION"),
        seed,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        input_sha256: input.map(|b| format!("{:x}", Sha256::digest(b))),
        r_table_seed: law.seed(),
        r_table_size: law.size(),
        r_table_settings_hash: format!("{:016x}", law.settings_hash()),
        coefficients_source,
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn format_p(p: Option<f64>, below: bool, law: &RLaw) -> String {
    match p {
        None => "-".into(),
        Some(_) if below => format!("< 1/(N+1) = {:.2e}", law.resolution()),
        Some(p) => format!("{p:.3e}"),
    }
}

fn cmd_test(cli: &Cli, input: &Path) -> Result<bool> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let text = String::from_utf8(bytes.clone()).context("input is not UTF-8")?;
    let ds = UnorderedDataset::parse(&text).with_context(|| format!("parsing {}", input.display()))?;
    let opts = fit_options(cli)?;
    let (coeffs, source) = load_coefficients(cli)?;
    let law = RLaw::default_law();
    let report = run_all(&ds, &opts, &coeffs, law);

    println!("n = {}", report.n);
    println!("{:<8} {:>12} {:>24} {:>24}", "test", "statistic", "raw p", "adjusted p");
    for t in &report.tests {
        match &t.error {
            Some(e) => println!("{:<8} failed: {e}", t.test.label()),
            None => println!(
                "{:<8} {:>12.4} {:>24} {:>24}{}",
                t.test.label(),
                t.statistic.unwrap_or(f64::NAN),
                format_p(t.p_raw, t.below_resolution && t.p_raw.is_some_and(|p| p <= law.resolution()), law),
                format_p(t.p_adj, t.below_resolution && t.p_adj.is_some_and(|p| p <= law.resolution()), law),
                if t.adjustment_clipped { "  (adjustment clipped)" } else { "" }
            ),
        }
    }
    for f in &report.fits {
        if let Some(e) = &f.error {
            eprintln!("fit {} failed: {e}", f.constraint);
        }
    }

    if let Some(out) = &cli.out {
        let doc = ReportDocument {
            provenance: provenance(cli.seed, Some(&bytes), law, source),
            body: Body::TestReport { coefficients: &coeffs, report: &report },
        };
        write_out(out, &serde_json::to_string_pretty(&doc)?)?;
    }
    if !report.is_complete() {
        eprintln!("error: not every test could be computed");
    }
    Ok(report.is_complete())
}

fn cmd_dist(query: Query, law: Law, value: f64, n: Option<usize>, cli: &Cli) -> Result<()> {
    if let Query::Quantile = query {
        if !(value > 0.0 && value < 1.0) {
            bail!("quantile level must lie in (0, 1), got {value}");
        }
    }
    let r_law = RLaw::default_law();
    let result = match law.adjusted_test() {
        None => match (law, query) {
            (Law::Chibar, Query::Pvalue) => ChiBarMix::equal().tail(value)?,
            (Law::Chibar, Query::Quantile) => ChiBarMix::equal().quantile(value)?,
            (Law::R, Query::Pvalue) => r_law.tail(value)?,
            (Law::R, Query::Quantile) => r_law.quantile(value)?,
            (Law::Rstar, Query::Pvalue) => RStarLaw::default().sf(value)?,
            (Law::Rstar, Query::Quantile) => RStarLaw::default().quantile(value)?,
            _ => unreachable!("adjusted laws handled below"),
        },
        Some(test) => {
            let Some(n) = n else { bail!("the adjusted laws need --n") };
            let (coeffs, _) = load_coefficients(cli)?;
            match query {
                Query::Pvalue => nulldist::adjusted_pvalue(test, value, n, &coeffs, r_law)?.p,
                Query::Quantile => adjusted_quantile(test, value, n, &coeffs, r_law)?,
            }
        }
    };
    println!("{result:.6e}");
    Ok(())
}

/// Quantile of the adjusted law: reweighted mixture or rescaled limit.
fn adjusted_quantile(test: TestId, alpha: f64, n: usize, coeffs: &AdjustmentSet, law: &RLaw) -> Result<f64> {
    let (factor, _) = coeffs.get(test).factor(n);
    Ok(match test {
        TestId::Rn1 | TestId::Rn1Star => ChiBarMix::new(factor)?.quantile(alpha)?,
        TestId::Rn2 => factor * law.quantile(alpha)?,
        TestId::Rn2Star => factor * RStarLaw::default().quantile(alpha)?,
    })
}

fn scenario(cli: &Cli, args: &SimulateArgs) -> Result<ScenarioConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<ScenarioConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ScenarioConfig::new(
            args.n.first().copied().unwrap_or(75),
            Theta::exchangeable(0.0, 1.0, 0.0)?,
            cli.reps.unwrap_or(1000),
            cli.seed,
        ),
    };
    if args.config.is_some() {
        if let Some(r) = cli.reps {
            cfg.reps = r;
        }
        if cli.seed != DEFAULT_SEED {
            cfg.seed = cli.seed;
        }
    }
    let t = cfg.theta;
    cfg.theta = Theta::new(
        args.mu1.unwrap_or(t.mu1()),
        args.mu2.unwrap_or(t.mu2()),
        args.sigma1.unwrap_or(t.sigma1()),
        args.sigma2.unwrap_or(t.sigma2()),
        args.rho.unwrap_or(t.rho()),
    )?;
    if !args.levels.is_empty() {
        cfg.levels = args.levels.clone();
    }
    if !args.tests.is_empty() {
        cfg.tests = args
            .tests
            .iter()
            .map(|s| TestId::from_key(s).with_context(|| format!("unknown test {s:?}")))
            .collect::<Result<_>>()?;
    }
    if !args.modes.is_empty() {
        cfg.modes = args
            .modes
            .iter()
            .map(|s| match s.as_str() {
                "raw" => Ok(CalibrationMode::Raw),
                "adjusted" => Ok(CalibrationMode::Adjusted),
                _ => bail!("unknown calibration mode {s:?}"),
            })
            .collect::<Result<_>>()?;
    }
    if cli.coeffs.is_some() {
        cfg.coefficients = load_coefficients(cli)?.0;
    }
    if let Some(t) = cli.tolerance {
        cfg.fit.tolerance = t;
    }
    Ok(cfg)
}

fn sweep_csv(tables: &[RejectionTable]) -> String {
    let mut s = String::from("n,test,level,mode,rejections,percent,std_error\n");
    for t in tables {
        for e in &t.entries {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t.config.n,
                e.test.key(),
                e.level,
                e.mode.as_str(),
                e.rejections,
                e.percent,
                e.std_error
            ));
        }
    }
    s
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let base = scenario(cli, args)?;
    let sizes = if args.n.is_empty() { vec![base.n] } else { args.n.clone() };
    let law = RLaw::default_law();
    let mut tables = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let cfg = ScenarioConfig { n, ..base.clone() };
        cfg.validate()?;
        tables.push(rejection_study(&cfg, law)?);
    }
    let csv = if tables.len() == 1 {
        tables[0].to_csv(&[("software_version", env!("CARGO_PKG_VERSION").to_string())])
    } else {
        sweep_csv(&tables)
    };
    match &cli.out {
        Some(p) => write_out(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_calibrate(cli: &Cli, grid: &[usize]) -> Result<()> {
    let reps = cli.reps.unwrap_or(50_000);
    let opts = fit_options(cli)?;
    let law = RLaw::default_law();
    let output = calibrate(grid, reps, cli.seed, &opts, law)?;
    for e in &output.file.coefficients {
        println!("{:<8} {}: a = {:.4}, b = {:.4}", e.test.label(), e.intercept, e.a, e.b);
    }
    if output.file.provenance.as_ref().is_some_and(|p| p.low_precision) {
        eprintln!("note: fewer than 50000 replicates; coefficients are low precision");
    }
    let doc = output.file.to_json()?;
    match &cli.out {
        Some(p) => write_out(p, &doc)?,
        None => println!("{doc}"),
    }
    Ok(())
}
