use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ctlab::measures::{comparability_ratio, compute_sigma, sigma_sup_bound, DensityPair};
use ctlab::scenario::{run_scenario, write_outputs, ScenarioConfig};
use ctlab::suites::{run_suite, Suite};
use ctlab::w1::w1_grid;
use ctlab::{LabError, Result};

#[derive(Parser)]
#[command(name = "ctlab", version, about = "Gradient-penalty / congested-transport duality lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario: σ, per-λ solves, certificates, dumps.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for the per-λ solves.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute σ only and print its statistics.
    Sigma {
        #[arg(long)]
        config: PathBuf,
        /// Also write σ as a field CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute W₁ of the scenario's pair.
    W1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a built-in self-check suite.
    Check {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Duality,
    Phi,
    Traffic,
    Sigma,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Duality => Suite::Duality,
            SuiteArg::Phi => Suite::Phi,
            SuiteArg::Traffic => Suite::Traffic,
            SuiteArg::Sigma => Suite::Sigma,
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_pair(config: &ScenarioConfig) -> Result<DensityPair> {
    DensityPair::from_descriptors(config.grid_spec()?, config.pair.f.clone(), config.pair.g.clone())
}

fn run(config: PathBuf, out: PathBuf, workers: Option<usize>, seed: Option<u64>) -> Result<bool> {
    let mut config = ScenarioConfig::load(&config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if workers.is_some() {
        config.workers = workers;
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| LabError::Config(e.to_string()))?;
    let outcome = pool.install(|| run_scenario(&config))?;
    write_outputs(&outcome, &out)?;
    let report = &outcome.report;
    for r in &report.records {
        let verdict = if r.passes(&config.checks) { "ok" } else { "FAIL" };
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6e}"));
        println!(
            "lambda={:<8} gp={} bp={} gap={} {}{}",
            r.lambda,
            fmt(r.gp_value),
            fmt(r.bp_value),
            fmt(r.gap),
            verdict,
            r.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
        );
    }
    if let Some(fit) = &report.decay {
        println!("decay slope={:.4} nonincreasing={} suspicious={}", fit.slope, fit.nonincreasing, fit.suspicious);
    }
    println!("report written to {}", out.join("report.json").display());
    Ok(report.all_checks_pass)
}

#[derive(Serialize)]
struct SigmaSummary {
    method: ctlab::measures::SigmaMethod,
    max: f64,
    sup_bound: f64,
    raw_mass: f64,
    comparability: Option<ctlab::measures::ComparabilityRatio>,
    within_bound: bool,
}

fn sigma(config: PathBuf, out: Option<PathBuf>) -> Result<bool> {
    let config = ScenarioConfig::load(&config)?;
    let pair = load_pair(&config)?;
    let sigma = compute_sigma(&pair, &config.sigma_method())?;
    let bound = sigma_sup_bound(&pair);
    let summary = SigmaSummary {
        method: sigma.method.clone(),
        max: sigma.max(),
        sup_bound: bound,
        raw_mass: sigma.raw_mass,
        comparability: comparability_ratio(&sigma, pair.grid()).ok(),
        within_bound: sigma.max() <= bound,
    };
    if let Some(path) = out {
        ctlab::grid::write_scalar_csv(&sigma.density, std::io::BufWriter::new(std::fs::File::create(path)?))?;
    }
    print_json(&summary)?;
    Ok(summary.within_bound)
}

fn w1(config: PathBuf) -> Result<bool> {
    let config = ScenarioConfig::load(&config)?;
    let result = w1_grid(&load_pair(&config)?, config.w1.coarsen_to)?;
    print_json(&result)?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, workers, seed } => run(config, out, workers, seed),
        Command::Sigma { config, out } => sigma(config, out),
        Command::W1 { config } => w1(config),
        Command::Check { suite, seed } => run_suite(suite.into(), seed).and_then(|r| {
            print_json(&r)?;
            Ok(r.passed)
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
