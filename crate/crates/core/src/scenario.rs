//! Experiment scenarios: a JSON config in, a certified per-λ report and field
//! dumps out.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beckmann::{duality_certificate, extremality_residual_bound, w1_lower_bound_check, w1_lower_bound_rhs};
use crate::error::{LabError, Result};
use crate::gp::{solve_gp, GpProblem, SolutionSummary, SolverConfig};
use crate::grid::{write_scalar_csv, write_vector_csv, GridSpec, ScalarField, VectorField};
use crate::measures::{
    comparability_ratio, compute_sigma, sigma_sup_bound, ComparabilityRatio, DensityDescriptor, DensityPair,
    SigmaField, SigmaMethod,
};
use crate::traffic::{traffic_audit, TrafficAudit, TrafficPlanDiscrete};
use crate::w1::{w1_grid, W1Result, DEFAULT_COARSE_CELLS};

pub const SCHEMA_VERSION: u32 = 1;
pub const SWEEP_CSV_HEADER: &str =
    "lambda,gp_value,bp_value,gap,w1,lb_rhs,residual,residual_bound,ok_duality,ok_lowerbound,ok_extremality";
pub const MIN_CELLS: usize = 8;
pub const MAX_CELLS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSection {
    pub dim: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSection {
    pub f: DensityDescriptor,
    pub g: DensityDescriptor,
}

/// Solver parameters plus an optional single `lambda`, used when the
/// scenario has no `lambdas` list.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolverSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(flatten)]
    pub config: SolverConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChecksConfig {
    pub duality: bool,
    pub lower_bound: bool,
    pub extremality: bool,
    pub traffic: bool,
    pub sigma_bounds: bool,
    pub decay: bool,
    /// Largest accepted `gap / |gp_value|`.
    pub max_relative_gap: f64,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self {
            duality: true,
            lower_bound: true,
            extremality: true,
            traffic: false,
            sigma_bounds: true,
            decay: true,
            max_relative_gap: 5e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct W1Section {
    /// Cap on cells per axis for the two-dimensional transport problem.
    pub coarsen_to: usize,
}

impl Default for W1Section {
    fn default() -> Self {
        Self { coarsen_to: DEFAULT_COARSE_CELLS }
    }
}

fn default_sigma() -> SigmaMethod {
    SigmaMethod::Quadrature { t_nodes: 128 }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub grid: GridSection,
    pub pair: PairSection,
    #[serde(default = "default_sigma")]
    pub sigma: SigmaMethod,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub w1: W1Section,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Write σ, potential, flow and plan dumps next to the report.
    #[serde(default = "default_true")]
    pub dumps: bool,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.dim, self.grid.n)
    }

    /// λ values in ascending order.
    pub fn lambda_list(&self) -> Vec<f64> {
        let mut out = if self.lambdas.is_empty() { self.solver.lambda.into_iter().collect() } else { self.lambdas.clone() };
        out.sort_by(f64::total_cmp);
        out
    }

    /// The σ construction with the scenario seed applied to Monte Carlo.
    pub fn sigma_method(&self) -> SigmaMethod {
        match self.sigma {
            SigmaMethod::Montecarlo { sample_count, .. } => SigmaMethod::Montecarlo { sample_count, seed: self.seed },
            ref m => m.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_CELLS..=MAX_CELLS).contains(&self.grid.n) {
            return Err(LabError::Config(format!("grid n = {} outside [{MIN_CELLS}, {MAX_CELLS}]", self.grid.n)));
        }
        self.grid_spec()?;
        let lambdas = self.lambda_list();
        if lambdas.is_empty() {
            return Err(LabError::Config("no lambda values given".into()));
        }
        if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(LabError::Config(format!("lambda must be positive and finite, got {bad}")));
        }
        if lambdas.windows(2).any(|w| w[0] == w[1]) {
            return Err(LabError::Config("duplicate lambda values".into()));
        }
        self.solver.config.validate()?;
        if let Some(0) = self.workers {
            return Err(LabError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SigmaReport {
    pub method: SigmaMethod,
    pub max: f64,
    pub raw_mass: f64,
    pub mass_tolerance: f64,
    pub sup_bound: f64,
    pub ok_bound: Option<bool>,
    pub ok_mass: Option<bool>,
    pub comparability: Option<ComparabilityRatio>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparability_note: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LambdaRecord {
    pub lambda: f64,
    pub error: Option<String>,
    pub solver: Option<SolutionSummary>,
    pub gp_value: Option<f64>,
    pub bp_value: Option<f64>,
    pub gap: Option<f64>,
    pub relative_gap: Option<f64>,
    pub feasibility_residual: Option<f64>,
    pub cg_iterations: Option<usize>,
    pub w1: Option<f64>,
    pub lb_rhs: Option<f64>,
    pub residual: Option<f64>,
    pub residual_bound: Option<f64>,
    pub ok_duality: Option<bool>,
    pub ok_lowerbound: Option<bool>,
    pub ok_extremality: Option<bool>,
    pub ok_traffic: Option<bool>,
    pub traffic: Option<TrafficAudit>,
}

impl LambdaRecord {
    fn verdicts(&self, checks: &ChecksConfig) -> Vec<(bool, Option<bool>)> {
        vec![
            (checks.duality, self.ok_duality),
            (checks.lower_bound, self.ok_lowerbound),
            (checks.extremality, self.ok_extremality),
            (checks.traffic, self.ok_traffic),
        ]
    }

    /// No error and every enabled check recorded as passing.
    pub fn passes(&self, checks: &ChecksConfig) -> bool {
        self.error.is_none() && self.verdicts(checks).iter().all(|(on, v)| !on || *v == Some(true))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayPoint {
    pub lambda: f64,
    /// `gp_value − w1`.
    pub excess: f64,
    /// `gp_value − (w1 + w1²/(2λ‖σ‖_∞))`.
    pub excess_over_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    /// Least-squares slope of `log(gp_value − w1)` against `log λ`.
    pub slope: f64,
    pub intercept: f64,
    pub nonincreasing: bool,
    /// Slope outside `[-1.5, -0.5]`: far from the expected `1/λ` decay.
    pub suspicious: bool,
    pub points: Vec<DecayPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub schema_version: u32,
    pub name: String,
    pub config: ScenarioConfig,
    pub sigma: SigmaReport,
    pub w1: Option<W1Result>,
    pub w1_error: Option<String>,
    pub records: Vec<LambdaRecord>,
    pub decay: Option<DecayFit>,
    pub ok_decay: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_note: Option<String>,
    pub all_checks_pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaTiming {
    pub lambda: f64,
    pub seconds: f64,
}

/// Wall-clock timings, kept out of the report so that it stays reproducible.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioTimings {
    pub sigma_seconds: f64,
    pub w1_seconds: f64,
    pub per_lambda: Vec<LambdaTiming>,
    pub total_seconds: f64,
}

/// Fields kept for the dump step.
#[derive(Debug, Clone)]
pub struct LambdaFields {
    pub u: ScalarField,
    pub w: Option<VectorField>,
    pub plan: Option<TrafficPlanDiscrete>,
}

pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    pub timings: ScenarioTimings,
    pub sigma: SigmaField,
    pub fields: Vec<Option<LambdaFields>>,
}

fn sigma_report(pair: &DensityPair, sigma: &SigmaField, checks: &ChecksConfig) -> SigmaReport {
    let grid = pair.grid();
    let sup_bound = sigma_sup_bound(pair);
    let mass_tolerance = sigma.mass_tolerance();
    let (comparability, comparability_note) = match comparability_ratio(sigma, grid) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    SigmaReport {
        method: sigma.method.clone(),
        max: sigma.max(),
        raw_mass: sigma.raw_mass,
        mass_tolerance,
        sup_bound,
        ok_bound: checks.sigma_bounds.then(|| sigma.max() <= sup_bound),
        ok_mass: checks.sigma_bounds.then(|| (sigma.raw_mass - 1.0).abs() <= mass_tolerance),
        comparability,
        comparability_note,
    }
}

fn run_lambda(
    config: &ScenarioConfig,
    pair: &DensityPair,
    sigma: &SigmaField,
    w1: Option<f64>,
    lambda: f64,
) -> (LambdaRecord, Option<LambdaFields>) {
    let mut record = LambdaRecord { lambda, w1, ..LambdaRecord::default() };
    let checks = &config.checks;
    let mut fields = None;
    let result = (|| -> Result<()> {
        let problem = GpProblem::new(pair.clone(), sigma.clone(), lambda)?;
        let solution = solve_gp(&problem, &config.solver.config)?;
        record.solver = Some(solution.summary());
        record.gp_value = Some(solution.value);
        fields = Some(LambdaFields { u: solution.u.clone(), w: None, plan: None });
        if let Some(w1) = w1 {
            let rhs = w1_lower_bound_rhs(w1, lambda, problem.sigma_max());
            record.lb_rhs = Some(rhs);
            if checks.lower_bound {
                record.ok_lowerbound = Some(w1_lower_bound_check(solution.value, w1, lambda, problem.sigma_max()));
            }
        }
        let cert = duality_certificate(&problem, &solution)?;
        record.bp_value = Some(cert.bp_value);
        record.gap = Some(cert.gap);
        record.relative_gap = Some(cert.relative_gap);
        record.feasibility_residual = Some(cert.candidate.feasibility_residual);
        record.cg_iterations = Some(cert.candidate.cg_iterations);
        if checks.duality {
            record.ok_duality = Some(cert.is_finite() && cert.gap >= 0.0 && cert.relative_gap <= checks.max_relative_gap);
        }
        let ex = extremality_residual_bound(&problem, &solution.u, &cert.candidate.w, cert.gap)?;
        record.residual = Some(ex.residual);
        record.residual_bound = Some(ex.bound);
        if checks.extremality {
            record.ok_extremality = Some(ex.holds);
        }
        let w = cert.candidate.w;
        if checks.traffic {
            let (plan, audit) = traffic_audit(&w, pair, sigma, lambda)?;
            record.ok_traffic = Some(audit.passes());
            record.traffic = Some(audit);
            if let Some(f) = fields.as_mut() {
                f.plan = Some(plan);
            }
        }
        if let Some(f) = fields.as_mut() {
            f.w = Some(w);
        }
        Ok(())
    })();
    if let Err(e) = result {
        record.error = Some(e.to_string());
    }
    (record, fields)
}

/// Least-squares fit of `log(gp − w1)` against `log λ`.
///
/// Needs at least four points spanning a decade; any `gp − w1 ≤ 0` rejects
/// the sweep.
pub fn decay_fit(lambdas: &[f64], gp_values: &[f64], w1: f64, sigma_max: f64) -> Result<DecayFit> {
    if lambdas.len() != gp_values.len() {
        return Err(LabError::Sweep("lambda and value columns differ in length".into()));
    }
    if lambdas.len() < 4 {
        return Err(LabError::Sweep(format!("need at least 4 lambda values, got {}", lambdas.len())));
    }
    let (lo, hi) = lambdas.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &l| (a.min(l), b.max(l)));
    if hi < 10.0 * lo * (1.0 - 1e-12) {
        return Err(LabError::Sweep(format!("lambda range [{lo}, {hi}] spans less than a decade")));
    }
    let mut points = Vec::with_capacity(lambdas.len());
    for (&lambda, &gp) in lambdas.iter().zip(gp_values) {
        let excess = gp - w1;
        if !(excess > 0.0) {
            return Err(LabError::Sweep(format!("gp_value − w1 = {excess:e} ≤ 0 at lambda = {lambda}")));
        }
        points.push(DecayPoint { lambda, excess, excess_over_bound: gp - w1_lower_bound_rhs(w1, lambda, sigma_max) });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.lambda.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.excess.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].lambda.total_cmp(&points[b].lambda));
    let nonincreasing = order.windows(2).all(|w| points[w[1]].excess <= points[w[0]].excess);
    Ok(DecayFit {
        slope,
        intercept: my - slope * mx,
        nonincreasing,
        suspicious: !(-1.5..=-0.5).contains(&slope),
        points,
    })
}

/// Decay record of a finished report, from its successful λ rows.
pub fn lambda_sweep_summary(report: &ScenarioReport) -> Result<DecayFit> {
    let w1 = report.w1.ok_or_else(|| LabError::Sweep("report has no W1 value".into()))?.w1;
    let rows: Vec<(f64, f64)> =
        report.records.iter().filter(|r| r.error.is_none()).filter_map(|r| Some((r.lambda, r.gp_value?))).collect();
    if rows.len() != report.records.len() {
        return Err(LabError::Sweep("some lambda values failed".into()));
    }
    let (lambdas, values): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    decay_fit(&lambdas, &values, w1, report.sigma.max)
}

/// Executes the scenario in the current rayon pool.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutcome> {
    config.validate()?;
    let start = Instant::now();
    let grid = config.grid_spec()?;
    let pair = DensityPair::from_descriptors(grid, config.pair.f.clone(), config.pair.g.clone())?;

    let t = Instant::now();
    let sigma = compute_sigma(&pair, &config.sigma_method())?;
    let sigma_seconds = t.elapsed().as_secs_f64();
    let sigma_rep = sigma_report(&pair, &sigma, &config.checks);

    let t = Instant::now();
    let (w1, w1_error) = match w1_grid(&pair, config.w1.coarsen_to) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let w1_seconds = t.elapsed().as_secs_f64();

    let lambdas = config.lambda_list();
    let results: Vec<(LambdaRecord, Option<LambdaFields>, f64)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let t = Instant::now();
            let (record, fields) = run_lambda(config, &pair, &sigma, w1.map(|r| r.w1), lambda);
            (record, fields, t.elapsed().as_secs_f64())
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut fields = Vec::with_capacity(results.len());
    let mut per_lambda = Vec::with_capacity(results.len());
    for (record, f, seconds) in results {
        per_lambda.push(LambdaTiming { lambda: record.lambda, seconds });
        records.push(record);
        fields.push(f);
    }

    let mut report = ScenarioReport {
        schema_version: SCHEMA_VERSION,
        name: config.name.clone(),
        // Thread count does not affect results; leave it out so reports compare.
        config: ScenarioConfig { workers: None, ..config.clone() },
        sigma: sigma_rep,
        w1,
        w1_error,
        records,
        decay: None,
        ok_decay: None,
        decay_note: None,
        all_checks_pass: false,
    };
    let degenerate = report.w1.is_some_and(|r| r.w1 <= 1e-12);
    if config.checks.decay && degenerate {
        report.decay_note = Some("W1 = 0: identical marginals leave no decay to fit".into());
    } else if config.checks.decay && lambdas.len() >= 4 {
        match lambda_sweep_summary(&report) {
            Ok(fit) => {
                report.ok_decay = Some(fit.nonincreasing && !fit.suspicious);
                report.decay = Some(fit);
            }
            Err(e) => {
                report.ok_decay = Some(false);
                report.decay_note = Some(e.to_string());
            }
        }
    } else if config.checks.decay {
        report.decay_note = Some("decay fit needs at least 4 lambda values".into());
    }
    let needs_w1 = config.checks.lower_bound || config.checks.decay;
    report.all_checks_pass = report.records.iter().all(|r| r.passes(&config.checks))
        && report.sigma.ok_bound != Some(false)
        && report.sigma.ok_mass != Some(false)
        && report.ok_decay != Some(false)
        && !(needs_w1 && report.w1.is_none());

    let timings = ScenarioTimings { sigma_seconds, w1_seconds, per_lambda, total_seconds: start.elapsed().as_secs_f64() };
    Ok(ScenarioOutcome { report, timings, sigma, fields })
}

fn csv_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The fixed-column sweep table.
pub fn sweep_csv(report: &ScenarioReport) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in &report.records {
        let row = [
            r.lambda.to_string(),
            csv_opt(r.gp_value),
            csv_opt(r.bp_value),
            csv_opt(r.gap),
            csv_opt(r.w1),
            csv_opt(r.lb_rhs),
            csv_opt(r.residual),
            csv_opt(r.residual_bound),
            csv_opt(r.ok_duality),
            csv_opt(r.ok_lowerbound),
            csv_opt(r.ok_extremality),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn report_json(report: &ScenarioReport) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn lambda_dir(out: &Path, lambda: f64) -> PathBuf {
    out.join(format!("lambda_{lambda}"))
}

/// Writes `report.json`, `sweep.csv`, `timings.json` and, when enabled, the
/// field dumps into `out`.
pub fn write_outputs(outcome: &ScenarioOutcome, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report_json(&outcome.report)?)?;
    fs::write(out.join("sweep.csv"), sweep_csv(&outcome.report))?;
    fs::write(out.join("timings.json"), serde_json::to_string_pretty(&outcome.timings)? + "\n")?;
    if !outcome.report.config.dumps {
        return Ok(());
    }
    write_scalar_csv(&outcome.sigma.density, create(&out.join("sigma.csv"))?)?;
    for (record, fields) in outcome.report.records.iter().zip(&outcome.fields) {
        let Some(fields) = fields else { continue };
        let dir = lambda_dir(out, record.lambda);
        fs::create_dir_all(&dir)?;
        write_scalar_csv(&fields.u, create(&dir.join("u.csv"))?)?;
        if let Some(summary) = &record.solver {
            fs::write(dir.join("u.json"), serde_json::to_string(summary)? + "\n")?;
        }
        if let Some(w) = &fields.w {
            write_vector_csv(w, create(&dir.join("w.csv"))?)?;
        }
        if let Some(plan) = &fields.plan {
            plan.write_jsonl(create(&dir.join("plan.jsonl"))?)?;
        }
    }
    Ok(())
}
