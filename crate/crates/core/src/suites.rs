//! Built-in self-check suites behind `ctlab check`.

use serde::Serialize;

use crate::beckmann::{duality_certificate, extremality_residual_bound, phi_lower_bound_check};
use crate::error::Result;
use crate::gp::{solve_gp, GpProblem, SolverConfig};
use crate::grid::GridSpec;
use crate::measures::{sigma_montecarlo, sigma_quadrature, sigma_sup_bound, DensityDescriptor, DensityPair};
use crate::traffic::traffic_audit;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Duality,
    Phi,
    Traffic,
    Sigma,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Duality => "duality",
            Suite::Phi => "phi",
            Suite::Traffic => "traffic",
            Suite::Sigma => "sigma",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteItem {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub passed: bool,
    pub items: Vec<SuiteItem>,
}

/// `value ≤ threshold`.
fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> SuiteItem {
    SuiteItem { name: name.into(), value, threshold, passed: value <= threshold }
}

/// `f = U(0,1)`, `g = 2·1[1/4, 3/4]`.
pub fn oracle_pair_1d(n: usize) -> Result<DensityPair> {
    let b = |lo: f64, hi: f64| DensityDescriptor::UniformBox { lo: vec![lo], hi: vec![hi] };
    DensityPair::from_descriptors(GridSpec::new(1, n)?, b(0.0, 1.0), b(0.25, 0.75))
}

/// Two well-separated truncated gaussians on the unit square.
pub fn gaussian_pair_2d(n: usize) -> Result<DensityPair> {
    DensityPair::from_descriptors(
        GridSpec::new(2, n)?,
        DensityDescriptor::TruncatedGaussian { mean: vec![0.3, 0.35], stddev: 0.12 },
        DensityDescriptor::TruncatedGaussian { mean: vec![0.7, 0.6], stddev: 0.1 },
    )
}

fn duality_items(label: &str, pair: DensityPair, lambda: f64, max_relative_gap: f64) -> Result<Vec<SuiteItem>> {
    let sigma = sigma_quadrature(&pair, 64)?;
    let problem = GpProblem::new(pair, sigma, lambda)?;
    let solution = solve_gp(&problem, &SolverConfig::default())?;
    let cert = duality_certificate(&problem, &solution)?;
    let ex = extremality_residual_bound(&problem, &solution.u, &cert.candidate.w, cert.gap)?;
    Ok(vec![
        at_most(format!("{label} relative gap"), cert.relative_gap, max_relative_gap),
        at_most(format!("{label} negative gap"), -cert.gap, 0.0),
        at_most(format!("{label} extremality residual"), ex.residual, ex.bound),
    ])
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let items = match suite {
        Suite::Duality => {
            let mut items = duality_items("1-D oracle n=128 lambda=1", oracle_pair_1d(128)?, 1.0, 1e-2)?;
            items.extend(duality_items("2-D gaussians n=32 lambda=1", gaussian_pair_2d(32)?, 1.0, 5e-2)?);
            items
        }
        Suite::Phi => {
            let violations = phi_lower_bound_check(100_000, seed)?;
            vec![at_most("violations in 1e5 tuples", violations as f64, 0.0)]
        }
        Suite::Traffic => {
            let pair = gaussian_pair_2d(32)?;
            let sigma = sigma_quadrature(&pair, 64)?;
            let problem = GpProblem::new(pair.clone(), sigma.clone(), 1.0)?;
            let solution = solve_gp(&problem, &SolverConfig::default())?;
            let cert = duality_certificate(&problem, &solution)?;
            let (_, audit) = traffic_audit(&cert.candidate.w, &pair, &sigma, 1.0)?;
            vec![
                at_most("unrouted residual", audit.unrouted_residual, 1e-8),
                at_most("max |i - |w_Q|_1|", audit.intensity_mismatch, 1e-10),
                at_most("relative cost error", audit.relative_cost_error, 1e-6),
            ]
        }
        Suite::Sigma => {
            let pair = oracle_pair_1d(64)?;
            let quad = sigma_quadrature(&pair, 128)?;
            let mc = sigma_montecarlo(&pair, 1_000_000, seed)?;
            let l1 = quad.density.zip_map(&mc.density, |a, b| (a - b).abs()).l1_norm();
            let swapped = sigma_quadrature(&pair.swapped(), 128)?;
            let asym = quad.density.zip_map(&swapped.density, |a, b| (a - b).abs()).max();
            let gauss = gaussian_pair_2d(32)?;
            let gsigma = sigma_quadrature(&gauss, 64)?;
            vec![
                at_most("1-D L1(quadrature, monte carlo)", l1, 0.02),
                at_most("1-D max sigma / bound", quad.max() / sigma_sup_bound(&pair), 1.0),
                at_most("1-D exchange asymmetry", asym, 1e-9),
                at_most("1-D |raw mass - 1|", (quad.raw_mass - 1.0).abs(), 1e-6),
                at_most("2-D max sigma / bound", gsigma.max() / sigma_sup_bound(&gauss), 1.0),
            ]
        }
    };
    Ok(SuiteReport { suite: suite.name(), passed: items.iter().all(|i| i.passed), items })
}
