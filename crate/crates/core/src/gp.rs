//! The one-sided gradient-penalty problem
//!
//! ```text
//! maximise  Φ(u) = <u, f - g> - (λ/2) ∫ (|∇u| - 1)_+^2 σ dx
//! ```
//!
//! over grid potentials, solved by accelerated gradient ascent with
//! backtracking and function-value restarts. Potentials are kept in the
//! σ-mean-zero gauge; Φ is invariant under additive constants.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{divergence, gradient, integrate, GridSpec, ScalarField, VectorField};
use crate::measures::{DensityPair, SigmaField};

/// Allowed drift of `∫(f-g)` away from zero.
pub const MASS_BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GpProblem {
    pub pair: DensityPair,
    pub sigma: SigmaField,
    pub lambda: f64,
    imbalance: ScalarField,
}

impl GpProblem {
    pub fn new(pair: DensityPair, sigma: SigmaField, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(LabError::InvalidParameter(format!("lambda must be positive, got {lambda}")));
        }
        if sigma.density.grid != pair.grid() {
            return Err(LabError::GridMismatch("sigma and density pair grids differ".into()));
        }
        let imbalance = pair.imbalance();
        let net = integrate(&imbalance);
        if net.abs() > MASS_BALANCE_TOL {
            return Err(LabError::MassMismatch(net));
        }
        Ok(Self { pair, sigma, lambda, imbalance })
    }

    pub fn grid(&self) -> GridSpec {
        self.pair.grid()
    }

    /// `f - g` on the grid.
    pub fn imbalance(&self) -> &ScalarField {
        &self.imbalance
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.density.max()
    }

    /// A-priori ceiling `(λ/2)(diam/λ)² + diam` on the optimal value.
    pub fn value_ceiling(&self) -> f64 {
        let diam = self.grid().diameter();
        0.5 * self.lambda * (diam / self.lambda).powi(2) + diam
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stationarity tolerance on the projected gradient's `L²` norm.
    pub tolerance: f64,
    /// Shrink factor applied when the sufficient-ascent test fails.
    pub backtrack: f64,
    /// Growth factor applied to the step after every accepted iteration.
    pub step_growth: f64,
    /// Gradient-based adaptive restart: drop momentum when the accepted step
    /// points against the ascent direction at the extrapolated point.
    /// Steps that would lower the objective are always rejected.
    pub restart: bool,
    /// Scale steps cell-wise by `σ_max / max(σ_local, floor·σ_max)`, where
    /// `σ_local` is the largest σ on the cell and its neighbours. Speeds up
    /// progress where σ is small. `0` disables the scaling.
    pub precondition_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iterations: 100_000, tolerance: 1e-6, backtrack: 0.5, step_growth: 1.05, restart: true, precondition_floor: 1e-6 }
    }
}

impl SolverConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self { tolerance, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(LabError::InvalidParameter("tolerance must be positive".into()));
        }
        if !(self.precondition_floor >= 0.0 && self.precondition_floor <= 1.0) {
            return Err(LabError::InvalidParameter("precondition_floor must lie in [0, 1]".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) || !(self.step_growth >= 1.0) {
            return Err(LabError::InvalidParameter("step-size rule out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GpSolution {
    pub u: ScalarField,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolutionSummary {
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl GpSolution {
    /// Sidecar record written next to the potential dump.
    pub fn summary(&self) -> SolutionSummary {
        SolutionSummary {
            value: self.value,
            grad_norm: self.grad_norm,
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

/// `(|p| - 1)_+ p / |p|`, continuously extended by 0 on `|p| ≤ 1`.
#[inline]
fn shrink_factor(norm: f64) -> f64 {
    if norm > 1.0 {
        (norm - 1.0) / norm
    } else {
        0.0
    }
}

/// Penalty integral and the flux `σ (|∇u|-1)_+ ∇u/|∇u|`.
fn penalty_and_flux(problem: &GpProblem, grad_u: &VectorField) -> (f64, VectorField) {
    let grid = grad_u.grid;
    let sigma = &problem.sigma.density.values;
    let mut flux = VectorField::zeros(grid);
    let mut penalty = 0.0;
    for i in 0..grid.len() {
        let norm = grad_u.magnitude_at(i);
        if norm <= 1.0 {
            continue;
        }
        let excess = norm - 1.0;
        penalty += sigma[i] * excess * excess;
        let c = sigma[i] * shrink_factor(norm);
        for (fc, gc) in flux.components.iter_mut().zip(&grad_u.components) {
            fc[i] = c * gc[i];
        }
    }
    (penalty * grid.cell_volume(), flux)
}

fn linear_term(problem: &GpProblem, u: &ScalarField) -> f64 {
    u.inner(problem.imbalance())
}

pub fn gp_objective(problem: &GpProblem, u: &ScalarField) -> f64 {
    let (penalty, _) = penalty_and_flux(problem, &gradient(u));
    linear_term(problem, u) - 0.5 * problem.lambda * penalty
}

/// Unprojected first variation `(f-g) + λ div(flux)`; it has zero plain mean.
fn raw_gradient(problem: &GpProblem, flux: &VectorField) -> ScalarField {
    let div = divergence(flux);
    problem.imbalance().zip_map(&div, |a, b| a + problem.lambda * b)
}

fn sigma_mean(problem: &GpProblem, v: &ScalarField) -> f64 {
    v.inner(&problem.sigma.density) / integrate(&problem.sigma.density)
}

/// Ascent direction of [`gp_objective`], projected to σ-mean zero.
pub fn gp_gradient(problem: &GpProblem, u: &ScalarField) -> ScalarField {
    let (_, flux) = penalty_and_flux(problem, &gradient(u));
    let raw = raw_gradient(problem, &flux);
    let c = sigma_mean(problem, &raw);
    raw.map(|v| v - c)
}

/// Flow `-λ σ (|∇u|-1)_+ ∇u/|∇u|` associated with a potential.
pub fn extremality_map(problem: &GpProblem, u: &ScalarField) -> VectorField {
    let (_, flux) = penalty_and_flux(problem, &gradient(u));
    flux.scale(-problem.lambda)
}

struct Evaluation {
    value: f64,
    /// Raw gradient (plain mean zero).
    grad: ScalarField,
    grad_sq: f64,
    /// Magnitude of the summed terms, for roundoff estimates on `value`.
    scale: f64,
}

impl Evaluation {
    fn roundoff(&self, other: &Evaluation) -> f64 {
        64.0 * f64::EPSILON * (self.scale + other.scale)
    }
}

fn evaluate(problem: &GpProblem, u: &ScalarField) -> Evaluation {
    let (penalty, flux) = penalty_and_flux(problem, &gradient(u));
    let linear = linear_term(problem, u);
    let value = linear - 0.5 * problem.lambda * penalty;
    let grad = raw_gradient(problem, &flux);
    let grad_sq = grad.inner(&grad);
    Evaluation { value, grad, grad_sq, scale: linear.abs() + 0.5 * problem.lambda * penalty }
}

fn stationarity(problem: &GpProblem, eval: &Evaluation) -> f64 {
    let c = sigma_mean(problem, &eval.grad);
    (eval.grad_sq + c * c).sqrt()
}

fn regauge(problem: &GpProblem, u: &mut ScalarField) {
    let c = sigma_mean(problem, u);
    u.values.iter_mut().for_each(|v| *v -= c);
}

/// Cell-wise step multipliers, all ≥ 1.
fn step_scaling(problem: &GpProblem, floor: f64) -> ScalarField {
    let grid = problem.grid();
    let sigma = &problem.sigma.density;
    let smax = problem.sigma_max();
    if floor == 0.0 || !(smax > 0.0) {
        return ScalarField::constant(grid, 1.0);
    }
    let values = (0..grid.len()).map(|i| {
        let mut local = sigma.values[i];
        for axis in 0..grid.dim() {
            let c = grid.coords(i)[axis];
            let s = grid.stride(axis);
            if c > 0 {
                local = local.max(sigma.values[i - s]);
            }
            if c + 1 < grid.cells_per_axis() {
                local = local.max(sigma.values[i + s]);
            }
        }
        smax / local.max(floor * smax)
    });
    ScalarField { grid, values: values.collect() }
}

/// Armijo test for the step `step · P g`. Once the predicted gain drops
/// below the roundoff of Φ the comparison of values is meaningless, and the
/// step is judged by the local curvature estimate `⟨Δg, PΔg⟩ ≤ ⟨g, Pg⟩`
/// (i.e. `step ≤ 1/L` in the P-metric) instead.
fn sufficient_ascent(at_y: &Evaluation, at_c: &Evaluation, scaling: &ScalarField, step: f64, ascent: f64) -> bool {
    let gain = at_c.value - at_y.value;
    let required = 0.5 * step * ascent;
    if gain >= required {
        return true;
    }
    if gain < required - at_y.roundoff(at_c) {
        return false;
    }
    let h_vol = at_y.grad.grid.cell_volume();
    let curvature: f64 = at_c
        .grad
        .values
        .iter()
        .zip(&at_y.grad.values)
        .zip(&scaling.values)
        .map(|((a, b), p)| p * (a - b) * (a - b))
        .sum::<f64>()
        * h_vol;
    curvature <= ascent
}

fn check_value(problem: &GpProblem, value: f64, iteration: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(LabError::NonFiniteObjective { iteration });
    }
    let bound = problem.value_ceiling();
    if value > bound {
        return Err(LabError::BoundViolated { value, bound });
    }
    Ok(())
}

/// Maximises [`gp_objective`] starting from `u = 0`.
///
/// Accepted iterates increase the objective monotonically (up to the
/// floating-point error of evaluating it); an extrapolated step that would
/// decrease it is discarded and momentum is reset.
/// `converged = false` after `max_iterations` is a normal outcome.
pub fn solve_gp(problem: &GpProblem, config: &SolverConfig) -> Result<GpSolution> {
    config.validate()?;
    let grid = problem.grid();
    let mut x = ScalarField::zeros(grid);
    let mut current = evaluate(problem, &x);
    check_value(problem, current.value, 0)?;
    let mut grad_norm = stationarity(problem, &current);
    if grad_norm <= config.tolerance {
        return Ok(GpSolution { u: x, value: current.value, grad_norm, iterations: 0, converged: true });
    }

    let lipschitz = problem.lambda * problem.sigma_max().max(f64::MIN_POSITIVE) * 4.0 * grid.dim() as f64
        / grid.spacing().powi(2);
    let mut step = 1.0 / lipschitz;
    let min_step = step * 1e-12;
    let mut x_prev = x.clone();
    let mut theta = 1.0f64;
    let scaling = step_scaling(problem, config.precondition_floor);

    for iteration in 1..=config.max_iterations {
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        let extrapolated = beta > 0.0 && x != x_prev;
        let (y, at_y) = if extrapolated {
            let mut y = x.zip_map(&x_prev, |a, b| a + beta * (a - b));
            regauge(problem, &mut y);
            let e = evaluate(problem, &y);
            (y, e)
        } else {
            (x.clone(), Evaluation { grad: current.grad.clone(), ..current })
        };

        let direction = at_y.grad.zip_map(&scaling, |g, p| g * p);
        let ascent = direction.inner(&at_y.grad);
        let (candidate, at_candidate) = loop {
            let mut c = y.zip_map(&direction, |a, g| a + step * g);
            regauge(problem, &mut c);
            let e = evaluate(problem, &c);
            if e.value.is_finite() && sufficient_ascent(&at_y, &e, &scaling, step, ascent) {
                break (c, e);
            }
            step *= config.backtrack;
            if step < min_step {
                // No ascent possible at this resolution: roundoff floor.
                return Ok(GpSolution { u: x, value: current.value, grad_norm, iterations: iteration, converged: false });
            }
        };

        if at_candidate.value < current.value - current.roundoff(&at_candidate) {
            // Only an extrapolated step can get here; retry from x without momentum.
            theta = 1.0;
            x_prev = x.clone();
            continue;
        }

        let against = config.restart
            && extrapolated
            && at_y.grad.values.iter().zip(&candidate.values).zip(&x.values).map(|((g, c), a)| g * (c - a)).sum::<f64>()
                < 0.0;
        x_prev = std::mem::replace(&mut x, candidate);
        current = at_candidate;
        theta = if against { 1.0 } else { theta_next };
        check_value(problem, current.value, iteration)?;
        grad_norm = stationarity(problem, &current);
        if grad_norm <= config.tolerance {
            return Ok(GpSolution { u: x, value: current.value, grad_norm, iterations: iteration, converged: true });
        }
        step *= config.step_growth;
    }
    Ok(GpSolution {
        u: x,
        value: current.value,
        grad_norm,
        iterations: config.max_iterations,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{sigma_quadrature, DensityDescriptor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxes(d: usize, n: usize) -> DensityPair {
        let grid = GridSpec::new(d, n).unwrap();
        let b = |lo: f64, hi: f64| DensityDescriptor::UniformBox { lo: vec![lo; d], hi: vec![hi; d] };
        DensityPair::from_descriptors(grid, b(0.0, 1.0), b(0.25, 0.75)).unwrap()
    }

    fn problem(d: usize, n: usize, lambda: f64) -> GpProblem {
        let pair = boxes(d, n);
        let sigma = sigma_quadrature(&pair, 32).unwrap();
        GpProblem::new(pair, sigma, lambda).unwrap()
    }

    fn random_field(grid: GridSpec, rng: &mut ChaCha8Rng, amp: f64) -> ScalarField {
        ScalarField::from_values(grid, (0..grid.len()).map(|_| rng.gen_range(-amp..amp)).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_lambda() {
        let pair = boxes(1, 16);
        let sigma = sigma_quadrature(&pair, 32).unwrap();
        for lambda in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(GpProblem::new(pair.clone(), sigma.clone(), lambda).is_err());
        }
    }

    #[test]
    fn identical_densities_stop_immediately() {
        let grid = GridSpec::new(2, 16).unwrap();
        let g = DensityDescriptor::TruncatedGaussian { mean: vec![0.5, 0.4], stddev: 0.2 };
        let pair = DensityPair::from_descriptors(grid, g.clone(), g).unwrap();
        let sigma = sigma_quadrature(&pair, 16).unwrap();
        let p = GpProblem::new(pair, sigma, 1.0).unwrap();
        let sol = solve_gp(&p, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.value, 0.0);
    }

    #[test]
    fn objective_is_gauge_invariant() {
        let p = problem(2, 12, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let u = random_field(p.grid(), &mut rng, 2.0);
            let shifted = u.map(|v| v + 3.7);
            assert!((gp_objective(&p, &u) - gp_objective(&p, &shifted)).abs() < 1e-10);
        }
    }

    #[test]
    fn objective_is_concave_along_segments() {
        let p = problem(2, 12, 1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let u = random_field(p.grid(), &mut rng, 1.0);
            let v = random_field(p.grid(), &mut rng, 1.0);
            let mid = u.zip_map(&v, |a, b| 0.5 * (a + b));
            let chord = 0.5 * (gp_objective(&p, &u) + gp_objective(&p, &v));
            assert!(gp_objective(&p, &mid) >= chord - 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for d in [1, 2] {
            let p = problem(d, 10, 0.9);
            let mut rng = ChaCha8Rng::seed_from_u64(3 + d as u64);
            for _ in 0..10 {
                let u = random_field(p.grid(), &mut rng, 1.0);
                let mut e = random_field(p.grid(), &mut rng, 1.0);
                let mean = integrate(&e);
                e.values.iter_mut().for_each(|v| *v -= mean);
                let eps = 1e-6;
                let plus = gp_objective(&p, &u.zip_map(&e, |a, b| a + eps * b));
                let minus = gp_objective(&p, &u.zip_map(&e, |a, b| a - eps * b));
                let fd = (plus - minus) / (2.0 * eps);
                let analytic = gp_gradient(&p, &u).inner(&e);
                assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0), "{fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn projected_gradient_has_zero_sigma_mean() {
        let p = problem(2, 10, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = gp_gradient(&p, &random_field(p.grid(), &mut rng, 1.0));
        assert!(g.inner(&p.sigma.density).abs() < 1e-12);
    }

    #[test]
    fn extremality_map_vanishes_on_slow_potentials() {
        let p = problem(2, 16, 1.0);
        let u = ScalarField::from_fn(p.grid(), |x| 0.4 * x[0] - 0.3 * x[1]);
        assert_eq!(extremality_map(&p, &u).max_magnitude(), 0.0);
        let steep = ScalarField::from_fn(p.grid(), |x| 3.0 * x[0]);
        assert!(extremality_map(&p, &steep).max_magnitude() > 0.0);
    }

    #[test]
    fn solver_converges_on_small_instances() {
        for d in [1, 2] {
            let p = problem(d, 16, 1.0);
            let sol = solve_gp(&p, &SolverConfig::default()).unwrap();
            assert!(sol.converged, "d = {d}");
            assert!(sol.grad_norm <= 1e-6);
            assert!(sol.value > 0.0 && sol.value <= p.value_ceiling());
            assert!((gp_objective(&p, &sol.u) - sol.value).abs() < 1e-14);
        }
    }

    #[test]
    fn iteration_cap_is_a_reported_state() {
        let p = problem(1, 64, 1.0);
        let config = SolverConfig { max_iterations: 5, ..SolverConfig::default() };
        let sol = solve_gp(&p, &config).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 5);
    }

    #[test]
    fn looser_tolerance_never_gives_a_higher_value() {
        let p = problem(1, 64, 2.0);
        let loose = solve_gp(&p, &SolverConfig::with_tolerance(1e-2)).unwrap();
        let tight = solve_gp(&p, &SolverConfig::with_tolerance(1e-6)).unwrap();
        assert!(tight.value >= loose.value - 1e-14);
        assert!(tight.iterations >= loose.iterations);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::with_tolerance(0.0).validate().is_err());
        assert!(SolverConfig { backtrack: 1.0, ..SolverConfig::default() }.validate().is_err());
        assert!(SolverConfig { precondition_floor: 2.0, ..SolverConfig::default() }.validate().is_err());
        let parsed: SolverConfig = serde_json::from_str(r#"{"max_iterations":20000,"tolerance":1e-6}"#).unwrap();
        assert_eq!(parsed.max_iterations, 20000);
        assert_eq!(parsed.backtrack, 0.5);
    }
}
