//! Weighted Beckmann side of the duality: congestion cost of flows, repair
//! of approximate flows into exactly admissible ones, and the certificates
//! tying a gradient-penalty potential to a feasible flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gp::{extremality_map, gp_objective, GpProblem, GpSolution};
use crate::grid::{divergence, gradient, GridSpec, ScalarField, VectorField};
use crate::measures::{DensityPair, SigmaField};

/// σ below `SIGMA_FLOOR * max σ` counts as zero.
pub const SIGMA_FLOOR: f64 = 1e-12;
/// `|w|` below `FLOW_FLOOR * max |w|` counts as zero.
pub const FLOW_FLOOR: f64 = 1e-12;
/// Relative residual at which the Poisson repair stops.
pub const CG_RELATIVE_TOL: f64 = 1e-12;
/// Required `L²` divergence residual of a repaired flow.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// `H(σ, z) = z²/(2λσ) + |z|` for `σ > 0`; `0` at `z = 0`, `+∞` otherwise.
pub fn congestion_density(sigma: f64, lambda: f64, z: f64) -> f64 {
    let z = z.abs();
    if sigma > 0.0 {
        z * z / (2.0 * lambda * sigma) + z
    } else if z == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `∫ H(x, m(x)) dx` for a non-negative magnitude field `m`.
///
/// May return `+∞` when mass moves through cells where σ vanishes.
pub fn congestion_cost_of_magnitude(magnitude: &ScalarField, sigma: &SigmaField, lambda: f64) -> Result<f64> {
    if magnitude.grid != sigma.density.grid {
        return Err(LabError::GridMismatch("flow and sigma grids differ".into()));
    }
    let sigma_floor = SIGMA_FLOOR * sigma.density.max();
    let flow_floor = FLOW_FLOOR * magnitude.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let total: f64 = magnitude
        .values
        .iter()
        .zip(&sigma.density.values)
        .map(|(&m, &s)| {
            if s > sigma_floor {
                congestion_density(s, lambda, m)
            } else if m.abs() <= flow_floor {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .sum();
    Ok(total * magnitude.grid.cell_volume())
}

/// `∫ H(x, |w(x)|) dx`.
pub fn congestion_cost(w: &VectorField, sigma: &SigmaField, lambda: f64) -> Result<f64> {
    congestion_cost_of_magnitude(&w.magnitudes(), sigma, lambda)
}

/// `‖div w − (f − g)‖_{L²}`.
pub fn feasibility_residual(w: &VectorField, pair: &DensityPair) -> f64 {
    let div = divergence(w);
    div.zip_map(&pair.imbalance(), |a, b| a - b).l2_norm()
}

#[derive(Debug, Clone)]
pub struct BeckmannCandidate {
    pub w: VectorField,
    pub feasibility_residual: f64,
    pub cost: f64,
    /// `‖w_in − w‖_{L²}`: how far the repair moved the input flow.
    pub correction_norm: f64,
    pub cg_iterations: usize,
}

/// Faces through which a repair may route flow: `open[k][i]` for the face
/// owned by cell `i` along axis `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMask {
    open: Vec<Vec<bool>>,
}

impl FaceMask {
    pub fn all(grid: GridSpec) -> Self {
        Self { open: vec![vec![true; grid.len()]; grid.dim()] }
    }

    /// Faces owned by cells where σ is above [`SIGMA_FLOOR`]; flow anywhere
    /// else would have infinite congestion cost.
    pub fn from_sigma(sigma: &SigmaField) -> Self {
        let floor = SIGMA_FLOOR * sigma.density.max();
        let open: Vec<bool> = sigma.density.values.iter().map(|&s| s > floor).collect();
        Self { open: vec![open; sigma.density.grid.dim()] }
    }

    fn apply(&self, w: &mut VectorField) {
        for (c, open) in w.components.iter_mut().zip(&self.open) {
            c.iter_mut().zip(open).filter(|(_, o)| !**o).for_each(|(v, _)| *v = 0.0);
        }
    }
}

/// Connected components of the cell graph whose edges are open faces; the
/// masked Laplacian is invertible on vectors with zero sum per component.
struct Components {
    label: Vec<usize>,
    size: Vec<usize>,
}

impl Components {
    fn new(grid: GridSpec, mask: &FaceMask) -> Self {
        let n = grid.len();
        let mut label = vec![usize::MAX; n];
        let mut size = Vec::new();
        let mut stack = Vec::new();
        for root in 0..n {
            if label[root] != usize::MAX {
                continue;
            }
            let id = size.len();
            let mut count = 0;
            label[root] = id;
            stack.push(root);
            while let Some(i) = stack.pop() {
                count += 1;
                for axis in 0..grid.dim() {
                    if let Some(j) = grid.upper_neighbor(i, axis) {
                        if mask.open[axis][i] && label[j] == usize::MAX {
                            label[j] = id;
                            stack.push(j);
                        }
                    }
                    if grid.coord(i, axis) > 0 {
                        let j = i - grid.stride(axis);
                        if mask.open[axis][j] && label[j] == usize::MAX {
                            label[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
            size.push(count);
        }
        Self { label, size }
    }

    fn subtract_means(&self, v: &mut [f64]) {
        let mut sums = vec![0.0; self.size.len()];
        for (x, &l) in v.iter().zip(&self.label) {
            sums[l] += x;
        }
        for (x, &l) in v.iter_mut().zip(&self.label) {
            *x -= sums[l] / self.size[l] as f64;
        }
    }
}

fn apply_neg_laplacian(phi: &ScalarField, mask: &FaceMask) -> ScalarField {
    let mut g = gradient(phi);
    mask.apply(&mut g);
    divergence(&g).map(|v| -v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradient for `-div(χ grad φ) = rhs`, `χ` the face mask, on the
/// subspace with zero sum over every connected component.
fn solve_neumann_poisson(grid: GridSpec, rhs: &[f64], mask: &FaceMask) -> Result<(ScalarField, usize)> {
    let components = Components::new(grid, mask);
    let mut b = rhs.to_vec();
    components.subtract_means(&mut b);
    let b_norm = dot(&b, &b).sqrt();
    let mut phi = ScalarField::zeros(grid);
    if b_norm == 0.0 {
        return Ok((phi, 0));
    }
    let target = CG_RELATIVE_TOL * b_norm;
    let true_residual = |phi: &ScalarField| {
        let aphi = apply_neg_laplacian(phi, mask);
        let mut r: Vec<f64> = b.iter().zip(&aphi.values).map(|(bi, a)| bi - a).collect();
        components.subtract_means(&mut r);
        r
    };
    let max_iterations = 20 * grid.len() + 100;
    let mut r = b.clone();
    let mut p = ScalarField { grid, values: r.clone() };
    let mut rr = dot(&r, &r);
    for it in 1..=max_iterations {
        let ap = apply_neg_laplacian(&p, mask);
        let pap = dot(&p.values, &ap.values);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        phi.values.iter_mut().zip(&p.values).for_each(|(x, pi)| *x += alpha * pi);
        r.iter_mut().zip(&ap.values).for_each(|(ri, a)| *ri -= alpha * a);
        if it % 50 == 0 {
            // Replace the recursive residual to stop drift.
            r = true_residual(&phi);
        }
        let rr_next = dot(&r, &r);
        if rr_next.sqrt() <= target {
            return Ok((phi, it));
        }
        let beta = rr_next / rr;
        rr = rr_next;
        p.values.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
    }
    let res = true_residual(&phi);
    let residual = dot(&res, &res).sqrt();
    if residual <= target {
        return Ok((phi, max_iterations));
    }
    Err(LabError::CgNotConverged { iterations: max_iterations, residual })
}

/// Returns `w − grad φ` where `div grad φ = div w − (f − g)`, so the result
/// is admissible for the Beckmann problem.
pub fn project_divergence(w: &VectorField, pair: &DensityPair) -> Result<(VectorField, f64, usize)> {
    project_divergence_on(w, pair, &FaceMask::all(w.grid))
}

/// [`project_divergence`] restricted to open faces: the input is zeroed on
/// closed faces and the correction `χ grad φ` never opens them.
pub fn project_divergence_on(
    w: &VectorField,
    pair: &DensityPair,
    mask: &FaceMask,
) -> Result<(VectorField, f64, usize)> {
    if w.grid != pair.grid() {
        return Err(LabError::GridMismatch("flow and density grids differ".into()));
    }
    let mut w = w.clone();
    mask.apply(&mut w);
    let mismatch = divergence(&w).zip_map(&pair.imbalance(), |a, b| a - b);
    // -div χ grad φ = -(div w - (f-g))
    let rhs: Vec<f64> = mismatch.values.iter().map(|v| -v).collect();
    let (phi, iterations) = solve_neumann_poisson(w.grid, &rhs, mask)?;
    let mut correction = gradient(&phi);
    mask.apply(&mut correction);
    let repaired = w.axpy(-1.0, &correction);
    let residual = feasibility_residual(&repaired, pair);
    if residual > FEASIBILITY_TOL {
        return Err(LabError::InfeasibleFlow(residual));
    }
    Ok((repaired, residual, iterations))
}

impl BeckmannCandidate {
    /// Repairs `w` through faces where σ is positive and prices the result.
    pub fn from_flow(w: &VectorField, pair: &DensityPair, sigma: &SigmaField, lambda: f64) -> Result<Self> {
        let mask = FaceMask::from_sigma(sigma);
        let (repaired, feasibility_residual, cg_iterations) = project_divergence_on(w, pair, &mask)?;
        let cost = congestion_cost(&repaired, sigma, lambda)?;
        let correction_norm = repaired.axpy(-1.0, w).l2_norm();
        Ok(Self { w: repaired, feasibility_residual, cost, correction_norm, cg_iterations })
    }
}

#[derive(Debug, Clone)]
pub struct DualityCertificate {
    /// Lower bound on the common optimal value.
    pub gp_value: f64,
    /// Upper bound: cost of an admissible flow.
    pub bp_value: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub candidate: BeckmannCandidate,
}

impl DualityCertificate {
    pub fn is_finite(&self) -> bool {
        self.bp_value.is_finite()
    }
}

/// Denominator floor for relative gaps.
const GAP_EPS: f64 = 1e-12;

/// Fenchel–Young slack of one cell, `H(|w|) + w·ξ + (λσ/2)(|ξ|−1)_+²`, in a
/// form free of cancellation: with `a = λσ`, `v = −w/a`, `r = |ξ|`,
/// `p = (r−1)_+` and `e = ξ/r` it equals
/// `a [ |v − p e|²/2 + (1 − min(r,1)) |v| + min(r,1) (|v| − v·e) ]`.
fn cell_slack(a: f64, w: &[f64], xi: &[f64]) -> f64 {
    let r = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
    let p = (r - 1.0).max(0.0);
    let v: Vec<f64> = w.iter().map(|c| -c / a).collect();
    let v_norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if r == 0.0 {
        return a * (0.5 * v_norm * v_norm + v_norm);
    }
    let e: Vec<f64> = xi.iter().map(|x| x / r).collect();
    let dist_sq: f64 = v.iter().zip(&e).map(|(vc, ec)| (vc - p * ec).powi(2)).sum();
    let along = dot(&v, &e);
    let misalign = if along > 0.0 {
        let cross_sq = if v.len() == 2 { (v[0] * e[1] - v[1] * e[0]).powi(2) } else { 0.0 };
        cross_sq / (v_norm + along)
    } else {
        v_norm - along
    };
    let m = r.min(1.0);
    a * (0.5 * dist_sq + (1.0 - m) * v_norm + m * misalign)
}

/// `BP(w) − GP(u)` summed cell by cell as non-negative Fenchel–Young slacks
/// plus the feasibility term `⟨u, div w − (f − g)⟩`. Agrees with the
/// difference of the two objectives but keeps full relative accuracy when
/// the gap is many orders below the values themselves.
pub fn duality_gap(problem: &GpProblem, u: &ScalarField, w: &VectorField) -> Result<f64> {
    let grid = problem.grid();
    if u.grid != grid || w.grid != grid {
        return Err(LabError::GridMismatch("duality gap inputs".into()));
    }
    let lambda = problem.lambda;
    let sigma = &problem.sigma.density;
    let sigma_floor = SIGMA_FLOOR * sigma.max();
    let flow_floor = FLOW_FLOOR * w.max_magnitude();
    let du = gradient(u);
    let d = grid.dim();
    let mut total = 0.0;
    for i in 0..grid.len() {
        let xi: Vec<f64> = (0..d).map(|k| du.components[k][i]).collect();
        let wi: Vec<f64> = (0..d).map(|k| w.components[k][i]).collect();
        let s = sigma.values[i];
        total += if s > sigma_floor {
            cell_slack(lambda * s, &wi, &xi)
        } else if w.magnitude_at(i) <= flow_floor {
            let excess = (du.magnitude_at(i) - 1.0).max(0.0);
            0.5 * lambda * s * excess * excess
        } else {
            f64::INFINITY
        };
    }
    let residual = divergence(w).zip_map(problem.imbalance(), |a, b| a - b);
    Ok(total * grid.cell_volume() + u.inner(&residual))
}

/// Certifies a potential by pricing the repaired extremality flow.
pub fn duality_certificate(problem: &GpProblem, solution: &GpSolution) -> Result<DualityCertificate> {
    let gp_value = gp_objective(problem, &solution.u);
    let flow = extremality_map(problem, &solution.u);
    let candidate = BeckmannCandidate::from_flow(&flow, &problem.pair, &problem.sigma, problem.lambda)?;
    let bp_value = candidate.cost;
    let gap = duality_gap(problem, &solution.u, &candidate.w)?;
    let relative_gap = gap / gp_value.abs().max(GAP_EPS);
    Ok(DualityCertificate { gp_value, bp_value, gap, relative_gap, candidate })
}

/// Left and right sides of the pointwise coercivity inequality
/// `ξ*·ξ + (λσ/2)(|ξ|−1)_+² + H(|ξ*|) ≥ |ξ* + λσ(|ξ|−1)_+ ξ/|ξ||² / (2λσ)`.
pub fn phi_inequality(sigma: f64, lambda: f64, xi: &[f64], xi_star: &[f64]) -> (f64, f64) {
    let norm_xi = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_star = xi_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    let excess = (norm_xi - 1.0).max(0.0);
    let lhs = dot(xi_star, xi) + 0.5 * lambda * sigma * excess * excess + congestion_density(sigma, lambda, norm_star);
    let shrink = if norm_xi > 1.0 { lambda * sigma * excess / norm_xi } else { 0.0 };
    let sq: f64 = xi_star.iter().zip(xi).map(|(s, x)| (s + shrink * x).powi(2)).sum();
    (lhs, sq / (2.0 * lambda * sigma))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn random_vector(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 2] {
    let r = log_uniform(rng, lo, hi);
    let angle = rng.gen::<f64>() * std::f64::consts::TAU;
    [r * angle.cos(), r * angle.sin()]
}

/// Counts violations of [`phi_inequality`] over random tuples.
pub fn phi_lower_bound_check(samples: usize, seed: u64) -> Result<usize> {
    if samples == 0 {
        return Err(LabError::InvalidParameter("samples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for k in 0..samples {
        let sigma = log_uniform(&mut rng, 1e-4, 1e2);
        let lambda = log_uniform(&mut rng, 1e-2, 1e2);
        // Every fourth draw sits inside the unit ball, where the penalty is off.
        let xi = if k % 4 == 0 { random_vector(&mut rng, 1e-3, 1.0) } else { random_vector(&mut rng, 1e-3, 1e2) };
        let xi_star = random_vector(&mut rng, 1e-4, 1e2);
        let (lhs, rhs) = phi_inequality(sigma, lambda, &xi, &xi_star);
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        if lhs < rhs - 1e-12 * scale {
            violations += 1;
        }
    }
    Ok(violations)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremalityCheck {
    pub residual: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Compares `‖w0 + λσ(|∇u|−1)_+ ∇u/|∇u|‖²` with `2λ‖σ‖_∞ ε`.
pub fn extremality_residual_bound(
    problem: &GpProblem,
    u: &ScalarField,
    w0: &VectorField,
    epsilon: f64,
) -> Result<ExtremalityCheck> {
    if w0.grid != problem.grid() || u.grid != problem.grid() {
        return Err(LabError::GridMismatch("extremality inputs".into()));
    }
    let mapped = extremality_map(problem, u);
    let residual = w0.axpy(-1.0, &mapped).inner(&w0.axpy(-1.0, &mapped));
    let bound = 2.0 * problem.lambda * problem.sigma_max() * epsilon;
    Ok(ExtremalityCheck { residual, bound, holds: residual <= bound })
}

/// `W₁ + W₁² / (2 λ ‖σ‖_∞ Vol(Ω))` with `Vol(Ω) = 1`.
pub fn w1_lower_bound_rhs(w1: f64, lambda: f64, sigma_max: f64) -> f64 {
    w1 + w1 * w1 / (2.0 * lambda * sigma_max)
}

/// Slack allowed for discretisation, as a fraction of `W₁`.
pub const LOWER_BOUND_SLACK: f64 = 0.01;

pub fn w1_lower_bound_check(gp_value: f64, w1: f64, lambda: f64, sigma_max: f64) -> bool {
    gp_value >= w1_lower_bound_rhs(w1, lambda, sigma_max) - LOWER_BOUND_SLACK * w1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cellwise_gap_matches_objective_difference() {
        use crate::gp::GpProblem;
        for d in [1, 2] {
            let grid = GridSpec::new(d, 16).unwrap();
            let desc = |lo: f64, hi: f64| DensityDescriptor::UniformBox { lo: vec![lo; d], hi: vec![hi; d] };
            let pair = DensityPair::from_descriptors(grid, desc(0.0, 1.0), desc(0.25, 0.75)).unwrap();
            let sigma = crate::measures::sigma_quadrature(&pair, 32).unwrap();
            let problem = GpProblem::new(pair.clone(), sigma.clone(), 0.7).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..10 {
                let u = ScalarField::from_values(grid, (0..grid.len()).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
                let flow = VectorField::from_components(
                    grid,
                    (0..d).map(|_| (0..grid.len()).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect(),
                )
                .unwrap();
                let w = BeckmannCandidate::from_flow(&flow, &pair, &sigma, 0.7).unwrap().w;
                let direct = congestion_cost(&w, &sigma, 0.7).unwrap() - gp_objective(&problem, &u);
                let gap = duality_gap(&problem, &u, &w).unwrap();
                assert!(gap >= 0.0);
                assert!((gap - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{gap} vs {direct}");
            }
        }
    }
    use crate::measures::{DensityDescriptor, SigmaMethod};

    fn flat_sigma(grid: GridSpec, value: f64) -> SigmaField {
        SigmaField {
            density: ScalarField::constant(grid, value),
            method: SigmaMethod::Quadrature { t_nodes: 8 },
            raw_mass: value,
        }
    }

    #[test]
    fn zero_flow_costs_nothing() {
        let grid = GridSpec::new(2, 6).unwrap();
        let mut s = flat_sigma(grid, 1.0);
        s.density.values[3] = 0.0;
        assert_eq!(congestion_cost(&VectorField::zeros(grid), &s, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn single_cell_cost() {
        let grid = GridSpec::new(1, 10).unwrap();
        let mut s = flat_sigma(grid, 0.5);
        s.density.values[4] = 1.5;
        let mut w = VectorField::zeros(grid);
        w.components[0][4] = 1.0;
        let lambda = 2.0;
        let expected = grid.cell_volume() * (1.0 / (2.0 * lambda * 1.5) + 1.0);
        assert!((congestion_cost(&w, &s, lambda).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn flow_through_vanishing_sigma_is_infinite() {
        let grid = GridSpec::new(1, 4).unwrap();
        let mut s = flat_sigma(grid, 1.0);
        s.density.values[1] = 0.0;
        let mut w = VectorField::zeros(grid);
        w.components[0][1] = 0.3;
        assert_eq!(congestion_cost(&w, &s, 1.0).unwrap(), f64::INFINITY);
        w.components[0][1] = 0.0;
        w.components[0][2] = 0.3;
        assert!(congestion_cost(&w, &s, 1.0).unwrap().is_finite());
    }

    fn shifted_pair(grid: GridSpec) -> DensityPair {
        let d = grid.dim();
        DensityPair::from_descriptors(
            grid,
            DensityDescriptor::UniformBox { lo: vec![0.125; d], hi: vec![0.5; d] },
            DensityDescriptor::TruncatedGaussian { mean: vec![0.7; d], stddev: 0.1 },
        )
        .unwrap()
    }

    #[test]
    fn repair_of_zero_flow_is_feasible() {
        for d in 1..=2 {
            let grid = GridSpec::new(d, 32).unwrap();
            let pair = shifted_pair(grid);
            let (w, res, _) = project_divergence(&VectorField::zeros(grid), &pair).unwrap();
            assert!(res <= FEASIBILITY_TOL);
            assert!(feasibility_residual(&w, &pair) <= FEASIBILITY_TOL);
        }
    }

    #[test]
    fn repair_leaves_feasible_flow_alone() {
        let grid = GridSpec::new(2, 24).unwrap();
        let pair = shifted_pair(grid);
        let (w, _, _) = project_divergence(&VectorField::zeros(grid), &pair).unwrap();
        let (again, _, _) = project_divergence(&w, &pair).unwrap();
        assert!(again.axpy(-1.0, &w).l2_norm() <= 1e-10);
    }

    fn offset_boxes(grid: GridSpec) -> DensityPair {
        DensityPair::from_descriptors(
            grid,
            DensityDescriptor::UniformBox { lo: vec![0.1, 0.3], hi: vec![0.4, 0.6] },
            DensityDescriptor::UniformBox { lo: vec![0.35, 0.3], hi: vec![0.65, 0.6] },
        )
        .unwrap()
    }

    #[test]
    fn masked_repair_stays_on_open_faces() {
        let grid = GridSpec::new(2, 32).unwrap();
        let pair = offset_boxes(grid);
        let sigma = crate::measures::sigma_quadrature(&pair, 32).unwrap();
        let mask = FaceMask::from_sigma(&sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flow = VectorField::from_components(
            grid,
            (0..2).map(|_| (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        )
        .unwrap();
        let (w, res, _) = project_divergence_on(&flow, &pair, &mask).unwrap();
        assert!(res <= FEASIBILITY_TOL);
        let floor = SIGMA_FLOOR * sigma.density.max();
        for c in &w.components {
            for (v, s) in c.iter().zip(&sigma.density.values) {
                assert!(*s > floor || *v == 0.0);
            }
        }
        assert!(congestion_cost(&w, &sigma, 1.0).unwrap().is_finite());
    }

    #[test]
    fn candidate_cost_is_finite_with_partial_sigma_support() {
        let grid = GridSpec::new(2, 32).unwrap();
        let pair = offset_boxes(grid);
        let sigma = crate::measures::sigma_quadrature(&pair, 32).unwrap();
        assert!(sigma.density.values.contains(&0.0));
        let c = BeckmannCandidate::from_flow(&VectorField::zeros(grid), &pair, &sigma, 2.0).unwrap();
        assert!(c.cost.is_finite());
    }

    #[test]
    fn repair_rejects_grid_mismatch() {
        let pair = shifted_pair(GridSpec::new(1, 8).unwrap());
        assert!(project_divergence(&VectorField::zeros(GridSpec::new(1, 9).unwrap()), &pair).is_err());
    }

    #[test]
    fn phi_inequality_special_cases() {
        // ξ = 0: lhs = |ξ*|²/(2λσ) + |ξ*| ≥ |ξ*|²/(2λσ)
        let (lhs, rhs) = phi_inequality(0.7, 1.3, &[0.0, 0.0], &[0.4, -0.2]);
        let n2: f64 = 0.2;
        assert!((rhs - n2 / (2.0 * 1.3 * 0.7)).abs() < 1e-15);
        assert!((lhs - rhs - n2.sqrt()).abs() < 1e-15);
        // ξ* = 0, |ξ| ≤ 1: both sides vanish
        let (lhs, rhs) = phi_inequality(0.7, 1.3, &[0.3, 0.5], &[0.0, 0.0]);
        assert_eq!((lhs, rhs), (0.0, 0.0));
    }

    #[test]
    fn phi_inequality_has_no_violations() {
        assert_eq!(phi_lower_bound_check(20_000, 42).unwrap(), 0);
        assert!(phi_lower_bound_check(0, 1).is_err());
    }

    #[test]
    fn lower_bound_check_trivial_cases() {
        assert!(w1_lower_bound_check(0.0, 0.0, 1.0, 1.0));
        assert!(!w1_lower_bound_check(0.1, 0.125, 1.0, 1.0));
        assert!((w1_lower_bound_rhs(0.5, 2.0, 0.25) - (0.5 + 0.25)).abs() < 1e-15);
    }
}
