//! Wasserstein-1 oracles independent of the gradient-penalty machinery.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::GridSpec;
use crate::measures::DensityPair;

/// Integer resolution for masses and costs in [`w1_lp`].
const LP_SCALE: f64 = 1e12;
/// Largest support accepted by [`w1_lp`] on either side.
pub const MAX_LP_SUPPORT: usize = 4096;
/// Default cap on coarse cells per axis when computing two-dimensional W₁.
pub const DEFAULT_COARSE_CELLS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(LabError::InvalidParameter("points and weights differ in length".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(LabError::InvalidParameter("weights must be finite and non-negative".into()));
        }
        Ok(Self { points, weights })
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasurePair {
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
}

impl DiscreteMeasurePair {
    pub fn new(mu: DiscreteMeasure, nu: DiscreteMeasure) -> Result<Self> {
        let dim = mu.points.first().or(nu.points.first()).map_or(0, Vec::len);
        if mu.points.iter().chain(&nu.points).any(|p| p.len() != dim) {
            return Err(LabError::InvalidParameter("support points have mixed dimension".into()));
        }
        Ok(Self { mu, nu })
    }

    pub fn swapped(&self) -> Self {
        Self { mu: self.nu.clone(), nu: self.mu.clone() }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `∫_0^1 |F − G| dx` from running sums of the cell masses.
pub fn w1_cdf_1d(pair: &DensityPair) -> Result<f64> {
    let grid = pair.grid();
    if grid.dim() != 1 {
        return Err(LabError::InvalidParameter(format!("CDF formula needs d = 1, got d = {}", grid.dim())));
    }
    let h = grid.spacing();
    let mut diff = 0.0;
    let mut total = 0.0;
    for (f, g) in pair.f.values.iter().zip(&pair.g.values) {
        diff += (f - g) * h;
        total += diff.abs();
    }
    Ok(total * h)
}

fn to_units(weights: &[f64]) -> Vec<i64> {
    weights.iter().map(|w| (w * LP_SCALE).round() as i64).collect()
}

/// Forces equal integer totals by moving the rounding surplus onto the
/// heaviest atom.
fn balance(supply: &mut [i64], demand: &mut [i64]) {
    let diff: i64 = supply.iter().sum::<i64>() - demand.iter().sum::<i64>();
    if diff == 0 {
        return;
    }
    let (target, delta) = if diff > 0 { (supply, -diff) } else { (demand, diff) };
    let k = (0..target.len()).max_by_key(|&k| (target[k], Reverse(k))).unwrap();
    target[k] += delta;
}

/// Exact min-cost transport with integer costs: successive shortest paths
/// with Dijkstra on reduced costs over the dense bipartite residual graph.
/// Returns `Σ flow · cost` in scaled units.
fn transport_cost(supply: &[i64], demand: &[i64], cost: &[i64]) -> i128 {
    let (s, t) = (supply.len(), demand.len());
    const INF: i64 = i64::MAX / 4;
    const NONE: usize = usize::MAX;
    let mut flow = vec![0i64; s * t];
    let mut rem_s = supply.to_vec();
    let mut rem_t = demand.to_vec();
    let mut pot_s = vec![0i64; s];
    let mut pot_t: Vec<i64> = (0..t).map(|j| (0..s).map(|i| cost[i * t + j]).min().unwrap_or(0)).collect();
    let mut dist = vec![INF; s + t];
    let mut parent = vec![NONE; s + t];
    let mut done = vec![false; s + t];

    while rem_s.iter().any(|&r| r > 0) {
        dist.fill(INF);
        parent.fill(NONE);
        done.fill(false);
        let mut heap = BinaryHeap::new();
        for i in 0..s {
            if rem_s[i] > 0 {
                dist[i] = 0;
                heap.push(Reverse((0i64, i)));
            }
        }
        let mut target = NONE;
        while let Some(Reverse((d, v))) = heap.pop() {
            if done[v] || d > dist[v] {
                continue;
            }
            done[v] = true;
            if v < s {
                let i = v;
                for j in 0..t {
                    let nd = d + cost[i * t + j] + pot_s[i] - pot_t[j];
                    if nd < dist[s + j] {
                        dist[s + j] = nd;
                        parent[s + j] = i;
                        heap.push(Reverse((nd, s + j)));
                    }
                }
            } else {
                let j = v - s;
                if rem_t[j] > 0 {
                    target = j;
                    break;
                }
                for i in 0..s {
                    if flow[i * t + j] > 0 {
                        let nd = d - cost[i * t + j] + pot_t[j] - pot_s[i];
                        if nd < dist[i] {
                            dist[i] = nd;
                            parent[i] = v;
                            heap.push(Reverse((nd, i)));
                        }
                    }
                }
            }
        }
        assert!(target != NONE, "balanced transport problem must stay feasible");
        let reach = dist[s + target];
        for v in 0..s + t {
            let dv = dist[v].min(reach);
            if v < s {
                pot_s[v] += dv;
            } else {
                pot_t[v - s] += dv;
            }
        }

        // Bottleneck along the path sink <- source (<- sink <- source)*.
        let mut amount = rem_t[target];
        let mut j = target;
        let root = loop {
            let i = parent[s + j];
            match parent[i] {
                NONE => break i,
                sink => {
                    let prev = sink - s;
                    amount = amount.min(flow[i * t + prev]);
                    j = prev;
                }
            }
        };
        amount = amount.min(rem_s[root]);
        let mut j = target;
        loop {
            let i = parent[s + j];
            flow[i * t + j] += amount;
            match parent[i] {
                NONE => break,
                sink => {
                    let prev = sink - s;
                    flow[i * t + prev] -= amount;
                    j = prev;
                }
            }
        }
        rem_s[root] -= amount;
        rem_t[target] -= amount;
    }
    flow.iter().zip(cost).map(|(&f, &c)| f as i128 * c as i128).sum()
}

/// Exact discrete W₁ with ground cost `|x − y|`.
pub fn w1_lp(pair: &DiscreteMeasurePair) -> Result<f64> {
    let mismatch = pair.mu.total_mass() - pair.nu.total_mass();
    if mismatch.abs() > 1e-12 {
        return Err(LabError::MassMismatch(mismatch));
    }
    let keep = |m: &DiscreteMeasure| -> Vec<usize> { (0..m.weights.len()).filter(|&k| m.weights[k] > 0.0).collect() };
    let (src, dst) = (keep(&pair.mu), keep(&pair.nu));
    if src.len() > MAX_LP_SUPPORT || dst.len() > MAX_LP_SUPPORT {
        return Err(LabError::InvalidParameter(format!(
            "support {}x{} exceeds the {MAX_LP_SUPPORT} limit",
            src.len(),
            dst.len()
        )));
    }
    if src.is_empty() || dst.is_empty() {
        return Ok(0.0);
    }
    let mut supply = to_units(&src.iter().map(|&k| pair.mu.weights[k]).collect::<Vec<_>>());
    let mut demand = to_units(&dst.iter().map(|&k| pair.nu.weights[k]).collect::<Vec<_>>());
    balance(&mut supply, &mut demand);
    let cost: Vec<i64> = src
        .iter()
        .flat_map(|&a| {
            dst.iter()
                .map(move |&b| (euclid(&pair.mu.points[a], &pair.nu.points[b]) * LP_SCALE).round() as i64)
        })
        .collect();
    let total = transport_cost(&supply, &demand, &cost);
    Ok(total as f64 / (LP_SCALE * LP_SCALE))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W1Method {
    #[serde(rename = "cdf_1d")]
    Cdf1d,
    Lp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W1Result {
    pub w1: f64,
    pub method: W1Method,
    pub support_size: usize,
    pub coarsen_factor: usize,
    /// Upper bound on `|W₁(coarse) − W₁(grid)|` from moving every cell mass
    /// to its block centre.
    pub coarsen_error_bound: f64,
}

/// Cell-centre point masses of the pair after merging `factor^d` blocks.
pub fn coarsen(pair: &DensityPair, factor: usize) -> Result<(DiscreteMeasurePair, f64)> {
    let grid = pair.grid();
    let n = grid.cells_per_axis();
    if factor == 0 || n % factor != 0 {
        return Err(LabError::InvalidParameter(format!("coarsening factor {factor} does not divide {n}")));
    }
    let coarse = GridSpec::new(grid.dim(), (n / factor).max(2)).map_err(|_| {
        LabError::InvalidParameter(format!("coarsening {n} by {factor} leaves fewer than 2 cells"))
    })?;
    let vol = grid.cell_volume();
    let mut error = 0.0;
    let mut build = |values: &[f64]| -> Result<DiscreteMeasure> {
        let mut weights = vec![0.0; coarse.len()];
        for (i, v) in values.iter().enumerate() {
            let cc: Vec<usize> = grid.coords(i).iter().map(|c| c / factor).collect();
            let k = coarse.index(&cc);
            weights[k] += v * vol;
            error += v * vol * euclid(&grid.center(i), &coarse.center(k));
        }
        let points = (0..coarse.len()).map(|k| coarse.center(k)).collect();
        DiscreteMeasure::new(points, weights)
    };
    let mu = build(&pair.f.values)?;
    let nu = build(&pair.g.values)?;
    Ok((DiscreteMeasurePair::new(mu, nu)?, error))
}

/// Smallest divisor of `n` that brings the cells per axis to at most `max_cells`.
fn coarsening_factor(n: usize, max_cells: usize) -> usize {
    (1..=n).find(|&k| n % k == 0 && n / k <= max_cells.max(2)).unwrap_or(n)
}

/// W₁ of a grid pair with the exact method available for its dimension.
pub fn w1_grid(pair: &DensityPair, max_cells_per_axis: usize) -> Result<W1Result> {
    let grid = pair.grid();
    if grid.dim() == 1 {
        return Ok(W1Result {
            w1: w1_cdf_1d(pair)?,
            method: W1Method::Cdf1d,
            support_size: grid.len(),
            coarsen_factor: 1,
            coarsen_error_bound: 0.0,
        });
    }
    let factor = coarsening_factor(grid.cells_per_axis(), max_cells_per_axis);
    let (discrete, coarsen_error_bound) = coarsen(pair, factor)?;
    Ok(W1Result {
        w1: w1_lp(&discrete)?,
        method: W1Method::Lp,
        support_size: discrete.mu.weights.len(),
        coarsen_factor: factor,
        coarsen_error_bound,
    })
}
