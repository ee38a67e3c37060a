//! The interpolation density σ: the law of `z = (1-t) x + t y` with
//! `x ~ μ`, `y ~ ν`, `t ~ U[0,1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::density::{Density, DensityPair};
use crate::error::{LabError, Result};
use crate::grid::{integrate, GridSpec, ScalarField};

pub const MIN_T_NODES: usize = 8;
pub const MIN_MC_SAMPLES: u64 = 10_000;
const MC_CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SigmaMethod {
    Quadrature { t_nodes: usize },
    Montecarlo {
        sample_count: u64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct SigmaField {
    pub density: ScalarField,
    pub method: SigmaMethod,
    /// Discrete mass before renormalisation.
    pub raw_mass: f64,
}

impl SigmaField {
    /// Mass tolerance of the construction method.
    pub fn mass_tolerance(&self) -> f64 {
        match self.method {
            SigmaMethod::Quadrature { .. } => 1e-6,
            SigmaMethod::Montecarlo { sample_count, .. } => 3.0 / (sample_count as f64).sqrt(),
        }
    }

    pub fn max(&self) -> f64 {
        self.density.max()
    }
}

/// Per-axis factor of one half of the split σ integral at time `t`:
/// `S[z] = Σ_y m_b(y) · μ_a(cell_z − t y) / (1 − t)` where the `a`-factor is
/// integrated exactly over the target interval through its CDF.
fn axis_factor(a: &super::density::Marginal, b_masses: &[f64], t: f64, n: usize) -> Vec<f64> {
    let h = 1.0 / n as f64;
    let inv = 1.0 / (1.0 - t);
    (0..n)
        .map(|z| {
            let lo = z as f64 * h;
            let hi = lo + h;
            b_masses
                .iter()
                .enumerate()
                .filter(|(_, &m)| m != 0.0)
                .map(|(y, &m)| {
                    let yc = (y as f64 + 0.5) * h;
                    m * (a.cdf((hi - t * yc) * inv) - a.cdf((lo - t * yc) * inv))
                })
                .sum()
        })
        .collect()
}

/// Adds `∫_0^{1/2} ∫ a((z - t y)/(1-t)) b(y) (1-t)^{-d} dy dt` (cell-averaged)
/// into `acc`.
fn accumulate_half(acc: &mut [f64], grid: GridSpec, a: &Density, b: &Density, nodes: usize) {
    let n = grid.cells_per_axis();
    let dt = 0.5 / nodes as f64;
    let b_masses: Vec<Vec<f64>> = b.marginals.iter().map(|m| m.cell_masses(n)).collect();
    let factors: Vec<Vec<Vec<f64>>> = (0..nodes)
        .into_par_iter()
        .map(|j| {
            let t = (j as f64 + 0.5) * dt;
            (0..grid.dim()).map(|k| axis_factor(&a.marginals[k], &b_masses[k], t, n)).collect()
        })
        .collect();
    let scale = dt / grid.cell_volume();
    for per_axis in &factors {
        for (i, v) in acc.iter_mut().enumerate() {
            let prod: f64 = (0..grid.dim()).map(|k| per_axis[k][grid.coord(i, k)]).product();
            *v += scale * prod;
        }
    }
}

/// σ on the grid by deterministic quadrature.
///
/// The time integral is split at `t = 1/2` and the second half rewritten with
/// the roles of `f` and `g` exchanged, so both halves integrate over
/// `t ∈ (0, 1/2)` with at most a `2^d` Jacobian. `t_nodes` midpoint nodes
/// cover `(0,1)`, half on each side of the split.
pub fn sigma_quadrature(pair: &DensityPair, t_nodes: usize) -> Result<SigmaField> {
    if t_nodes < MIN_T_NODES {
        return Err(LabError::InvalidParameter(format!(
            "t_nodes = {t_nodes} is below the minimum of {MIN_T_NODES}"
        )));
    }
    let (f, g) = pair.analytic().ok_or(LabError::NoAnalyticForm("sigma quadrature"))?;
    let grid = pair.grid();
    let nodes = t_nodes.div_ceil(2);
    let mut acc = vec![0.0; grid.len()];
    accumulate_half(&mut acc, grid, f, g, nodes);
    accumulate_half(&mut acc, grid, g, f, nodes);
    let raw = ScalarField { grid, values: acc };
    let raw_mass = integrate(&raw);
    Ok(SigmaField {
        density: raw.map(|v| v / raw_mass),
        method: SigmaMethod::Quadrature { t_nodes },
        raw_mass,
    })
}

/// Histogram estimate of σ from `sample_count` draws of `(x, y, t)`.
///
/// Draws are split into fixed-size chunks, each with its own ChaCha stream,
/// so the result depends only on `seed` and not on the thread count.
pub fn sigma_montecarlo(pair: &DensityPair, sample_count: u64, seed: u64) -> Result<SigmaField> {
    if sample_count < MIN_MC_SAMPLES {
        return Err(LabError::InvalidParameter(format!(
            "sample_count = {sample_count} is below the minimum of {MIN_MC_SAMPLES}"
        )));
    }
    let (f, g) = pair.analytic().ok_or(LabError::NoAnalyticForm("sigma monte carlo sampling"))?;
    let grid = pair.grid();
    let n = grid.cells_per_axis();
    let d = grid.dim();
    let chunks = sample_count.div_ceil(MC_CHUNK);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let draws = MC_CHUNK.min(sample_count - chunk * MC_CHUNK);
            let mut local = vec![0u64; grid.len()];
            let (mut x, mut y) = ([0.0; 2], [0.0; 2]);
            for _ in 0..draws {
                f.sample(&mut rng, &mut x[..d]);
                g.sample(&mut rng, &mut y[..d]);
                let t: f64 = rng.gen();
                let idx = (0..d).fold(0usize, |acc, k| {
                    let z = (1.0 - t) * x[k] + t * y[k];
                    acc * n + ((z * n as f64) as usize).min(n - 1)
                });
                local[idx] += 1;
            }
            local
        })
        .reduce(
            || vec![0u64; grid.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let scale = 1.0 / (sample_count as f64 * grid.cell_volume());
    let density = ScalarField { grid, values: counts.iter().map(|&c| c as f64 * scale).collect() };
    let raw_mass = integrate(&density);
    Ok(SigmaField { density, method: SigmaMethod::Montecarlo { sample_count, seed }, raw_mass })
}

/// Dispatches to the construction named by `method`.
pub fn compute_sigma(pair: &DensityPair, method: &SigmaMethod) -> Result<SigmaField> {
    match *method {
        SigmaMethod::Quadrature { t_nodes } => sigma_quadrature(pair, t_nodes),
        SigmaMethod::Montecarlo { sample_count, seed } => sigma_montecarlo(pair, sample_count, seed),
    }
}

/// `∫_0^{1/2} (1-t)^{-d} dt`.
pub fn split_constant(dim: usize) -> f64 {
    match dim {
        1 => std::f64::consts::LN_2,
        d => (2f64.powi(d as i32 - 1) - 1.0) / (d as f64 - 1.0),
    }
}

/// Upper bound `C(d) (‖f‖_∞ + ‖g‖_∞)` on `‖σ‖_∞`.
pub fn sigma_sup_bound(pair: &DensityPair) -> f64 {
    let (sf, sg) = pair.sups();
    split_constant(pair.grid().dim()) * (sf + sg)
}

/// Distance from each cell centre to the boundary of the unit box.
pub fn boundary_distance(grid: GridSpec) -> ScalarField {
    ScalarField::from_fn(grid, |x| x.iter().map(|&c| c.min(1.0 - c)).fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparabilityRatio {
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl ComparabilityRatio {
    /// Constant `C` with `dist/C ≤ σ ≤ C dist`; infinite if `min_ratio` is 0.
    pub fn constant(&self) -> f64 {
        self.max_ratio.max(1.0 / self.min_ratio)
    }

    pub fn spread(&self) -> f64 {
        self.max_ratio / self.min_ratio
    }
}

/// Extremes of `σ(x) / dist(x, ∂Ω)` over the cells.
pub fn comparability_ratio(sigma: &SigmaField, grid: GridSpec) -> Result<ComparabilityRatio> {
    if sigma.density.grid != grid {
        return Err(LabError::GridMismatch("sigma grid".into()));
    }
    let dist = boundary_distance(grid);
    let (mut min_ratio, mut max_ratio) = (f64::INFINITY, 0.0f64);
    for (s, d) in sigma.density.values.iter().zip(&dist.values) {
        let r = s / d;
        if !r.is_finite() {
            return Err(LabError::InvalidParameter(format!("non-finite sigma/dist ratio {r}")));
        }
        min_ratio = min_ratio.min(r);
        max_ratio = max_ratio.max(r);
    }
    Ok(ComparabilityRatio { min_ratio, max_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::DensityDescriptor;

    fn uniform_1d(lo: f64, hi: f64) -> DensityDescriptor {
        DensityDescriptor::UniformBox { lo: vec![lo], hi: vec![hi] }
    }

    fn oracle_pair(n: usize) -> DensityPair {
        DensityPair::from_descriptors(GridSpec::new(1, n).unwrap(), uniform_1d(0.0, 1.0), uniform_1d(0.25, 0.75))
            .unwrap()
    }

    #[test]
    fn rejects_coarse_t_grid() {
        assert!(sigma_quadrature(&oracle_pair(16), 7).is_err());
    }

    #[test]
    fn uniform_sigma_is_reflection_symmetric() {
        let grid = GridSpec::new(1, 128).unwrap();
        let pair = DensityPair::from_descriptors(grid, uniform_1d(0.0, 1.0), uniform_1d(0.0, 1.0)).unwrap();
        let s = sigma_quadrature(&pair, 32).unwrap();
        let v = &s.density.values;
        for i in 0..128 {
            assert!((v[i] - v[127 - i]).abs() < 1e-9);
        }
    }

    #[test]
    fn raw_mass_is_one() {
        let pair = oracle_pair(256);
        let s = sigma_quadrature(&pair, 64).unwrap();
        assert!((s.raw_mass - 1.0).abs() <= 1e-6, "{}", s.raw_mass);
        let grid = GridSpec::new(2, 32).unwrap();
        let pair = DensityPair::from_descriptors(
            grid,
            DensityDescriptor::TruncatedGaussian { mean: vec![0.3, 0.4], stddev: 0.1 },
            DensityDescriptor::UniformBox { lo: vec![0.5, 0.5], hi: vec![0.9, 0.75] },
        )
        .unwrap();
        let s = sigma_quadrature(&pair, 16).unwrap();
        assert!((s.raw_mass - 1.0).abs() <= 1e-6, "{}", s.raw_mass);
    }

    #[test]
    fn exchange_symmetry() {
        let grid = GridSpec::new(2, 24).unwrap();
        let pair = DensityPair::from_descriptors(
            grid,
            DensityDescriptor::TruncatedGaussian { mean: vec![0.3, 0.6], stddev: 0.12 },
            DensityDescriptor::UniformBox { lo: vec![0.5, 0.1], hi: vec![0.9, 0.5] },
        )
        .unwrap();
        let a = sigma_quadrature(&pair, 16).unwrap();
        let b = sigma_quadrature(&pair.swapped(), 16).unwrap();
        for (x, y) in a.density.values.iter().zip(&b.density.values) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn sup_bound_constants() {
        assert!((split_constant(1) - 2f64.ln()).abs() < 1e-15);
        assert!((split_constant(2) - 1.0).abs() < 1e-15);
        let grid = GridSpec::new(1, 64).unwrap();
        let pair = DensityPair::from_descriptors(grid, uniform_1d(0.0, 1.0), uniform_1d(0.0, 1.0)).unwrap();
        assert!((sigma_sup_bound(&pair) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let grid2 = GridSpec::new(2, 8).unwrap();
        let unit = DensityDescriptor::UniformBox { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] };
        let pair2 = DensityPair::from_descriptors(grid2, unit.clone(), unit).unwrap();
        assert!((sigma_sup_bound(&pair2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_sigma_below_bound() {
        for (d, n) in [(1, 16), (1, 128), (1, 512), (2, 16), (2, 48)] {
            let grid = GridSpec::new(d, n).unwrap();
            let unit = DensityDescriptor::UniformBox { lo: vec![0.0; d], hi: vec![1.0; d] };
            let pair = DensityPair::from_descriptors(grid, unit.clone(), unit).unwrap();
            let s = sigma_quadrature(&pair, 32).unwrap();
            assert!(s.max() <= sigma_sup_bound(&pair), "d={d} n={n}");
        }
    }

    #[test]
    fn boundary_distance_examples() {
        let d = boundary_distance(GridSpec::new(1, 4).unwrap());
        assert_eq!(d.values, vec![0.125, 0.375, 0.375, 0.125]);
        // odd n: the centre cell sits exactly at 0.5
        let g = GridSpec::new(2, 7).unwrap();
        let d = boundary_distance(g);
        assert!((d.values[g.index(&[3, 3])] - 0.5).abs() < 1e-15);
        assert!(d.values.iter().all(|&v| v > 0.0 && v <= 0.5));
        // even n: the innermost cells are half a cell off centre
        let g = GridSpec::new(2, 8).unwrap();
        let d = boundary_distance(g);
        assert!((d.values[g.index(&[3, 4])] - (0.5 - g.spacing() / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn point_like_pair_concentrates_in_one_cell() {
        let grid = GridSpec::new(1, 64).unwrap();
        let cell = uniform_1d(0.5, 0.5 + 1.0 / 64.0);
        let pair = DensityPair::from_descriptors(grid, cell.clone(), cell).unwrap();
        let s = sigma_montecarlo(&pair, 20_000, 3).unwrap();
        assert_eq!(s.density.values[32], 64.0);
        assert_eq!(s.density.values.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn montecarlo_is_deterministic() {
        let pair = oracle_pair(64);
        let a = sigma_montecarlo(&pair, 200_000, 17).unwrap();
        let b = sigma_montecarlo(&pair, 200_000, 17).unwrap();
        assert_eq!(a.density.values, b.density.values);
        let c = sigma_montecarlo(&pair, 200_000, 18).unwrap();
        assert_ne!(a.density.values, c.density.values);
        assert!((a.raw_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn montecarlo_rejects_small_or_unsampleable() {
        assert!(sigma_montecarlo(&oracle_pair(16), 100, 1).is_err());
        let grid = GridSpec::new(1, 8).unwrap();
        let raw = DensityPair::from_fields(ScalarField::constant(grid, 1.0), ScalarField::constant(grid, 1.0)).unwrap();
        assert!(matches!(sigma_montecarlo(&raw, 10_000, 1), Err(LabError::NoAnalyticForm(_))));
        assert!(matches!(sigma_quadrature(&raw, 8), Err(LabError::NoAnalyticForm(_))));
    }
}
