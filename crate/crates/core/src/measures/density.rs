//! Analytic source/target densities on the unit box.
//!
//! Every family is a product of one-dimensional marginals, which gives exact
//! cell masses through the marginal CDFs and exact inverse-CDF sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{LabError, Result};
use crate::grid::{integrate, GridSpec, ScalarField};

/// JSON descriptor of a density family.
///
/// `piecewise_constant` describes a one-dimensional profile; in two
/// dimensions the density is the product of that profile along both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DensityDescriptor {
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    TruncatedGaussian { mean: Vec<f64>, stddev: f64 },
    PiecewiseConstant { edges: Vec<f64>, values: Vec<f64> },
}

#[derive(Debug, Clone)]
pub enum Marginal {
    Uniform {
        lo: f64,
        hi: f64,
    },
    TruncatedGaussian {
        normal: Normal,
        mean: f64,
        stddev: f64,
        cdf_lo: f64,
        mass: f64,
    },
    PiecewiseConstant {
        edges: Vec<f64>,
        /// Normalised heights.
        values: Vec<f64>,
        /// CDF at each edge.
        cdf: Vec<f64>,
    },
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

impl Marginal {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lo) || !(hi > lo && hi <= 1.0) {
            return Err(LabError::InvalidDensity(format!("uniform support [{lo}, {hi}] not in [0,1]")));
        }
        Ok(Self::Uniform { lo, hi })
    }

    pub fn truncated_gaussian(mean: f64, stddev: f64) -> Result<Self> {
        if !(stddev > 0.0) || !mean.is_finite() {
            return Err(LabError::InvalidDensity(format!("gaussian mean {mean}, stddev {stddev}")));
        }
        let normal = standard_normal();
        let cdf_lo = normal.cdf((0.0 - mean) / stddev);
        let mass = normal.cdf((1.0 - mean) / stddev) - cdf_lo;
        if !(mass > 1e-12) {
            return Err(LabError::InvalidDensity("gaussian has no mass on [0,1]".into()));
        }
        Ok(Self::TruncatedGaussian { normal, mean, stddev, cdf_lo, mass })
    }

    pub fn piecewise_constant(edges: &[f64], values: &[f64]) -> Result<Self> {
        if edges.len() < 2 || values.len() + 1 != edges.len() {
            return Err(LabError::InvalidDensity("piecewise_constant needs len(values)+1 edges".into()));
        }
        if edges[0] < 0.0 || *edges.last().unwrap() > 1.0 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::InvalidDensity("edges must increase inside [0,1]".into()));
        }
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(LabError::InvalidDensity("values must be finite and non-negative".into()));
        }
        let total: f64 = values.iter().zip(edges.windows(2)).map(|(v, e)| v * (e[1] - e[0])).sum();
        if !(total > 0.0) {
            return Err(LabError::InvalidDensity("piecewise_constant has zero mass".into()));
        }
        let values: Vec<f64> = values.iter().map(|v| v / total).collect();
        let mut cdf = Vec::with_capacity(edges.len());
        cdf.push(0.0);
        for (v, e) in values.iter().zip(edges.windows(2)) {
            cdf.push(cdf.last().unwrap() + v * (e[1] - e[0]));
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self::PiecewiseConstant { edges: edges.to_vec(), values, cdf })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            Self::TruncatedGaussian { normal, mean, stddev, cdf_lo, mass } => {
                if x <= 0.0 {
                    0.0
                } else if x >= 1.0 {
                    1.0
                } else {
                    ((normal.cdf((x - mean) / stddev) - cdf_lo) / mass).clamp(0.0, 1.0)
                }
            }
            Self::PiecewiseConstant { edges, values, cdf } => {
                if x <= edges[0] {
                    return 0.0;
                }
                if x >= *edges.last().unwrap() {
                    return 1.0;
                }
                let k = edges.partition_point(|&e| e <= x) - 1;
                cdf[k] + values[k] * (x - edges[k])
            }
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        match self {
            Self::Uniform { lo, hi } => {
                if x >= *lo && x <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            Self::TruncatedGaussian { mean, stddev, mass, .. } => {
                if !(0.0..=1.0).contains(&x) {
                    return 0.0;
                }
                let z = (x - mean) / stddev;
                (-0.5 * z * z).exp() / (stddev * (2.0 * std::f64::consts::PI).sqrt() * mass)
            }
            Self::PiecewiseConstant { edges, values, .. } => {
                if x < edges[0] || x > *edges.last().unwrap() {
                    return 0.0;
                }
                let k = (edges.partition_point(|&e| e <= x).max(1) - 1).min(values.len() - 1);
                values[k]
            }
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            Self::Uniform { lo, hi } => 1.0 / (hi - lo),
            Self::TruncatedGaussian { mean, .. } => self.density(mean.clamp(0.0, 1.0)),
            Self::PiecewiseConstant { values, .. } => values.iter().copied().fold(0.0, f64::max),
        }
    }

    pub fn inverse_cdf(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match self {
            Self::Uniform { lo, hi } => lo + p * (hi - lo),
            Self::TruncatedGaussian { normal, mean, stddev, cdf_lo, mass } => {
                let q = (cdf_lo + p * mass).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                (mean + stddev * normal.inverse_cdf(q)).clamp(0.0, 1.0)
            }
            Self::PiecewiseConstant { edges, values, cdf } => {
                let k = (cdf.partition_point(|&c| c <= p).max(1) - 1).min(values.len() - 1);
                if values[k] == 0.0 {
                    return edges[k];
                }
                (edges[k] + (p - cdf[k]) / values[k]).min(edges[k + 1])
            }
        }
    }

    /// Mass of each grid interval `[c h, (c+1) h)` along one axis.
    pub fn cell_masses(&self, n: usize) -> Vec<f64> {
        let h = 1.0 / n as f64;
        (0..n).map(|c| self.cdf((c + 1) as f64 * h) - self.cdf(c as f64 * h)).collect()
    }
}

/// A product density on the unit box together with its descriptor.
#[derive(Debug, Clone)]
pub struct Density {
    pub descriptor: DensityDescriptor,
    pub marginals: Vec<Marginal>,
}

impl Density {
    pub fn new(descriptor: DensityDescriptor, dim: usize) -> Result<Self> {
        let check_len = |v: &[f64], what: &str| {
            if v.len() != dim {
                Err(LabError::InvalidDensity(format!("{what} has {} entries, dimension is {dim}", v.len())))
            } else {
                Ok(())
            }
        };
        let marginals = match &descriptor {
            DensityDescriptor::UniformBox { lo, hi } => {
                check_len(lo, "lo")?;
                check_len(hi, "hi")?;
                lo.iter().zip(hi).map(|(&a, &b)| Marginal::uniform(a, b)).collect::<Result<_>>()?
            }
            DensityDescriptor::TruncatedGaussian { mean, stddev } => {
                check_len(mean, "mean")?;
                mean.iter().map(|&m| Marginal::truncated_gaussian(m, *stddev)).collect::<Result<_>>()?
            }
            DensityDescriptor::PiecewiseConstant { edges, values } => {
                let m = Marginal::piecewise_constant(edges, values)?;
                vec![m; dim]
            }
        };
        Ok(Self { descriptor, marginals })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.marginals.iter().zip(x).map(|(m, &xi)| m.density(xi)).product()
    }

    pub fn sup(&self) -> f64 {
        self.marginals.iter().map(Marginal::sup).product()
    }

    /// Exact cell averages on `grid`.
    pub fn cell_averages(&self, grid: GridSpec) -> ScalarField {
        let n = grid.cells_per_axis();
        let masses: Vec<Vec<f64>> = self.marginals.iter().map(|m| m.cell_masses(n)).collect();
        let inv_vol = 1.0 / grid.cell_volume();
        let values = (0..grid.len())
            .map(|i| (0..grid.dim()).map(|k| masses[k][grid.coord(i, k)]).product::<f64>() * inv_vol)
            .collect();
        ScalarField { grid, values }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for (m, o) in self.marginals.iter().zip(out.iter_mut()) {
            *o = m.inverse_cdf(rng.gen::<f64>());
        }
    }
}

/// Source density `f` (of μ) and target density `g` (of ν) on a common grid.
#[derive(Debug, Clone)]
pub struct DensityPair {
    pub f: ScalarField,
    pub g: ScalarField,
    pub f_density: Option<Density>,
    pub g_density: Option<Density>,
}

fn normalized(field: ScalarField, which: &str) -> Result<ScalarField> {
    if field.values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(LabError::InvalidDensity(format!("{which} must be finite and non-negative")));
    }
    let mass = integrate(&field);
    if !(mass > 0.0) {
        return Err(LabError::InvalidDensity(format!("{which} has zero mass")));
    }
    Ok(field.map(|v| v / mass))
}

impl DensityPair {
    pub fn from_descriptors(grid: GridSpec, f: DensityDescriptor, g: DensityDescriptor) -> Result<Self> {
        let f_density = Density::new(f, grid.dim())?;
        let g_density = Density::new(g, grid.dim())?;
        Ok(Self {
            f: normalized(f_density.cell_averages(grid), "f")?,
            g: normalized(g_density.cell_averages(grid), "g")?,
            f_density: Some(f_density),
            g_density: Some(g_density),
        })
    }

    /// Pair given only by grid values; normalised to unit mass.
    pub fn from_fields(f: ScalarField, g: ScalarField) -> Result<Self> {
        if f.grid != g.grid {
            return Err(LabError::GridMismatch("f and g grids differ".into()));
        }
        Ok(Self { f: normalized(f, "f")?, g: normalized(g, "g")?, f_density: None, g_density: None })
    }

    pub fn grid(&self) -> GridSpec {
        self.f.grid
    }

    /// `f - g` on the grid.
    pub fn imbalance(&self) -> ScalarField {
        self.f.zip_map(&self.g, |a, b| a - b)
    }

    pub fn analytic(&self) -> Option<(&Density, &Density)> {
        Some((self.f_density.as_ref()?, self.g_density.as_ref()?))
    }

    /// `(sup f, sup g)`, analytic when descriptors exist.
    pub fn sups(&self) -> (f64, f64) {
        match self.analytic() {
            Some((f, g)) => (f.sup(), g.sup()),
            None => (self.f.max(), self.g.max()),
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            f: self.g.clone(),
            g: self.f.clone(),
            f_density: self.g_density.clone(),
            g_density: self.f_density.clone(),
        }
    }
}
