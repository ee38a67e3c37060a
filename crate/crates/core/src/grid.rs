//! Uniform cell-centred grids on the unit box `(0,1)^d`, `d ∈ {1, 2}`.
//!
//! Scalar fields live at cell centres. A vector field stores, for each cell,
//! one component per axis; component `k` of cell `c` is the flux through the
//! face shared with the next cell along axis `k`. The gradient is the forward
//! difference onto those faces, with a zero (no-flux) face at the high
//! boundary, and [`divergence`] is built as its exact negative transpose so
//! that `<grad u, w> = -<u, div w>` holds to roundoff.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    n: usize,
}

impl GridSpec {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(LabError::InvalidGrid(format!("dimension {dim} not in {{1, 2}}")));
        }
        if n < 2 {
            return Err(LabError::InvalidGrid(format!("need at least 2 cells per axis, got {n}")));
        }
        Ok(Self { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells_per_axis(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Area of a face between two adjacent cells (`h^(d-1)`).
    pub fn face_area(&self) -> f64 {
        self.spacing().powi(self.dim as i32 - 1)
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Diameter of the unit box, `sqrt(d)`.
    pub fn diameter(&self) -> f64 {
        (self.dim as f64).sqrt()
    }

    /// Linear-index offset of one step along `axis` (row-major, axis 0 slowest).
    pub fn stride(&self, axis: usize) -> usize {
        debug_assert!(axis < self.dim);
        self.n.pow((self.dim - 1 - axis) as u32)
    }

    /// Integer coordinate of cell `idx` along `axis`.
    pub fn coord(&self, idx: usize, axis: usize) -> usize {
        (idx / self.stride(axis)) % self.n
    }

    pub fn coords(&self, idx: usize) -> Vec<usize> {
        (0..self.dim).map(|k| self.coord(idx, k)).collect()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.dim);
        coords.iter().fold(0, |acc, &c| acc * self.n + c)
    }

    /// Cell-centre coordinate along one axis.
    pub fn center_1d(&self, c: usize) -> f64 {
        (c as f64 + 0.5) * self.spacing()
    }

    pub fn center(&self, idx: usize) -> Vec<f64> {
        (0..self.dim).map(|k| self.center_1d(self.coord(idx, k))).collect()
    }

    /// Neighbour of `idx` one step up along `axis`, if it exists.
    pub fn upper_neighbor(&self, idx: usize, axis: usize) -> Option<usize> {
        (self.coord(idx, axis) + 1 < self.n).then(|| idx + self.stride(axis))
    }

    fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(LabError::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        Self { grid, values: vec![c; grid.len()] }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(LabError::GridMismatch(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidParameter("scalar field has non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every cell centre.
    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.center(i))).collect();
        Self { grid, values }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self { grid: self.grid, values }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `L²` norm with the cell-volume weight.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    /// `L¹` norm with the cell-volume weight.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    /// Cell-volume inner product `Σ u v h^d`.
    pub fn inner(&self, other: &ScalarField) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
            * self.grid.cell_volume()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: GridSpec,
    /// One vector of length `n^d` per axis.
    pub components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, components: vec![vec![0.0; grid.len()]; grid.dim()] }
    }

    pub fn from_components(grid: GridSpec, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != grid.dim() || components.iter().any(|c| c.len() != grid.len()) {
            return Err(LabError::GridMismatch("vector field component shape".into()));
        }
        Ok(Self { grid, components })
    }

    /// Euclidean length of the per-cell vector.
    pub fn magnitude_at(&self, idx: usize) -> f64 {
        match self.components.len() {
            1 => self.components[0][idx].abs(),
            _ => self.components.iter().map(|c| c[idx] * c[idx]).sum::<f64>().sqrt(),
        }
    }

    pub fn magnitudes(&self) -> ScalarField {
        let values = (0..self.grid.len()).map(|i| self.magnitude_at(i)).collect();
        ScalarField { grid: self.grid, values }
    }

    /// Cell-volume inner product `Σ_cells v·w h^d`.
    pub fn inner(&self, other: &VectorField) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum::<f64>()
            * self.grid.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.grid.len()).map(|i| self.magnitude_at(i)).fold(0.0, f64::max)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &VectorField) -> VectorField {
        let components = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + alpha * y).collect())
            .collect();
        VectorField { grid: self.grid, components }
    }

    pub fn scale(&self, alpha: f64) -> VectorField {
        let components =
            self.components.iter().map(|c| c.iter().map(|x| alpha * x).collect()).collect();
        VectorField { grid: self.grid, components }
    }
}

pub fn gradient(u: &ScalarField) -> VectorField {
    let grid = u.grid;
    let inv_h = 1.0 / grid.spacing();
    let components = (0..grid.dim())
        .map(|axis| {
            let stride = grid.stride(axis);
            (0..grid.len())
                .map(|i| {
                    if grid.coord(i, axis) + 1 < grid.cells_per_axis() {
                        (u.values[i + stride] - u.values[i]) * inv_h
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    VectorField { grid, components }
}

/// Negative transpose of [`gradient`] under the cell-volume inner product.
pub fn divergence(w: &VectorField) -> ScalarField {
    let grid = w.grid;
    let n = grid.cells_per_axis();
    let inv_h = 1.0 / grid.spacing();
    let mut values = vec![0.0; grid.len()];
    for (axis, comp) in w.components.iter().enumerate() {
        let stride = grid.stride(axis);
        for (i, v) in values.iter_mut().enumerate() {
            let c = grid.coord(i, axis);
            let mut acc = 0.0;
            if c + 1 < n {
                acc += comp[i];
            }
            if c > 0 {
                acc -= comp[i - stride];
            }
            *v += acc * inv_h;
        }
    }
    ScalarField { grid, values }
}

/// Midpoint quadrature over the unit box.
pub fn integrate(s: &ScalarField) -> f64 {
    s.values.iter().sum::<f64>() * s.grid.cell_volume()
}

pub fn weighted_inner(u: &ScalarField, v: &ScalarField, weight: &ScalarField) -> Result<f64> {
    u.grid.check_same(&v.grid)?;
    u.grid.check_same(&weight.grid)?;
    let sum: f64 = u
        .values
        .iter()
        .zip(&v.values)
        .zip(&weight.values)
        .map(|((a, b), c)| a * b * c)
        .sum();
    Ok(sum * u.grid.cell_volume())
}

fn csv_header(grid: &GridSpec) -> String {
    format!("# grid d={} n={}\n", grid.dim(), grid.cells_per_axis())
}

fn push_coords(out: &mut String, grid: &GridSpec, idx: usize) {
    for (k, c) in grid.coords(idx).iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "{c}");
    }
}

pub fn scalar_to_csv(s: &ScalarField) -> String {
    let mut out = csv_header(&s.grid);
    for (i, v) in s.values.iter().enumerate() {
        push_coords(&mut out, &s.grid, i);
        let _ = writeln!(out, ",{v}");
    }
    out
}

pub fn vector_to_csv(w: &VectorField) -> String {
    let mut out = csv_header(&w.grid);
    for i in 0..w.grid.len() {
        push_coords(&mut out, &w.grid, i);
        for comp in &w.components {
            let _ = write!(out, ",{}", comp[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_scalar_csv(s: &ScalarField, mut sink: impl Write) -> Result<()> {
    sink.write_all(scalar_to_csv(s).as_bytes())?;
    Ok(())
}

pub fn write_vector_csv(w: &VectorField, mut sink: impl Write) -> Result<()> {
    sink.write_all(vector_to_csv(w).as_bytes())?;
    Ok(())
}

/// Parses a field dump. Returns the grid and, per cell, the value columns.
pub fn read_field_csv(source: impl Read) -> Result<(GridSpec, Vec<Vec<f64>>)> {
    let mut lines = BufReader::new(source).lines();
    let header = lines.next().ok_or_else(|| LabError::Config("empty field dump".into()))??;
    let parse_kv = |key: &str| -> Result<usize> {
        header
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| LabError::Config(format!("bad header line {header:?}")))
    };
    let grid = GridSpec::new(parse_kv("d=")?, parse_kv("n=")?)?;
    let mut rows = vec![Vec::new(); grid.len()];
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() <= grid.dim() {
            return Err(LabError::Config(format!("short row {line:?}")));
        }
        let coords = fields[..grid.dim()]
            .iter()
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| LabError::Config(e.to_string()))?;
        if coords.iter().any(|&c| c >= grid.cells_per_axis()) {
            return Err(LabError::Config(format!("cell out of range in {line:?}")));
        }
        let vals = fields[grid.dim()..]
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| LabError::Config(e.to_string()))?;
        rows[grid.index(&coords)] = vals;
    }
    Ok((grid, rows))
}
