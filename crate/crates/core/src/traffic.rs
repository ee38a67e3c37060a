//! Lattice traffic plans: a feasible flow re-expressed on the edges between
//! face-adjacent cells, stripped of directed cycles, and decomposed into
//! weighted source-to-sink paths.
//!
//! Every edge is owned by its lower cell (the cell whose gradient stencil
//! contains the face), matching the storage convention of [`VectorField`].
//! Path length is rasterised with the same convention, so the traffic flow of
//! a decomposed plan reproduces the input flow exactly and its traffic
//! intensity equals the lattice (`ℓ¹`) magnitude of that flow.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::Serialize;

use crate::beckmann::{congestion_cost, feasibility_residual};
use crate::error::{LabError, Result};
use crate::grid::{GridSpec, ScalarField, VectorField};
use crate::measures::DensityPair;

/// Largest divergence residual accepted by [`field_to_edgeflow`].
pub const EDGEFLOW_FEASIBILITY_TOL: f64 = 1e-8;
/// Largest mass [`decompose_paths`] may leave unrouted.
pub const UNROUTED_TOL: f64 = 1e-8;

/// Signed mass flux through every interior face, indexed like the
/// components of a [`VectorField`]: `flows[k][i]` is the flux from cell `i`
/// to its upper neighbour along axis `k`. Entries on the upper boundary are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFlow {
    pub grid: GridSpec,
    pub flows: Vec<Vec<f64>>,
}

/// Directed lattice edge: axis and owning (lower) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Edge {
    axis: usize,
    owner: usize,
}

impl EdgeFlow {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, flows: vec![vec![0.0; grid.len()]; grid.dim()] }
    }

    /// Net outflow of every cell, in mass units.
    pub fn imbalance(&self) -> ScalarField {
        let g = self.grid;
        let mut out = vec![0.0; g.len()];
        for (axis, flow) in self.flows.iter().enumerate() {
            for i in 0..g.len() {
                if let Some(j) = g.upper_neighbor(i, axis) {
                    out[i] += flow[i];
                    out[j] -= flow[i];
                } else {
                    debug_assert_eq!(flow[i], 0.0);
                }
            }
        }
        ScalarField { grid: g, values: out }
    }

    /// `Σ |flow|` over all edges.
    pub fn total_abs(&self) -> f64 {
        self.flows.iter().flatten().map(|v| v.abs()).sum()
    }

    pub fn to_vector_field(&self) -> VectorField {
        let area = self.grid.face_area();
        VectorField { grid: self.grid, components: self.flows.iter().map(|f| f.iter().map(|v| v / area).collect()).collect() }
    }

    /// Edges carrying flow out of `cell`, in fixed (axis, lower-then-upper) order.
    fn outgoing(&self, cell: usize) -> Vec<(Edge, usize)> {
        let g = self.grid;
        let mut out = Vec::with_capacity(2 * g.dim());
        for axis in 0..g.dim() {
            let c = g.coords(cell)[axis];
            if c > 0 {
                let owner = cell - g.stride(axis);
                if self.flows[axis][owner] < 0.0 {
                    out.push((Edge { axis, owner }, owner));
                }
            }
            if let Some(upper) = g.upper_neighbor(cell, axis) {
                if self.flows[axis][cell] > 0.0 {
                    out.push((Edge { axis, owner: cell }, upper));
                }
            }
        }
        out
    }
}

/// Re-expresses a feasible flow on the lattice: each face carries the
/// matching component times the face area.
pub fn field_to_edgeflow(w: &VectorField, pair: &DensityPair) -> Result<EdgeFlow> {
    if w.grid != pair.grid() {
        return Err(LabError::GridMismatch("flow and density pair grids differ".into()));
    }
    let residual = feasibility_residual(w, pair);
    if !(residual <= EDGEFLOW_FEASIBILITY_TOL) {
        return Err(LabError::InfeasibleFlow(residual));
    }
    let g = w.grid;
    let area = g.face_area();
    let flows = (0..g.dim())
        .map(|axis| {
            (0..g.len())
                .map(|i| if g.upper_neighbor(i, axis).is_some() { w.components[axis][i] * area } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(EdgeFlow { grid: g, flows })
}

/// A directed cycle in the positive-flow orientation, as edges.
fn find_cycle(e: &EdgeFlow) -> Option<Vec<Edge>> {
    const WHITE: u8 = 0;
    const GREY: u8 = 1;
    const BLACK: u8 = 2;
    let n = e.grid.len();
    let mut colour = vec![WHITE; n];
    // Edge used to enter each cell on the current DFS path.
    let mut via: Vec<Option<(Edge, usize)>> = vec![None; n];
    for root in 0..n {
        if colour[root] != WHITE {
            continue;
        }
        let mut stack: Vec<(usize, Vec<(Edge, usize)>, usize)> = vec![(root, e.outgoing(root), 0)];
        colour[root] = GREY;
        while let Some((cell, succ, pos)) = stack.last_mut() {
            if *pos == succ.len() {
                colour[*cell] = BLACK;
                stack.pop();
                continue;
            }
            let (edge, next) = succ[*pos];
            *pos += 1;
            let from = *cell;
            match colour[next] {
                WHITE => {
                    colour[next] = GREY;
                    via[next] = Some((edge, from));
                    let s = e.outgoing(next);
                    stack.push((next, s, 0));
                }
                GREY => {
                    let mut cycle = vec![edge];
                    let mut at = from;
                    while at != next {
                        let (edge, prev) = via[at].expect("grey cells lie on the DFS path");
                        cycle.push(edge);
                        at = prev;
                    }
                    return Some(cycle);
                }
                _ => {}
            }
        }
    }
    None
}

/// Removes every directed cycle by repeatedly subtracting its bottleneck.
/// Node imbalances are preserved and no edge flow grows in magnitude.
pub fn cancel_cycles(e: &EdgeFlow) -> EdgeFlow {
    let mut out = e.clone();
    while let Some(cycle) = find_cycle(&out) {
        let (argmin, bottleneck) = cycle
            .iter()
            .map(|c| (*c, out.flows[c.axis][c.owner].abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("cycles are non-empty");
        for c in &cycle {
            let v = &mut out.flows[c.axis][c.owner];
            *v -= bottleneck * v.signum();
        }
        out.flows[argmin.axis][argmin.owner] = 0.0;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficPath {
    pub mass: f64,
    /// Cell indices from source to sink; consecutive cells are face-adjacent.
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficPlanDiscrete {
    pub grid: GridSpec,
    pub paths: Vec<TrafficPath>,
    pub unrouted_residual: f64,
}

impl TrafficPlanDiscrete {
    pub fn routed_mass(&self) -> f64 {
        self.paths.iter().map(|p| p.mass).sum()
    }

    /// One JSON object per line: `{"mass":..,"cells":[[i,j],...]}`.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            mass: f64,
            cells: &'a [Vec<usize>],
        }
        for path in &self.paths {
            let cells: Vec<Vec<usize>> = path.cells.iter().map(|&c| self.grid.coords(c)).collect();
            serde_json::to_writer(&mut out, &Line { mass: path.mass, cells: &cells })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Heap entry ordered by bottleneck, then by lowest cell index.
#[derive(Debug, PartialEq)]
struct Widest(f64, usize);

impl Eq for Widest {}

impl PartialOrd for Widest {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Widest {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Greedy flow decomposition: repeatedly strips the source-to-sink path of
/// largest bottleneck (capacity limited by remaining supply and demand).
/// Ties go to the lowest cell index, so the result is deterministic.
pub fn decompose_paths(e: &EdgeFlow, pair: &DensityPair) -> Result<TrafficPlanDiscrete> {
    let g = e.grid;
    if g != pair.grid() {
        return Err(LabError::GridMismatch("edge flow and density pair grids differ".into()));
    }
    if find_cycle(e).is_some() {
        return Err(LabError::CyclicFlow);
    }
    let mut residual = e.clone();
    let mut supply = e.imbalance().values;
    let total: f64 = supply.iter().filter(|v| **v > 0.0).sum();
    // Below this bottleneck further paths are floating-point debris.
    let negligible = 1e-15 * total.max(f64::MIN_POSITIVE);
    // Roundoff-sized supply or demand is dropped but still counted as unrouted.
    let mut dropped = 0.0;
    let mut clamp = |v: &mut f64| {
        if v.abs() <= negligible {
            dropped += v.max(0.0);
            *v = 0.0;
        }
    };
    supply.iter_mut().for_each(&mut clamp);
    let mut paths = Vec::new();
    let n = g.len();
    let mut width = vec![0.0f64; n];
    let mut parent: Vec<Option<(Edge, usize)>> = vec![None; n];
    let mut done = vec![false; n];

    loop {
        width.fill(0.0);
        parent.fill(None);
        done.fill(false);
        let mut heap = BinaryHeap::new();
        for (cell, &s) in supply.iter().enumerate() {
            if s > 0.0 {
                width[cell] = s;
                heap.push(Widest(s, cell));
            }
        }
        let mut found = None;
        while let Some(Widest(w, cell)) = heap.pop() {
            if done[cell] || w < width[cell] {
                continue;
            }
            done[cell] = true;
            if supply[cell] < 0.0 && parent[cell].is_some() {
                found = Some((cell, w.min(-supply[cell])));
                break;
            }
            for (edge, next) in residual.outgoing(cell) {
                let cap = residual.flows[edge.axis][edge.owner].abs();
                let through = w.min(cap);
                if !done[next] && through > width[next] {
                    width[next] = through;
                    parent[next] = Some((edge, cell));
                    heap.push(Widest(through, next));
                }
            }
        }
        let Some((sink, mass)) = found else { break };
        if mass <= negligible {
            break;
        }
        let mut cells = vec![sink];
        let mut at = sink;
        while let Some((edge, prev)) = parent[at] {
            let v = &mut residual.flows[edge.axis][edge.owner];
            let left = v.abs() - mass;
            *v = if left <= negligible { 0.0 } else { left * v.signum() };
            cells.push(prev);
            at = prev;
        }
        cells.reverse();
        supply[at] -= mass;
        supply[sink] += mass;
        clamp(&mut supply[at]);
        clamp(&mut supply[sink]);
        paths.push(TrafficPath { mass, cells });
    }

    let unrouted_residual = supply.iter().filter(|v| **v > 0.0).sum::<f64>() + dropped;
    if unrouted_residual > UNROUTED_TOL {
        return Err(LabError::Unroutable(unrouted_residual));
    }
    Ok(TrafficPlanDiscrete { grid: g, paths, unrouted_residual })
}

/// Traffic intensity `i_Q` and traffic flow `w_Q` of a plan, rasterised onto
/// the edge-owning cells. Each traversed edge adds `mass · h` of length,
/// divided by the cell volume.
pub fn intensity_and_flow(plan: &TrafficPlanDiscrete) -> (ScalarField, VectorField) {
    let g = plan.grid;
    let area = g.face_area();
    let mut intensity = ScalarField::zeros(g);
    let mut flow = VectorField::zeros(g);
    for path in &plan.paths {
        for pair in path.cells.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (owner, sign) = if a < b { (a, 1.0) } else { (b, -1.0) };
            let axis = (0..g.dim()).find(|&k| g.upper_neighbor(owner, k) == Some(a.max(b))).expect("face-adjacent cells");
            intensity.values[owner] += path.mass / area;
            flow.components[axis][owner] += sign * path.mass / area;
        }
    }
    (intensity, flow)
}

/// `Σ_k |w_k|` per cell: length of lattice motion per unit volume.
pub fn lattice_magnitude(w: &VectorField) -> ScalarField {
    let values = (0..w.grid.len()).map(|i| w.components.iter().map(|c| c[i].abs()).sum()).collect();
    ScalarField { grid: w.grid, values }
}

/// Outcome of pushing a flow through the whole decomposition pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct TrafficAudit {
    pub path_count: usize,
    pub routed_mass: f64,
    pub unrouted_residual: f64,
    /// `Σ|edge flow|` removed by cycle cancellation.
    pub cycle_flow_removed: f64,
    /// `max_cells |i_Q − Σ_k |w_Q,k||`.
    pub intensity_mismatch: f64,
    /// `‖w_Q − w‖_{L²}`.
    pub flow_mismatch: f64,
    pub input_cost: f64,
    pub reconstructed_cost: f64,
    pub relative_cost_error: f64,
}

impl TrafficAudit {
    pub fn passes(&self) -> bool {
        self.unrouted_residual <= UNROUTED_TOL && self.intensity_mismatch <= 1e-10 && self.relative_cost_error <= 1e-6
    }
}

/// Runs [`field_to_edgeflow`] → [`cancel_cycles`] → [`decompose_paths`] →
/// [`intensity_and_flow`] and compares the result with the input flow.
pub fn traffic_audit(
    w: &VectorField,
    pair: &DensityPair,
    sigma: &crate::measures::SigmaField,
    lambda: f64,
) -> Result<(TrafficPlanDiscrete, TrafficAudit)> {
    let edges = field_to_edgeflow(w, pair)?;
    let acyclic = cancel_cycles(&edges);
    let plan = decompose_paths(&acyclic, pair)?;
    let (intensity, flow) = intensity_and_flow(&plan);
    let magnitude = lattice_magnitude(&flow);
    let intensity_mismatch =
        intensity.values.iter().zip(&magnitude.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let flow_mismatch = flow.axpy(-1.0, w).l2_norm();
    let input_cost = congestion_cost(w, sigma, lambda)?;
    let reconstructed_cost = congestion_cost(&flow, sigma, lambda)?;
    let relative_cost_error = (reconstructed_cost - input_cost).abs() / input_cost.abs().max(f64::MIN_POSITIVE);
    let audit = TrafficAudit {
        path_count: plan.paths.len(),
        routed_mass: plan.routed_mass(),
        unrouted_residual: plan.unrouted_residual,
        cycle_flow_removed: edges.total_abs() - acyclic.total_abs(),
        intensity_mismatch,
        flow_mismatch,
        input_cost,
        reconstructed_cost,
        relative_cost_error: if input_cost == reconstructed_cost { 0.0 } else { relative_cost_error },
    };
    Ok((plan, audit))
}
