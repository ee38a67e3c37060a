//! Density pairs and the interpolation density σ.

mod density;
mod sigma;

pub use density::{Density, DensityDescriptor, DensityPair, Marginal};
pub use sigma::{
    boundary_distance, comparability_ratio, compute_sigma, sigma_montecarlo, sigma_quadrature, sigma_sup_bound,
    split_constant, ComparabilityRatio, SigmaField, SigmaMethod, MIN_MC_SAMPLES, MIN_T_NODES,
};
