//! Particle-based variational inference: standard SVGD, Langevin SVGD with the
//! SGMCMC noise-covariance recipe, diagnostics for 2-D toy targets, and a small
//! GAN whose feature-layer gradients are replaced by particle updates.

pub mod diagnostics;
pub mod error;
pub mod gan;
pub mod kernel;
pub mod lsvgd;
pub mod particles;
pub mod rng;
pub mod svgd;
pub mod target;

pub use diagnostics::{
    grid_kl, kl_particles_vs_target, mode_coverage, particle_variance, DiagnosticsReport,
    KlEstimatorConfig, ModeCoverage,
};
pub use error::{Error, Result};
pub use kernel::{kernel, kernel_grad_wrt_first, kernel_matrix, KernelConfig, KernelMatrix};
pub use lsvgd::{
    importance_weights, lsvgd_run, lsvgd_step, ImportanceWeights, LsvgdConfig, NoiseState,
    Weighting,
};
pub use particles::ParticleSet;
pub use svgd::{svgd_direction, svgd_run, svgd_step, RunFailure, SamplerConfig, UpdateDirection};
pub use target::{GaussianMixture, Target};
