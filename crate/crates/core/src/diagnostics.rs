//! Measurements on particle sets: grid-based KL divergence to a known
//! density, total variance, and mode coverage for mixture targets.

use std::f64::consts::PI;

use crate::error::{check_dims, invalid, Result};
use crate::particles::ParticleSet;
use crate::target::{GaussianMixture, Target};

/// Grid KDE beyond this many bandwidths contributes nothing measurable.
const KDE_CUTOFF_BANDWIDTHS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct KlEstimatorConfig {
    /// `(low, high)` per dimension; exactly two dimensions.
    pub grid_bounds: [(f64, f64); 2],
    /// Cells per dimension.
    pub grid_resolution: usize,
    /// Standard deviation of the Gaussian smoothing kernel.
    pub kde_bandwidth: f64,
    pub density_floor: f64,
}

impl Default for KlEstimatorConfig {
    fn default() -> Self {
        Self {
            grid_bounds: [(-4.0, 4.0), (-4.0, 4.0)],
            grid_resolution: 200,
            kde_bandwidth: 0.3,
            density_floor: 1e-12,
        }
    }
}

impl KlEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_resolution < 16 {
            return invalid(format!("grid resolution {} is below 16", self.grid_resolution));
        }
        if !(self.kde_bandwidth > 0.0) {
            return invalid("kde bandwidth must be positive");
        }
        if !(self.density_floor > 0.0) {
            return invalid("density floor must be positive");
        }
        if self.grid_bounds.iter().any(|(lo, hi)| !(hi > lo)) {
            return invalid("grid bounds must be non-empty intervals");
        }
        Ok(())
    }

    fn cell_width(&self, axis: usize) -> f64 {
        let (lo, hi) = self.grid_bounds[axis];
        (hi - lo) / self.grid_resolution as f64
    }

    fn center(&self, axis: usize, idx: usize) -> f64 {
        self.grid_bounds[axis].0 + (idx as f64 + 0.5) * self.cell_width(axis)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeCoverage {
    pub covered: usize,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub kl_estimate: f64,
    pub total_variance: f64,
    pub mode_coverage: Option<ModeCoverage>,
}

/// `sum q log(max(q, floor) / max(p, floor)) dA` after renormalising both
/// grid densities to unit mass; clamped at zero.
pub fn grid_kl(q: &[f64], p: &[f64], cell_area: f64, floor: f64) -> Result<f64> {
    if q.len() != p.len() || q.is_empty() {
        return invalid("grid densities must be non-empty and of equal length");
    }
    let qm: f64 = q.iter().sum::<f64>() * cell_area;
    let pm: f64 = p.iter().sum::<f64>() * cell_area;
    if !(qm > 0.0 && pm > 0.0) {
        return invalid("grid densities carry no mass");
    }
    let mut kl = 0.0;
    for (qi, pi) in q.iter().zip(p) {
        let qn = qi / qm;
        if qn == 0.0 {
            continue;
        }
        let pn = pi / pm;
        kl += qn * (qn.max(floor) / pn.max(floor)).ln() * cell_area;
    }
    Ok(kl.max(0.0))
}

/// Grid values of the Gaussian KDE of `particles`, row-major with axis 0 outer.
pub fn kde_on_grid(particles: &ParticleSet, cfg: &KlEstimatorConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_dims(2, particles.dim(), "grid KDE")?;
    for (i, x) in particles.rows().enumerate() {
        for (axis, &(lo, hi)) in cfg.grid_bounds.iter().enumerate() {
            if !(x[axis] >= lo && x[axis] <= hi) {
                return invalid(format!(
                    "particle {i} at ({}, {}) lies outside the grid bounds",
                    x[0], x[1]
                ));
            }
        }
    }
    let res = cfg.grid_resolution;
    let h = cfg.kde_bandwidth;
    let norm = 1.0 / (2.0 * PI * h * h * particles.len() as f64);
    let mut grid = vec![0.0; res * res];
    let mut wx = Vec::new();
    let mut wy = Vec::new();
    for x in particles.rows() {
        let lo0 = axis_factors(cfg, 0, x[0], h, &mut wx);
        let lo1 = axis_factors(cfg, 1, x[1], h, &mut wy);
        for (a, fa) in wx.iter().enumerate() {
            let row = &mut grid[(lo0 + a) * res + lo1..(lo0 + a) * res + lo1 + wy.len()];
            for (cell, fb) in row.iter_mut().zip(&wy) {
                *cell += norm * fa * fb;
            }
        }
    }
    Ok(grid)
}

/// Unnormalised 1-D Gaussian factors for the cells within the cutoff of `x`;
/// returns the index of the first cell.
fn axis_factors(cfg: &KlEstimatorConfig, axis: usize, x: f64, h: f64, out: &mut Vec<f64>) -> usize {
    let res = cfg.grid_resolution;
    let (lo, _) = cfg.grid_bounds[axis];
    let w = cfg.cell_width(axis);
    let reach = KDE_CUTOFF_BANDWIDTHS * h;
    let first = (((x - reach - lo) / w).floor().max(0.0)) as usize;
    let last = ((((x + reach - lo) / w).ceil()) as usize).min(res - 1);
    out.clear();
    for idx in first..=last {
        let c = cfg.center(axis, idx);
        out.push((-(c - x) * (c - x) / (2.0 * h * h)).exp());
    }
    first
}

/// KL(q_hat || p) between a KDE of 2-D particles and the target, on a grid.
pub fn kl_particles_vs_target<T: Target + ?Sized>(
    particles: &ParticleSet,
    target: &T,
    cfg: &KlEstimatorConfig,
) -> Result<f64> {
    check_dims(2, target.dim(), "grid KL target")?;
    let q = kde_on_grid(particles, cfg)?;
    let res = cfg.grid_resolution;
    let mut p = vec![0.0; res * res];
    for a in 0..res {
        for b in 0..res {
            let c = [cfg.center(0, a), cfg.center(1, b)];
            p[a * res + b] = target.log_density(&c)?.exp();
        }
    }
    grid_kl(&q, &p, cfg.cell_width(0) * cfg.cell_width(1), cfg.density_floor)
}

/// Trace of the unbiased sample covariance.
pub fn particle_variance(particles: &ParticleSet) -> Result<f64> {
    let n = particles.len();
    if n < 2 {
        return invalid("particle variance needs at least two particles");
    }
    let mean = particles.mean();
    let mut ss = 0.0;
    for x in particles.rows() {
        for (a, m) in x.iter().zip(&mean) {
            ss += (a - m) * (a - m);
        }
    }
    Ok(ss / (n - 1) as f64)
}

/// Mode `k` is covered when at least `min_fraction` of the samples lie within
/// `radius_multiplier * sigma_k` of `mu_k`.
pub fn mode_coverage(
    samples: &ParticleSet,
    target: &GaussianMixture,
    radius_multiplier: f64,
    min_fraction: f64,
) -> Result<ModeCoverage> {
    check_dims(target.dim(), samples.dim(), "mode coverage")?;
    if !(min_fraction > 0.0 && min_fraction < 1.0) {
        return invalid(format!("min_fraction must lie in (0, 1), got {min_fraction}"));
    }
    let n = samples.len() as f64;
    let fractions: Vec<f64> = target
        .means()
        .iter()
        .zip(target.variances())
        .map(|(mu, var)| {
            let r2 = radius_multiplier * radius_multiplier * var;
            let inside = samples
                .rows()
                .filter(|x| x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2)
                .count();
            inside as f64 / n
        })
        .collect();
    let covered = fractions.iter().filter(|&&f| f >= min_fraction).count();
    Ok(ModeCoverage { covered, fractions })
}
