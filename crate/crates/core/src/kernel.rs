//! Gaussian kernel `k(x, y) = exp(-|x - y|^2 / gamma)`, its gradient, and the
//! pairwise kernel matrix with the truncated active-neighbourhood mask.

use crate::error::{check_dims, invalid, Result};
use crate::particles::{sq_dist, ParticleSet};

/// Kernel values at or below this threshold are treated as inactive.
pub const DEFAULT_TRUNCATION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    gamma: f64,
    truncation_threshold: f64,
}

impl KernelConfig {
    pub fn new(gamma: f64, truncation_threshold: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return invalid(format!("kernel bandwidth must be positive, got {gamma}"));
        }
        if !(0.0..1.0).contains(&truncation_threshold) {
            return invalid(format!(
                "truncation threshold must lie in [0, 1), got {truncation_threshold}"
            ));
        }
        Ok(Self {
            gamma,
            truncation_threshold,
        })
    }

    pub fn with_gamma(gamma: f64) -> Result<Self> {
        Self::new(gamma, DEFAULT_TRUNCATION)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn truncation_threshold(&self) -> f64 {
        self.truncation_threshold
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        (-sq_dist(x, y) / self.gamma).exp()
    }

    /// Writes `grad_x k(x, y)` into `out` and returns `k(x, y)`.
    #[inline]
    pub(crate) fn grad_first_unchecked(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> f64 {
        let k = self.eval_unchecked(x, y);
        let c = -2.0 / self.gamma * k;
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = c * (a - b);
        }
        k
    }
}

pub fn kernel(x: &[f64], y: &[f64], cfg: &KernelConfig) -> Result<f64> {
    check_dims(x.len(), y.len(), "kernel arguments")?;
    Ok(cfg.eval_unchecked(x, y))
}

/// Gradient of the kernel with respect to its first argument,
/// `-(2 / gamma) (x - y) k(x, y)`.
pub fn kernel_grad_wrt_first(x: &[f64], y: &[f64], cfg: &KernelConfig) -> Result<Vec<f64>> {
    check_dims(x.len(), y.len(), "kernel gradient arguments")?;
    let mut out = vec![0.0; x.len()];
    cfg.grad_first_unchecked(x, y, &mut out);
    Ok(out)
}

/// Dense symmetric kernel matrix over a particle set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    n: usize,
    values: Vec<f64>,
    active: Vec<bool>,
}

impl KernelMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    #[inline]
    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.active[i * self.n + j]
    }

    pub fn active_count(&self, j: usize) -> usize {
        (0..self.n).filter(|&i| self.is_active(i, j)).count()
    }
}

pub fn kernel_matrix(particles: &ParticleSet, cfg: &KernelConfig) -> KernelMatrix {
    let n = particles.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let k = cfg.eval_unchecked(particles.row(i), particles.row(j));
            values[i * n + j] = k;
            values[j * n + i] = k;
        }
    }
    let tau = cfg.truncation_threshold;
    let active = values.iter().map(|&k| k > tau).collect();
    KernelMatrix { n, values, active }
}
