//! Standard SVGD: the kernelised Stein direction
//! `phi(x) = (1/n) sum_i [k(x_i, x) grad log p(x_i) + grad_{x_i} k(x_i, x)]`
//! and the transport step `x <- x + step * phi(x)`.

use crate::error::{invalid, Error, Result};
use crate::kernel::{kernel_matrix, KernelConfig, KernelMatrix};
use crate::particles::ParticleSet;
use crate::target::{scores_at, Target};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub kernel: KernelConfig,
}

impl SamplerConfig {
    pub fn new(step_size: f64, iterations: usize, kernel: KernelConfig) -> Result<Self> {
        let cfg = Self {
            step_size,
            iterations,
            kernel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return invalid(format!("step size must be non-negative, got {}", self.step_size));
        }
        if self.iterations == 0 {
            return invalid("iterations must be at least 1");
        }
        Ok(())
    }
}

/// Per-particle velocities, same shape as the particle set they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirection {
    pub velocities: ParticleSet,
}

/// Returned when a run stops early: the last finite state and what went wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub iteration: usize,
    pub last: ParticleSet,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run stopped at iteration {}: {}", self.iteration, self.error)
    }
}

impl std::error::Error for RunFailure {}

/// Which terms enter [`stein_direction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectionTerms {
    /// Skip pairs outside the truncated neighbourhood.
    pub masked: bool,
    /// Include the kernel-gradient (repulsive) term.
    pub repulsion: bool,
}

impl DirectionTerms {
    pub const FULL: Self = Self {
        masked: false,
        repulsion: true,
    };
}

/// Weighted Stein direction
/// `v_j = sum_i w_i [k(x_i, x_j) s_i + grad_{x_i} k(x_i, x_j)]`
/// with precomputed scores `s_i`. Both engines and the GAN feature-layer
/// replacement go through this one routine.
pub fn stein_direction(
    particles: &ParticleSet,
    scores: &ParticleSet,
    weights: &[f64],
    km: &KernelMatrix,
    cfg: &KernelConfig,
    terms: DirectionTerms,
) -> ParticleSet {
    let n = particles.len();
    let dim = particles.dim();
    debug_assert_eq!(scores.len(), n);
    debug_assert_eq!(weights.len(), n);
    debug_assert_eq!(km.len(), n);
    let c = -2.0 / cfg.gamma();
    let mut out = ParticleSet::zeros(n, dim);
    for j in 0..n {
        let xj = particles.row(j);
        let vj = out.row_mut(j);
        for i in 0..n {
            if terms.masked && !km.is_active(i, j) {
                continue;
            }
            let k = km.value(i, j);
            let w = weights[i];
            let xi = particles.row(i);
            let si = scores.row(i);
            for d in 0..dim {
                let mut term = k * si[d];
                if terms.repulsion {
                    term += c * (xi[d] - xj[d]) * k;
                }
                vj[d] += w * term;
            }
        }
    }
    out
}

pub(crate) fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn svgd_direction<T: Target + ?Sized>(
    particles: &ParticleSet,
    target: &T,
    cfg: &KernelConfig,
) -> Result<UpdateDirection> {
    let scores = scores_at(target, particles)?;
    let km = kernel_matrix(particles, cfg);
    let velocities = stein_direction(
        particles,
        &scores,
        &uniform_weights(particles.len()),
        &km,
        cfg,
        DirectionTerms::FULL,
    );
    Ok(UpdateDirection { velocities })
}

pub(crate) fn advance(particles: &ParticleSet, velocities: &ParticleSet, step: f64) -> ParticleSet {
    let mut out = particles.clone();
    for i in 0..out.len() {
        for (x, v) in out.row_mut(i).iter_mut().zip(velocities.row(i)) {
            *x += step * v;
        }
    }
    out
}

pub fn svgd_step<T: Target + ?Sized>(
    particles: &ParticleSet,
    target: &T,
    cfg: &SamplerConfig,
) -> Result<ParticleSet> {
    let dir = svgd_direction(particles, target, &cfg.kernel)?;
    let next = advance(particles, &dir.velocities, cfg.step_size);
    if let Some(i) = (0..next.len()).find(|&i| next.row(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::NumericalFailure {
            index: i,
            reason: "non-finite position after update".into(),
        });
    }
    Ok(next)
}

/// Runs `cfg.iterations` SVGD steps, calling `hook(iteration, particles)`
/// after each one (iterations are numbered from 1).
pub fn svgd_run<T, F>(
    init: &ParticleSet,
    target: &T,
    cfg: &SamplerConfig,
    mut hook: F,
) -> std::result::Result<ParticleSet, RunFailure>
where
    T: Target + ?Sized,
    F: FnMut(usize, &ParticleSet),
{
    let mut current = init.clone();
    if let Err(error) = cfg.validate() {
        return Err(RunFailure {
            iteration: 0,
            last: current,
            error,
        });
    }
    for it in 1..=cfg.iterations {
        match svgd_step(&current, target, cfg) {
            Ok(next) => current = next,
            Err(error) => {
                return Err(RunFailure {
                    iteration: it,
                    last: current,
                    error,
                })
            }
        }
        hook(it, &current);
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::GaussianMixture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kcfg(g: f64) -> KernelConfig {
        KernelConfig::with_gamma(g).unwrap()
    }

    #[test]
    fn single_particle_velocity_is_score() {
        let t = GaussianMixture::bimodal();
        let p = ParticleSet::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let v = svgd_direction(&p, &t, &kcfg(0.1)).unwrap();
        assert_eq!(v.velocities.row(0), t.score(&[0.3, -0.7]).unwrap().as_slice());
    }

    #[test]
    fn coincident_particles_velocity_is_score() {
        let t = GaussianMixture::bimodal();
        let p = ParticleSet::from_rows(&[vec![0.3, -0.7], vec![0.3, -0.7]]).unwrap();
        let v = svgd_direction(&p, &t, &kcfg(0.1)).unwrap();
        let s = t.score(&[0.3, -0.7]).unwrap();
        for j in 0..2 {
            for d in 0..2 {
                assert!((v.velocities.row(j)[d] - s[d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_step_is_identity() {
        let t = GaussianMixture::bimodal();
        let p = ParticleSet::from_rows(&[vec![0.3, -0.7], vec![1.0, 2.0]]).unwrap();
        let cfg = SamplerConfig::new(0.0, 1, kcfg(0.5)).unwrap();
        assert_eq!(svgd_step(&p, &t, &cfg).unwrap(), p);
    }

    #[test]
    fn single_particle_is_gradient_ascent() {
        let t = GaussianMixture::new(vec![1.0], vec![vec![0.5, -1.0]], vec![0.8]).unwrap();
        let cfg = SamplerConfig::new(0.05, 50, kcfg(0.3)).unwrap();
        let mut x = vec![2.0, 2.0];
        let mut trajectory = Vec::new();
        svgd_run(&ParticleSet::from_rows(&[x.clone()]).unwrap(), &t, &cfg, |_, p| {
            trajectory.push(p.row(0).to_vec())
        })
        .unwrap();
        for step in trajectory {
            for d in 0..2 {
                x[d] += 0.05 * (t.means()[0][d] - x[d]) / 0.8;
            }
            for d in 0..2 {
                assert!((step[d] - x[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reflection_symmetry_is_preserved() {
        let t = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0, 0.0], vec![1.0, 0.0]], vec![0.5, 0.5]).unwrap();
        let p = ParticleSet::from_rows(&[vec![-0.3, 0.4], vec![0.3, 0.4]]).unwrap();
        let cfg = SamplerConfig::new(0.1, 20, kcfg(0.2)).unwrap();
        svgd_run(&p, &t, &cfg, |_, q| {
            assert_eq!(q.row(0)[0], -q.row(1)[0]);
            assert_eq!(q.row(0)[1], q.row(1)[1]);
        })
        .unwrap();
    }

    #[test]
    fn permutation_equivariance() {
        let t = GaussianMixture::bimodal();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let p = ParticleSet::from_rows(&rows).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let v = svgd_direction(&p, &t, &kcfg(0.4)).unwrap().velocities;
        let vp = svgd_direction(&p.permuted(&perm), &t, &kcfg(0.4)).unwrap().velocities;
        let expected = v.permuted(&perm);
        for i in 0..7 {
            for d in 0..2 {
                assert!((vp.row(i)[d] - expected.row(i)[d]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn run_rejects_zero_iterations_and_is_deterministic() {
        let t = GaussianMixture::bimodal();
        let p = ParticleSet::from_rows(&[vec![0.1, 0.2], vec![-0.4, 0.0], vec![0.9, 0.9]]).unwrap();
        let bad = SamplerConfig {
            step_size: 0.1,
            iterations: 0,
            kernel: kcfg(0.1),
        };
        assert!(svgd_run(&p, &t, &bad, |_, _| {}).is_err());
        let cfg = SamplerConfig::new(0.1, 30, kcfg(0.1)).unwrap();
        let a = svgd_run(&p, &t, &cfg, |_, _| {}).unwrap();
        let b = svgd_run(&p, &t, &cfg, |_, _| {}).unwrap();
        assert_eq!(a, b);
        let one = SamplerConfig::new(0.1, 1, kcfg(0.1)).unwrap();
        assert_eq!(svgd_run(&p, &t, &one, |_, _| {}).unwrap(), svgd_step(&p, &t, &one).unwrap());
    }

    #[test]
    fn divergence_returns_last_finite_state() {
        // A huge step on a very narrow target overflows within a few iterations.
        let t = GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![1e-300]).unwrap();
        let p = ParticleSet::from_rows(&[vec![1.0]]).unwrap();
        let cfg = SamplerConfig::new(1.0, 10, kcfg(1.0)).unwrap();
        let err = svgd_run(&p, &t, &cfg, |_, _| {}).unwrap_err();
        assert!(err.last.is_finite());
        assert!(matches!(err.error, Error::NumericalFailure { index: 0, .. }));
    }
}
