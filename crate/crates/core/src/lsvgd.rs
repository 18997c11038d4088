//! Langevin SVGD.
//!
//! Each iteration runs the pipeline
//!
//! 1. kernel matrix with the truncated active mask;
//! 2. importance weights `w_i ∝ q_eps(x_i)`, where `q_eps` is the Gaussian
//!    mixture centred at the particles with the previous iteration's noise
//!    covariances;
//! 3. drift `b(x_j) = sum_i w_i k(x_i, x_j)` (so `B = b I`) and its
//!    divergence `Gamma(x_j) = -sum_i w_i grad_{x_i} k(x_i, x_j)`;
//! 4. diagonal empirical score covariance `V` over each active neighbourhood;
//! 5. noise covariance `Sigma = step (2 B - step V)`, clamped at zero;
//! 6. independent noise `eps_j ~ N(0, diag Sigma_j)`;
//! 7. `x_j <- x_j + step sum_i w_i [k(x_i,x_j) s_i + grad_{x_i} k(x_i,x_j)] + eps_j`.
//!
//! Weights at iteration `t` use the covariances produced at `t - 1`; the first
//! iteration uses the isotropic bootstrap `sigma0^2 I`. The curl term of the
//! general SGMCMC recipe is zero and never built.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dims, invalid, Error, Result};
use crate::kernel::{kernel_matrix, KernelConfig, KernelMatrix};
use crate::particles::ParticleSet;
use crate::rng::{stream, STREAM_NOISE};
use crate::svgd::{stein_direction, uniform_weights, DirectionTerms, RunFailure, SamplerConfig};
use crate::target::{log_sum_exp, scores_at, GaussianMixture, Target};

/// Normalised importance weights over the particles.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    weights: Vec<f64>,
}

impl ImportanceWeights {
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: uniform_weights(n),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Per-iteration noise machinery. `sigmas` holds the diagonal of `Sigma(x_j)`
/// and is what the next iteration's importance weights are built from.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseState {
    pub sigmas: ParticleSet,
    pub drift: Vec<f64>,
    pub gamma_correction: ParticleSet,
    pub v_hat_diag: ParticleSet,
    pub neighbor_counts: Vec<usize>,
    /// Weights that were used to produce this state.
    pub weights: ImportanceWeights,
    /// Number of covariance entries clamped to zero.
    pub clamp_count: usize,
}

impl NoiseState {
    /// Isotropic `sigma0^2 I` state for the first iteration.
    pub fn bootstrap(n: usize, dim: usize, sigma0: f64) -> Self {
        let mut sigmas = ParticleSet::zeros(n, dim);
        let var = sigma0 * sigma0;
        for i in 0..n {
            sigmas.row_mut(i).iter_mut().for_each(|s| *s = var);
        }
        Self {
            sigmas,
            drift: vec![0.0; n],
            gamma_correction: ParticleSet::zeros(n, dim),
            v_hat_diag: ParticleSet::zeros(n, dim),
            neighbor_counts: vec![0; n],
            weights: ImportanceWeights::uniform(n),
            clamp_count: 0,
        }
    }

    pub fn mean_drift(&self) -> f64 {
        self.drift.iter().sum::<f64>() / self.drift.len() as f64
    }

    pub fn mean_sigma(&self) -> f64 {
        let flat = self.sigmas.as_flat();
        flat.iter().sum::<f64>() / flat.len() as f64
    }
}

/// How the kernel sum is weighted. `Uniform` reproduces standard SVGD's `1/n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Importance,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsvgdConfig {
    pub base: SamplerConfig,
    /// Bootstrap noise scale; the first iteration's weights use `sigma0^2 I`.
    pub init_sigma0: f64,
    /// Fewer active neighbours than this leaves `V = 0` for the particle.
    pub v_hat_min_neighbors: usize,
    /// Lower bound on mixture component variances inside `q_eps`. Entries
    /// clamped to zero are first replaced by the mean of the positive entries,
    /// so a clamped particle does not become a point mass.
    pub mixture_variance_floor: f64,
    pub weighting: Weighting,
    /// Inject the Langevin noise.
    pub noise: bool,
    /// Include the kernel-gradient term of the update.
    pub repulsion: bool,
}

impl LsvgdConfig {
    /// Defaults: `sigma0^2 = 2 * step`, two neighbours for the covariance estimate.
    pub fn new(base: SamplerConfig) -> Result<Self> {
        let cfg = Self {
            base,
            init_sigma0: (2.0 * base.step_size).sqrt(),
            v_hat_min_neighbors: 2,
            mixture_variance_floor: DEFAULT_MIXTURE_VARIANCE_FLOOR,
            weighting: Weighting::Importance,
            noise: true,
            repulsion: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(self.init_sigma0 > 0.0 && self.init_sigma0.is_finite()) {
            return invalid(format!("init_sigma0 must be positive, got {}", self.init_sigma0));
        }
        if self.v_hat_min_neighbors < 2 {
            return invalid("v_hat_min_neighbors must be at least 2");
        }
        if !(self.mixture_variance_floor > 0.0) {
            return invalid("mixture_variance_floor must be positive");
        }
        Ok(())
    }
}

pub const DEFAULT_MIXTURE_VARIANCE_FLOOR: f64 = 1e-12;

/// `w_i = q_eps(x_i) / sum_j q_eps(x_j)` with
/// `q_eps(x) = (1/n) sum_j N(x | x_j, diag(Sigma_j))`, in the log domain.
pub fn importance_weights(
    particles: &ParticleSet,
    prev: &NoiseState,
    variance_floor: f64,
) -> Result<ImportanceWeights> {
    let n = particles.len();
    let dim = particles.dim();
    if prev.sigmas.len() != n {
        return invalid(format!(
            "noise state covers {} particles, expected {n}",
            prev.sigmas.len()
        ));
    }
    check_dims(dim, prev.sigmas.dim(), "noise state")?;

    // Clamped (zero) entries borrow the mean of the positive ones.
    let positive: Vec<f64> = prev.sigmas.as_flat().iter().copied().filter(|s| *s > 0.0).collect();
    let fill = if positive.is_empty() {
        variance_floor
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    };
    let var = |s: f64| if s > 0.0 { s } else { fill }.max(variance_floor);

    // Per-component normalising constants.
    let log_norm: Vec<f64> = (0..n)
        .map(|j| {
            -0.5 * prev
                .sigmas
                .row(j)
                .iter()
                .map(|&s| (2.0 * PI * var(s)).ln())
                .sum::<f64>()
        })
        .collect();

    let mut terms = vec![0.0; n];
    let log_q: Vec<f64> = (0..n)
        .map(|i| {
            let xi = particles.row(i);
            for j in 0..n {
                let xj = particles.row(j);
                let quad: f64 = xi
                    .iter()
                    .zip(xj)
                    .zip(prev.sigmas.row(j))
                    .map(|((a, b), &s)| (a - b) * (a - b) / var(s))
                    .sum();
                terms[j] = log_norm[j] - 0.5 * quad;
            }
            log_sum_exp(&terms) - (n as f64).ln()
        })
        .collect();

    let total = log_sum_exp(&log_q);
    if !total.is_finite() {
        return Err(Error::Degenerate(
            "importance weights cannot be normalised".into(),
        ));
    }
    let weights = log_q.iter().map(|l| (l - total).exp()).collect();
    Ok(ImportanceWeights { weights })
}

/// Drift scalars `b(x_j)` and corrections `Gamma(x_j)`, both restricted to the
/// active neighbourhood.
pub fn drift_and_correction(
    particles: &ParticleSet,
    weights: &ImportanceWeights,
    km: &KernelMatrix,
    cfg: &KernelConfig,
) -> (Vec<f64>, ParticleSet) {
    let n = particles.len();
    let dim = particles.dim();
    let w = weights.as_slice();
    let c = -2.0 / cfg.gamma();
    let mut drift = vec![0.0; n];
    let mut gamma = ParticleSet::zeros(n, dim);
    for j in 0..n {
        let xj = particles.row(j);
        let gj = gamma.row_mut(j);
        for i in 0..n {
            if !km.is_active(i, j) {
                continue;
            }
            let k = km.value(i, j);
            drift[j] += w[i] * k;
            let xi = particles.row(i);
            for d in 0..dim {
                // Gamma = -sum w_i grad_{x_i} k(x_i, x_j)
                gj[d] -= w[i] * c * (xi[d] - xj[d]) * k;
            }
        }
    }
    (drift, gamma)
}

/// Diagonal of the unbiased sample covariance of the scores over each
/// particle's active neighbourhood; zero when fewer than `min_neighbors`
/// neighbours are active. Returns the diagonals and the neighbour counts.
pub fn score_covariance_diag(
    scores: &ParticleSet,
    km: &KernelMatrix,
    min_neighbors: usize,
) -> (ParticleSet, Vec<usize>) {
    let n = scores.len();
    let dim = scores.dim();
    let mut out = ParticleSet::zeros(n, dim);
    let mut counts = vec![0; n];
    let mut mean = vec![0.0; dim];
    for j in 0..n {
        let neighbors: Vec<usize> = (0..n).filter(|&i| km.is_active(i, j)).collect();
        counts[j] = neighbors.len();
        if neighbors.len() < min_neighbors.max(2) {
            continue;
        }
        let m = neighbors.len() as f64;
        mean.iter_mut().for_each(|v| *v = 0.0);
        for &i in &neighbors {
            for (a, s) in mean.iter_mut().zip(scores.row(i)) {
                *a += s;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let vj = out.row_mut(j);
        for &i in &neighbors {
            for ((v, s), mu) in vj.iter_mut().zip(scores.row(i)).zip(&mean) {
                *v += (s - mu) * (s - mu);
            }
        }
        vj.iter_mut().for_each(|v| *v /= m - 1.0);
    }
    (out, counts)
}

/// Empirical score covariance diagonals, evaluating the target's score at every particle.
pub fn empirical_gradient_covariance<T: Target + ?Sized>(
    particles: &ParticleSet,
    target: &T,
    km: &KernelMatrix,
    min_neighbors: usize,
) -> Result<ParticleSet> {
    let scores = scores_at(target, particles)?;
    Ok(score_covariance_diag(&scores, km, min_neighbors).0)
}

/// `Sigma_j[d] = max(0, step (2 b_j - step V_j[d]))`, with the number of
/// clamped entries.
pub fn noise_covariance(drift: &[f64], v_hat: &ParticleSet, step: f64) -> (ParticleSet, usize) {
    let mut sigmas = ParticleSet::zeros(v_hat.len(), v_hat.dim());
    let mut clamped = 0;
    for (j, b) in drift.iter().enumerate() {
        for (s, v) in sigmas.row_mut(j).iter_mut().zip(v_hat.row(j)) {
            let raw = step * (2.0 * b - step * v);
            if raw < 0.0 {
                clamped += 1;
                *s = 0.0;
            } else {
                *s = raw;
            }
        }
    }
    (sigmas, clamped)
}

/// Result of one LSVGD iteration in displacement form: `x' = x + displacement`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsvgdUpdate {
    /// `step * weighted Stein direction + eps`.
    pub displacement: ParticleSet,
    pub state: NoiseState,
}

/// Draws the standard-normal variates for one iteration in particle-index order.
pub fn draw_standard_normals<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> ParticleSet {
    let mut z = ParticleSet::zeros(n, dim);
    for i in 0..n {
        for v in z.row_mut(i) {
            *v = rng.sample(StandardNormal);
        }
    }
    z
}

/// Steps 1-7 given precomputed scores and standard-normal draws `z`
/// (noise is `sqrt(Sigma) * z`).
pub fn lsvgd_update_with_draws(
    particles: &ParticleSet,
    scores: &ParticleSet,
    cfg: &LsvgdConfig,
    prev: &NoiseState,
    z: &ParticleSet,
) -> Result<LsvgdUpdate> {
    let n = particles.len();
    let kcfg = &cfg.base.kernel;
    let step = cfg.base.step_size;
    let km = kernel_matrix(particles, kcfg);
    let weights = match cfg.weighting {
        Weighting::Importance => importance_weights(particles, prev, cfg.mixture_variance_floor)?,
        Weighting::Uniform => ImportanceWeights::uniform(n),
    };
    let (drift, gamma_correction) = drift_and_correction(particles, &weights, &km, kcfg);
    let (v_hat_diag, neighbor_counts) = score_covariance_diag(scores, &km, cfg.v_hat_min_neighbors);
    let (sigmas, clamp_count) = noise_covariance(&drift, &v_hat_diag, step);

    let direction = stein_direction(
        particles,
        scores,
        weights.as_slice(),
        &km,
        kcfg,
        DirectionTerms {
            masked: true,
            repulsion: cfg.repulsion,
        },
    );
    let mut displacement = direction;
    for j in 0..n {
        let sj = sigmas.row(j);
        let zj = z.row(j);
        for (d, v) in displacement.row_mut(j).iter_mut().enumerate() {
            *v *= step;
            if cfg.noise && sj[d] > 0.0 {
                *v += sj[d].sqrt() * zj[d];
            }
        }
    }
    if let Some(i) = (0..n).find(|&i| displacement.row(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::NumericalFailure {
            index: i,
            reason: "non-finite displacement".into(),
        });
    }
    Ok(LsvgdUpdate {
        displacement,
        state: NoiseState {
            sigmas,
            drift,
            gamma_correction,
            v_hat_diag,
            neighbor_counts,
            weights,
            clamp_count,
        },
    })
}

/// Steps 1-7 given precomputed scores; draws noise from `rng`.
pub fn lsvgd_update<R: Rng + ?Sized>(
    particles: &ParticleSet,
    scores: &ParticleSet,
    cfg: &LsvgdConfig,
    prev: &NoiseState,
    rng: &mut R,
) -> Result<LsvgdUpdate> {
    let z = if cfg.noise {
        draw_standard_normals(particles.len(), particles.dim(), rng)
    } else {
        ParticleSet::zeros(particles.len(), particles.dim())
    };
    lsvgd_update_with_draws(particles, scores, cfg, prev, &z)
}

pub fn lsvgd_step<T: Target + ?Sized, R: Rng + ?Sized>(
    particles: &ParticleSet,
    target: &T,
    cfg: &LsvgdConfig,
    prev: &NoiseState,
    rng: &mut R,
) -> Result<(ParticleSet, NoiseState)> {
    let scores = scores_at(target, particles)?;
    let update = lsvgd_update(particles, &scores, cfg, prev, rng)?;
    let mut next = particles.clone();
    for i in 0..next.len() {
        for (x, v) in next.row_mut(i).iter_mut().zip(update.displacement.row(i)) {
            *x += v;
        }
    }
    Ok((next, update.state))
}

/// Runs `cfg.base.iterations` LSVGD steps with noise drawn from stream
/// [`STREAM_NOISE`] of `seed`. `hook(iteration, particles, state)` is called
/// after each step, iterations numbered from 1.
pub fn lsvgd_run<T, F>(
    init: &ParticleSet,
    target: &T,
    cfg: &LsvgdConfig,
    seed: u64,
    mut hook: F,
) -> std::result::Result<ParticleSet, RunFailure>
where
    T: Target + ?Sized,
    F: FnMut(usize, &ParticleSet, &NoiseState),
{
    let mut current = init.clone();
    if let Err(error) = cfg.validate() {
        return Err(RunFailure {
            iteration: 0,
            last: current,
            error,
        });
    }
    let mut rng = stream(seed, STREAM_NOISE);
    let mut state = NoiseState::bootstrap(init.len(), init.dim(), cfg.init_sigma0);
    for it in 1..=cfg.base.iterations {
        match lsvgd_step(&current, target, cfg, &state, &mut rng) {
            Ok((next, next_state)) => {
                current = next;
                state = next_state;
            }
            Err(error) => {
                return Err(RunFailure {
                    iteration: it,
                    last: current,
                    error,
                })
            }
        }
        hook(it, &current, &state);
    }
    Ok(current)
}

/// Plug-in magnitude of the implicit regulariser for a Gaussian-mixture target:
/// `d * noise_variance * c_phi * sum_k sigma_k^{-2} * (fraction of particles
/// hard-assigned to component k)`.
pub fn regularizer_estimate(
    particles: &ParticleSet,
    target: &GaussianMixture,
    noise_variance: f64,
    c_phi: f64,
    dim: usize,
) -> Result<f64> {
    check_dims(target.dim(), particles.dim(), "particles vs target")?;
    let mut counts = vec![0usize; target.num_components()];
    for x in particles.rows() {
        counts[target.hard_assignment(x)?] += 1;
    }
    let n = particles.len() as f64;
    let sum: f64 = counts
        .iter()
        .zip(target.variances())
        .map(|(&c, var)| c as f64 / n / var)
        .sum();
    Ok(dim as f64 * noise_variance * c_phi * sum)
}

/// Monte-Carlo value of `R = -E_eps E_x eps^T (-c_phi I) H(x) eps` with
/// `eps ~ N(0, noise_variance I)` and the exact Hessian of `log p`. Negative
/// for log-concave neighbourhoods; compare its magnitude with
/// [`regularizer_estimate`].
pub fn regularizer_monte_carlo<R: Rng + ?Sized>(
    particles: &ParticleSet,
    target: &GaussianMixture,
    noise_variance: f64,
    c_phi: f64,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    check_dims(target.dim(), particles.dim(), "particles vs target")?;
    if draws == 0 {
        return invalid("at least one noise draw is required");
    }
    let dim = particles.dim();
    let hessians = particles
        .rows()
        .map(|x| target.hessian(x))
        .collect::<Result<Vec<_>>>()?;
    let sd = noise_variance.sqrt();
    let mut eps = vec![0.0; dim];
    let mut acc = 0.0;
    for _ in 0..draws {
        for e in eps.iter_mut() {
            *e = sd * rng.sample::<f64, _>(StandardNormal);
        }
        let mut quad = 0.0;
        for h in &hessians {
            for a in 0..dim {
                for b in 0..dim {
                    quad += eps[a] * h[a * dim + b] * eps[b];
                }
            }
        }
        acc += quad / hessians.len() as f64;
    }
    // -eps^T (-c_phi I) H eps = c_phi eps^T H eps
    Ok(c_phi * acc / draws as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svgd::{svgd_run, svgd_step};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lcfg(step: f64, iters: usize, gamma: f64) -> LsvgdConfig {
        LsvgdConfig::new(SamplerConfig::new(step, iters, KernelConfig::with_gamma(gamma).unwrap()).unwrap()).unwrap()
    }

    fn random_set(n: usize, dim: usize, seed: u64, spread: f64) -> ParticleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-spread..spread)).collect();
        ParticleSet::from_flat(n, dim, data).unwrap()
    }

    #[test]
    fn weights_coincident_and_single() {
        let p = ParticleSet::from_rows(&vec![vec![1.0, 1.0]; 4]).unwrap();
        let w = importance_weights(&p, &NoiseState::bootstrap(4, 2, 0.3), 1e-12).unwrap();
        assert!(w.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let one = ParticleSet::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = importance_weights(&one, &NoiseState::bootstrap(1, 2, 0.3), 1e-12).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
    }

    #[test]
    fn weights_match_direct_mixture_sum() {
        let p = random_set(4, 2, 11, 1.0);
        let mut state = NoiseState::bootstrap(4, 2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for j in 0..4 {
            for s in state.sigmas.row_mut(j) {
                *s = rng.random_range(0.05..1.0);
            }
        }
        let w = importance_weights(&p, &state, 1e-12).unwrap();
        let q: Vec<f64> = (0..4)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..4 {
                    let mut dens = 1.0;
                    for d in 0..2 {
                        let s = state.sigmas.row(j)[d];
                        let diff = p.row(i)[d] - p.row(j)[d];
                        dens *= (-(diff * diff) / (2.0 * s)).exp() / (2.0 * PI * s).sqrt();
                    }
                    acc += dens / 4.0;
                }
                acc
            })
            .collect();
        let total: f64 = q.iter().sum();
        for i in 0..4 {
            let expected = q[i] / total;
            assert!((w.as_slice()[i] - expected).abs() / expected < 1e-10);
        }
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamped_entries_use_mean_of_positive_entries() {
        let p = random_set(3, 2, 5, 1.0);
        let mut clamped = NoiseState::bootstrap(3, 2, 1.0);
        clamped.sigmas = ParticleSet::from_rows(&[vec![0.2, 0.0], vec![0.4, 0.6], vec![0.0, 0.0]]).unwrap();
        // Positive entries average to 0.4.
        let mut filled = clamped.clone();
        filled.sigmas = ParticleSet::from_rows(&[vec![0.2, 0.4], vec![0.4, 0.6], vec![0.4, 0.4]]).unwrap();
        let a = importance_weights(&p, &clamped, 1e-12).unwrap();
        let b = importance_weights(&p, &filled, 1e-12).unwrap();
        assert_eq!(a, b);

        let mut all_zero = clamped.clone();
        all_zero.sigmas = ParticleSet::zeros(3, 2);
        let floor = importance_weights(&p, &all_zero, 0.3).unwrap();
        let iso = importance_weights(&p, &NoiseState::bootstrap(3, 2, 0.3f64.sqrt()), 1e-12).unwrap();
        for (x, y) in floor.as_slice().iter().zip(iso.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_reject_mismatched_state() {
        let p = random_set(3, 2, 1, 1.0);
        assert!(importance_weights(&p, &NoiseState::bootstrap(2, 2, 0.3), 1e-12).is_err());
    }

    #[test]
    fn drift_reductions() {
        let kcfg = KernelConfig::with_gamma(0.5).unwrap();
        let one = ParticleSet::from_rows(&[vec![0.2, 0.4]]).unwrap();
        let (b, g) = drift_and_correction(&one, &ImportanceWeights::uniform(1), &kernel_matrix(&one, &kcfg), &kcfg);
        assert_eq!(b, vec![1.0]);
        assert_eq!(g.row(0), &[0.0, 0.0]);

        let two = ParticleSet::from_rows(&[vec![0.2, 0.4], vec![0.2, 0.4]]).unwrap();
        let (b, g) = drift_and_correction(&two, &ImportanceWeights::uniform(2), &kernel_matrix(&two, &kcfg), &kcfg);
        assert_eq!(b, vec![1.0, 1.0]);
        assert!(g.as_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn covariance_constant_scores_and_fallback() {
        let kcfg = KernelConfig::with_gamma(10.0).unwrap();
        let p = random_set(5, 2, 3, 0.5);
        let km = kernel_matrix(&p, &kcfg);
        let mut scores = ParticleSet::zeros(5, 2);
        for i in 0..5 {
            scores.row_mut(i).copy_from_slice(&[0.7, -1.3]);
        }
        let (v, counts) = score_covariance_diag(&scores, &km, 2);
        assert!(v.as_flat().iter().all(|x| x.abs() < 1e-30));
        assert!(counts.iter().all(|&c| c == 5));

        let far = ParticleSet::from_rows(&[vec![0.0, 0.0], vec![50.0, 0.0]]).unwrap();
        let km = kernel_matrix(&far, &kcfg);
        let scores = ParticleSet::from_rows(&[vec![1.0, 2.0], vec![-3.0, 4.0]]).unwrap();
        let (v, counts) = score_covariance_diag(&scores, &km, 2);
        assert_eq!(counts, vec![1, 1]);
        assert!(v.as_flat().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn covariance_matches_direct_variance() {
        let t = GaussianMixture::bimodal();
        let p = random_set(5, 2, 8, 0.3);
        let kcfg = KernelConfig::with_gamma(0.2).unwrap();
        let km = kernel_matrix(&p, &kcfg);
        let v = empirical_gradient_covariance(&p, &t, &km, 2).unwrap();
        for j in 0..5 {
            let list: Vec<Vec<f64>> = (0..5)
                .filter(|&i| km.value(i, j) > 0.001)
                .map(|i| t.score(p.row(i)).unwrap())
                .collect();
            for d in 0..2 {
                let xs: Vec<f64> = list.iter().map(|s| s[d]).collect();
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
                assert!((v.row(j)[d] - var).abs() <= 1e-12 * (1.0 + var));
            }
        }
    }

    #[test]
    fn covariance_recipe_values() {
        let v = ParticleSet::zeros(1, 3);
        let (s, clamped) = noise_covariance(&[1.0], &v, 0.01);
        assert!(s.row(0).iter().all(|x| (x - 0.02).abs() < 1e-17));
        assert_eq!(clamped, 0);

        let v = ParticleSet::from_rows(&[vec![0.0, 300.0]]).unwrap();
        let (s, clamped) = noise_covariance(&[1.0], &v, 0.01);
        assert_eq!(s.row(0)[1], 0.0);
        assert!((s.row(0)[0] - 0.02).abs() < 1e-17);
        assert_eq!(clamped, 1);

        let (s, _) = noise_covariance(&[0.0], &ParticleSet::zeros(1, 2), 0.01);
        assert_eq!(s.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn single_particle_is_langevin() {
        let t = GaussianMixture::bimodal();
        let cfg = lcfg(0.01, 1, 0.1);
        let x = ParticleSet::from_rows(&[vec![0.4, -0.2]]).unwrap();
        let z = ParticleSet::from_rows(&[vec![0.3, -1.1]]).unwrap();
        let scores = scores_at(&t, &x).unwrap();
        let u = lsvgd_update_with_draws(&x, &scores, &cfg, &NoiseState::bootstrap(1, 2, cfg.init_sigma0), &z).unwrap();
        let s = t.score(&[0.4, -0.2]).unwrap();
        for d in 0..2 {
            let expected = 0.01 * s[d] + (2.0f64 * 0.01).sqrt() * z.row(0)[d];
            assert!((u.displacement.row(0)[d] - expected).abs() < 1e-15);
            assert!((u.state.sigmas.row(0)[d] - 0.02).abs() < 1e-17);
        }
        assert_eq!(u.state.drift, vec![1.0]);
    }

    #[test]
    fn step_is_deterministic_given_seed() {
        let t = GaussianMixture::bimodal();
        let cfg = lcfg(0.05, 1, 0.3);
        let p = random_set(8, 2, 4, 2.0);
        let s0 = NoiseState::bootstrap(8, 2, cfg.init_sigma0);
        let a = lsvgd_step(&p, &t, &cfg, &s0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = lsvgd_step(&p, &t, &cfg, &s0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let run = lsvgd_run(&p, &t, &cfg, 9, |_, _, _| {}).unwrap();
        let by_hand = lsvgd_step(&p, &t, &cfg, &s0, &mut stream(9, STREAM_NOISE)).unwrap().0;
        assert_eq!(run, by_hand);
    }

    #[test]
    fn noiseless_uniform_reduces_to_svgd() {
        let t = GaussianMixture::bimodal();
        let base = SamplerConfig::new(0.05, 40, KernelConfig::new(0.3, 0.0).unwrap()).unwrap();
        let mut cfg = LsvgdConfig::new(base).unwrap();
        cfg.weighting = Weighting::Uniform;
        cfg.noise = false;
        let p = random_set(12, 2, 21, 2.0);
        let one_l = lsvgd_step(&p, &t, &cfg, &NoiseState::bootstrap(12, 2, 1.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap().0;
        assert_eq!(one_l, svgd_step(&p, &t, &base).unwrap());
        let mut l_traj = Vec::new();
        let mut s_traj = Vec::new();
        lsvgd_run(&p, &t, &cfg, 5, |_, q, _| l_traj.push(q.clone())).unwrap();
        svgd_run(&p, &t, &base, |_, q| s_traj.push(q.clone())).unwrap();
        assert_eq!(l_traj, s_traj);
    }

    #[test]
    fn gamma_matches_divergence_of_drift() {
        let kcfg = KernelConfig::with_gamma(0.7).unwrap();
        let p = random_set(6, 3, 17, 1.0);
        let km = kernel_matrix(&p, &kcfg);
        let w = importance_weights(&p, &NoiseState::bootstrap(6, 3, 0.4), 1e-12).unwrap();
        let (_, gamma) = drift_and_correction(&p, &w, &km, &kcfg);
        let b_at = |x: &[f64], j: usize| -> f64 {
            (0..6)
                .filter(|&i| km.is_active(i, j))
                .map(|i| w.as_slice()[i] * (-p.row(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 0.7).exp())
                .sum()
        };
        for j in 0..6 {
            let scale = gamma.row(j).iter().map(|v| v.abs()).fold(1e-8, f64::max);
            for d in 0..3 {
                let h = 1e-6;
                let mut xp = p.row(j).to_vec();
                let mut xm = xp.clone();
                xp[d] += h;
                xm[d] -= h;
                let fd = (b_at(&xp, j) - b_at(&xm, j)) / (2.0 * h);
                assert!((fd - gamma.row(j)[d]).abs() / scale < 1e-5);
            }
        }
    }

    #[test]
    fn permutation_equivariance_with_mapped_draws() {
        let t = GaussianMixture::bimodal();
        let cfg = lcfg(0.05, 1, 0.5);
        let p = random_set(6, 2, 30, 1.5);
        let z = random_set(6, 2, 31, 1.0);
        let mut prev = NoiseState::bootstrap(6, 2, 0.4);
        let extra = random_set(6, 2, 32, 0.2);
        for j in 0..6 {
            for (s, e) in prev.sigmas.row_mut(j).iter_mut().zip(extra.row(j)) {
                *s += e.abs();
            }
        }
        let perm = [5, 2, 0, 4, 1, 3];
        let a = lsvgd_update_with_draws(&p, &scores_at(&t, &p).unwrap(), &cfg, &prev, &z).unwrap();
        let mut prev_p = prev.clone();
        prev_p.sigmas = prev.sigmas.permuted(&perm);
        let pp = p.permuted(&perm);
        let b = lsvgd_update_with_draws(&pp, &scores_at(&t, &pp).unwrap(), &cfg, &prev_p, &z.permuted(&perm)).unwrap();
        let expected = a.displacement.permuted(&perm);
        for i in 0..6 {
            for d in 0..2 {
                assert!((b.displacement.row(i)[d] - expected.row(i)[d]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn regularizer_plug_in_values() {
        let t = GaussianMixture::new(vec![1.0], vec![vec![0.0, 0.0]], vec![0.5]).unwrap();
        let p = random_set(10, 2, 2, 0.5);
        let r = regularizer_estimate(&p, &t, 0.01, 1.0, 2).unwrap();
        assert!((r - 0.04).abs() < 1e-15);
        assert_eq!(regularizer_estimate(&p, &t, 0.01, 0.0, 2).unwrap(), 0.0);
    }

    #[test]
    fn regularizer_matches_monte_carlo_single_component() {
        let t = GaussianMixture::new(vec![1.0], vec![vec![0.0, 0.0]], vec![0.5]).unwrap();
        let p = random_set(20, 2, 2, 1.0);
        let plug = regularizer_estimate(&p, &t, 0.01, 1.0, 2).unwrap();
        let mc = regularizer_monte_carlo(&p, &t, 0.01, 1.0, 20_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(mc < 0.0);
        assert!((mc.abs() - plug).abs() / plug < 0.05);
    }
}
