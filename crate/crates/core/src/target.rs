//! Target densities. The samplers only need a log-density and its gradient
//! (the score); the isotropic Gaussian mixture additionally exposes its
//! component structure for Hessian approximations and exact sampling.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dims, invalid, Error, Result};
use crate::particles::{sq_dist, ParticleSet};

/// A differentiable (unnormalised) log-density.
pub trait Target {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> Result<f64>;

    /// Writes `grad log p(x)` into `out`.
    fn score_into(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.score_into(x, &mut out)?;
        Ok(out)
    }
}

/// Scores at every particle, failing on the first non-finite value.
pub fn scores_at<T: Target + ?Sized>(target: &T, particles: &ParticleSet) -> Result<ParticleSet> {
    check_dims(target.dim(), particles.dim(), "particles vs target")?;
    let mut out = ParticleSet::zeros(particles.len(), particles.dim());
    for i in 0..particles.len() {
        target.score_into(particles.row(i), out.row_mut(i))?;
        if out.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                index: i,
                reason: "non-finite score".into(),
            });
        }
    }
    Ok(out)
}

/// `sum_k pi_k N(x | mu_k, sigma_k^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return invalid("mixture needs at least one component");
        }
        if means.len() != k || variances.len() != k {
            return invalid(format!(
                "component count mismatch: {} weights, {} means, {} variances",
                k,
                means.len(),
                variances.len()
            ));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return invalid("all component means must share a non-zero dimension");
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return invalid("mixture weights must be non-negative and finite");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("mixture weights sum to {total}, expected 1"));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return invalid("component variances must be positive");
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("component means must be finite");
        }
        Ok(Self {
            weights,
            means,
            variances,
            dim,
        })
    }

    /// Two-component 2-D target: equal weights, means (-1, 0) and (1, 0),
    /// variances 0.5 and 1.0.
    pub fn bimodal() -> Self {
        Self::new(
            vec![0.5, 0.5],
            vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            vec![0.5, 1.0],
        )
        .expect("static parameters are valid")
    }

    /// `k` equally weighted components evenly spaced on a circle.
    pub fn ring(k: usize, radius: f64, variance: f64) -> Result<Self> {
        if k == 0 {
            return invalid("ring needs at least one mode");
        }
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(vec![1.0 / k as f64; k], means, vec![variance; k])
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![1.0])
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// `log(pi_k N(x | mu_k, sigma_k^2 I))` for every component.
    fn log_components(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, mu), &var)| {
                w.ln() - 0.5 * d * (2.0 * PI * var).ln() - sq_dist(x, mu) / (2.0 * var)
            })
            .collect()
    }

    /// Posterior component responsibilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.dim, x.len(), "mixture responsibilities")?;
        let mut lc = self.log_components(x);
        let lse = log_sum_exp(&lc);
        lc.iter_mut().for_each(|v| *v = (*v - lse).exp());
        Ok(lc)
    }

    /// Component of maximum responsibility; ties go to the lowest index.
    pub fn hard_assignment(&self, x: &[f64]) -> Result<usize> {
        check_dims(self.dim, x.len(), "mixture assignment")?;
        let lc = self.log_components(x);
        let mut best = 0;
        for (k, v) in lc.iter().enumerate().skip(1) {
            if *v > lc[best] {
                best = k;
            }
        }
        Ok(best)
    }

    /// Hard-assignment Hessian of `log p`: `-(1 / sigma_k^2) I` for the
    /// dominant component `k`. Returned row-major, `dim x dim`.
    pub fn hessian_approx(&self, x: &[f64]) -> Result<Vec<f64>> {
        let k = self.hard_assignment(x)?;
        let mut h = vec![0.0; self.dim * self.dim];
        for d in 0..self.dim {
            h[d * self.dim + d] = -1.0 / self.variances[k];
        }
        Ok(h)
    }

    /// Exact Hessian of `log p` at `x`, row-major `dim x dim`:
    /// `sum_k r_k (u_k u_k^T - I / sigma_k^2) - m m^T` with
    /// `u_k = (mu_k - x) / sigma_k^2` and `m = sum_k r_k u_k`.
    pub fn hessian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(x)?;
        let dim = self.dim;
        let mut h = vec![0.0; dim * dim];
        let mut m = vec![0.0; dim];
        for ((rk, mu), var) in r.iter().zip(&self.means).zip(&self.variances) {
            let u: Vec<f64> = mu.iter().zip(x).map(|(a, b)| (a - b) / var).collect();
            for a in 0..dim {
                m[a] += rk * u[a];
                h[a * dim + a] -= rk / var;
                for b in 0..dim {
                    h[a * dim + b] += rk * u[a] * u[b];
                }
            }
        }
        for a in 0..dim {
            for b in 0..dim {
                h[a * dim + b] -= m[a] * m[b];
            }
        }
        Ok(h)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ParticleSet> {
        if n == 0 {
            return invalid("sample count must be at least 1");
        }
        let (_, labelled) = self.sample_labelled(n, rng)?;
        Ok(labelled)
    }

    /// Draws `n` points and returns the component index of each alongside them.
    pub fn sample_labelled<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(Vec<usize>, ParticleSet)> {
        let picker = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::InvalidArgument(format!("mixture weights: {e}")))?;
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let k = picker.sample(rng);
            let sd = self.variances[k].sqrt();
            for m in &self.means[k] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + sd * z);
            }
            labels.push(k);
        }
        Ok((labels, ParticleSet::from_flat(n, self.dim, data)?))
    }
}

impl Target for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dims(self.dim, x.len(), "mixture log-density")?;
        Ok(log_sum_exp(&self.log_components(x)))
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dims(self.dim, x.len(), "mixture score")?;
        check_dims(self.dim, out.len(), "mixture score buffer")?;
        let r = self.responsibilities(x)?;
        out.iter_mut().for_each(|v| *v = 0.0);
        for ((rk, mu), var) in r.iter().zip(&self.means).zip(&self.variances) {
            if *rk == 0.0 {
                continue;
            }
            for ((o, m), xi) in out.iter_mut().zip(mu).zip(x) {
                *o += rk * (m - xi) / var;
            }
        }
        Ok(())
    }
}

/// Numerically stable `log(sum exp(v))`; `-inf` entries are skipped.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct summation of the mixture density, no log-domain tricks.
    fn direct_density(weights: &[f64], means: &[Vec<f64>], vars: &[f64], x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let mut p = 0.0;
        for k in 0..weights.len() {
            let mut s = 0.0;
            for (a, b) in x.iter().zip(&means[k]) {
                s += (a - b) * (a - b);
            }
            p += weights[k] * (2.0 * PI * vars[k]).powf(-d / 2.0) * (-s / (2.0 * vars[k])).exp();
        }
        p
    }

    #[test]
    fn standard_normal_at_origin() {
        let t = GaussianMixture::standard_normal(2).unwrap();
        let v = t.log_density(&[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn symmetric_midpoint_terms_equal() {
        let t = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0, 0.0], vec![1.0, 0.0]], vec![0.7, 0.7]).unwrap();
        let x = [0.0, 0.4];
        let lc = t.log_components(&x);
        assert_eq!(lc[0], lc[1]);
        let expected = direct_density(t.weights(), t.means(), t.variances(), &x).ln();
        assert!((t.log_density(&x).unwrap() - expected).abs() < 1e-14);
        assert_eq!(t.score(&x).unwrap()[0], 0.0);
    }

    #[test]
    fn bimodal_at_origin_matches_direct_sum() {
        // 0.5 N(0|(-1,0), 0.5 I) + 0.5 N(0|(1,0), I)
        //   = 0.5 e^{-1} / pi + 0.5 e^{-1/2} / (2 pi)
        let expected = (0.5 * (-1.0f64).exp() / PI + 0.5 * (-0.5f64).exp() / (2.0 * PI)).ln();
        let t = GaussianMixture::bimodal();
        assert!((t.log_density(&[0.0, 0.0]).unwrap() - expected).abs() < 1e-14);
        assert!((expected - (-2.236_647_477_551_647_6)).abs() < 1e-12);
    }

    #[test]
    fn single_component_score_is_linear() {
        let t = GaussianMixture::new(vec![1.0], vec![vec![1.0, -2.0]], vec![0.25]).unwrap();
        let s = t.score(&[0.0, 0.0]).unwrap();
        assert!((s[0] - 4.0).abs() < 1e-14 && (s[1] + 8.0).abs() < 1e-14);
    }

    #[test]
    fn hessian_hard_assignment() {
        let one = GaussianMixture::new(vec![1.0], vec![vec![0.0, 0.0]], vec![0.5]).unwrap();
        assert_eq!(one.hessian_approx(&[3.0, 1.0]).unwrap(), vec![-2.0, 0.0, 0.0, -2.0]);
        let t = GaussianMixture::bimodal();
        assert_eq!(t.hessian_approx(&[1.0, 0.0]).unwrap(), vec![-1.0, 0.0, 0.0, -1.0]);
        // Far to the left the narrower left component still dominates.
        assert_eq!(t.hard_assignment(&[-3.0, 0.0]).unwrap(), 0);
        // Far away on the axis the wider component wins.
        assert_eq!(t.hard_assignment(&[0.0, 50.0]).unwrap(), 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![1.0, 1.0]).unwrap();
        assert_eq!(t.hard_assignment(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn validation_errors() {
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
        let t = GaussianMixture::bimodal();
        assert!(t.log_density(&[0.0]).is_err());
        assert!(t.score(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_centred() {
        let t = GaussianMixture::standard_normal(2).unwrap();
        let a = t.sample(100_000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = t.sample(100_000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for m in a.mean() {
            assert!(m.abs() < 0.02, "mean {m}");
        }
    }

    #[test]
    fn zero_weight_component_never_sampled() {
        let t = GaussianMixture::new(vec![1.0, 0.0], vec![vec![-5.0], vec![5.0]], vec![0.1, 0.1]).unwrap();
        let (labels, pts) = t.sample_labelled(1000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(labels.iter().all(|&k| k == 0));
        assert!(pts.rows().all(|r| r[0] < 0.0));
        assert!(t.log_density(&[5.0]).unwrap().is_finite());
    }

    fn random_mixture() -> impl Strategy<Value = (GaussianMixture, Vec<f64>)> {
        (1usize..4, 1usize..4).prop_flat_map(|(k, d)| {
            (
                proptest::collection::vec(0.1f64..1.0, k),
                proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), k),
                proptest::collection::vec(0.2f64..2.0, k),
                proptest::collection::vec(-3.0f64..3.0, d),
            )
                .prop_map(|(w, means, vars, x)| {
                    let total: f64 = w.iter().sum();
                    let mut w: Vec<f64> = w.iter().map(|v| v / total).collect();
                    let rest: f64 = w[1..].iter().sum();
                    w[0] = 1.0 - rest;
                    (GaussianMixture::new(w, means, vars).unwrap(), x)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn score_matches_finite_differences((t, x) in random_mixture()) {
            let s = t.score(&x).unwrap();
            let scale = s.iter().map(|v| v.abs()).fold(1e-3, f64::max);
            for d in 0..x.len() {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                let fd = (t.log_density(&xp).unwrap() - t.log_density(&xm).unwrap()) / (2.0 * h);
                prop_assert!((fd - s[d]).abs() / scale < 1e-6, "fd {} vs {}", fd, s[d]);
            }
        }

        #[test]
        fn log_density_matches_direct_sum_and_is_finite((t, x) in random_mixture()) {
            let v = t.log_density(&x).unwrap();
            prop_assert!(v.is_finite());
            let direct = direct_density(t.weights(), t.means(), t.variances(), &x).ln();
            prop_assert!((v - direct).abs() < 1e-10);
            let far: Vec<f64> = x.iter().map(|c| c * 1e3).collect();
            prop_assert!(t.log_density(&far).unwrap().is_finite());
            prop_assert!(t.score(&far).unwrap().iter().all(|c| c.is_finite()));
        }

        #[test]
        fn exact_hessian_matches_score_differences((t, x) in random_mixture()) {
            let h = t.hessian(&x).unwrap();
            let dim = x.len();
            let eps = 1e-5;
            for a in 0..dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[a] += eps;
                xm[a] -= eps;
                let sp = t.score(&xp).unwrap();
                let sm = t.score(&xm).unwrap();
                for b in 0..dim {
                    let fd = (sp[b] - sm[b]) / (2.0 * eps);
                    prop_assert!((fd - h[b * dim + a]).abs() < 1e-5 * (1.0 + h[b * dim + a].abs()));
                }
            }
        }

        #[test]
        fn single_component_hessian_is_exact(x in proptest::collection::vec(-3.0f64..3.0, 2), var in 0.1f64..3.0) {
            let t = GaussianMixture::new(vec![1.0], vec![vec![0.5, -0.5]], vec![var]).unwrap();
            let h = t.hessian_approx(&x).unwrap();
            let eps = 1e-5;
            for a in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[a] += eps;
                xm[a] -= eps;
                let sp = t.score(&xp).unwrap();
                let sm = t.score(&xm).unwrap();
                for b in 0..2 {
                    let fd = (sp[b] - sm[b]) / (2.0 * eps);
                    prop_assert!((fd - h[a * 2 + b]).abs() < 1e-6 * (1.0 + h[a * 2 + b].abs()));
                }
            }
        }
    }
}
