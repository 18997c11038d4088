//! A 2-D toy GAN whose discriminator is read as a likelihood over its feature
//! layer. Generator and discriminator updates first move the feature vectors
//! as particles (plain gradient, SVGD or LSVGD) and then back-propagate the
//! negated particle direction through the networks.

mod mlp;

pub use mlp::{Activation, ForwardTrace, MlpNetwork};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diagnostics::{mode_coverage, particle_variance};
use crate::error::{check_dims, invalid, Error, Result};
use crate::kernel::{kernel_matrix, KernelConfig};
use crate::lsvgd::{lsvgd_update, LsvgdConfig, NoiseState};
use crate::particles::ParticleSet;
use crate::rng::{stream, STREAM_DATA, STREAM_EVAL, STREAM_LATENT, STREAM_NOISE, STREAM_PARAMS};
use crate::svgd::{stein_direction, uniform_weights, DirectionTerms, SamplerConfig};
use crate::target::{GaussianMixture, Target};

/// Label of real samples in the main head's likelihood.
pub const REAL: f64 = 1.0;
/// Label of generated samples.
pub const FAKE: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GanArchitecture {
    pub noise_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Number of classes when the generator is label-conditioned and the
    /// discriminator carries the auxiliary classifier.
    pub num_classes: Option<usize>,
}

impl Default for GanArchitecture {
    fn default() -> Self {
        Self {
            noise_dim: 2,
            hidden: 32,
            feature_dim: 8,
            num_classes: None,
        }
    }
}

/// Generator, feature extractor and the classifier heads on top of it.
#[derive(Debug, Clone, PartialEq)]
pub struct GanBundle {
    pub generator: MlpNetwork,
    pub feature_extractor: MlpNetwork,
    /// Affine map from features to the real/fake logit.
    pub main_classifier: MlpNetwork,
    /// Affine map from features to class logits.
    pub aux_classifier: Option<MlpNetwork>,
    noise_dim: usize,
}

impl GanBundle {
    /// Generator `noise (+ one-hot label) -> hidden -> hidden -> 2`, extractor
    /// `2 -> hidden -> feature_dim` with tanh on both layers.
    pub fn new<R: Rng + ?Sized>(arch: &GanArchitecture, rng: &mut R) -> Result<Self> {
        if arch.num_classes == Some(0) {
            return invalid("the auxiliary classifier needs at least one class");
        }
        let labels = arch.num_classes.unwrap_or(0);
        let generator = MlpNetwork::mlp(&[arch.noise_dim + labels, arch.hidden, arch.hidden, 2], rng)?;
        let feature_extractor = MlpNetwork::new(
            &[2, arch.hidden, arch.feature_dim],
            &[Activation::Tanh, Activation::Tanh],
            rng,
        )?;
        let main_classifier = MlpNetwork::mlp(&[arch.feature_dim, 1], rng)?;
        let aux_classifier = match arch.num_classes {
            Some(k) => Some(MlpNetwork::mlp(&[arch.feature_dim, k], rng)?),
            None => None,
        };
        Ok(Self {
            generator,
            feature_extractor,
            main_classifier,
            aux_classifier,
            noise_dim: arch.noise_dim,
        })
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.aux_classifier.as_ref().map(MlpNetwork::output_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_extractor.output_dim()
    }

    fn generator_input(&self, z: &[f64], label: Option<usize>) -> Vec<f64> {
        let mut input = z.to_vec();
        if let Some(k) = self.num_classes() {
            let mut one_hot = vec![0.0; k];
            one_hot[label.expect("conditional generator needs a label")] = 1.0;
            input.extend(one_hot);
        }
        input
    }

    pub fn generate(&self, z: &[f64], label: Option<usize>) -> Vec<f64> {
        self.generator.predict(&self.generator_input(z, label))
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.feature_extractor.predict(x)
    }

    pub fn is_finite(&self) -> bool {
        self.generator.is_finite()
            && self.feature_extractor.is_finite()
            && self.main_classifier.is_finite()
            && self.aux_classifier.as_ref().is_none_or(MlpNetwork::is_finite)
    }

    /// Draws `n` latent vectors, and labels if conditional, from `rng`.
    pub fn draw_latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (ParticleSet, Option<Vec<usize>>) {
        let mut z = ParticleSet::zeros(n, self.noise_dim);
        for i in 0..n {
            for v in z.row_mut(i) {
                *v = rng.sample(StandardNormal);
            }
        }
        let labels = self
            .num_classes()
            .map(|k| (0..n).map(|_| rng.random_range(0..k)).collect());
        (z, labels)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ParticleSet> {
        let (z, labels) = self.draw_latent(n, rng);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| self.generate(z.row(i), labels.as_ref().map(|l| l[i])))
            .collect();
        ParticleSet::from_rows(&rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// Per-sample loss gradients, averaged over the batch.
    Plain,
    Svgd,
    Lsvgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanTrainConfig {
    pub update_mode: UpdateMode,
    /// Particles per group (generated, real, fake).
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Kernel over feature vectors, used by both particle modes.
    pub kernel: KernelConfig,
    /// LSVGD settings in feature space; its step size scales the noise and
    /// the direction is divided by it before back-propagation.
    pub lsvgd: LsvgdConfig,
    /// Condition the generator on the data's component labels.
    pub conditional: bool,
    /// Attach the auxiliary classifier in conditional mode. Without it the
    /// run is unconditional.
    pub aux_classifier: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_samples: usize,
    pub coverage_radius: f64,
    pub coverage_min_fraction: f64,
    pub arch: GanArchitecture,
}

impl GanTrainConfig {
    pub fn new(update_mode: UpdateMode, iterations: usize, seed: u64) -> Result<Self> {
        let kernel = KernelConfig::with_gamma(1.0)?;
        let lsvgd = LsvgdConfig::new(SamplerConfig {
            step_size: 2.0,
            iterations: 1,
            kernel,
        })?;
        Ok(Self {
            update_mode,
            batch_size: 64,
            learning_rate: 1e-3,
            iterations,
            kernel,
            lsvgd,
            conditional: false,
            aux_classifier: true,
            seed,
            checkpoint_every: 1000,
            eval_samples: 2000,
            coverage_radius: 3.0,
            coverage_min_fraction: 0.01,
            arch: GanArchitecture::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let min_batch = if self.update_mode == UpdateMode::Plain { 1 } else { 2 };
        if self.batch_size < min_batch {
            return invalid(format!("batch size must be at least {min_batch}"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning rate must be positive");
        }
        if !(self.lsvgd.base.step_size > 0.0) {
            return invalid("the feature-space step size must be positive");
        }
        self.lsvgd.validate()?;
        if self.checkpoint_every == 0 {
            return invalid("checkpoint interval must be at least 1");
        }
        if self.eval_samples < 2 {
            return invalid("at least two evaluation samples are needed");
        }
        Ok(())
    }

    /// Whether labels are drawn and the auxiliary head is trained.
    pub fn uses_labels(&self) -> bool {
        self.conditional && self.aux_classifier
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Binary cross-entropy of a logit against label `y = ±1`: `log(1 + exp(-y a))`.
pub fn main_loss(logit: f64, label: f64) -> f64 {
    softplus(-label * logit)
}

/// Softmax cross-entropy of class logits against `class`.
pub fn aux_loss(logits: &[f64], class: usize) -> f64 {
    crate::target::log_sum_exp(logits) - logits[class]
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = crate::target::log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

fn main_head_weights(bundle: &GanBundle) -> Vec<f64> {
    let p = bundle.main_classifier.params();
    p[..bundle.feature_dim()].to_vec()
}

/// `grad_f log p(y | f) = y (1 - sigmoid(y a)) w` for each feature vector,
/// where `a = w . f + c` is the main logit.
pub fn likelihood_score(bundle: &GanBundle, features: &ParticleSet, label: f64) -> ParticleSet {
    let w = main_head_weights(bundle);
    let mut out = ParticleSet::zeros(features.len(), features.dim());
    for i in 0..features.len() {
        let a = bundle.main_classifier.predict(features.row(i))[0];
        let c = label * sigmoid(-label * a);
        for (o, wd) in out.row_mut(i).iter_mut().zip(&w) {
            *o = c * wd;
        }
    }
    out
}

/// `grad_f log p(class | f) = W^T (onehot - softmax)` for the auxiliary head.
pub fn aux_score(bundle: &GanBundle, features: &ParticleSet, classes: &[usize]) -> Result<ParticleSet> {
    let head = match &bundle.aux_classifier {
        Some(h) => h,
        None => return invalid("bundle has no auxiliary classifier"),
    };
    check_dims(features.len(), classes.len(), "class labels")?;
    let k = head.output_dim();
    let dim = features.dim();
    let p = head.params();
    let w = &p[..k * dim];
    let mut out = ParticleSet::zeros(features.len(), dim);
    for (i, &class) in classes.iter().enumerate() {
        if class >= k {
            return invalid(format!("class {class} out of range for {k} classes"));
        }
        let mut r = softmax(&head.predict(features.row(i)));
        r.iter_mut().for_each(|v| *v = -*v);
        r[class] += 1.0;
        let oi = out.row_mut(i);
        for (c, rc) in r.iter().enumerate() {
            for d in 0..dim {
                oi[d] += rc * w[c * dim + d];
            }
        }
    }
    Ok(out)
}

fn check_finite(values: &[f64], index: usize, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure {
            index,
            reason: format!("non-finite {what}"),
        })
    }
}

/// Particle direction in feature space. Plain mode returns the raw scores, so
/// back-propagating their negation gives the gradient of the summed batch
/// loss; the particle modes average over the batch through their weights.
pub fn feature_direction<R: Rng + ?Sized>(
    features: &ParticleSet,
    scores: &ParticleSet,
    cfg: &GanTrainConfig,
    rng: &mut R,
) -> Result<ParticleSet> {
    let n = features.len();
    match cfg.update_mode {
        UpdateMode::Plain => Ok(scores.clone()),
        UpdateMode::Svgd => {
            let km = kernel_matrix(features, &cfg.kernel);
            Ok(stein_direction(
                features,
                scores,
                &uniform_weights(n),
                &km,
                &cfg.kernel,
                DirectionTerms::FULL,
            ))
        }
        UpdateMode::Lsvgd => {
            let mut lcfg = cfg.lsvgd;
            lcfg.base.kernel = cfg.kernel;
            let step = lcfg.base.step_size;
            // Each batch is a fresh particle set, so the mixture behind the
            // weights starts from the isotropic bootstrap every time.
            let prev = NoiseState::bootstrap(n, features.dim(), lcfg.init_sigma0);
            let mut v = lsvgd_update(features, scores, &lcfg, &prev, rng)?.displacement;
            for i in 0..n {
                v.row_mut(i).iter_mut().for_each(|s| *s /= step);
            }
            Ok(v)
        }
    }
}

/// Gradients for every network of the bundle, laid out as their `params()`.
#[derive(Debug, Clone, PartialEq)]
pub struct GanGradients {
    pub generator: Vec<f64>,
    pub feature_extractor: Vec<f64>,
    pub main_classifier: Vec<f64>,
    pub aux_classifier: Option<Vec<f64>>,
}

impl GanGradients {
    fn zeros(bundle: &GanBundle) -> Self {
        Self {
            generator: vec![0.0; bundle.generator.num_params()],
            feature_extractor: vec![0.0; bundle.feature_extractor.num_params()],
            main_classifier: vec![0.0; bundle.main_classifier.num_params()],
            aux_classifier: bundle.aux_classifier.as_ref().map(|h| vec![0.0; h.num_params()]),
        }
    }
}

fn labels_for(bundle: &GanBundle, labels: Option<&[usize]>, n: usize) -> Result<Option<Vec<usize>>> {
    match (bundle.num_classes(), labels) {
        (None, _) => Ok(None),
        (Some(_), Some(l)) => {
            check_dims(n, l.len(), "labels")?;
            Ok(Some(l.to_vec()))
        }
        (Some(_), None) => invalid("conditional bundle needs labels"),
    }
}

/// Summed generator loss over the batch: main cross-entropy against the real label plus,
/// when conditional, the auxiliary cross-entropy for the requested class.
pub fn generator_loss(bundle: &GanBundle, z: &ParticleSet, labels: Option<&[usize]>) -> Result<f64> {
    let labels = labels_for(bundle, labels, z.len())?;
    let mut total = 0.0;
    for i in 0..z.len() {
        let label = labels.as_ref().map(|l| l[i]);
        let f = bundle.features(&bundle.generate(z.row(i), label));
        total += main_loss(bundle.main_classifier.predict(&f)[0], REAL);
        if let (Some(head), Some(c)) = (&bundle.aux_classifier, label) {
            total += aux_loss(&head.predict(&f), c);
        }
    }
    Ok(total)
}

/// Generator parameter gradient with the discriminator frozen.
pub fn generator_gradient<R: Rng + ?Sized>(
    bundle: &GanBundle,
    z: &ParticleSet,
    labels: Option<&[usize]>,
    cfg: &GanTrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dims(bundle.noise_dim, z.dim(), "latent draws")?;
    let labels = labels_for(bundle, labels, z.len())?;
    let n = z.len();
    let mut g_traces = Vec::with_capacity(n);
    let mut f_traces = Vec::with_capacity(n);
    let mut features = ParticleSet::zeros(n, bundle.feature_dim());
    for i in 0..n {
        let input = bundle.generator_input(z.row(i), labels.as_ref().map(|l| l[i]));
        let gt = bundle.generator.forward(&input);
        check_finite(gt.output(), i, "generator output")?;
        let ft = bundle.feature_extractor.forward(gt.output());
        features.row_mut(i).copy_from_slice(ft.output());
        g_traces.push(gt);
        f_traces.push(ft);
    }
    let mut scores = likelihood_score(bundle, &features, REAL);
    if let Some(l) = &labels {
        add_into(&mut scores, &aux_score(bundle, &features, l)?);
    }
    let direction = feature_direction(&features, &scores, cfg, rng)?;

    let mut grad = vec![0.0; bundle.generator.num_params()];
    let mut frozen = vec![0.0; bundle.feature_extractor.num_params()];
    for i in 0..n {
        let neg: Vec<f64> = direction.row(i).iter().map(|v| -v).collect();
        let dx = bundle.feature_extractor.backward(&f_traces[i], &neg, &mut frozen);
        bundle.generator.backward(&g_traces[i], &dx, &mut grad);
    }
    check_finite(&grad, 0, "generator gradient")?;
    Ok(grad)
}

pub fn generator_step<R: Rng + ?Sized>(
    bundle: &mut GanBundle,
    z: &ParticleSet,
    labels: Option<&[usize]>,
    cfg: &GanTrainConfig,
    rng: &mut R,
) -> Result<()> {
    let grad = generator_gradient(bundle, z, labels, cfg, rng)?;
    bundle.generator.descend(&grad, cfg.learning_rate);
    Ok(())
}

fn add_into(acc: &mut ParticleSet, other: &ParticleSet) {
    for i in 0..acc.len() {
        for (a, b) in acc.row_mut(i).iter_mut().zip(other.row(i)) {
            *a += b;
        }
    }
}

/// Summed discriminator loss over one real and one fake batch, including
/// the auxiliary terms when the bundle carries that head.
pub fn discriminator_loss(
    bundle: &GanBundle,
    real: &ParticleSet,
    real_labels: Option<&[usize]>,
    fake: &ParticleSet,
    fake_labels: Option<&[usize]>,
) -> Result<f64> {
    let mut total = 0.0;
    for (batch, labels, y) in [(real, real_labels, REAL), (fake, fake_labels, FAKE)] {
        let labels = labels_for(bundle, labels, batch.len())?;
        let mut sum = 0.0;
        for i in 0..batch.len() {
            let f = bundle.features(batch.row(i));
            sum += main_loss(bundle.main_classifier.predict(&f)[0], y);
            if let (Some(head), Some(l)) = (&bundle.aux_classifier, &labels) {
                sum += aux_loss(&head.predict(&f), l[i]);
            }
        }
        total += sum;
    }
    Ok(total)
}

/// Discriminator gradients (generator entry left at zero). Real and fake
/// features are moved as two separate particle groups.
pub fn discriminator_gradient<R: Rng + ?Sized>(
    bundle: &GanBundle,
    real: &ParticleSet,
    real_labels: Option<&[usize]>,
    fake: &ParticleSet,
    fake_labels: Option<&[usize]>,
    cfg: &GanTrainConfig,
    rng: &mut R,
) -> Result<GanGradients> {
    let mut grads = GanGradients::zeros(bundle);
    for (batch, labels, y) in [(real, real_labels, REAL), (fake, fake_labels, FAKE)] {
        check_dims(2, batch.dim(), "discriminator batch")?;
        let labels = labels_for(bundle, labels, batch.len())?;
        let n = batch.len();
        let mut traces = Vec::with_capacity(n);
        let mut features = ParticleSet::zeros(n, bundle.feature_dim());
        for i in 0..n {
            let t = bundle.feature_extractor.forward(batch.row(i));
            check_finite(t.output(), i, "features")?;
            features.row_mut(i).copy_from_slice(t.output());
            traces.push(t);
        }
        let mut scores = likelihood_score(bundle, &features, y);
        if let Some(l) = &labels {
            add_into(&mut scores, &aux_score(bundle, &features, l)?);
        }
        let direction = feature_direction(&features, &scores, cfg, rng)?;
        for i in 0..n {
            let f = features.row(i);
            let neg: Vec<f64> = direction.row(i).iter().map(|v| -v).collect();
            bundle
                .feature_extractor
                .backward(&traces[i], &neg, &mut grads.feature_extractor);

            // The heads are not particles; they take the ordinary loss gradient.
            let ht = bundle.main_classifier.forward(f);
            let a = ht.output()[0];
            let dl_da = -y * sigmoid(-y * a);
            bundle.main_classifier.backward(&ht, &[dl_da], &mut grads.main_classifier);
            if let (Some(head), Some(l), Some(g)) = (&bundle.aux_classifier, &labels, grads.aux_classifier.as_mut()) {
                let at = head.forward(f);
                let mut dl = softmax(at.output());
                dl[l[i]] -= 1.0;
                head.backward(&at, &dl, g);
            }
        }
    }
    check_finite(&grads.feature_extractor, 0, "discriminator gradient")?;
    Ok(grads)
}

pub fn discriminator_step<R: Rng + ?Sized>(
    bundle: &mut GanBundle,
    real: &ParticleSet,
    real_labels: Option<&[usize]>,
    fake: &ParticleSet,
    fake_labels: Option<&[usize]>,
    cfg: &GanTrainConfig,
    rng: &mut R,
) -> Result<()> {
    let g = discriminator_gradient(bundle, real, real_labels, fake, fake_labels, cfg, rng)?;
    let lr = cfg.learning_rate;
    bundle.feature_extractor.descend(&g.feature_extractor, lr);
    bundle.main_classifier.descend(&g.main_classifier, lr);
    if let (Some(head), Some(gh)) = (bundle.aux_classifier.as_mut(), g.aux_classifier.as_ref()) {
        head.descend(gh, lr);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanCheckpoint {
    pub iteration: usize,
    pub modes_covered: usize,
    pub mode_fractions: Vec<f64>,
    pub variance: f64,
    /// Losses of the last iteration's batches, per sample.
    pub discriminator_loss: f64,
    pub generator_loss: f64,
    pub samples: ParticleSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanTrainOutput {
    /// Final bundle, or the one at the last checkpoint if training failed.
    pub bundle: GanBundle,
    pub checkpoints: Vec<GanCheckpoint>,
    /// Iteration and error that stopped training early.
    pub failure: Option<(usize, Error)>,
}

/// Builds a bundle for `cfg` from the parameter stream of its seed.
pub fn init_bundle(data: &GanMixtureInfo, cfg: &GanTrainConfig) -> Result<GanBundle> {
    let mut arch = cfg.arch;
    arch.num_classes = cfg.uses_labels().then_some(data.num_classes);
    GanBundle::new(&arch, &mut stream(cfg.seed, STREAM_PARAMS))
}

/// What the bundle needs to know about the data source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GanMixtureInfo {
    pub num_classes: usize,
}

impl From<&GaussianMixture> for GanMixtureInfo {
    fn from(m: &GaussianMixture) -> Self {
        Self {
            num_classes: m.num_components(),
        }
    }
}

fn checkpoint<R: Rng + ?Sized>(
    bundle: &GanBundle,
    data: &GaussianMixture,
    cfg: &GanTrainConfig,
    iteration: usize,
    losses: (f64, f64),
    rng: &mut R,
) -> Result<GanCheckpoint> {
    let samples = bundle.sample(cfg.eval_samples, rng)?;
    let cov = mode_coverage(&samples, data, cfg.coverage_radius, cfg.coverage_min_fraction)?;
    Ok(GanCheckpoint {
        iteration,
        modes_covered: cov.covered,
        mode_fractions: cov.fractions,
        variance: particle_variance(&samples)?,
        discriminator_loss: losses.0,
        generator_loss: losses.1,
        samples,
    })
}

/// Alternates one discriminator and one generator step per iteration and
/// records a checkpoint every `cfg.checkpoint_every` iterations and at the end.
/// Randomness comes from separate streams of `cfg.seed`: parameters, data
/// batches, latent draws, particle noise and evaluation samples.
pub fn gan_train(bundle: GanBundle, data: &GaussianMixture, cfg: &GanTrainConfig) -> Result<GanTrainOutput> {
    cfg.validate()?;
    check_dims(2, data.dim(), "GAN data")?;
    if cfg.uses_labels() && bundle.num_classes() != Some(data.num_components()) {
        return invalid("bundle classes must match the data components in conditional mode");
    }
    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut latent_rng = stream(cfg.seed, STREAM_LATENT);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut eval_rng = stream(cfg.seed, STREAM_EVAL);
    let n = cfg.batch_size;

    let mut bundle = bundle;
    let mut saved = bundle.clone();
    let mut checkpoints = Vec::new();
    for it in 1..=cfg.iterations {
        let step = (|| -> Result<(f64, f64)> {
            let (classes, real) = data.sample_labelled(n, &mut data_rng)?;
            let real_labels = cfg.uses_labels().then_some(classes);
            let (zf, fake_labels) = bundle.draw_latent(n, &mut latent_rng);
            let fake = fake_batch(&bundle, &zf, fake_labels.as_deref())?;
            let d_loss = discriminator_loss(
                &bundle,
                &real,
                real_labels.as_deref(),
                &fake,
                fake_labels.as_deref(),
            )?;
            discriminator_step(
                &mut bundle,
                &real,
                real_labels.as_deref(),
                &fake,
                fake_labels.as_deref(),
                cfg,
                &mut noise_rng,
            )?;
            let (zg, gen_labels) = bundle.draw_latent(n, &mut latent_rng);
            let g_loss = generator_loss(&bundle, &zg, gen_labels.as_deref())?;
            generator_step(&mut bundle, &zg, gen_labels.as_deref(), cfg, &mut noise_rng)?;
            if !bundle.is_finite() {
                return Err(Error::Degenerate("non-finite network parameters".into()));
            }
            Ok((d_loss / n as f64, g_loss / n as f64))
        })();
        let losses = match step {
            Ok(l) => l,
            Err(e) => {
                return Ok(GanTrainOutput {
                    bundle: saved,
                    checkpoints,
                    failure: Some((it, e)),
                })
            }
        };
        if it % cfg.checkpoint_every == 0 || it == cfg.iterations {
            match checkpoint(&bundle, data, cfg, it, losses, &mut eval_rng) {
                Ok(c) => {
                    checkpoints.push(c);
                    saved = bundle.clone();
                }
                Err(e) => {
                    return Ok(GanTrainOutput {
                        bundle: saved,
                        checkpoints,
                        failure: Some((it, e)),
                    })
                }
            }
        }
    }
    Ok(GanTrainOutput {
        bundle,
        checkpoints,
        failure: None,
    })
}

fn fake_batch(bundle: &GanBundle, z: &ParticleSet, labels: Option<&[usize]>) -> Result<ParticleSet> {
    let mut out = ParticleSet::zeros(z.len(), 2);
    for i in 0..z.len() {
        let x = bundle.generate(z.row(i), labels.map(|l| l[i]));
        check_finite(&x, i, "generator output")?;
        out.row_mut(i).copy_from_slice(&x);
    }
    Ok(out)
}
