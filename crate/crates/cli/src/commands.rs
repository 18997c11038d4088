//! The three subcommands. Each produces in-memory tables first and writes them
//! afterwards, so identical settings always yield identical bytes.

use std::path::{Path, PathBuf};

use lsvgd_core::gan::{gan_train, init_bundle, GanTrainConfig, GanTrainOutput};
use lsvgd_core::rng::{stream, STREAM_INIT};
use lsvgd_core::{
    kl_particles_vs_target, lsvgd_run, particle_variance, svgd_run, GaussianMixture,
    KernelConfig, KlEstimatorConfig, LsvgdConfig, ParticleSet, SamplerConfig, Target,
};
use rayon::prelude::*;

use crate::config::{update_name, Method, Settings};
use crate::table::{fmt_f64, fmt_opt, Table};
use crate::CliError;

pub const RUN_ITERS: usize = 500;
pub const GAN_ITERS: usize = 20_000;

/// One engine run on one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub method: Method,
    pub particles: usize,
    pub gamma: f64,
    pub step: f64,
    pub iters: usize,
    pub seed: u64,
    pub init_seed: u64,
    pub kde_bandwidth: f64,
    /// Diagnostics cadence; iteration 0 and the last iteration are always included.
    pub diag_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub kl: Option<f64>,
    /// Particles outside the KL grid, excluded from `kl`.
    pub outside: usize,
    pub variance: Option<f64>,
    pub clamp_count: Option<usize>,
    pub mean_drift: Option<f64>,
    pub mean_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub rows: Vec<TrajectoryRow>,
    /// Final particles, or the last finite state on failure.
    pub particles: ParticleSet,
    pub failure: Option<String>,
}

impl CellResult {
    pub fn final_row(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }
}

/// Initial particles: i.i.d. standard normal draws from the init stream.
pub fn initial_particles(n: usize, dim: usize, init_seed: u64) -> ParticleSet {
    let std = GaussianMixture::standard_normal(dim).expect("dimension is positive");
    std.sample(n, &mut stream(init_seed, STREAM_INIT))
        .expect("sample count is positive")
}

/// KL over the particles inside the estimator grid, with the number left
/// outside. Exact samples of a wide target occasionally land outside the grid,
/// so they are dropped and counted rather than failing the measurement. KL is
/// `None` for targets that are not 2-D.
pub fn measure_kl(particles: &ParticleSet, target: &GaussianMixture, bandwidth: f64) -> (Option<f64>, usize) {
    if target.dim() != 2 {
        return (None, 0);
    }
    let cfg = KlEstimatorConfig {
        kde_bandwidth: bandwidth,
        ..Default::default()
    };
    let inside: Vec<Vec<f64>> = particles
        .rows()
        .filter(|r| r.iter().zip(&cfg.grid_bounds).all(|(v, (lo, hi))| (lo..=hi).contains(&v)))
        .map(<[f64]>::to_vec)
        .collect();
    let outside = particles.len() - inside.len();
    let kl = ParticleSet::from_rows(&inside)
        .ok()
        .and_then(|p| kl_particles_vs_target(&p, target, &cfg).ok());
    (kl, outside)
}

fn measure(particles: &ParticleSet, target: &GaussianMixture, spec: &CellSpec, iteration: usize) -> TrajectoryRow {
    let (kl, outside) = measure_kl(particles, target, spec.kde_bandwidth);
    TrajectoryRow {
        iteration,
        kl,
        outside,
        variance: particle_variance(particles).ok(),
        clamp_count: None,
        mean_drift: None,
        mean_sigma: None,
    }
}

pub fn run_cell(spec: &CellSpec, target: &GaussianMixture) -> Result<CellResult, CliError> {
    let kernel = KernelConfig::with_gamma(spec.gamma)?;
    let base = SamplerConfig::new(spec.step, spec.iters, kernel)?;
    let init = initial_particles(spec.particles, target.dim(), spec.init_seed);
    let due = |it: usize| it % spec.diag_every == 0 || it == spec.iters;
    let mut rows = vec![measure(&init, target, spec, 0)];
    let outcome = match spec.method {
        Method::Svgd => svgd_run(&init, target, &base, |it, p| {
            if due(it) {
                rows.push(measure(p, target, spec, it));
            }
        }),
        Method::Lsvgd => {
            let cfg = LsvgdConfig::new(base)?;
            lsvgd_run(&init, target, &cfg, spec.seed, |it, p, state| {
                if due(it) {
                    let mut row = measure(p, target, spec, it);
                    row.clamp_count = Some(state.clamp_count);
                    row.mean_drift = Some(state.mean_drift());
                    row.mean_sigma = Some(state.mean_sigma());
                    rows.push(row);
                }
            })
        }
    };
    Ok(match outcome {
        Ok(particles) => CellResult {
            rows,
            particles,
            failure: None,
        },
        Err(f) => CellResult {
            rows,
            failure: Some(f.to_string()),
            particles: f.last,
        },
    })
}

pub fn trajectory_table(rows: &[TrajectoryRow]) -> Table {
    let mut t = Table::new(&["iteration", "kl", "variance", "outside", "clamp_count", "mean_drift", "mean_sigma"]);
    for r in rows {
        t.push(vec![
            r.iteration.to_string(),
            fmt_opt(r.kl),
            fmt_opt(r.variance),
            r.outside.to_string(),
            r.clamp_count.map(|c| c.to_string()).unwrap_or_default(),
            fmt_opt(r.mean_drift),
            fmt_opt(r.mean_sigma),
        ]);
    }
    t
}

pub fn particles_table(p: &ParticleSet) -> Table {
    let header: Vec<String> = (1..=p.dim()).map(|d| format!("x{d}")).collect();
    let mut t = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for row in p.rows() {
        t.push(row.iter().map(|v| fmt_f64(*v)).collect());
    }
    t
}

/// `./runs/<unix seconds>-<seed>/`.
pub fn default_out_dir(seed: u64) -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{secs}-{seed}"))
}

fn out_dir(settings: &Settings, seed: u64) -> Result<PathBuf, CliError> {
    let dir = settings.out.clone().unwrap_or_else(|| default_out_dir(seed));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(dir.clone(), e))?;
    Ok(dir)
}

fn single<T: Copy>(values: &[T], key: &str) -> Result<T, CliError> {
    match values {
        [v] => Ok(*v),
        _ => Err(CliError::Usage(format!("{key} takes a single value for this subcommand"))),
    }
}

pub fn run_spec(settings: &Settings) -> Result<CellSpec, CliError> {
    Ok(CellSpec {
        method: settings.run_method()?,
        particles: single(&settings.particles, "particles")?,
        gamma: settings.gamma,
        step: settings.step,
        iters: settings.iters.unwrap_or(RUN_ITERS),
        seed: settings.seed,
        init_seed: settings.init_seed,
        kde_bandwidth: settings.kde_bandwidth,
        diag_every: settings.diag_every,
    })
}

/// Runs one engine and writes `trajectory.csv` and `particles.csv`. Returns
/// whether the run finished without numerical failure.
pub fn run_single(settings: &Settings) -> Result<(PathBuf, CellResult), CliError> {
    let spec = run_spec(settings)?;
    let target = settings.target()?;
    let result = run_cell(&spec, &target)?;
    let dir = out_dir(settings, spec.seed)?;
    trajectory_table(&result.rows).write(&dir.join("trajectory.csv"))?;
    particles_table(&result.particles).write(&dir.join("particles.csv"))?;
    Ok((dir, result))
}

/// Sweep cells in output order: particle count, then bandwidth, then seed
/// (all ascending), then method in the order given.
pub fn sweep_cells(settings: &Settings) -> Vec<CellSpec> {
    let mut ns = settings.particles.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut gammas = settings.gamma_list.clone();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let mut seeds = settings.seeds.clone();
    seeds.sort_unstable();
    let iters = settings.iters.unwrap_or(RUN_ITERS);
    let mut cells = Vec::new();
    for &n in &ns {
        for &gamma in &gammas {
            for &seed in &seeds {
                for &method in &settings.sweep_methods() {
                    cells.push(CellSpec {
                        method,
                        particles: n,
                        gamma,
                        step: settings.step,
                        iters,
                        seed,
                        init_seed: settings.init_seed,
                        kde_bandwidth: settings.kde_bandwidth,
                        diag_every: iters,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: CellSpec,
    pub kl: Option<f64>,
    pub variance: Option<f64>,
    pub outside: Option<usize>,
    pub failure: Option<String>,
}

/// Runs every cell on a pool of `settings.jobs` threads; rows come back in
/// cell order regardless of completion order.
pub fn sweep_rows(settings: &Settings) -> Result<Vec<SweepRow>, CliError> {
    let target = settings.target()?;
    let cells = sweep_cells(settings);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", settings.jobs)))?;
    pool.install(|| {
        cells
            .into_par_iter()
            .map(|cell| {
                let res = run_cell(&cell, &target)?;
                let last = res.final_row().cloned();
                Ok(SweepRow {
                    kl: last.as_ref().and_then(|r| r.kl),
                    variance: last.as_ref().and_then(|r| r.variance),
                    outside: last.as_ref().map(|r| r.outside),
                    failure: res.failure,
                    cell,
                })
            })
            .collect()
    })
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&["n", "gamma", "seed", "method", "kl", "variance", "outside", "status"]);
    for r in rows {
        t.push(vec![
            r.cell.particles.to_string(),
            fmt_f64(r.cell.gamma),
            r.cell.seed.to_string(),
            r.cell.method.name().to_string(),
            fmt_opt(r.kl),
            fmt_opt(r.variance),
            r.outside.map(|c| c.to_string()).unwrap_or_default(),
            r.failure.clone().unwrap_or_else(|| "ok".to_string()),
        ]);
    }
    t
}

/// Mean and sample standard deviation over seeds; `None` without values,
/// no deviation from a single value.
fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

/// One row per (n, gamma, method) in sweep order, aggregated over seeds.
/// `runs` counts the cells that produced a KL value.
pub fn summary_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&[
        "n", "gamma", "method", "runs", "kl_mean", "kl_sd", "variance_mean", "variance_sd",
    ]);
    let mut groups: Vec<(&CellSpec, Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        let key = |c: &CellSpec| (c.particles, c.gamma.to_bits(), c.method);
        match groups.iter_mut().find(|(c, _)| key(c) == key(&r.cell)) {
            Some((_, members)) => members.push(r),
            None => groups.push((&r.cell, vec![r])),
        }
    }
    groups.sort_by(|(a, _), (b, _)| {
        (a.particles, a.gamma, a.method as u8)
            .partial_cmp(&(b.particles, b.gamma, b.method as u8))
            .expect("gammas are finite")
    });
    for (cell, members) in groups {
        let kls: Vec<f64> = members.iter().filter_map(|r| r.kl).collect();
        let vars: Vec<f64> = members.iter().filter_map(|r| r.variance).collect();
        let (km, ks) = mean_sd(&kls);
        let (vm, vs) = mean_sd(&vars);
        t.push(vec![
            cell.particles.to_string(),
            fmt_f64(cell.gamma),
            cell.method.name().to_string(),
            kls.len().to_string(),
            fmt_opt(km),
            fmt_opt(ks),
            fmt_opt(vm),
            fmt_opt(vs),
        ]);
    }
    t
}

pub fn run_sweep(settings: &Settings) -> Result<(PathBuf, Vec<SweepRow>), CliError> {
    let rows = sweep_rows(settings)?;
    let first_seed = settings.seeds.iter().copied().min().unwrap_or(0);
    let dir = out_dir(settings, first_seed)?;
    sweep_table(&rows).write(&dir.join("sweep.csv"))?;
    summary_table(&rows).write(&dir.join("summary.csv"))?;
    Ok((dir, rows))
}

pub fn gan_config(settings: &Settings) -> Result<GanTrainConfig, CliError> {
    let mut cfg = GanTrainConfig::new(settings.update, settings.iters.unwrap_or(GAN_ITERS), settings.seed)?;
    cfg.batch_size = settings.batch;
    cfg.learning_rate = settings.lr;
    cfg.kernel = KernelConfig::with_gamma(settings.feature_gamma)?;
    cfg.lsvgd = LsvgdConfig::new(SamplerConfig::new(settings.feature_step, 1, cfg.kernel)?)?;
    cfg.conditional = settings.conditional;
    cfg.aux_classifier = settings.aux;
    cfg.checkpoint_every = settings.checkpoint_every;
    cfg.eval_samples = settings.eval_samples;
    cfg.validate()?;
    Ok(cfg)
}

/// The 8-mode ring unless a target file is given.
pub fn gan_data(settings: &Settings) -> Result<GaussianMixture, CliError> {
    match settings.target_file {
        Some(_) => settings.target(),
        None => Ok(GaussianMixture::ring(8, 2.0, 0.01)?),
    }
}

pub fn train_gan(settings: &Settings) -> Result<GanTrainOutput, CliError> {
    let cfg = gan_config(settings)?;
    let data = gan_data(settings)?;
    let bundle = init_bundle(&(&data).into(), &cfg)?;
    Ok(gan_train(bundle, &data, &cfg)?)
}

pub fn gan_metrics_table(out: &GanTrainOutput, modes: usize) -> Table {
    let mut header = vec![
        "iteration".to_string(),
        "modes_covered".to_string(),
        "variance".to_string(),
        "discriminator_loss".to_string(),
        "generator_loss".to_string(),
    ];
    header.extend((0..modes).map(|k| format!("mode_{k}")));
    let mut t = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for c in &out.checkpoints {
        let mut row = vec![
            c.iteration.to_string(),
            c.modes_covered.to_string(),
            fmt_f64(c.variance),
            fmt_f64(c.discriminator_loss),
            fmt_f64(c.generator_loss),
        ];
        row.extend(c.mode_fractions.iter().map(|f| fmt_f64(*f)));
        t.push(row);
    }
    t
}

pub fn samples_file(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("samples_{iteration:07}.csv"))
}

/// Trains and writes `metrics.csv` plus one `samples_<iteration>.csv` per checkpoint.
pub fn run_gan(settings: &Settings) -> Result<(PathBuf, GanTrainOutput), CliError> {
    let out = train_gan(settings)?;
    let modes = gan_data(settings)?.num_components();
    let dir = out_dir(settings, settings.seed)?;
    gan_metrics_table(&out, modes).write(&dir.join("metrics.csv"))?;
    for c in &out.checkpoints {
        particles_table(&c.samples).write(&samples_file(&dir, c.iteration))?;
    }
    Ok((dir, out))
}

/// Human-readable label of a GAN run, used in log lines.
pub fn gan_label(settings: &Settings) -> String {
    format!("{} seed {}", update_name(settings.update), settings.seed)
}
