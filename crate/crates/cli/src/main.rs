use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsvgd_cli::commands::{gan_label, run_gan, run_single, run_sweep};
use lsvgd_cli::config::{load_config, RawConfig, Settings};
use lsvgd_cli::CliError;

#[derive(Parser)]
#[command(name = "lsvgd", version, about = "SVGD / Langevin-SVGD experiments and the toy GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One sampler run; writes trajectory.csv and particles.csv.
    Run(Flags),
    /// Grid over particle counts, bandwidths, seeds and methods; writes
    /// sweep.csv (one row per cell) and summary.csv (mean and sd over seeds).
    Sweep(Flags),
    /// Toy GAN on the 8-mode ring; writes metrics.csv and per-checkpoint samples.
    Gan(Flags),
}

#[derive(Args)]
struct Flags {
    /// key=value file; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// svgd, lsvgd, a comma list, or `both` (sweep).
    #[arg(long)]
    method: Option<String>,
    /// Mixture target, one `weight mean.. variance` line per component.
    #[arg(long)]
    target_file: Option<String>,
    /// Particle count (comma list for sweep).
    #[arg(long)]
    particles: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    gamma_list: Option<String>,
    #[arg(long)]
    step: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    /// GAN update: sgd, svgd or lsvgd.
    #[arg(long)]
    update: Option<String>,
    /// Label-conditioned generator with the auxiliary classifier.
    #[arg(long)]
    conditional: bool,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    init_seed: Option<String>,
    #[arg(long)]
    diag_every: Option<String>,
    #[arg(long)]
    kde_bandwidth: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    feature_step: Option<String>,
    #[arg(long)]
    feature_gamma: Option<String>,
    #[arg(long)]
    eval_samples: Option<String>,
    #[arg(long)]
    aux: Option<String>,
}

impl Flags {
    fn settings(&self) -> Result<Settings, CliError> {
        let mut raw = match &self.config {
            Some(p) => load_config(p)?,
            None => RawConfig::new(),
        };
        let pairs = [
            ("method", &self.method),
            ("target-file", &self.target_file),
            ("particles", &self.particles),
            ("iters", &self.iters),
            ("gamma", &self.gamma),
            ("gamma-list", &self.gamma_list),
            ("step", &self.step),
            ("seed", &self.seed),
            ("seeds", &self.seeds),
            ("out", &self.out),
            ("jobs", &self.jobs),
            ("update", &self.update),
            ("checkpoint-every", &self.checkpoint_every),
            ("init-seed", &self.init_seed),
            ("diag-every", &self.diag_every),
            ("kde-bandwidth", &self.kde_bandwidth),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("feature-step", &self.feature_step),
            ("feature-gamma", &self.feature_gamma),
            ("eval-samples", &self.eval_samples),
            ("aux", &self.aux),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                raw.insert(key.to_string(), v.clone());
            }
        }
        if self.conditional {
            raw.insert("conditional".into(), "true".into());
        }
        Settings::from_raw(&raw)
    }
}

fn execute(command: &Command) -> Result<bool, CliError> {
    match command {
        Command::Run(flags) => {
            let (dir, result) = run_single(&flags.settings()?)?;
            match &result.failure {
                None => eprintln!("wrote {}", dir.display()),
                Some(f) => eprintln!("{f}; partial output in {}", dir.display()),
            }
            Ok(result.failure.is_none())
        }
        Command::Sweep(flags) => {
            let (dir, rows) = run_sweep(&flags.settings()?)?;
            let failed = rows.iter().filter(|r| r.failure.is_some()).count();
            eprintln!("wrote {} ({} cells, {failed} failed)", dir.display(), rows.len());
            Ok(failed == 0)
        }
        Command::Gan(flags) => {
            let settings = flags.settings()?;
            let (dir, out) = run_gan(&settings)?;
            if let Some((it, e)) = &out.failure {
                eprintln!("{}: stopped at iteration {it}: {e}", gan_label(&settings));
            }
            if let Some(c) = out.checkpoints.last() {
                eprintln!(
                    "{}: {} of 8 modes covered at iteration {}",
                    gan_label(&settings),
                    c.modes_covered,
                    c.iteration
                );
            }
            eprintln!("wrote {}", dir.display());
            Ok(out.failure.is_none())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ (CliError::Usage(_) | CliError::Config { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
