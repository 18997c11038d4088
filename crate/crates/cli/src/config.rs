//! `key=value` configuration with `#` comments. Every key has a command-line
//! flag of the same name; flags override the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lsvgd_core::gan::UpdateMode;
use lsvgd_core::GaussianMixture;

use crate::CliError;

/// Keys accepted in config files and as flags.
pub const KEYS: &[&str] = &[
    "method",
    "target-file",
    "particles",
    "iters",
    "gamma",
    "gamma-list",
    "step",
    "seed",
    "seeds",
    "out",
    "jobs",
    "update",
    "conditional",
    "checkpoint-every",
    "init-seed",
    "diag-every",
    "kde-bandwidth",
    "batch",
    "lr",
    "feature-step",
    "feature-gamma",
    "eval-samples",
    "aux",
];

pub type RawConfig = BTreeMap<String, String>;

/// Parses config text. Blank lines and everything after `#` are ignored.
pub fn parse_config(text: &str) -> Result<RawConfig, CliError> {
    let mut out = RawConfig::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CliError::Config {
            line: idx + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(err(format!("unknown key `{key}`")));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(err(format!("duplicate key `{key}`")));
        }
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<RawConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    parse_config(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Svgd,
    Lsvgd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Svgd => "svgd",
            Method::Lsvgd => "lsvgd",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "svgd" => Ok(Method::Svgd),
            "lsvgd" => Ok(Method::Lsvgd),
            _ => Err(format!("unknown method `{s}` (expected svgd or lsvgd)")),
        }
    }
}

pub fn parse_update(s: &str) -> Result<UpdateMode, String> {
    match s {
        "sgd" | "plain" => Ok(UpdateMode::Plain),
        "svgd" => Ok(UpdateMode::Svgd),
        "lsvgd" => Ok(UpdateMode::Lsvgd),
        _ => Err(format!("unknown update `{s}` (expected sgd, svgd or lsvgd)")),
    }
}

pub fn update_name(mode: UpdateMode) -> &'static str {
    match mode {
        UpdateMode::Plain => "sgd",
        UpdateMode::Svgd => "svgd",
        UpdateMode::Lsvgd => "lsvgd",
    }
}

/// Fully resolved settings shared by all subcommands.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    /// Empty when not given: `run` then uses LSVGD and `sweep` both methods.
    pub methods: Vec<Method>,
    pub target_file: Option<PathBuf>,
    pub particles: Vec<usize>,
    /// `None` means the subcommand's own default.
    pub iters: Option<usize>,
    pub gamma: f64,
    pub gamma_list: Vec<f64>,
    pub step: f64,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub update: UpdateMode,
    pub conditional: bool,
    pub checkpoint_every: usize,
    /// Seed of the initial particle draw, shared by every run seed so that
    /// SVGD cells differing only in `seed` coincide.
    pub init_seed: u64,
    pub diag_every: usize,
    pub kde_bandwidth: f64,
    pub batch: usize,
    pub lr: f64,
    pub feature_step: f64,
    pub feature_gamma: f64,
    pub eval_samples: usize,
    pub aux: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            methods: Vec::new(),
            target_file: None,
            particles: vec![100],
            iters: None,
            gamma: 0.01,
            gamma_list: (-10..=-2).map(|e| 2f64.powi(e)).collect(),
            step: 1.0,
            seed: 0,
            seeds: (0..5).collect(),
            out: None,
            jobs: 1,
            update: UpdateMode::Lsvgd,
            conditional: false,
            checkpoint_every: 1000,
            init_seed: 0,
            diag_every: 10,
            kde_bandwidth: 0.3,
            batch: 64,
            lr: 1e-3,
            feature_step: 2.0,
            feature_gamma: 1.0,
            eval_samples: 2000,
            aux: true,
        }
    }
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| CliError::Usage(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_one(key, s))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("{key}: list must not be empty")));
    }
    Ok(items)
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Usage(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

impl Settings {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let mut s = Settings::default();
        for (key, v) in raw {
            let k = key.as_str();
            match k {
                "method" => {
                    s.methods = if v == "both" {
                        vec![Method::Svgd, Method::Lsvgd]
                    } else {
                        parse_list(k, v)?
                    }
                }
                "target-file" => s.target_file = Some(PathBuf::from(v)),
                "particles" => s.particles = parse_list(k, v)?,
                "iters" => s.iters = Some(parse_one(k, v)?),
                "gamma" => {
                    s.gamma = parse_one(k, v)?;
                    if !raw.contains_key("gamma-list") {
                        s.gamma_list = vec![s.gamma];
                    }
                }
                "gamma-list" => s.gamma_list = parse_list(k, v)?,
                "step" => s.step = parse_one(k, v)?,
                "seed" => s.seed = parse_one(k, v)?,
                "seeds" => s.seeds = parse_list(k, v)?,
                "out" => s.out = Some(PathBuf::from(v)),
                "jobs" => s.jobs = parse_one(k, v)?,
                "update" => s.update = parse_update(v).map_err(CliError::Usage)?,
                "conditional" => s.conditional = parse_bool(k, v)?,
                "checkpoint-every" => s.checkpoint_every = parse_one(k, v)?,
                "init-seed" => s.init_seed = parse_one(k, v)?,
                "diag-every" => s.diag_every = parse_one(k, v)?,
                "kde-bandwidth" => s.kde_bandwidth = parse_one(k, v)?,
                "batch" => s.batch = parse_one(k, v)?,
                "lr" => s.lr = parse_one(k, v)?,
                "feature-step" => s.feature_step = parse_one(k, v)?,
                "feature-gamma" => s.feature_gamma = parse_one(k, v)?,
                "eval-samples" => s.eval_samples = parse_one(k, v)?,
                "aux" => s.aux = parse_bool(k, v)?,
                _ => return Err(CliError::Usage(format!("unknown key `{k}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.iters == Some(0) {
            return usage("iters must be at least 1");
        }
        if self.particles.contains(&0) {
            return usage("particles must be at least 1");
        }
        if self.jobs == 0 {
            return usage("jobs must be at least 1");
        }
        if self.diag_every == 0 {
            return usage("diag-every must be at least 1");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return usage("seeds must be distinct");
        }
        let mut methods = self.methods.clone();
        methods.sort_unstable();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return usage("methods must be distinct");
        }
        Ok(())
    }

    pub fn run_method(&self) -> Result<Method, CliError> {
        match self.methods.as_slice() {
            [] => Ok(Method::Lsvgd),
            [m] => Ok(*m),
            _ => Err(CliError::Usage("run takes a single method".into())),
        }
    }

    pub fn sweep_methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            vec![Method::Svgd, Method::Lsvgd]
        } else {
            self.methods.clone()
        }
    }

    /// The target from `target-file`, or the default bimodal mixture.
    pub fn target(&self) -> Result<GaussianMixture, CliError> {
        match &self.target_file {
            None => Ok(GaussianMixture::bimodal()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(p.clone(), e))?;
                parse_target(&text)
            }
        }
    }
}

/// One mixture component per line: `weight, mean_1, ..., mean_d, variance`
/// (commas or whitespace), `#` starts a comment.
pub fn parse_target(text: &str) -> Result<GaussianMixture, CliError> {
    let (mut weights, mut means, mut vars) = (Vec::new(), Vec::new(), Vec::new());
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CliError::Config {
            line: idx + 1,
            message,
        };
        let nums: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("bad number `{s}`: {e}"))))
            .collect::<Result<_, _>>()?;
        if nums.len() < 3 {
            return Err(err("expected weight, mean coordinates and variance".into()));
        }
        weights.push(nums[0]);
        means.push(nums[1..nums.len() - 1].to_vec());
        vars.push(nums[nums.len() - 1]);
    }
    Ok(GaussianMixture::new(weights, means, vars)?)
}
