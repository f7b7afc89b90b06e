//! Experiment configuration: a flat `key = value` file format.
//!
//! Lines starting with `#` and blank lines are ignored. Lists are
//! comma-separated; mixture means are `;`-separated vectors. `auto` selects
//! the built-in default for keys whose default depends on other keys.

use std::fmt;
use std::path::{Path, PathBuf};

use abcache::integrator::{Mode, SpacingPolicy, MAX_EXTRAPOLATION_ORDER};
use abcache::model::{GaussianOracle, MixtureComponent, MixtureOracle};
use abcache::sampler::SamplerConfig;
use abcache::schedule::{NoiseSchedule, ScheduleKind, Spacing};

pub const OUT_DIR_ENV: &str = "ABCACHE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "abcache-out";

const DEFAULT_MEAN: [f64; 8] = [1.0, -0.5, 0.25, 2.0, -1.0, 0.5, 0.0, 1.5];

/// A configuration problem. Always reported with exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleName {
    VpLinear,
    VpCosine,
    FlowLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Gaussian,
    Mixture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub schedule: ScheduleName,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_min: f64,
    /// `None` picks the schedule's default upper end.
    pub t_max: Option<f64>,

    pub oracle: OracleKind,
    pub dim: usize,
    /// `None` cycles a fixed 8-entry pattern up to `dim`.
    pub mean: Option<Vec<f64>>,
    pub std: f64,
    pub mixture_weights: Vec<f64>,
    /// `None` uses two alternating sign patterns.
    pub mixture_means: Option<Vec<Vec<f64>>>,
    pub mixture_stds: Vec<f64>,

    pub order: usize,
    pub interval: usize,
    pub steps: usize,
    pub mode: Mode,
    pub spacing: Spacing,
    pub strict: bool,
    pub final_eval: bool,
    pub warmup: usize,
    pub seed: u64,

    pub h_values: Vec<f64>,
    pub step_counts: Vec<usize>,
    pub window: (f64, f64),

    /// `None` falls back to the environment, then to `abcache-out`.
    pub out_dir: Option<PathBuf>,
    pub write_csv: bool,
    pub write_json: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleName::VpLinear,
            beta_min: 0.1,
            beta_max: 20.0,
            t_min: 1e-3,
            t_max: None,
            oracle: OracleKind::Gaussian,
            dim: 8,
            mean: None,
            std: 0.5,
            mixture_weights: vec![0.5, 0.5],
            mixture_means: None,
            mixture_stds: vec![0.1, 0.1],
            order: 3,
            interval: 3,
            steps: 50,
            mode: Mode::Diffusion,
            spacing: Spacing::UniformT,
            strict: false,
            final_eval: true,
            warmup: 0,
            seed: 0,
            h_values: vec![0.2, 0.1, 0.05, 0.025],
            step_counts: vec![25, 50, 100, 200],
            window: (-2.0, 2.0),
            out_dir: None,
            write_csv: true,
            write_json: true,
        }
    }
}

/// Documented keys, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("schedule", "vp-linear | vp-cosine | flow-linear"),
    ("beta_min", "VP-linear beta at t = 0"),
    ("beta_max", "VP-linear beta at t = 1"),
    ("t_min", "lower end of the time domain"),
    ("t_max", "upper end of the time domain, or auto"),
    ("oracle", "gaussian | mixture"),
    ("dim", "state dimension"),
    ("mean", "Gaussian mean (comma list of length dim), or auto"),
    ("std", "Gaussian data standard deviation"),
    ("mixture_weights", "mixture weights, summing to 1"),
    (
        "mixture_means",
        "mixture means, ';'-separated comma lists, or auto",
    ),
    ("mixture_stds", "per-component standard deviations"),
    ("order", "extrapolation order k, 1..4"),
    (
        "interval",
        "cache refresh interval T; 1 evaluates every step",
    ),
    ("steps", "number of sampler steps N"),
    ("mode", "diffusion (noise prediction) | flow (velocity)"),
    ("spacing", "uniform-t | uniform-lambda"),
    (
        "strict",
        "reject grids that are not uniform in the extrapolation coordinate",
    ),
    (
        "final_eval",
        "always evaluate the predictor on the last step",
    ),
    (
        "warmup",
        "leading steps that always evaluate; at least order",
    ),
    ("seed", "initial-noise seed"),
    ("h_values", "step sizes for the extrapolation study"),
    ("step_counts", "step counts for solver and sampler studies"),
    (
        "window",
        "log-SNR window of the extrapolation study, as lo,hi",
    ),
    ("out_dir", "output directory, or auto"),
    ("formats", "trajectory outputs: any of csv,json"),
];

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_list<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(",")
}

fn parse_f64(key: &str, s: &str) -> Result<f64, ConfigError> {
    let v: f64 = s
        .parse()
        .map_err(|_| bad(format!("{key}: '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(bad(format!("{key}: '{s}' is not finite")));
    }
    Ok(v)
}

fn parse_int<T: std::str::FromStr>(key: &str, s: &str) -> Result<T, ConfigError> {
    s.parse()
        .map_err(|_| bad(format!("{key}: '{s}' is not a non-negative integer")))
}

fn parse_bool(key: &str, s: &str) -> Result<bool, ConfigError> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(format!("{key}: expected true or false, got '{s}'"))),
    }
}

fn parse_f64_list(key: &str, s: &str) -> Result<Vec<f64>, ConfigError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| parse_f64(key, p.trim())).collect()
}

impl ExperimentConfig {
    /// Parses a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(bad(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let auto = value == "auto";
        match key {
            "schedule" => {
                self.schedule = match value {
                    "vp-linear" => ScheduleName::VpLinear,
                    "vp-cosine" => ScheduleName::VpCosine,
                    "flow-linear" => ScheduleName::FlowLinear,
                    _ => return Err(bad(format!("schedule: unknown kind '{value}'"))),
                }
            }
            "beta_min" => self.beta_min = parse_f64(key, value)?,
            "beta_max" => self.beta_max = parse_f64(key, value)?,
            "t_min" => self.t_min = parse_f64(key, value)?,
            "t_max" => {
                self.t_max = if auto {
                    None
                } else {
                    Some(parse_f64(key, value)?)
                }
            }
            "oracle" => {
                self.oracle = match value {
                    "gaussian" => OracleKind::Gaussian,
                    "mixture" => OracleKind::Mixture,
                    _ => return Err(bad(format!("oracle: unknown kind '{value}'"))),
                }
            }
            "dim" => self.dim = parse_int(key, value)?,
            "mean" => {
                self.mean = if auto {
                    None
                } else {
                    Some(parse_f64_list(key, value)?)
                }
            }
            "std" => self.std = parse_f64(key, value)?,
            "mixture_weights" => self.mixture_weights = parse_f64_list(key, value)?,
            "mixture_means" => {
                self.mixture_means = if auto {
                    None
                } else {
                    Some(
                        value
                            .split(';')
                            .map(|m| parse_f64_list(key, m.trim()))
                            .collect::<Result<_, _>>()?,
                    )
                }
            }
            "mixture_stds" => self.mixture_stds = parse_f64_list(key, value)?,
            "order" => self.order = parse_int(key, value)?,
            "interval" => self.interval = parse_int(key, value)?,
            "steps" => self.steps = parse_int(key, value)?,
            "mode" => {
                self.mode = match value {
                    "diffusion" => Mode::Diffusion,
                    "flow" => Mode::Flow,
                    _ => return Err(bad(format!("mode: unknown mode '{value}'"))),
                }
            }
            "spacing" => {
                self.spacing = match value {
                    "uniform-t" => Spacing::UniformT,
                    "uniform-lambda" => Spacing::UniformLambda,
                    _ => return Err(bad(format!("spacing: unknown spacing '{value}'"))),
                }
            }
            "strict" => self.strict = parse_bool(key, value)?,
            "final_eval" => self.final_eval = parse_bool(key, value)?,
            "warmup" => self.warmup = parse_int(key, value)?,
            "seed" => self.seed = parse_int(key, value)?,
            "h_values" => self.h_values = parse_f64_list(key, value)?,
            "step_counts" => {
                self.step_counts = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|p| parse_int(key, p.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "window" => {
                let v = parse_f64_list(key, value)?;
                if v.len() != 2 {
                    return Err(bad("window: expected lo,hi"));
                }
                self.window = (v[0], v[1]);
            }
            "out_dir" => {
                self.out_dir = if auto {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "formats" => {
                let (mut csv, mut json) = (false, false);
                for f in value.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                    match f {
                        "csv" => csv = true,
                        "json" => json = true,
                        _ => return Err(bad(format!("formats: unknown format '{f}'"))),
                    }
                }
                self.write_csv = csv;
                self.write_json = json;
            }
            _ => return Err(bad(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical `(key, value)` pairs; feeding them back through [`set`]
    /// reproduces `self` exactly.
    ///
    /// [`set`]: ExperimentConfig::set
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let auto = || "auto".to_string();
        KEYS.iter()
            .map(|&(key, _)| {
                let value = match key {
                    "schedule" => match self.schedule {
                        ScheduleName::VpLinear => "vp-linear",
                        ScheduleName::VpCosine => "vp-cosine",
                        ScheduleName::FlowLinear => "flow-linear",
                    }
                    .to_string(),
                    "beta_min" => fmt_f64(self.beta_min),
                    "beta_max" => fmt_f64(self.beta_max),
                    "t_min" => fmt_f64(self.t_min),
                    "t_max" => self.t_max.map_or_else(auto, fmt_f64),
                    "oracle" => match self.oracle {
                        OracleKind::Gaussian => "gaussian",
                        OracleKind::Mixture => "mixture",
                    }
                    .to_string(),
                    "dim" => self.dim.to_string(),
                    "mean" => self
                        .mean
                        .as_ref()
                        .map_or_else(auto, |m| fmt_list(m, |v| fmt_f64(*v))),
                    "std" => fmt_f64(self.std),
                    "mixture_weights" => fmt_list(&self.mixture_weights, |v| fmt_f64(*v)),
                    "mixture_means" => self.mixture_means.as_ref().map_or_else(auto, |ms| {
                        ms.iter()
                            .map(|m| fmt_list(m, |v| fmt_f64(*v)))
                            .collect::<Vec<_>>()
                            .join(";")
                    }),
                    "mixture_stds" => fmt_list(&self.mixture_stds, |v| fmt_f64(*v)),
                    "order" => self.order.to_string(),
                    "interval" => self.interval.to_string(),
                    "steps" => self.steps.to_string(),
                    "mode" => match self.mode {
                        Mode::Diffusion => "diffusion",
                        Mode::Flow => "flow",
                    }
                    .to_string(),
                    "spacing" => match self.spacing {
                        Spacing::UniformT => "uniform-t",
                        Spacing::UniformLambda => "uniform-lambda",
                    }
                    .to_string(),
                    "strict" => self.strict.to_string(),
                    "final_eval" => self.final_eval.to_string(),
                    "warmup" => self.warmup.to_string(),
                    "seed" => self.seed.to_string(),
                    "h_values" => fmt_list(&self.h_values, |v| fmt_f64(*v)),
                    "step_counts" => fmt_list(&self.step_counts, |v| v.to_string()),
                    "window" => format!("{},{}", fmt_f64(self.window.0), fmt_f64(self.window.1)),
                    "out_dir" => self
                        .out_dir
                        .as_ref()
                        .map_or_else(auto, |p| p.display().to_string()),
                    "formats" => {
                        let mut f = Vec::new();
                        if self.write_csv {
                            f.push("csv");
                        }
                        if self.write_json {
                            f.push("json");
                        }
                        f.join(",")
                    }
                    _ => unreachable!("key table and serializer out of sync"),
                };
                (key, value)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, ConfigError> {
        let kind = match self.schedule {
            ScheduleName::VpLinear => ScheduleKind::VpLinear {
                beta_min: self.beta_min,
                beta_max: self.beta_max,
            },
            ScheduleName::VpCosine => ScheduleKind::VpCosine,
            ScheduleName::FlowLinear => ScheduleKind::FlowLinear,
        };
        let t_max = self.t_max.unwrap_or_else(|| kind.default_t_max());
        NoiseSchedule::new(kind, self.t_min, t_max).map_err(|e| bad(format!("schedule: {e}")))
    }

    pub fn sampler(&self) -> Result<SamplerConfig, ConfigError> {
        if self.order == 0 || self.order > MAX_EXTRAPOLATION_ORDER {
            return Err(bad(format!(
                "order: {} is not supported; supported range is 1..{MAX_EXTRAPOLATION_ORDER} inclusive",
                self.order
            )));
        }
        let cfg = SamplerConfig {
            order: self.order,
            cache_interval: self.interval,
            n_steps: self.steps,
            mode: self.mode,
            spacing: self.spacing,
            policy: if self.strict {
                SpacingPolicy::Strict
            } else {
                SpacingPolicy::Lenient
            },
            force_final_eval: self.final_eval,
            warmup: self.warmup,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| bad(format!("sampler: {e}")))?;
        let needed = match self.mode {
            Mode::Diffusion => Spacing::UniformLambda,
            Mode::Flow => Spacing::UniformT,
        };
        if self.strict && self.interval > 1 && self.spacing != needed {
            return Err(bad(format!(
                "strict: {} mode extrapolates on a grid that must be {}",
                if self.mode == Mode::Flow {
                    "flow"
                } else {
                    "diffusion"
                },
                if needed == Spacing::UniformT {
                    "uniform-t"
                } else {
                    "uniform-lambda"
                },
            )));
        }
        if self.interval > 1 && self.steps < self.order {
            return Err(bad(format!(
                "steps: {} steps cannot fill a cache of order {}",
                self.steps, self.order
            )));
        }
        Ok(cfg)
    }

    pub fn gaussian(&self) -> Result<GaussianOracle, ConfigError> {
        let mean = match &self.mean {
            Some(m) => m.clone(),
            None => pattern(self.dim, 0),
        };
        if mean.len() != self.dim {
            return Err(bad(format!(
                "mean: {} entries for dim {}",
                mean.len(),
                self.dim
            )));
        }
        GaussianOracle::new(mean, self.std, self.schedule()?)
            .map_err(|e| bad(format!("oracle: {e}")))
    }

    pub fn mixture(&self) -> Result<MixtureOracle, ConfigError> {
        let n = self.mixture_weights.len();
        let means = match &self.mixture_means {
            Some(m) => m.clone(),
            None => (0..n).map(|c| pattern(self.dim, c)).collect(),
        };
        if means.len() != n || self.mixture_stds.len() != n {
            return Err(bad(format!(
                "mixture: {n} weights, {} means and {} stds",
                means.len(),
                self.mixture_stds.len()
            )));
        }
        if let Some(m) = means.iter().find(|m| m.len() != self.dim) {
            return Err(bad(format!(
                "mixture_means: {} entries for dim {}",
                m.len(),
                self.dim
            )));
        }
        let components = self
            .mixture_weights
            .iter()
            .zip(means)
            .zip(&self.mixture_stds)
            .map(|((&weight, mean), &std)| MixtureComponent { weight, mean, std })
            .collect();
        MixtureOracle::new(components, self.schedule()?).map_err(|e| bad(format!("oracle: {e}")))
    }

    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

// Default means: the fixed pattern for the first component, then sign
// flips and shifts so mixture components are well separated.
fn pattern(dim: usize, component: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let base = DEFAULT_MEAN[i % DEFAULT_MEAN.len()];
            match component {
                0 => base,
                c => -base + 0.5 * c as f64,
            }
        })
        .collect()
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let defaults = ExperimentConfig::default().to_pairs();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out =
        String::from("Config keys (file: one `key = value` per line; default in brackets):\n");
    for ((key, doc), (_, default)) in KEYS.iter().zip(defaults) {
        out.push_str(&format!("  {key:<width$}  {doc} [{default}]\n"));
    }
    out.push_str(&format!(
        "\nPrecedence: command-line flags > config file > defaults.\n\
         The output directory falls back to ${OUT_DIR_ENV}, then ./{DEFAULT_OUT_DIR}.\n"
    ));
    out
}
