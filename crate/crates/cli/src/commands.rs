use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::Context as _;
use num_rational::Rational64;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use abcache::analysis::{
    cached_output_convergence, estimate_order, first_order_convergence, max_extrapolation_error,
    scale_factor_csv, scale_factor_curve, similarity_curve, speedup_report, CostModel,
    ExtrapolationStudy,
};
use abcache::integrator::{ab_weights, Mode};
use abcache::model::{
    exact_marginal_trajectory, CountingPredictor, FlowVelocity, GaussianOracle, MixtureOracle,
    Predictor,
};
use abcache::sampler::{initial_noise, run_ab_cache, run_baseline, SamplerConfig, Trajectory};
use abcache::schedule::make_grid;

use crate::config::{ConfigError, ExperimentConfig, OracleKind};
use crate::Study;

enum Oracle {
    Gaussian(GaussianOracle),
    Mixture(MixtureOracle),
}

impl Predictor for Oracle {
    fn dim(&self) -> usize {
        match self {
            Oracle::Gaussian(o) => o.dim(),
            Oracle::Mixture(o) => o.dim(),
        }
    }

    fn predict(&self, x: &[f64], t: f64) -> abcache::Result<Vec<f64>> {
        match self {
            Oracle::Gaussian(o) => o.predict(x, t),
            Oracle::Mixture(o) => o.predict(x, t),
        }
    }
}

/// Spins for a fixed time before delegating, so wall-clock numbers reflect
/// an expensive predictor.
struct Delayed<P> {
    inner: P,
    delay: Duration,
}

impl<P: Predictor> Predictor for Delayed<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict(&self, x: &[f64], t: f64) -> abcache::Result<Vec<f64>> {
        let start = Instant::now();
        while start.elapsed() < self.delay {
            std::hint::spin_loop();
        }
        self.inner.predict(x, t)
    }
}

fn oracle(cfg: &ExperimentConfig) -> Result<Oracle, ConfigError> {
    Ok(match cfg.oracle {
        OracleKind::Gaussian => Oracle::Gaussian(cfg.gaussian()?),
        OracleKind::Mixture => Oracle::Mixture(cfg.mixture()?),
    })
}

/// Noise predictor in diffusion mode, velocity in flow mode.
fn predictor(cfg: &ExperimentConfig) -> Result<Box<dyn Predictor>, ConfigError> {
    let oracle = oracle(cfg)?;
    Ok(match cfg.mode {
        Mode::Diffusion => Box::new(oracle),
        Mode::Flow => Box::new(FlowVelocity::new(oracle, cfg.schedule()?)),
    })
}

fn out_dir(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.resolved_out_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Prints a line to stdout; a closed pipe is not an error worth failing on.
fn say(line: &str) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    say(&format!("wrote {}", path.display()));
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(dir, name, &text)
}

/// Config echo for JSON outputs. The output directory is left out so that
/// identical runs into different directories produce identical files.
fn config_json(cfg: &ExperimentConfig) -> Value {
    let map: Map<String, Value> = cfg
        .to_pairs()
        .into_iter()
        .filter(|(k, _)| *k != "out_dir")
        .map(|(k, v)| (k.to_string(), Value::String(v)))
        .collect();
    Value::Object(map)
}

fn endpoint_error(
    cfg: &ExperimentConfig,
    traj: &Trajectory,
    x0: &[f64],
) -> anyhow::Result<Option<f64>> {
    if cfg.oracle != OracleKind::Gaussian {
        return Ok(None);
    }
    let g = cfg.gaussian()?;
    let s = g.schedule();
    let exact = exact_marginal_trajectory(&g, x0, s.t_max(), traj.final_t)?;
    Ok(Some(abcache::vecops::max_abs_diff(
        &traj.final_state,
        &exact,
    )))
}

fn run_sampler<P: Predictor>(
    sampler: &SamplerConfig,
    p: &CountingPredictor<P>,
    cfg: &ExperimentConfig,
    x0: &[f64],
) -> anyhow::Result<Trajectory> {
    let schedule = cfg.schedule()?;
    Ok(if sampler.cache_interval == 1 {
        run_baseline(sampler, p, &schedule, x0)?
    } else {
        run_ab_cache(sampler, p, &schedule, x0)?
    })
}

pub fn sample(cfg: &ExperimentConfig, baseline: bool) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if baseline {
        cfg.interval = 1;
    }
    let sampler = cfg.sampler()?;
    let model = predictor(&cfg)?;
    let x0 = initial_noise(cfg.dim, cfg.seed);
    let traj = run_sampler(&sampler, &CountingPredictor::new(&model), &cfg, &x0)?;

    let dir = out_dir(&cfg)?;
    if cfg.write_csv {
        write(&dir, "trajectory.csv", &traj.to_csv(&model)?)?;
    }
    if cfg.write_json {
        let summary = json!({
            "config": config_json(&cfg),
            "summary": traj.summary(),
            "speedup": speedup_report(&traj, CostModel::default()),
            "max_extrapolation_error": max_extrapolation_error(&traj, &model)?,
            "endpoint_error_vs_exact": endpoint_error(&cfg, &traj, &x0)?,
        });
        write_json(&dir, "summary.json", &summary)?;
    }
    Ok(())
}

pub fn convergence(
    cfg: &ExperimentConfig,
    study: Study,
    synthetic_order: i32,
) -> anyhow::Result<()> {
    let x0 = initial_noise(cfg.dim, cfg.seed);
    let need_gaussian = || -> Result<GaussianOracle, ConfigError> {
        if cfg.oracle != OracleKind::Gaussian {
            return Err(ConfigError("this study needs the gaussian oracle".into()));
        }
        cfg.gaussian()
    };
    if matches!(study, Study::Extrapolation | Study::Synthetic) && cfg.h_values.len() < 2 {
        return Err(ConfigError("h_values: need at least two step sizes".into()).into());
    }
    if matches!(study, Study::Solver | Study::Sampler) && cfg.step_counts.len() < 2 {
        return Err(ConfigError("step_counts: need at least two entries".into()).into());
    }

    let (name, expected, points): (&str, f64, Vec<(f64, f64)>) = match study {
        Study::Extrapolation => {
            let sampler = cfg.sampler()?;
            let study = ExtrapolationStudy {
                oracle: need_gaussian()?,
                x_start: x0,
                window: cfg.window,
                mode: Mode::Diffusion,
            };
            let points = cfg
                .h_values
                .par_iter()
                .map(|&h| Ok((h, study.max_error(sampler.order, h)?)))
                .collect::<abcache::Result<Vec<_>>>()?;
            ("extrapolation", sampler.order as f64, points)
        }
        Study::Solver => {
            let oracle = need_gaussian()?;
            let points = cfg
                .step_counts
                .par_iter()
                .map(|&n| first_order_convergence(&oracle, &x0, &[n], cfg.spacing).map(|v| v[0]))
                .collect::<abcache::Result<Vec<_>>>()?;
            ("solver", 1.0, points)
        }
        Study::Sampler => {
            let sampler = cfg.sampler()?;
            let model = predictor(cfg)?;
            let schedule = cfg.schedule()?;
            if let Some(&n) = cfg.step_counts.iter().find(|&&n| n < sampler.order) {
                return Err(
                    ConfigError(format!("step_counts: {n} steps cannot fill the cache")).into(),
                );
            }
            let points = cfg
                .step_counts
                .par_iter()
                .map(|&n| {
                    cached_output_convergence(&sampler, &model, &schedule, &x0, &[n]).map(|v| v[0])
                })
                .collect::<abcache::Result<Vec<_>>>()?;
            ("sampler", sampler.order as f64, points)
        }
        Study::Synthetic => {
            if synthetic_order < 1 {
                return Err(ConfigError("synthetic-order must be at least 1".into()).into());
            }
            let points = cfg
                .h_values
                .iter()
                .map(|&h| (h, h.powi(synthetic_order)))
                .collect();
            ("synthetic", synthetic_order as f64, points)
        }
    };

    let estimate = estimate_order(&points)?;
    say(&format!(
        "{name}: mean order {:.4} (expected {expected}), pairwise {:?}",
        estimate.mean_order, estimate.pairwise_orders
    ));
    let dir = out_dir(cfg)?;
    let report = json!({
        "study": name,
        "expected_order": expected,
        "config": config_json(cfg),
        "estimate": estimate,
    });
    write_json(&dir, "convergence.json", &report)
}

pub fn scale_factor(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    if cfg.steps < 2 {
        return Err(
            ConfigError("steps: the scale factor needs at least 2 steps (3 nodes)".into()).into(),
        );
    }
    let schedule = cfg.schedule()?;
    let grid = make_grid(&schedule, cfg.steps, cfg.spacing)?;
    let curve = scale_factor_curve(&schedule, &grid)?;
    write(
        &out_dir(cfg)?,
        "scale_factor.csv",
        &scale_factor_csv(&curve),
    )
}

pub fn similarity(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    cfg.interval = 1;
    let sampler = cfg.sampler()?;
    if sampler.n_steps < 2 {
        return Err(ConfigError("steps: similarity needs at least 2 steps".into()).into());
    }
    let model = predictor(&cfg)?;
    let x0 = initial_noise(cfg.dim, cfg.seed);
    let traj = run_sampler(&sampler, &CountingPredictor::new(&model), &cfg, &x0)?;
    let curve = similarity_curve(&traj.eps_sequence())?;
    write(&out_dir(&cfg)?, "similarity.csv", &curve.to_csv())
}

/// Weights as reduced fractions, or all over one denominator.
pub fn format_weights(weights: &[Rational64], common_denominator: bool) -> String {
    if !common_denominator {
        return weights
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(" ");
    }
    let lcm = weights
        .iter()
        .fold(1i64, |acc, w| num_integer_lcm(acc, *w.denom()));
    weights
        .iter()
        .map(|w| {
            let n = w.numer() * (lcm / w.denom());
            if lcm == 1 {
                n.to_string()
            } else {
                format!("{n}/{lcm}")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn num_integer_lcm(a: i64, b: i64) -> i64 {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

pub fn weights(k: usize, common_denominator: bool) -> anyhow::Result<()> {
    let w = ab_weights(k).map_err(|e| ConfigError(format!("k: {e}")))?;
    say(&format_weights(w.exact(), common_denominator));
    Ok(())
}

#[derive(Serialize)]
struct BenchRun {
    n_network_evals: usize,
    best_seconds: f64,
    endpoint_error_vs_exact: Option<f64>,
}

pub fn bench(cfg: &ExperimentConfig, repeats: usize, eval_delay_us: u64) -> anyhow::Result<()> {
    if repeats == 0 {
        return Err(ConfigError("repeats must be at least 1".into()).into());
    }
    let sampler = cfg.sampler()?;
    let base_cfg = SamplerConfig {
        cache_interval: 1,
        ..sampler
    };
    let model = Delayed {
        inner: predictor(cfg)?,
        delay: Duration::from_micros(eval_delay_us),
    };
    let x0 = initial_noise(cfg.dim, cfg.seed);

    let time = |sc: &SamplerConfig| -> anyhow::Result<(Trajectory, f64)> {
        let mut best = f64::INFINITY;
        let mut last = None;
        for _ in 0..repeats {
            let start = Instant::now();
            let traj = run_sampler(sc, &CountingPredictor::new(&model), cfg, &x0)?;
            best = best.min(start.elapsed().as_secs_f64());
            last = Some(traj);
        }
        Ok((last.expect("repeats >= 1"), best))
    };
    let (base, base_t) = time(&base_cfg)?;
    let (cached, cached_t) = time(&sampler)?;

    let report = json!({
        "config": config_json(cfg),
        "eval_delay_us": eval_delay_us,
        "repeats": repeats,
        "baseline": BenchRun {
            n_network_evals: base.n_network_evals,
            best_seconds: base_t,
            endpoint_error_vs_exact: endpoint_error(cfg, &base, &x0)?,
        },
        "cached": BenchRun {
            n_network_evals: cached.n_network_evals,
            best_seconds: cached_t,
            endpoint_error_vs_exact: endpoint_error(cfg, &cached, &x0)?,
        },
        "speedup": speedup_report(&cached, CostModel::default()),
        "wall_clock_speedup": base_t / cached_t,
    });
    say(&format!(
        "baseline {} evals {:.3e}s, cached {} evals {:.3e}s, eval speedup {:.3}, wall-clock speedup {:.3}",
        base.n_network_evals,
        base_t,
        cached.n_network_evals,
        cached_t,
        base.n_network_evals as f64 / cached.n_network_evals as f64,
        base_t / cached_t
    ));
    write_json(&out_dir(cfg)?, "bench.json", &report)
}
