//! Denoising loops: the uncached baseline and the Adams-Bashforth cache.
//!
//! The cached loop evaluates the predictor during a warm-up of at least `k` steps,
//! then only on steps whose index is a multiple of the cache interval `T`
//! (and, optionally, on the final step). Every other step reconstructs the
//! output from the last `k` real evaluations.

mod cache;
mod step;
mod trajectory;

pub use cache::{CacheEntry, OutputCache};
pub use step::{
    first_order_step, flow_euler_step, scale_factor, scale_factor_simplified,
    scale_factor_with_residual,
};
pub use trajectory::{StepRecord, Trajectory, TrajectorySummary, TRAJECTORY_CSV_HEADER};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{Mode, SpacingPolicy, MAX_EXTRAPOLATION_ORDER, SPACING_RTOL};
use crate::model::{CountingPredictor, Predictor};
use crate::schedule::{make_grid, NoiseSchedule, Spacing, StepGrid};
use crate::vecops::check_dim;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of cached outputs combined per extrapolation.
    pub order: usize,
    /// Evaluate on steps with `n % cache_interval == 0`; 1 disables caching.
    pub cache_interval: usize,
    pub n_steps: usize,
    pub mode: Mode,
    pub spacing: Spacing,
    pub policy: SpacingPolicy,
    /// Always evaluate the predictor on the last step.
    pub force_final_eval: bool,
    /// Leading steps that always evaluate; raised to `order` if smaller.
    /// Lets runs of different order share one evaluation budget.
    #[serde(default)]
    pub warmup: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            order: 3,
            cache_interval: 3,
            n_steps: 50,
            mode: Mode::Diffusion,
            spacing: Spacing::UniformT,
            policy: SpacingPolicy::Lenient,
            force_final_eval: true,
            warmup: 0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.order > MAX_EXTRAPOLATION_ORDER {
            return Err(Error::UnsupportedOrder {
                order: self.order,
                min: 1,
                max: MAX_EXTRAPOLATION_ORDER,
            });
        }
        if self.cache_interval == 0 {
            return Err(Error::InvalidArgument(
                "cache interval must be at least 1".into(),
            ));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether step `n` calls the predictor.
    pub fn evaluates_at(&self, n: usize) -> bool {
        n < self.order.max(self.warmup)
            || n.is_multiple_of(self.cache_interval)
            || (self.force_final_eval && n + 1 == self.n_steps)
    }

    /// Number of predictor calls a cached run will make.
    pub fn expected_evals(&self) -> usize {
        (0..self.n_steps).filter(|&n| self.evaluates_at(n)).count()
    }
}

/// Standard normal initial state drawn from a seeded ChaCha stream.
pub fn initial_noise(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Evaluates the predictor on every step.
pub fn run_baseline<P: Predictor>(
    config: &SamplerConfig,
    predictor: &CountingPredictor<P>,
    schedule: &NoiseSchedule,
    x_init: &[f64],
) -> Result<Trajectory> {
    let cfg = SamplerConfig {
        cache_interval: 1,
        ..*config
    };
    run(&cfg, predictor, schedule, x_init, |_| true)
}

/// Runs the cached sampler.
pub fn run_ab_cache<P: Predictor>(
    config: &SamplerConfig,
    predictor: &CountingPredictor<P>,
    schedule: &NoiseSchedule,
    x_init: &[f64],
) -> Result<Trajectory> {
    config.validate()?;
    if config.n_steps < config.order {
        return Err(Error::InsufficientHistory {
            needed: config.order,
            have: config.n_steps,
        });
    }
    run(config, predictor, schedule, x_init, |n| {
        config.evaluates_at(n)
    })
}

fn check_strict_spacing(grid: &StepGrid, mode: Mode) -> Result<()> {
    let deviation = match mode {
        Mode::Diffusion => grid.relative_spacing_deviation(),
        Mode::Flow => {
            let times = grid.times();
            let h = (times[times.len() - 1] - times[0]) / grid.n_steps() as f64;
            times
                .windows(2)
                .map(|w| ((w[1] - w[0] - h) / h).abs())
                .fold(0.0, f64::max)
        }
    };
    if deviation > SPACING_RTOL {
        return Err(Error::Spacing(format!(
            "grid increments deviate from uniform by {deviation:.3e} (relative)"
        )));
    }
    Ok(())
}

fn run<P: Predictor>(
    config: &SamplerConfig,
    predictor: &CountingPredictor<P>,
    schedule: &NoiseSchedule,
    x_init: &[f64],
    evaluate: impl Fn(usize) -> bool,
) -> Result<Trajectory> {
    check_dim(predictor.dim(), x_init.len())?;
    let grid = make_grid(schedule, config.n_steps, config.spacing)?;
    if config.policy == SpacingPolicy::Strict {
        check_strict_spacing(&grid, config.mode)?;
    }
    let times = grid.times();
    let lambdas = grid.lambdas();
    let mut cache = OutputCache::new(config.order);
    let mut records = Vec::with_capacity(config.n_steps);
    let mut x = x_init.to_vec();
    let (mut evals, mut extrapolations) = (0, 0);

    for n in 0..config.n_steps {
        let (t, lam) = (times[n], lambdas[n]);
        let coord = match config.mode {
            Mode::Diffusion => lam,
            Mode::Flow => t,
        };
        let was_cached = !evaluate(n);
        let eps = if was_cached {
            extrapolations += 1;
            cache.extrapolate(coord, config.mode)?
        } else {
            evals += 1;
            let eps = predictor.evaluate(&x, t)?;
            cache.push(CacheEntry {
                coord,
                lambda: lam,
                eps: eps.clone(),
                step_index: n,
            })?;
            eps
        };
        let next = match config.mode {
            Mode::Diffusion => first_order_step(&x, t, times[n + 1], &eps, schedule)?,
            Mode::Flow => flow_euler_step(&x, t, times[n + 1], &eps)?,
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular(format!("non-finite state after step {n}")));
        }
        records.push(StepRecord {
            step_index: n,
            t,
            lambda: lam,
            x: std::mem::replace(&mut x, next),
            eps_used: eps,
            was_cached,
        });
    }

    Ok(Trajectory {
        mode: config.mode,
        records,
        final_t: times[config.n_steps],
        final_lambda: lambdas[config.n_steps],
        final_state: x,
        n_network_evals: evals,
        n_extrapolations: extrapolations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{exact_marginal_trajectory, FlowVelocity, GaussianOracle};

    fn setup() -> (NoiseSchedule, CountingPredictor<GaussianOracle>) {
        let s = NoiseSchedule::vp_linear(0.1, 20.0).unwrap();
        let o = GaussianOracle::new(vec![1.0, -0.5, 0.25, 2.0], 0.5, s).unwrap();
        (s, CountingPredictor::new(o))
    }

    #[test]
    fn accounting_matches_refresh_rule() {
        let (s, p) = setup();
        let cfg = SamplerConfig {
            order: 3,
            cache_interval: 3,
            n_steps: 50,
            force_final_eval: false,
            ..Default::default()
        };
        let x = initial_noise(4, 7);
        let traj = run_ab_cache(&cfg, &p, &s, &x).unwrap();
        assert_eq!(traj.n_network_evals, 19);
        assert_eq!(traj.n_extrapolations, 31);
        assert_eq!(p.eval_count(), 19);
        assert_eq!(cfg.expected_evals(), 19);
    }

    #[test]
    fn final_step_policy_adds_one_eval() {
        let (s, p) = setup();
        let cfg = SamplerConfig {
            order: 3,
            cache_interval: 3,
            n_steps: 50,
            force_final_eval: true,
            ..Default::default()
        };
        let traj = run_ab_cache(&cfg, &p, &s, &initial_noise(4, 7)).unwrap();
        assert_eq!(traj.n_network_evals, 20);
        assert!(!traj.records[49].was_cached);
    }

    #[test]
    fn interval_one_matches_baseline_bitwise() {
        let (s, p) = setup();
        let cfg = SamplerConfig {
            cache_interval: 1,
            n_steps: 30,
            ..Default::default()
        };
        let x = initial_noise(4, 3);
        let a = run_ab_cache(&cfg, &p, &s, &x).unwrap();
        let b = run_baseline(&cfg, &p, &s, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_single_step() {
        let (s, p) = setup();
        let cfg = SamplerConfig {
            n_steps: 1,
            ..Default::default()
        };
        let x = initial_noise(4, 1);
        let traj = run_baseline(&cfg, &p, &s, &x).unwrap();
        let eps = p.inner().eps(&x, s.t_max()).unwrap();
        let want = first_order_step(&x, s.t_max(), s.t_min(), &eps, &s).unwrap();
        assert_eq!(traj.final_state, want);
        assert_eq!(p.eval_count(), 1);
    }

    #[test]
    fn baseline_converges_to_exact_reference() {
        // first-order global error; a sweep over N = 25..800 gives about
        // 4e-3 relative at N = 200, halving with each doubling of N
        let (s, p) = setup();
        let cfg = SamplerConfig {
            n_steps: 200,
            spacing: Spacing::UniformLambda,
            ..Default::default()
        };
        let x = initial_noise(4, 11);
        let traj = run_baseline(&cfg, &p, &s, &x).unwrap();
        let exact = exact_marginal_trajectory(p.inner(), &x, s.t_max(), s.t_min()).unwrap();
        let err = crate::vecops::max_abs_diff(&traj.final_state, &exact);
        assert!(err <= 1e-2 * crate::vecops::max_abs(&exact), "err {err}");
        assert_eq!(traj.n_network_evals, 200);
    }

    #[test]
    fn deterministic_runs() {
        let (s, p) = setup();
        let cfg = SamplerConfig::default();
        let x = initial_noise(4, cfg.seed);
        assert_eq!(initial_noise(4, cfg.seed), x);
        let a = run_ab_cache(&cfg, &p, &s, &x).unwrap();
        let b = run_ab_cache(&cfg, &p, &s, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extrapolated_outputs_never_enter_cache() {
        let (s, p) = setup();
        let cfg = SamplerConfig {
            order: 2,
            cache_interval: 4,
            n_steps: 20,
            force_final_eval: false,
            ..Default::default()
        };
        let traj = run_ab_cache(&cfg, &p, &s, &initial_noise(4, 2)).unwrap();
        for r in &traj.records {
            assert_eq!(r.was_cached, !(r.step_index < 2 || r.step_index % 4 == 0));
        }
    }

    #[test]
    fn config_errors() {
        let (s, p) = setup();
        let x = initial_noise(4, 0);
        let bad = SamplerConfig {
            order: 5,
            ..Default::default()
        };
        assert!(matches!(
            run_ab_cache(&bad, &p, &s, &x),
            Err(Error::UnsupportedOrder { .. })
        ));
        let short = SamplerConfig {
            order: 3,
            n_steps: 2,
            ..Default::default()
        };
        assert!(matches!(
            run_ab_cache(&short, &p, &s, &x),
            Err(Error::InsufficientHistory { .. })
        ));
        let strict = SamplerConfig {
            policy: SpacingPolicy::Strict,
            spacing: Spacing::UniformT,
            ..Default::default()
        };
        assert!(matches!(
            run_ab_cache(&strict, &p, &s, &x),
            Err(Error::Spacing(_))
        ));
        assert!(run_ab_cache(&SamplerConfig::default(), &p, &s, &[1.0]).is_err());
    }

    #[test]
    fn flow_mode_accounting() {
        let f = NoiseSchedule::flow_linear();
        let o = GaussianOracle::new(vec![1.0, -1.0], 0.5, f).unwrap();
        let p = CountingPredictor::new(FlowVelocity::new(o, f));
        let cfg = SamplerConfig {
            mode: Mode::Flow,
            policy: SpacingPolicy::Strict,
            force_final_eval: false,
            ..Default::default()
        };
        let traj = run_ab_cache(&cfg, &p, &f, &initial_noise(2, 5)).unwrap();
        assert_eq!(traj.n_network_evals + traj.n_extrapolations, 50);
        assert_eq!(traj.n_network_evals as u64, p.eval_count());
        let one = SamplerConfig {
            cache_interval: 1,
            ..cfg
        };
        let x = initial_noise(2, 5);
        assert_eq!(
            run_ab_cache(&one, &p, &f, &x).unwrap(),
            run_baseline(&one, &p, &f, &x).unwrap()
        );
    }

    #[test]
    fn csv_layout() {
        let (s, p) = setup();
        let cfg = SamplerConfig {
            n_steps: 5,
            order: 2,
            cache_interval: 2,
            ..Default::default()
        };
        let traj = run_ab_cache(&cfg, &p, &s, &initial_noise(4, 0)).unwrap();
        let csv = traj.to_csv(p.inner()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRAJECTORY_CSV_HEADER);
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0][3], "0");
        assert_eq!(rows[0][4].parse::<f64>().unwrap(), 0.0);
        assert_eq!(rows[3][3], "1");
        assert_eq!(rows[1][1].parse::<f64>().unwrap(), traj.records[1].t);
    }
}
