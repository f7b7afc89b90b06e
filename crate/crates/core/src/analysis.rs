//! Measurements over trajectories and schedules.
//!
//! Order studies use the max-norm over the measured window; L2 is reported
//! alongside where a study returns per-point data. Similarity curves here are
//! taken on full predictor outputs of analytic oracles, not on internal
//! network features.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{extrapolate_output, extrapolation_coefficients, Mode};
use crate::model::{exact_marginal_trajectory, CountingPredictor, GaussianOracle, Predictor};
use crate::sampler::{
    first_order_step, run_ab_cache, scale_factor_with_residual, SamplerConfig, Trajectory,
};
use crate::schedule::{make_grid, NoiseSchedule, Spacing, StepGrid};
use crate::vecops::{cosine, max_abs_diff, norm};

/// Floor on the denominator of the relative distance.
pub const REL_L2_FLOOR: f64 = 1e-12;

pub const SIMILARITY_CSV_HEADER: &str = "step_index,rel_l2,cosine";
pub const SCALE_FACTOR_CSV_HEADER: &str = "step_index,t,lambda,h,r,premise_residual";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityPoint {
    pub step_index: usize,
    pub rel_l2: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityCurve {
    pub points: Vec<SimilarityPoint>,
}

impl SimilarityCurve {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SIMILARITY_CSV_HEADER}\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:.16e},{:.16e}", p.step_index, p.rel_l2, p.cosine);
        }
        out
    }
}

/// Relative L2 distance and cosine similarity between consecutive outputs,
/// for steps `1..N-1`.
pub fn similarity_curve<V: AsRef<[f64]>>(outputs: &[V]) -> Result<SimilarityCurve> {
    if outputs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "similarity needs at least 2 outputs, got {}",
            outputs.len()
        )));
    }
    let points = outputs
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (prev, cur) = (w[0].as_ref(), w[1].as_ref());
            let diff: Vec<f64> = cur.iter().zip(prev).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(prev).max(REL_L2_FLOOR);
            SimilarityPoint {
                step_index: i + 1,
                rel_l2: if rel.is_nan() { f64::INFINITY } else { rel },
                cosine: cosine(cur, prev),
            }
        })
        .collect();
    Ok(SimilarityCurve { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleFactorPoint {
    /// Index of the middle node `s` of the triple `(o, s, t)`.
    pub step_index: usize,
    pub t: f64,
    pub lambda: f64,
    /// `lambda_t - lambda_s`.
    pub h: f64,
    pub r: f64,
    /// `(lambda_t - lambda_s) - (lambda_s - lambda_o)`; zero on uniform grids.
    pub premise_residual: f64,
}

pub fn scale_factor_curve(
    schedule: &NoiseSchedule,
    grid: &StepGrid,
) -> Result<Vec<ScaleFactorPoint>> {
    let times = grid.times();
    if times.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "scale-factor curve needs at least 3 grid nodes, got {}",
            times.len()
        )));
    }
    (1..times.len() - 1)
        .map(|i| {
            let (o, s, t) = (times[i - 1], times[i], times[i + 1]);
            let (r, residual) = scale_factor_with_residual(schedule, t, s, o)?;
            Ok(ScaleFactorPoint {
                step_index: i,
                t: s,
                lambda: grid.lambdas()[i],
                h: grid.lambdas()[i + 1] - grid.lambdas()[i],
                r,
                premise_residual: residual,
            })
        })
        .collect()
}

pub fn scale_factor_csv(points: &[ScaleFactorPoint]) -> String {
    let mut out = format!("{SCALE_FACTOR_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            p.step_index, p.t, p.lambda, p.h, p.r, p.premise_residual
        );
    }
    out
}

/// Empirical convergence order from errors at successively refined steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderEstimate {
    pub h_values: Vec<f64>,
    pub errors: Vec<f64>,
    /// `log(e_i / e_{i+1}) / log(h_i / h_{i+1})` for each adjacent pair.
    pub pairwise_orders: Vec<f64>,
    pub mean_order: f64,
    /// `max - min` over the pairwise orders.
    pub spread: f64,
}

/// Estimates the order from `(h, error)` pairs; needs at least three
/// distinct step sizes and positive errors.
pub fn estimate_order(errors_by_h: &[(f64, f64)]) -> Result<OrderEstimate> {
    if errors_by_h.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "order estimation needs at least 3 step sizes, got {}",
            errors_by_h.len()
        )));
    }
    let mut pairs = errors_by_h.to_vec();
    for &(h, e) in &pairs {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step sizes must be positive, got {h}"
            )));
        }
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "errors must be positive, got {e} at h = {h}"
            )));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument("step sizes must be distinct".into()));
    }
    let pairwise_orders: Vec<f64> = pairs
        .windows(2)
        .map(|w| (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln())
        .collect();
    let mean_order = pairwise_orders.iter().sum::<f64>() / pairwise_orders.len() as f64;
    let (lo, hi) = pairwise_orders
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
            (lo.min(p), hi.max(p))
        });
    Ok(OrderEstimate {
        h_values: pairs.iter().map(|p| p.0).collect(),
        errors: pairs.iter().map(|p| p.1).collect(),
        pairwise_orders,
        mean_order,
        spread: hi - lo,
    })
}

/// Per-call costs used to project wall-clock speedup from counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub eval_cost: f64,
    pub extrapolation_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            eval_cost: 1.0,
            extrapolation_cost: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedupReport {
    pub n_steps: usize,
    pub n_network_evals: usize,
    pub n_extrapolations: usize,
    /// `N / n_network_evals`.
    pub eval_speedup: f64,
    /// `N c / (n_evals c + n_extrapolations c_x)`.
    pub projected_speedup: f64,
    pub cost_model: CostModel,
}

pub fn speedup_report(trajectory: &Trajectory, cost: CostModel) -> SpeedupReport {
    let n = trajectory.n_steps();
    let evals = trajectory.n_network_evals;
    let extrap = trajectory.n_extrapolations;
    let baseline = n as f64 * cost.eval_cost;
    let cached = evals as f64 * cost.eval_cost + extrap as f64 * cost.extrapolation_cost;
    SpeedupReport {
        n_steps: n,
        n_network_evals: evals,
        n_extrapolations: extrap,
        eval_speedup: n as f64 / evals as f64,
        projected_speedup: baseline / cached,
        cost_model: cost,
    }
}

/// Half-logSNR window and starting state for extrapolation studies on the
/// exact Gaussian probability-flow trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationStudy {
    pub oracle: GaussianOracle,
    pub x_start: Vec<f64>,
    pub window: (f64, f64),
    pub mode: Mode,
}

impl ExtrapolationStudy {
    /// Exact state and output at half-logSNR `lam` along the trajectory
    /// that starts at `x_start` at the schedule's `t_max`.
    fn exact_output(&self, lam: f64) -> Result<Vec<f64>> {
        let schedule = self.oracle.schedule();
        let t = schedule.t_of_lambda(lam)?;
        let x = exact_marginal_trajectory(&self.oracle, &self.x_start, schedule.t_max(), t)?;
        self.oracle.eps(&x, t)
    }

    /// Max-norm error of the order-`k` rule with step `h`, over targets
    /// `window.0, window.0 + h, ...` up to `window.1`. History nodes sit at
    /// `target - i h`.
    pub fn max_error(&self, k: usize, h: f64) -> Result<f64> {
        let coeffs = extrapolation_coefficients(k, h, self.mode)?;
        let n_targets = ((self.window.1 - self.window.0) / h).round() as usize;
        let mut worst: f64 = 0.0;
        for m in 0..=n_targets {
            let target = self.window.0 + m as f64 * h;
            let history = (1..=k)
                .map(|i| self.exact_output(target - i as f64 * h))
                .collect::<Result<Vec<_>>>()?;
            let predicted = extrapolate_output(&history, &coeffs)?;
            worst = worst.max(max_abs_diff(&predicted, &self.exact_output(target)?));
        }
        Ok(worst)
    }

    pub fn order(&self, k: usize, h_values: &[f64]) -> Result<OrderEstimate> {
        let pairs = h_values
            .iter()
            .map(|&h| Ok((h, self.max_error(k, h)?)))
            .collect::<Result<Vec<_>>>()?;
        estimate_order(&pairs)
    }
}

/// Endpoint max-norm error of the first-order solver against the exact
/// Gaussian solution for each step count. Returns `(1 / N, error)` pairs.
pub fn first_order_convergence(
    oracle: &GaussianOracle,
    x_init: &[f64],
    step_counts: &[usize],
    spacing: Spacing,
) -> Result<Vec<(f64, f64)>> {
    let schedule = oracle.schedule();
    let exact = exact_marginal_trajectory(oracle, x_init, schedule.t_max(), schedule.t_min())?;
    step_counts
        .iter()
        .map(|&n| {
            let grid = make_grid(schedule, n, spacing)?;
            let mut x = x_init.to_vec();
            for w in grid.times().windows(2) {
                let eps = oracle.eps(&x, w[0])?;
                x = first_order_step(&x, w[0], w[1], &eps, schedule)?;
            }
            Ok((1.0 / n as f64, max_abs_diff(&x, &exact)))
        })
        .collect()
}

/// Worst cached-output error inside the sampler for each step count, as
/// `(1 / N, error)` pairs. `config.n_steps` is ignored.
pub fn cached_output_convergence<P: Predictor>(
    config: &SamplerConfig,
    predictor: &P,
    schedule: &NoiseSchedule,
    x_init: &[f64],
    step_counts: &[usize],
) -> Result<Vec<(f64, f64)>> {
    step_counts
        .iter()
        .map(|&n| {
            let cfg = SamplerConfig {
                n_steps: n,
                ..*config
            };
            let traj = run_ab_cache(&cfg, &CountingPredictor::new(predictor), schedule, x_init)?;
            Ok((1.0 / n as f64, max_extrapolation_error(&traj, predictor)?))
        })
        .collect()
}

/// Endpoint max-norm error of a cached run against the exact solution.
pub fn cached_endpoint_error(
    config: &SamplerConfig,
    oracle: &GaussianOracle,
    x_init: &[f64],
) -> Result<(Trajectory, f64)> {
    let schedule = oracle.schedule();
    let predictor = CountingPredictor::new(oracle.clone());
    let traj = run_ab_cache(config, &predictor, schedule, x_init)?;
    let exact = exact_marginal_trajectory(oracle, x_init, schedule.t_max(), schedule.t_min())?;
    let err = max_abs_diff(&traj.final_state, &exact);
    Ok((traj, err))
}

/// Largest error of an extrapolated output against the predictor evaluated
/// at the same state, over all cached steps. Zero when nothing was cached.
pub fn max_extrapolation_error<P: Predictor + ?Sized>(
    trajectory: &Trajectory,
    reference: &P,
) -> Result<f64> {
    let errors = trajectory.eps_errors(reference)?;
    Ok(trajectory
        .records
        .iter()
        .zip(errors)
        .filter(|(r, _)| r.was_cached)
        .map(|(_, e)| e)
        .fold(0.0, f64::max))
}
