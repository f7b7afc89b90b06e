//! Noise schedules in the half-logSNR coordinate.
//!
//! A schedule fixes the signal scale `alpha(t)` and the noise scale
//! `sigma(t)` of the forward process `x_t = alpha(t) x_0 + sigma(t) z` on a
//! normalized time interval. Every solver in this crate integrates in
//! `lambda(t) = log(alpha(t) / sigma(t))`, which decreases strictly in `t`.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Offset of the cosine schedule; keeps `beta` bounded near `t = 0`.
pub const COSINE_OFFSET: f64 = 0.008;

/// Default lower end of every schedule's time domain.
pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Variance preserving with `beta(t) = beta_min + t (beta_max - beta_min)`.
    VpLinear { beta_min: f64, beta_max: f64 },
    /// Variance preserving cosine law with offset [`COSINE_OFFSET`].
    VpCosine,
    /// Rectified-flow interpolation: `alpha = 1 - t`, `sigma = t`.
    FlowLinear,
}

impl ScheduleKind {
    pub fn is_variance_preserving(&self) -> bool {
        !matches!(self, ScheduleKind::FlowLinear)
    }

    /// Largest usable `t`; the endpoint `t = 1` is singular for the cosine
    /// and flow laws because `alpha` vanishes there.
    pub fn default_t_max(&self) -> f64 {
        match self {
            ScheduleKind::VpLinear { .. } => 1.0,
            ScheduleKind::VpCosine => 0.9946,
            ScheduleKind::FlowLinear => 0.999,
        }
    }
}

/// A noise schedule restricted to a closed time interval on which
/// `alpha` and `sigma` are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_min: f64,
    t_max: f64,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < t_max && t_max <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "time domain must satisfy 0 < t_min < t_max <= 1, got [{t_min}, {t_max}]"
            )));
        }
        if let ScheduleKind::VpLinear { beta_min, beta_max } = kind {
            if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "linear schedule needs 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
                )));
            }
        }
        let schedule = Self { kind, t_min, t_max };
        for t in [t_min, t_max] {
            let (a, s) = (schedule.alpha_raw(t), schedule.sigma_raw(t));
            let lam = schedule.lambda_raw(t);
            if !(a > 0.0 && s > 0.0 && lam.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "alpha and sigma must be positive on the domain; t = {t} gives alpha = {a}, sigma = {s}"
                )));
            }
        }
        Ok(schedule)
    }

    pub fn with_default_domain(kind: ScheduleKind) -> Result<Self> {
        Self::new(kind, DEFAULT_T_MIN, kind.default_t_max())
    }

    pub fn vp_linear(beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::with_default_domain(ScheduleKind::VpLinear { beta_min, beta_max })
    }

    pub fn vp_cosine() -> Self {
        Self::with_default_domain(ScheduleKind::VpCosine).expect("default cosine domain is valid")
    }

    pub fn flow_linear() -> Self {
        Self::with_default_domain(ScheduleKind::FlowLinear).expect("default flow domain is valid")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn is_variance_preserving(&self) -> bool {
        self.kind.is_variance_preserving()
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                t_min: self.t_min,
                t_max: self.t_max,
            })
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.alpha_raw(t))
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.sigma_raw(t))
    }

    /// Half-logSNR `log(alpha(t) / sigma(t))`.
    pub fn lambda_of_t(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.lambda_raw(t))
    }

    /// Achievable half-logSNR interval `[lambda(t_max), lambda(t_min)]`.
    pub fn lambda_range(&self) -> (f64, f64) {
        (self.lambda_raw(self.t_max), self.lambda_raw(self.t_min))
    }

    /// Inverse of [`lambda_of_t`](Self::lambda_of_t).
    ///
    /// Always solved by bisection down to adjacent floating-point values,
    /// including for schedules that admit a closed-form inverse.
    pub fn t_of_lambda(&self, lam: f64) -> Result<f64> {
        let (lo_lam, hi_lam) = self.lambda_range();
        let slack = 1e-12 * lo_lam.abs().max(hi_lam.abs()).max(1.0);
        if !(lam >= lo_lam - slack && lam <= hi_lam + slack) {
            return Err(Error::Range {
                lambda: lam,
                lo: lo_lam,
                hi: hi_lam,
            });
        }
        // lambda decreases in t: lambda(lo) >= lam >= lambda(hi)
        let (mut lo, mut hi) = (self.t_min, self.t_max);
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.lambda_raw(mid) > lam {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (e_lo, e_hi) = (
            (self.lambda_raw(lo) - lam).abs(),
            (self.lambda_raw(hi) - lam).abs(),
        );
        Ok(if e_lo <= e_hi { lo } else { hi })
    }

    /// `d alpha / dt`.
    pub fn alpha_dot(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::FlowLinear => -1.0,
            _ => self.alpha_raw(t) * self.log_alpha_dot(t),
        })
    }

    /// `d sigma / dt`.
    pub fn sigma_dot(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::FlowLinear => 1.0,
            // sigma^2 = 1 - alpha^2  =>  sigma' = -alpha alpha' / sigma
            _ => {
                let a = self.alpha_raw(t);
                -a * a * self.log_alpha_dot(t) / self.sigma_raw(t)
            }
        })
    }

    fn log_alpha_dot(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => {
                -0.5 * (beta_min + t * (beta_max - beta_min))
            }
            ScheduleKind::VpCosine => {
                let c = FRAC_PI_2 / (1.0 + COSINE_OFFSET);
                -c * (c * (t + COSINE_OFFSET)).tan()
            }
            ScheduleKind::FlowLinear => -1.0 / (1.0 - t),
        }
    }

    fn log_alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => {
                -0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min
            }
            ScheduleKind::VpCosine => {
                let c = FRAC_PI_2 / (1.0 + COSINE_OFFSET);
                (c * (t + COSINE_OFFSET)).cos().ln() - (c * COSINE_OFFSET).cos().ln()
            }
            ScheduleKind::FlowLinear => (1.0 - t).ln(),
        }
    }

    pub(crate) fn alpha_raw(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::FlowLinear => 1.0 - t,
            _ => self.log_alpha(t).exp(),
        }
    }

    pub(crate) fn sigma_raw(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::FlowLinear => t,
            // sqrt(1 - alpha^2) without cancellation near t = 0
            _ => (-(2.0 * self.log_alpha(t)).exp_m1()).sqrt(),
        }
    }

    pub(crate) fn lambda_raw(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::FlowLinear => ((1.0 - t) / t).ln(),
            _ => {
                let la = self.log_alpha(t);
                la - 0.5 * (-(2.0 * la).exp_m1()).ln()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Spacing {
    #[default]
    UniformT,
    UniformLambda,
}

/// Denoising time grid `t_0 > t_1 > ... > t_N` with matching half-logSNR
/// values `lambda_0 < ... < lambda_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrid {
    times: Vec<f64>,
    lambdas: Vec<f64>,
    spacing: Spacing,
}

impl StepGrid {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// Number of steps `N`; the grid holds `N + 1` nodes.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `lambda_{i+1} - lambda_i`.
    pub fn step_size(&self, i: usize) -> f64 {
        self.lambdas[i + 1] - self.lambdas[i]
    }

    /// Mean half-logSNR increment across the grid.
    pub fn mean_step_size(&self) -> f64 {
        (self.lambdas[self.n_steps()] - self.lambdas[0]) / self.n_steps() as f64
    }

    /// Largest deviation of any increment from the mean increment, in
    /// units of the mean increment.
    pub fn relative_spacing_deviation(&self) -> f64 {
        let h = self.mean_step_size();
        (0..self.n_steps())
            .map(|i| ((self.step_size(i) - h) / h).abs())
            .fold(0.0, f64::max)
    }
}

/// Builds an `n_steps` grid from `t_max` down to `t_min`.
pub fn make_grid(schedule: &NoiseSchedule, n_steps: usize, spacing: Spacing) -> Result<StepGrid> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let (t_min, t_max) = (schedule.t_min(), schedule.t_max());
    let n = n_steps as f64;
    let times: Vec<f64> = match spacing {
        Spacing::UniformT => (0..=n_steps)
            .map(|i| match i {
                0 => t_max,
                i if i == n_steps => t_min,
                i => t_max + (t_min - t_max) * (i as f64 / n),
            })
            .collect(),
        Spacing::UniformLambda => {
            let (lam_start, lam_end) = schedule.lambda_range();
            let h = (lam_end - lam_start) / n;
            let mut times = Vec::with_capacity(n_steps + 1);
            for i in 0..=n_steps {
                times.push(match i {
                    0 => t_max,
                    i if i == n_steps => t_min,
                    i => schedule.t_of_lambda(lam_start + h * i as f64)?,
                });
            }
            times
        }
    };
    let lambdas: Vec<f64> = times.iter().map(|&t| schedule.lambda_raw(t)).collect();
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "{n_steps} steps are too many to resolve distinct log-SNR nodes"
        )));
    }
    Ok(StepGrid {
        times,
        lambdas,
        spacing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp() -> NoiseSchedule {
        NoiseSchedule::vp_linear(0.1, 20.0).unwrap()
    }

    fn all_kinds() -> Vec<NoiseSchedule> {
        vec![
            vp(),
            NoiseSchedule::vp_cosine(),
            NoiseSchedule::flow_linear(),
        ]
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let f_lo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (f_lo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn flow_values() {
        let s = NoiseSchedule::flow_linear();
        assert_eq!(s.alpha(0.25).unwrap(), 0.75);
        assert_eq!(s.sigma(0.25).unwrap(), 0.25);
        assert_eq!(s.lambda_of_t(0.5).unwrap(), 0.0);
        assert!((s.t_of_lambda(0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn vp_linear_small_t_matches_taylor_and_quadrature() {
        // the beta slope contributes (beta_max - beta_min) t^2 / 4, so the
        // first-order check needs t_min well below 1e-3
        let s = NoiseSchedule::new(
            ScheduleKind::VpLinear {
                beta_min: 0.1,
                beta_max: 20.0,
            },
            1e-4,
            1.0,
        )
        .unwrap();
        let t = s.t_min();
        let a = s.alpha(t).unwrap();
        assert!((a - (1.0 - 0.5 * 0.1 * t)).abs() < 1e-6);
        // Simpson quadrature of beta over [0, t]
        let beta = |u: f64| 0.1 + u * (20.0 - 0.1);
        let m = 1000;
        let du = t / m as f64;
        let mut acc = beta(0.0) + beta(t);
        for i in 1..m {
            acc += beta(i as f64 * du) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = acc * du / 3.0;
        assert!((a - (-0.5 * integral).exp()).abs() < 1e-14);
    }

    #[test]
    fn variance_preserving_identity() {
        for s in [vp(), NoiseSchedule::vp_cosine()] {
            for i in 0..=100 {
                let t = s.t_min() + (s.t_max() - s.t_min()) * i as f64 / 100.0;
                let (a, sg) = (s.alpha(t).unwrap(), s.sigma(t).unwrap());
                assert!((a * a + sg * sg - 1.0).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn lambda_zero_where_alpha_equals_sigma() {
        let s = vp();
        let t_star = bisect(
            |t| s.alpha(t).unwrap() - s.sigma(t).unwrap(),
            s.t_min(),
            s.t_max(),
        );
        assert!(s.lambda_of_t(t_star).unwrap().abs() < 1e-10);
        assert!((s.t_of_lambda(0.0).unwrap() - t_star).abs() < 1e-12);
    }

    #[test]
    fn lambda_monotone() {
        let s = vp();
        assert!(s.lambda_of_t(0.2).unwrap() > s.lambda_of_t(0.7).unwrap());
    }

    #[test]
    fn vp_linear_inverse_matches_closed_form() {
        let s = vp();
        let (b0, b1) = (0.1, 20.0);
        let (lo, hi) = s.lambda_range();
        for i in 0..=50 {
            let lam = lo + (hi - lo) * i as f64 / 50.0;
            let log_term = (-2.0 * lam).exp().ln_1p();
            let closed = 2.0 * log_term / ((b0 * b0 + 2.0 * (b1 - b0) * log_term).sqrt() + b0);
            let t = s.t_of_lambda(lam).unwrap();
            assert!((t - closed).abs() < 1e-9, "lam={lam}: {t} vs {closed}");
            assert!((s.lambda_of_t(t).unwrap() - lam).abs() < 1e-10);
        }
    }

    #[test]
    fn flow_inverse_matches_closed_form() {
        let s = NoiseSchedule::flow_linear();
        let (lo, hi) = s.lambda_range();
        for i in 0..=50 {
            let lam = lo + (hi - lo) * i as f64 / 50.0;
            let closed = 1.0 / (1.0 + lam.exp());
            assert!((s.t_of_lambda(lam).unwrap() - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for s in all_kinds() {
            for t in [0.1, 0.4, 0.8] {
                let d = 1e-6;
                let fd_a = (s.alpha(t + d).unwrap() - s.alpha(t - d).unwrap()) / (2.0 * d);
                let fd_s = (s.sigma(t + d).unwrap() - s.sigma(t - d).unwrap()) / (2.0 * d);
                assert!((s.alpha_dot(t).unwrap() - fd_a).abs() < 1e-6 * (1.0 + fd_a.abs()));
                assert!((s.sigma_dot(t).unwrap() - fd_s).abs() < 1e-6 * (1.0 + fd_s.abs()));
            }
        }
    }

    #[test]
    fn domain_errors() {
        let s = vp();
        assert!(matches!(s.alpha(0.0), Err(Error::Domain { .. })));
        assert!(matches!(s.sigma(1.5), Err(Error::Domain { .. })));
        assert!(matches!(s.t_of_lambda(100.0), Err(Error::Range { .. })));
        assert!(NoiseSchedule::new(ScheduleKind::FlowLinear, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::VpCosine, 0.5, 0.2).is_err());
        assert!(NoiseSchedule::vp_linear(-1.0, 20.0).is_err());
    }

    #[test]
    fn uniform_t_grid_is_arithmetic() {
        let s = NoiseSchedule::new(
            ScheduleKind::VpLinear {
                beta_min: 0.1,
                beta_max: 20.0,
            },
            0.2,
            1.0,
        )
        .unwrap();
        let g = make_grid(&s, 4, Spacing::UniformT).unwrap();
        let expected = [1.0, 0.8, 0.6, 0.4, 0.2];
        for (t, e) in g.times().iter().zip(expected) {
            assert!((t - e).abs() < 1e-15);
        }
        let f = NoiseSchedule::new(ScheduleKind::FlowLinear, 0.2, 0.999).unwrap();
        let g = make_grid(&f, 4, Spacing::UniformT).unwrap();
        assert_eq!(g.times()[0], 0.999);
        assert_eq!(g.times()[4], 0.2);
    }

    #[test]
    fn uniform_lambda_grid_has_constant_increments() {
        for s in all_kinds() {
            let g = make_grid(&s, 10, Spacing::UniformLambda).unwrap();
            let h = g.mean_step_size();
            for i in 0..10 {
                assert!((g.step_size(i) - h).abs() <= 1e-12 * h.abs());
            }
            for (t, l) in g.times().iter().zip(g.lambdas()) {
                assert_eq!(*l, s.lambda_of_t(*t).unwrap());
            }
        }
    }

    #[test]
    fn uniform_t_vp_grid_increments_larger_at_ends() {
        let g = make_grid(&vp(), 50, Spacing::UniformT).unwrap();
        let mid = (20..30).map(|i| g.step_size(i)).fold(0.0, f64::max);
        assert!(g.step_size(0) > mid);
        assert!(g.step_size(49) > mid);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(make_grid(&vp(), 0, Spacing::UniformT).is_err());
    }
}
