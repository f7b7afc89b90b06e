//! Network-output abstraction and analytic stand-ins for trained models.
//!
//! [`Predictor`] is a pure map `(x, t) -> output`. Samplers receive it
//! wrapped in a [`CountingPredictor`], whose counter is the unit of
//! speedup accounting. The Gaussian and mixture oracles return the
//! Bayes-optimal noise prediction `-sigma_t * grad log p_t(x)` of their
//! data distribution, so reference solutions are available in closed form
//! or to near machine precision.
//!
//! Smoothness of user-supplied predictors is assumed, not checked.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vecops::check_dim;

pub trait Predictor: Send + Sync {
    fn dim(&self) -> usize;

    /// Deterministic prediction at state `x` and time `t`.
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).predict(x, t)
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).predict(x, t)
    }
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).predict(x, t)
    }
}

/// A predictor together with a count of real evaluations.
#[derive(Debug)]
pub struct CountingPredictor<P> {
    inner: P,
    evals: AtomicU64,
}

impl<P: Predictor> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            evals: AtomicU64::new(0),
        }
    }

    /// Evaluates the wrapped predictor and increments the counter by one.
    pub fn evaluate(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(x, t)
    }

    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Uncounted access, for computing references alongside a run.
    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

/// Isotropic Gaussian data `N(mean, std^2 I)` pushed through a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    std: f64,
    schedule: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, std: f64, schedule: NoiseSchedule) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::InvalidArgument("mean must be non-empty".into()));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "std must be positive, got {std}"
            )));
        }
        Ok(Self {
            mean,
            std,
            schedule,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Marginal variance `alpha_t^2 std^2 + sigma_t^2` per coordinate.
    fn marginal_variance(&self, t: f64) -> f64 {
        let a = self.schedule.alpha_raw(t);
        let s = self.schedule.sigma_raw(t);
        a * a * self.std * self.std + s * s
    }

    /// `eps*(x, t) = sigma_t (x - alpha_t mean) / (alpha_t^2 std^2 + sigma_t^2)`.
    pub fn eps(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.mean.len(), x.len())?;
        self.schedule.check_time(t)?;
        Ok(component_eps(&self.schedule, &self.mean, self.std, x, t))
    }

    pub fn log_marginal(&self, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.mean.len(), x.len())?;
        self.schedule.check_time(t)?;
        Ok(component_log_density(
            &self.schedule,
            &self.mean,
            self.std,
            x,
            t,
        ))
    }
}

impl Predictor for GaussianOracle {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.eps(x, t)
    }
}

fn component_eps(schedule: &NoiseSchedule, mean: &[f64], std: f64, x: &[f64], t: f64) -> Vec<f64> {
    let a = schedule.alpha_raw(t);
    let s = schedule.sigma_raw(t);
    let scale = s / (a * a * std * std + s * s);
    x.iter()
        .zip(mean)
        .map(|(xi, mi)| scale * (xi - a * mi))
        .collect()
}

fn component_log_density(
    schedule: &NoiseSchedule,
    mean: &[f64],
    std: f64,
    x: &[f64],
    t: f64,
) -> f64 {
    let a = schedule.alpha_raw(t);
    let s = schedule.sigma_raw(t);
    let var = a * a * std * std + s * s;
    let sq: f64 = x
        .iter()
        .zip(mean)
        .map(|(xi, mi)| (xi - a * mi).powi(2))
        .sum();
    -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Finite mixture of isotropic Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOracle {
    components: Vec<MixtureComponent>,
    schedule: NoiseSchedule,
    log_weights: Vec<f64>,
}

impl MixtureOracle {
    pub fn new(components: Vec<MixtureComponent>, schedule: NoiseSchedule) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("mean must be non-empty".into()));
        }
        for c in &components {
            check_dim(dim, c.mean.len())?;
            if !(c.weight > 0.0 && c.std > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "component weight and std must be positive, got ({}, {})",
                    c.weight, c.std
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        Ok(Self {
            components,
            schedule,
            log_weights,
        })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Posterior component probabilities given `x` at time `t`, computed
    /// in log space with max subtraction.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        self.schedule.check_time(t)?;
        let logits: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + component_log_density(&self.schedule, &c.mean, c.std, x, t))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        Ok(unnorm.into_iter().map(|u| u / z).collect())
    }

    pub fn eps(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let gamma = self.responsibilities(x, t)?;
        let mut out = vec![0.0; x.len()];
        for (c, g) in self.components.iter().zip(gamma) {
            let e = component_eps(&self.schedule, &c.mean, c.std, x, t);
            for (o, ei) in out.iter_mut().zip(e) {
                *o += g * ei;
            }
        }
        Ok(out)
    }

    pub fn log_marginal(&self, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        self.schedule.check_time(t)?;
        let logits: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + component_log_density(&self.schedule, &c.mean, c.std, x, t))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }
}

impl Predictor for MixtureOracle {
    fn dim(&self) -> usize {
        self.components[0].mean.len()
    }
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.eps(x, t)
    }
}

/// Velocity field `dx/dt` induced by a noise predictor.
///
/// With `x_0 ~ (x - sigma eps) / alpha` this is
/// `v = alpha' (x - sigma eps) / alpha + sigma' eps`; under the flow schedule
/// it reduces to `(eps - x) / (1 - t)`, the optimal rectified-flow velocity
/// when `eps` is the optimal noise prediction.
#[derive(Debug, Clone)]
pub struct FlowVelocity<P> {
    eps_model: P,
    schedule: NoiseSchedule,
}

impl<P: Predictor> FlowVelocity<P> {
    pub fn new(eps_model: P, schedule: NoiseSchedule) -> Self {
        Self {
            eps_model,
            schedule,
        }
    }
}

impl<P: Predictor> Predictor for FlowVelocity<P> {
    fn dim(&self) -> usize {
        self.eps_model.dim()
    }

    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let eps = self.eps_model.predict(x, t)?;
        probability_flow_rhs(&self.schedule, x, t, &eps)
    }
}

fn probability_flow_rhs(
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    eps: &[f64],
) -> Result<Vec<f64>> {
    check_dim(x.len(), eps.len())?;
    let a = schedule.alpha(t)?;
    let s = schedule.sigma_raw(t);
    let da = schedule.alpha_dot(t)?;
    let ds = schedule.sigma_dot(t)?;
    let lin = da / a;
    let eps_coeff = ds - s * lin;
    Ok(x.iter()
        .zip(eps)
        .map(|(xi, ei)| lin * xi + eps_coeff * ei)
        .collect())
}

/// Exact probability-flow solution for Gaussian data, in closed form.
///
/// Along the flow the standardized offset `(x - alpha_t mean) / sqrt(v_t)`
/// is conserved, with `v_t = alpha_t^2 std^2 + sigma_t^2`.
pub fn exact_marginal_trajectory(
    oracle: &GaussianOracle,
    x_start: &[f64],
    t_start: f64,
    t_end: f64,
) -> Result<Vec<f64>> {
    check_dim(oracle.mean.len(), x_start.len())?;
    let schedule = oracle.schedule();
    schedule.check_time(t_start)?;
    schedule.check_time(t_end)?;
    if t_end > t_start {
        return Err(Error::InvalidArgument(format!(
            "reference runs backwards in time; got t_end = {t_end} > t_start = {t_start}"
        )));
    }
    if t_end == t_start {
        return Ok(x_start.to_vec());
    }
    let (a_s, a_t) = (schedule.alpha_raw(t_start), schedule.alpha_raw(t_end));
    let ratio = (oracle.marginal_variance(t_end) / oracle.marginal_variance(t_start)).sqrt();
    Ok(x_start
        .iter()
        .zip(&oracle.mean)
        .map(|(x, m)| a_t * m + ratio * (x - a_s * m))
        .collect())
}

/// Integrates the probability-flow ODE
/// `dx/dt = (alpha'/alpha) x + (sigma' - sigma alpha'/alpha) eps(x, t)`
/// with an adaptive Dormand-Prince 5(4) pair at relative and absolute
/// tolerance `tol`.
pub fn integrate_probability_flow<P: Predictor + ?Sized>(
    eps_model: &P,
    schedule: &NoiseSchedule,
    x_start: &[f64],
    t_start: f64,
    t_end: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    check_dim(eps_model.dim(), x_start.len())?;
    schedule.check_time(t_start)?;
    schedule.check_time(t_end)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let rhs = |x: &[f64], t: f64| -> Result<Vec<f64>> {
        let eps = eps_model.predict(x, t)?;
        probability_flow_rhs(schedule, x, t, &eps)
    };
    dopri5(rhs, x_start, t_start, t_end, tol)
}

// Dormand-Prince tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn dopri5<F>(rhs: F, y0: &[f64], t0: f64, t1: f64, tol: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y);
    }
    let dir = span.signum();
    let mut h = span / 100.0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut steps = 0usize;
    while (t1 - t) * dir > 0.0 {
        steps += 1;
        if steps > 10_000_000 {
            return Err(Error::Singular(
                "adaptive integrator exceeded step budget".into(),
            ));
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        k[0] = rhs(&y, t)?;
        for stage in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(stage) {
                    acc += A[stage][j] * kj[i];
                }
                tmp[i] = y[i] + h * acc;
            }
            k[stage] = rhs(&tmp, t + C[stage] * h)?;
        }
        let mut y_new = vec![0.0; n];
        let mut err_sq = 0.0;
        for i in 0..n {
            let mut hi5 = 0.0;
            let mut hi4 = 0.0;
            for s in 0..7 {
                hi5 += B5[s] * k[s][i];
                hi4 += B4[s] * k[s][i];
            }
            y_new[i] = y[i] + h * hi5;
            let scale = tol + tol * y[i].abs().max(y_new[i].abs());
            err_sq += (h * (hi5 - hi4) / scale).powi(2);
        }
        let err = (err_sq / n as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::Singular(
                "non-finite state in adaptive integrator".into(),
            ));
        }
        if err <= 1.0 {
            t += h;
            y = y_new;
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if h.abs() < 1e-14 * t.abs().max(1e-300) {
            return Err(Error::Singular("adaptive step size underflow".into()));
        }
    }
    Ok(y)
}
