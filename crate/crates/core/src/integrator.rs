//! Adams-Bashforth weights and the cached-output extrapolation rule.
//!
//! The exponential-integrator update needs
//! `I = integral over [lambda_n, lambda_n + h] of exp(-lambda) eps(lambda)`.
//! A k-step Adams-Bashforth rule approximates it from the k most recent
//! outputs as `h * sum_j b_j exp(-lambda_{n-j}) eps_{n-j}`. Subtracting the
//! order-k rule from the order-(k+1) rule eliminates `I` and leaves a linear
//! recursion for the newest output in terms of the k before it:
//!
//! `eps_n = sum_{i=1..k} (-1)^(i+1) C(k, i) exp(i h) eps_{n-i} + O(h^k)`.
//!
//! In flow-matching mode the exponential factors are dropped.

use num_rational::Rational64;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::vecops::check_dim;

pub const MAX_AB_ORDER: usize = 5;
pub const MAX_EXTRAPOLATION_ORDER: usize = 4;

/// Relative tolerance for treating a set of log-SNR increments as uniform.
pub const SPACING_RTOL: f64 = 1e-9;

/// `b_j = integral_0^1 L_j(s) ds` with
/// `L_j(s) = prod_{m != j, 0 <= m < k} (s + m) / (m - j)`, in exact arithmetic.
pub fn lagrange_basis_integral(j: usize, k: usize) -> Result<Rational64> {
    if k == 0 || k > MAX_AB_ORDER {
        return Err(Error::UnsupportedOrder {
            order: k,
            min: 1,
            max: MAX_AB_ORDER,
        });
    }
    if j >= k {
        return Err(Error::IndexOutOfRange { index: j, order: k });
    }
    // coefficients in ascending powers of s
    let mut poly = vec![Rational64::one()];
    for m in (0..k).filter(|&m| m != j) {
        let denom = Rational64::from_integer(m as i64 - j as i64);
        let shift = Rational64::from_integer(m as i64);
        let mut next = vec![Rational64::zero(); poly.len() + 1];
        for (p, c) in poly.iter().enumerate() {
            next[p] += c * shift / denom;
            next[p + 1] += c / denom;
        }
        poly = next;
    }
    Ok(poly
        .iter()
        .enumerate()
        .map(|(p, c)| c / Rational64::from_integer(p as i64 + 1))
        .fold(Rational64::zero(), |acc, v| acc + v))
}

/// Weight row `b_0..b_{k-1}` of the k-step Adams-Bashforth rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ABWeights {
    order: usize,
    weights: Vec<Rational64>,
}

impl ABWeights {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn exact(&self) -> &[Rational64] {
        &self.weights
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| *w.numer() as f64 / *w.denom() as f64)
            .collect()
    }
}

pub fn ab_weights(k: usize) -> Result<ABWeights> {
    let weights = (0..k.max(1))
        .map(|j| lagrange_basis_integral(j, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(ABWeights { order: k, weights })
}

/// Recursion coefficients obtained by eliminating the integral between the
/// order-k and order-(k+1) weight rows:
/// `c_j = (b^k_j - b^{k+1}_j) / (b^{k+1}_0 - b^k_0)` for `1 <= j < k` and
/// `c_k = -b^{k+1}_k / (b^{k+1}_0 - b^k_0)`.
pub fn recursion_from_weights(k: usize) -> Result<Vec<Rational64>> {
    if k == 0 || k > MAX_EXTRAPOLATION_ORDER {
        return Err(Error::UnsupportedOrder {
            order: k,
            min: 1,
            max: MAX_EXTRAPOLATION_ORDER,
        });
    }
    let lo = ab_weights(k)?;
    let hi = ab_weights(k + 1)?;
    let (lo, hi) = (lo.exact(), hi.exact());
    let denom = hi[0] - lo[0];
    let mut coeffs: Vec<Rational64> = (1..k).map(|j| (lo[j] - hi[j]) / denom).collect();
    coeffs.push(-hi[k] / denom);
    Ok(coeffs)
}

/// `C(k, i)` for the small orders used here.
fn binomial(k: usize, i: usize) -> u64 {
    (0..i).fold(1u64, |acc, m| acc * (k - m) as u64 / (m as u64 + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    /// Noise prediction integrated in half-logSNR; exponential factors kept.
    #[default]
    Diffusion,
    /// Velocity prediction; exponential factors dropped.
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpacingPolicy {
    /// Reject grids whose increments are not uniform to [`SPACING_RTOL`].
    Strict,
    /// Accept any monotone grid and use local increments.
    #[default]
    Lenient,
}

/// Coefficients `c_1..c_k` such that `eps_n ~ sum_i c_i eps_{n-i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationCoefficients {
    order: usize,
    step: f64,
    coeffs: Vec<f64>,
    mode: Mode,
}

impl ExtrapolationCoefficients {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Distance from the most recent history node to the target.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Coefficients for arbitrary distinct history nodes.
    ///
    /// `nodes` lists the coordinates of the history (most recent first) and
    /// `target` the coordinate to extrapolate to. The history is
    /// interpolated by a polynomial of degree `k - 1` in that coordinate;
    /// in diffusion mode the interpolated quantity is `exp(-lambda) eps`.
    /// For equally spaced nodes with the target one spacing ahead this
    /// reproduces [`extrapolation_coefficients`] up to rounding.
    pub fn from_nodes(nodes: &[f64], target: f64, mode: Mode) -> Result<Self> {
        let k = nodes.len();
        if k == 0 || k > MAX_EXTRAPOLATION_ORDER {
            return Err(Error::UnsupportedOrder {
                order: k,
                min: 1,
                max: MAX_EXTRAPOLATION_ORDER,
            });
        }
        let mut coeffs = Vec::with_capacity(k);
        for (i, &ni) in nodes.iter().enumerate() {
            let mut basis = 1.0;
            for (m, &nm) in nodes.iter().enumerate() {
                if m == i {
                    continue;
                }
                if nm == ni {
                    return Err(Error::InvalidArgument(format!(
                        "history nodes must be distinct; {ni} repeats"
                    )));
                }
                basis *= (target - nm) / (ni - nm);
            }
            coeffs.push(match mode {
                Mode::Diffusion => basis * (target - ni).exp(),
                Mode::Flow => basis,
            });
        }
        Ok(Self {
            order: k,
            step: target - nodes[0],
            coeffs,
            mode,
        })
    }
}

/// `c_i = (-1)^(i+1) C(k, i) exp(i h)`, or without the exponential in flow mode.
///
/// `k = 1` is plain reuse of the last output (scaled by `exp(h)` in
/// diffusion mode).
pub fn extrapolation_coefficients(
    k: usize,
    h: f64,
    mode: Mode,
) -> Result<ExtrapolationCoefficients> {
    if k == 0 || k > MAX_EXTRAPOLATION_ORDER {
        return Err(Error::UnsupportedOrder {
            order: k,
            min: 1,
            max: MAX_EXTRAPOLATION_ORDER,
        });
    }
    if !(h >= 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step h must be non-negative, got {h}"
        )));
    }
    let coeffs = (1..=k)
        .map(|i| {
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            let c = sign * binomial(k, i) as f64;
            match mode {
                Mode::Diffusion => c * (i as f64 * h).exp(),
                Mode::Flow => c,
            }
        })
        .collect();
    Ok(ExtrapolationCoefficients {
        order: k,
        step: h,
        coeffs,
        mode,
    })
}

/// `sum_i c_i history[i-1]`; `history[0]` is the most recent output.
pub fn extrapolate_output<V: AsRef<[f64]>>(
    history: &[V],
    coeffs: &ExtrapolationCoefficients,
) -> Result<Vec<f64>> {
    if history.len() != coeffs.order {
        return Err(Error::InsufficientHistory {
            needed: coeffs.order,
            have: history.len(),
        });
    }
    let dim = history[0].as_ref().len();
    let mut out = vec![0.0; dim];
    for (v, c) in history.iter().zip(&coeffs.coeffs) {
        let v = v.as_ref();
        check_dim(dim, v.len())?;
        for (o, vi) in out.iter_mut().zip(v) {
            *o += c * vi;
        }
    }
    Ok(out)
}

/// A stored network output and the half-logSNR at which it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub lambda: f64,
    pub eps: Vec<f64>,
}

/// One k-step exponential Adams-Bashforth update from node `n` to `n + 1`:
///
/// `x_{n+1} = (alpha_{n+1} / alpha_n) x_n
///            - alpha_{n+1} h sum_j b_j exp(-lambda_{n-j}) eps_{n-j}`.
///
/// `history[j]` holds the output at `lambda_{n-j}`. With `k = 1` this
/// differs from [`first_order_step`](crate::sampler::first_order_step) by
/// `O(h^2)`, since it uses `h` where the exact constant-integrand factor is
/// `1 - exp(-h)`.
pub fn multistep_step(
    x_s: &[f64],
    grid: &StepGrid,
    step_index: usize,
    history: &[HistoryEntry],
    weights: &ABWeights,
    schedule: &NoiseSchedule,
    policy: SpacingPolicy,
) -> Result<Vec<f64>> {
    let k = weights.order();
    if history.len() < k {
        return Err(Error::InsufficientHistory {
            needed: k,
            have: history.len(),
        });
    }
    if step_index >= grid.n_steps() {
        return Err(Error::InvalidArgument(format!(
            "step index {step_index} out of range for a {}-step grid",
            grid.n_steps()
        )));
    }
    let lambdas = grid.lambdas();
    let h = lambdas[step_index + 1] - lambdas[step_index];
    if policy == SpacingPolicy::Strict {
        let mut prev = lambdas[step_index + 1];
        for (j, entry) in history.iter().take(k).enumerate() {
            let gap = prev - entry.lambda;
            if ((gap - h) / h).abs() > SPACING_RTOL {
                return Err(Error::Spacing(format!(
                    "history entry {j} sits {gap} below its successor, expected {h}"
                )));
            }
            prev = entry.lambda;
        }
    }
    let s = grid.times()[step_index];
    let t = grid.times()[step_index + 1];
    let a_s = schedule.alpha(s)?;
    let a_t = schedule.alpha(t)?;
    let dim = x_s.len();
    let mut integral = vec![0.0; dim];
    for (entry, b) in history.iter().zip(weights.as_f64()) {
        check_dim(dim, entry.eps.len())?;
        let w = b * (-entry.lambda).exp();
        for (acc, e) in integral.iter_mut().zip(&entry.eps) {
            *acc += w * e;
        }
    }
    Ok(x_s
        .iter()
        .zip(&integral)
        .map(|(x, i)| (a_t / a_s) * x - a_t * h * i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_grid, Spacing};

    fn r(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn third_order_weights() {
        let b: Vec<_> = (0..3)
            .map(|j| lagrange_basis_integral(j, 3).unwrap())
            .collect();
        assert_eq!(b, vec![r(23, 12), r(-4, 3), r(5, 12)]);
    }

    #[test]
    fn weight_table() {
        assert_eq!(ab_weights(1).unwrap().exact(), &[r(1, 1)]);
        assert_eq!(ab_weights(2).unwrap().exact(), &[r(3, 2), r(-1, 2)]);
        assert_eq!(
            ab_weights(4).unwrap().exact(),
            &[r(55, 24), r(-59, 24), r(37, 24), r(-3, 8)]
        );
        assert_eq!(
            ab_weights(5).unwrap().exact(),
            &[
                r(1901, 720),
                r(-2774, 720),
                r(2616, 720),
                r(-1274, 720),
                r(251, 720)
            ]
        );
    }

    #[test]
    fn rows_sum_to_one() {
        for k in 1..=MAX_AB_ORDER {
            let sum: Rational64 = ab_weights(k).unwrap().exact().iter().sum();
            assert_eq!(sum, Rational64::one());
        }
    }

    #[test]
    fn weight_errors() {
        assert!(matches!(ab_weights(0), Err(Error::UnsupportedOrder { .. })));
        assert!(matches!(ab_weights(6), Err(Error::UnsupportedOrder { .. })));
        assert!(matches!(
            lagrange_basis_integral(3, 3),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn recursion_is_binomial() {
        let expect: [&[i64]; 4] = [&[1], &[2, -1], &[3, -3, 1], &[4, -6, 4, -1]];
        for k in 1..=4 {
            let got = recursion_from_weights(k).unwrap();
            let want: Vec<_> = expect[k - 1].iter().map(|&v| r(v, 1)).collect();
            assert_eq!(got, want, "k={k}");
        }
    }

    #[test]
    fn flow_rows() {
        assert_eq!(
            extrapolation_coefficients(2, 0.3, Mode::Flow)
                .unwrap()
                .coeffs(),
            &[2.0, -1.0]
        );
        assert_eq!(
            extrapolation_coefficients(3, 0.3, Mode::Flow)
                .unwrap()
                .coeffs(),
            &[3.0, -3.0, 1.0]
        );
        for k in 1..=4 {
            let s: f64 = extrapolation_coefficients(k, 0.0, Mode::Diffusion)
                .unwrap()
                .coeffs()
                .iter()
                .sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn diffusion_second_order_values() {
        let c = extrapolation_coefficients(2, 0.1, Mode::Diffusion).unwrap();
        assert!((c.coeffs()[0] - 2.210_341_836_151_295_6).abs() < 1e-12);
        assert!((c.coeffs()[1] + 1.221_402_758_160_169_8).abs() < 1e-12);
    }

    #[test]
    fn diffusion_is_flow_times_exponential() {
        let h = 0.37;
        for k in 1..=4 {
            let d = extrapolation_coefficients(k, h, Mode::Diffusion).unwrap();
            let f = extrapolation_coefficients(k, h, Mode::Flow).unwrap();
            for i in 0..k {
                let want = f.coeffs()[i] * ((i + 1) as f64 * h).exp();
                assert!((d.coeffs()[i] - want).abs() <= 1e-15 * want.abs());
            }
        }
    }

    #[test]
    fn extrapolation_errors() {
        assert!(extrapolation_coefficients(5, 0.1, Mode::Flow).is_err());
        assert!(extrapolation_coefficients(0, 0.1, Mode::Flow).is_err());
        assert!(extrapolation_coefficients(2, -0.1, Mode::Flow).is_err());
        let c = extrapolation_coefficients(2, 0.1, Mode::Flow).unwrap();
        assert!(matches!(
            extrapolate_output(&[vec![1.0]], &c),
            Err(Error::InsufficientHistory { .. })
        ));
        assert!(matches!(
            extrapolate_output(&[vec![1.0], vec![1.0, 2.0]], &c),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(ExtrapolationCoefficients::from_nodes(&[1.0, 1.0], 2.0, Mode::Flow).is_err());
    }

    #[test]
    fn naive_reuse() {
        let c = extrapolation_coefficients(1, 0.2, Mode::Flow).unwrap();
        assert_eq!(
            extrapolate_output(&[vec![1.5, -2.0]], &c).unwrap(),
            vec![1.5, -2.0]
        );
    }

    #[test]
    fn general_nodes_reduce_to_binomial_rule() {
        let h = 0.13;
        for k in 1..=4 {
            let nodes: Vec<f64> = (1..=k).map(|i| 2.0 - i as f64 * h).collect();
            let general =
                ExtrapolationCoefficients::from_nodes(&nodes, 2.0, Mode::Diffusion).unwrap();
            let closed = extrapolation_coefficients(k, h, Mode::Diffusion).unwrap();
            for (a, b) in general.coeffs().iter().zip(closed.coeffs()) {
                assert!((a - b).abs() < 1e-12 * b.abs(), "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn exponential_quadratic_recovered_exactly() {
        // g(lambda) = exp(lambda) * q(lambda) with q quadratic
        let q = |l: f64| 0.3 - 1.2 * l + 0.7 * l * l;
        let g = |l: f64| l.exp() * q(l);
        let (lam_n, h) = (0.4, 0.25);
        let history: Vec<Vec<f64>> = (1..=3).map(|i| vec![g(lam_n - i as f64 * h)]).collect();
        let c = extrapolation_coefficients(3, h, Mode::Diffusion).unwrap();
        let got = extrapolate_output(&history, &c).unwrap()[0];
        assert!((got - g(lam_n)).abs() <= 1e-9 * g(lam_n).abs());
    }

    fn vp_grid(n: usize) -> (NoiseSchedule, StepGrid) {
        let s = NoiseSchedule::vp_linear(0.1, 20.0).unwrap();
        let g = make_grid(&s, n, Spacing::UniformLambda).unwrap();
        (s, g)
    }

    #[test]
    fn zero_history_is_pure_rescaling() {
        let (s, g) = vp_grid(20);
        let w = ab_weights(2).unwrap();
        let n = 5;
        let hist = vec![
            HistoryEntry {
                lambda: g.lambdas()[n],
                eps: vec![0.0; 2],
            },
            HistoryEntry {
                lambda: g.lambdas()[n - 1],
                eps: vec![0.0; 2],
            },
        ];
        let x = [0.4, -0.3];
        let out = multistep_step(&x, &g, n, &hist, &w, &s, SpacingPolicy::Strict).unwrap();
        let ratio = s.alpha(g.times()[n + 1]).unwrap() / s.alpha(g.times()[n]).unwrap();
        assert_eq!(out, vec![ratio * 0.4, ratio * -0.3]);
    }

    #[test]
    fn constant_integrand_is_order_independent() {
        let (s, g) = vp_grid(20);
        let n = 6;
        let c = 0.8;
        let hist: Vec<HistoryEntry> = (0..5)
            .map(|j| {
                let lam = g.lambdas()[n - j];
                HistoryEntry {
                    lambda: lam,
                    eps: vec![c * lam.exp()],
                }
            })
            .collect();
        let x = [1.0];
        let one = multistep_step(
            &x,
            &g,
            n,
            &hist[..1],
            &ab_weights(1).unwrap(),
            &s,
            SpacingPolicy::Strict,
        )
        .unwrap();
        let five = multistep_step(
            &x,
            &g,
            n,
            &hist,
            &ab_weights(5).unwrap(),
            &s,
            SpacingPolicy::Strict,
        )
        .unwrap();
        assert!((one[0] - five[0]).abs() < 1e-13);
    }

    #[test]
    fn strict_policy_rejects_uneven_history() {
        let (s, g) = vp_grid(20);
        let n = 5;
        let hist = vec![
            HistoryEntry {
                lambda: g.lambdas()[n],
                eps: vec![1.0],
            },
            HistoryEntry {
                lambda: g.lambdas()[n - 2],
                eps: vec![1.0],
            },
        ];
        let w = ab_weights(2).unwrap();
        assert!(matches!(
            multistep_step(&[1.0], &g, n, &hist, &w, &s, SpacingPolicy::Strict),
            Err(Error::Spacing(_))
        ));
        assert!(multistep_step(&[1.0], &g, n, &hist, &w, &s, SpacingPolicy::Lenient).is_ok());
        assert!(matches!(
            multistep_step(&[1.0], &g, n, &hist[..1], &w, &s, SpacingPolicy::Lenient),
            Err(Error::InsufficientHistory { .. })
        ));
    }
}
