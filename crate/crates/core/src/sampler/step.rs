//! Single-step updates and the adjacent-output scale factor.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vecops::check_dim;

/// First-order exponential-integrator update from time `s` to `t <= s`:
/// `x_t = (alpha_t / alpha_s) x_s - sigma_t (exp(lambda_t - lambda_s) - 1) eps`.
pub fn first_order_step(
    x_s: &[f64],
    s: f64,
    t: f64,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim(x_s.len(), eps.len())?;
    if t > s {
        return Err(Error::InvalidArgument(format!(
            "denoising step must move backwards in time; got s = {s}, t = {t}"
        )));
    }
    let a_s = schedule.alpha(s)?;
    let a_t = schedule.alpha(t)?;
    let sig_t = schedule.sigma(t)?;
    let dl = schedule.lambda_of_t(t)? - schedule.lambda_of_t(s)?;
    let ratio = a_t / a_s;
    let eps_coeff = sig_t * dl.exp_m1();
    Ok(x_s
        .iter()
        .zip(eps)
        .map(|(x, e)| ratio * x - eps_coeff * e)
        .collect())
}

/// Euler step on a velocity field: `x_t = x_s + (t - s) v`.
pub fn flow_euler_step(x_s: &[f64], s: f64, t: f64, v: &[f64]) -> Result<Vec<f64>> {
    check_dim(x_s.len(), v.len())?;
    if t > s {
        return Err(Error::InvalidArgument(format!(
            "denoising step must move backwards in time; got s = {s}, t = {t}"
        )));
    }
    let dt = t - s;
    Ok(x_s.iter().zip(v).map(|(x, vi)| x + dt * vi).collect())
}

/// Ratio `r` in `eps(lambda_s) ~ r eps(lambda_o)` for three times
/// `o > s > t` equally spaced in half-logSNR with step `h`:
///
/// `r = alpha_t h / (3 exp(-h) alpha_t h - 2 sigma_t exp(lambda_o) (exp(h) - 1))`.
pub fn scale_factor(schedule: &NoiseSchedule, t: f64, s: f64, o: f64) -> Result<f64> {
    let (r, residual) = scale_factor_with_residual(schedule, t, s, o)?;
    let h = schedule.lambda_of_t(t)? - schedule.lambda_of_t(s)?;
    if residual.abs() > 1e-9 * h.abs() {
        return Err(Error::Spacing(format!(
            "scale factor needs equal log-SNR steps; increments differ by {residual}"
        )));
    }
    Ok(r)
}

/// Same expression as [`scale_factor`] with `h = lambda_t - lambda_s` and the
/// actual `lambda_o`, returned together with the spacing residual
/// `(lambda_t - lambda_s) - (lambda_s - lambda_o)`.
pub fn scale_factor_with_residual(
    schedule: &NoiseSchedule,
    t: f64,
    s: f64,
    o: f64,
) -> Result<(f64, f64)> {
    let lam_t = schedule.lambda_of_t(t)?;
    let lam_s = schedule.lambda_of_t(s)?;
    let lam_o = schedule.lambda_of_t(o)?;
    let h = lam_t - lam_s;
    if !(h > 0.0 && lam_s > lam_o) {
        return Err(Error::InvalidArgument(format!(
            "scale factor needs o > s > t; got o = {o}, s = {s}, t = {t}"
        )));
    }
    let a_t = schedule.alpha(t)?;
    // sigma at lambda_t is read as sigma_t
    let sig_t = schedule.sigma(t)?;
    let denom = 3.0 * (-h).exp() * a_t * h - 2.0 * sig_t * lam_o.exp() * h.exp_m1();
    if denom.abs() < 1e-300 {
        return Err(Error::Singular(format!(
            "scale factor denominator {denom} at h = {h}"
        )));
    }
    Ok((a_t * h / denom, h - (lam_s - lam_o)))
}

/// [`scale_factor`] rewritten through `sigma_t exp(lambda_t) = alpha_t`:
/// `r(h) = h / (3 h exp(-h) - 2 exp(-2h) (exp(h) - 1))`.
pub fn scale_factor_simplified(h: f64) -> Result<f64> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "h must be positive, got {h}"
        )));
    }
    let denom = 3.0 * h * (-h).exp() - 2.0 * (-2.0 * h).exp() * h.exp_m1();
    if denom.abs() < 1e-300 {
        return Err(Error::Singular(format!(
            "scale factor denominator {denom} at h = {h}"
        )));
    }
    Ok(h / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{exact_marginal_trajectory, GaussianOracle};
    use crate::schedule::{make_grid, ScheduleKind, Spacing};
    use crate::vecops::max_abs_diff;

    fn vp() -> NoiseSchedule {
        NoiseSchedule::vp_linear(0.1, 20.0).unwrap()
    }

    #[test]
    fn zero_eps_rescales() {
        let s = vp();
        let x = [1.0, -2.0];
        let out = first_order_step(&x, 0.6, 0.4, &[0.0, 0.0], &s).unwrap();
        let ratio = s.alpha(0.4).unwrap() / s.alpha(0.6).unwrap();
        assert_eq!(out, vec![ratio, -2.0 * ratio]);
    }

    #[test]
    fn empty_step_is_identity() {
        let x = [1.0, -2.0];
        assert_eq!(
            first_order_step(&x, 0.5, 0.5, &[3.0, 4.0], &vp()).unwrap(),
            x.to_vec()
        );
        assert!(first_order_step(&x, 0.4, 0.5, &[3.0, 4.0], &vp()).is_err());
        assert!(first_order_step(&x, 0.5, 0.4, &[3.0], &vp()).is_err());
    }

    #[test]
    fn first_order_global_error_halves() {
        let schedule = NoiseSchedule::new(
            ScheduleKind::VpLinear {
                beta_min: 0.1,
                beta_max: 20.0,
            },
            0.2,
            1.0,
        )
        .unwrap();
        let oracle = GaussianOracle::new(vec![0.0], 1.0, schedule).unwrap();
        let x0 = [0.8];
        let exact = exact_marginal_trajectory(&oracle, &x0, 1.0, 0.2).unwrap();
        let errs: Vec<f64> = [25, 50, 100, 200]
            .iter()
            .map(|&n| {
                let g = make_grid(&schedule, n, Spacing::UniformT).unwrap();
                let mut x = x0.to_vec();
                for w in g.times().windows(2) {
                    let e = oracle.eps(&x, w[0]).unwrap();
                    x = first_order_step(&x, w[0], w[1], &e, &schedule).unwrap();
                }
                max_abs_diff(&x, &exact)
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..=2.4).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn flow_euler_basics() {
        let x = [1.0, 2.0];
        assert_eq!(
            flow_euler_step(&x, 0.8, 0.6, &[0.0, 0.0]).unwrap(),
            x.to_vec()
        );
        let v = [0.5, -1.5];
        let full = flow_euler_step(&x, 0.8, 0.4, &v).unwrap();
        let half =
            flow_euler_step(&flow_euler_step(&x, 0.8, 0.6, &v).unwrap(), 0.6, 0.4, &v).unwrap();
        assert!(max_abs_diff(&full, &half) < 1e-15);
        assert!(flow_euler_step(&x, 0.8, 0.6, &[1.0]).is_err());
    }

    #[test]
    fn flow_euler_local_error_is_second_order() {
        // v(t) = a + b t integrates to x(t) = x(s) + a (t - s) + b (t^2 - s^2) / 2
        let (a, b, s) = (0.3, 1.7, 0.9);
        let err = |dt: f64| {
            let t = s - dt;
            let exact = 1.0 + a * (t - s) + 0.5 * b * (t * t - s * s);
            let got = flow_euler_step(&[1.0], s, t, &[a + b * s]).unwrap()[0];
            (got - exact).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 4.0).abs() < 1e-6, "{ratio}");
    }

    #[test]
    fn scale_factor_forms_agree() {
        let s = vp();
        for (lam_s, h) in [(-2.0, 0.1), (0.5, 0.05), (3.0, 0.2)] {
            let o = s.t_of_lambda(lam_s - h).unwrap();
            let mid = s.t_of_lambda(lam_s).unwrap();
            let t = s.t_of_lambda(lam_s + h).unwrap();
            let literal = scale_factor(&s, t, mid, o).unwrap();
            let h_actual = s.lambda_of_t(t).unwrap() - s.lambda_of_t(mid).unwrap();
            let simple = scale_factor_simplified(h_actual).unwrap();
            assert!(
                ((literal - simple) / simple).abs() < 1e-12,
                "{literal} vs {simple}"
            );
        }
    }

    #[test]
    fn scale_factor_approaches_one_quadratically() {
        let dev = |h: f64| (scale_factor_simplified(h).unwrap() - 1.0).abs();
        for h in [0.1, 0.05, 0.025] {
            let ratio = dev(h) / dev(h / 2.0);
            assert!((3.5..=4.5).contains(&ratio), "h={h}: {ratio}");
        }
        assert!(dev(0.01) <= 1e-3);
    }

    #[test]
    fn scale_factor_rejects_uneven_triples() {
        let s = vp();
        assert!(matches!(
            scale_factor(&s, 0.2, 0.5, 0.6),
            Err(Error::Spacing(_))
        ));
        assert!(scale_factor(&s, 0.5, 0.2, 0.6).is_err());
        assert!(scale_factor_simplified(0.0).is_err());
    }
}
