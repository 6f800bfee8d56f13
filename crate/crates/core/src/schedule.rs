//! Variance-preserving noise schedule parameterized by the log signal-to-noise
//! ratio `λ(t) = log(α_t² / σ_t²)`.
//!
//! The schedule is linear in `t`, running from `lambda_max` at `t = 0` (almost
//! clean data) down to `lambda_min` at `t = 1` (almost pure noise). Every other
//! module reads `α`, `σ` and their derivatives through a [`SchedulePoint`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound used inside logarithms of `σ²` and the SNR.
pub const LOG_FLOOR: f64 = 1e-38;

/// Default log-SNR at `t = 0`.
pub const DEFAULT_LAMBDA_MAX: f64 = 13.3;
/// Default log-SNR at `t = 1`.
pub const DEFAULT_LAMBDA_MIN: f64 = -5.0;

/// Numerically stable logistic function `1 / (1 + e^{-x})`.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(max(v, LOG_FLOOR))`.
#[inline]
pub fn floored_ln(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLinearSchedule {
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl Default for LogLinearSchedule {
    fn default() -> Self {
        LogLinearSchedule {
            lambda_max: DEFAULT_LAMBDA_MAX,
            lambda_min: DEFAULT_LAMBDA_MIN,
        }
    }
}

/// Everything the diffusion algebra needs to know about one time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePoint {
    pub t: f64,
    pub lambda: f64,
    /// `dλ/dt`; constant and negative for the log-linear schedule.
    pub lambda_prime: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub alpha2: f64,
    pub sigma2: f64,
    pub snr: f64,
}

impl SchedulePoint {
    /// Builds a point directly from a log-SNR value. `t` is carried along for
    /// bookkeeping only.
    pub fn from_lambda(t: f64, lambda: f64, lambda_prime: f64) -> Self {
        let alpha2 = logistic(lambda);
        let sigma2 = logistic(-lambda);
        SchedulePoint {
            t,
            lambda,
            lambda_prime,
            alpha: alpha2.sqrt(),
            sigma: sigma2.sqrt(),
            alpha2,
            sigma2,
            snr: lambda.exp(),
        }
    }

    /// `log σ²` with the floor applied.
    pub fn log_sigma2(&self) -> f64 {
        // log σ² = -softplus(λ), computed without forming σ² first.
        let softplus = if self.lambda > 0.0 {
            self.lambda + (-self.lambda).exp().ln_1p()
        } else {
            self.lambda.exp().ln_1p()
        };
        (-softplus).max(LOG_FLOOR.ln())
    }

    /// `d log α / dt = ½ σ² λ'`.
    pub fn dlog_alpha_dt(&self) -> f64 {
        0.5 * self.sigma2 * self.lambda_prime
    }

    /// Squared diffusion coefficient of the forward SDE, `g² = -λ' σ²`.
    pub fn g2(&self) -> f64 {
        -self.lambda_prime * self.sigma2
    }
}

impl LogLinearSchedule {
    pub fn new(lambda_max: f64, lambda_min: f64) -> Result<Self> {
        if !(lambda_max.is_finite() && lambda_min.is_finite()) {
            return Err(Error::config("schedule endpoints must be finite"));
        }
        if lambda_max <= lambda_min {
            return Err(Error::config(format!(
                "lambda_max ({lambda_max}) must exceed lambda_min ({lambda_min})"
            )));
        }
        Ok(LogLinearSchedule {
            lambda_max,
            lambda_min,
        })
    }

    /// `λ_max - λ_min`, the total log-SNR span.
    pub fn span(&self) -> f64 {
        self.lambda_max - self.lambda_min
    }

    pub fn lambda_prime(&self) -> f64 {
        -self.span()
    }

    /// λ(t) without domain checks.
    pub fn lambda(&self, t: f64) -> f64 {
        self.lambda_max - self.span() * t
    }

    pub fn eval(&self, t: f64) -> Result<SchedulePoint> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("t = {t} is outside [0, 1]")));
        }
        Ok(self.point(t))
    }

    /// Same as [`eval`](Self::eval) for callers that already guarantee
    /// `t ∈ [0, 1]`.
    pub(crate) fn point(&self, t: f64) -> SchedulePoint {
        SchedulePoint::from_lambda(t, self.lambda(t), self.lambda_prime())
    }

    /// A point at an arbitrary log-SNR, sharing this schedule's `λ'`.
    pub fn point_at_lambda(&self, lambda: f64) -> SchedulePoint {
        let t = (self.lambda_max - lambda) / self.span();
        SchedulePoint::from_lambda(t, lambda, self.lambda_prime())
    }

    /// `SNR(s) - SNR(t)` for `s < t`.
    pub fn snr_delta(&self, s: f64, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("times ({s}, {t}) outside [0, 1]")));
        }
        if s >= t {
            return Err(Error::domain(format!("snr_delta needs s < t, got s={s}, t={t}")));
        }
        let ls = self.lambda(s);
        let lt = self.lambda(t);
        // e^{λs} - e^{λt} = e^{λs} (1 - e^{λt - λs})
        Ok(-ls.exp() * (lt - ls).exp_m1())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = LogLinearSchedule::default();
        assert_eq!(s.eval(0.0).unwrap().lambda, 13.3);
        assert!((s.eval(0.5).unwrap().lambda - 4.15).abs() < 1e-12);
        assert!((s.eval(1.0).unwrap().lambda + 5.0).abs() < 1e-12);
        assert_eq!(s.eval(0.3).unwrap().lambda_prime, -18.3);
    }

    #[test]
    fn zero_lambda_splits_variance_evenly() {
        let p = SchedulePoint::from_lambda(0.0, 0.0, -1.0);
        assert_eq!(p.alpha2, 0.5);
        assert_eq!(p.sigma2, 0.5);
    }

    #[test]
    fn sigma0_at_default_schedule() {
        let p = LogLinearSchedule::default().eval(0.0).unwrap();
        // 1 / (1 + e^{13.3}), evaluated directly.
        let expected = 1.0 / (1.0 + 13.3f64.exp());
        assert!((p.sigma2 - expected).abs() < 1e-20);
        assert!((p.sigma2 - 1.67e-6).abs() < 0.01e-6);
        assert!((p.log_sigma2() - expected.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let s = LogLinearSchedule::default();
        assert!(matches!(s.eval(-1e-9), Err(Error::Domain(_))));
        assert!(matches!(s.eval(1.0 + 1e-9), Err(Error::Domain(_))));
        assert!(LogLinearSchedule::new(1.0, 2.0).is_err());
        assert!(LogLinearSchedule::new(1.0, 1.0).is_err());
    }

    #[test]
    fn snr_delta_examples() {
        let s = LogLinearSchedule::default();
        let full = s.snr_delta(0.0, 1.0).unwrap();
        let expected = 13.3f64.exp() - (-5.0f64).exp();
        assert!((full - expected).abs() / expected < 1e-14);

        let d = s.snr_delta(0.4, 0.6).unwrap();
        let direct = s.eval(0.4).unwrap().snr - s.eval(0.6).unwrap().snr;
        assert!(d > 0.0);
        assert!((d - direct).abs() / direct < 1e-12);

        let t = 0.7;
        let h = 1e-9;
        let small = s.snr_delta(t - h, t).unwrap();
        let taylor = -s.lambda_prime() * s.lambda(t).exp() * h;
        assert!((small - taylor).abs() / taylor < 1e-6);

        assert!(s.snr_delta(0.5, 0.5).is_err());
        assert!(s.snr_delta(0.6, 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn variance_preserving_and_snr(t in 0.0f64..=1.0, lmax in -2.0f64..20.0, span in 0.1f64..30.0) {
            let s = LogLinearSchedule::new(lmax, lmax - span).unwrap();
            let p = s.eval(t).unwrap();
            proptest::prop_assert!((p.alpha * p.alpha + p.sigma * p.sigma - 1.0).abs() < 1e-12);
            let ratio = p.alpha2 / p.sigma2;
            proptest::prop_assert!((ratio - p.snr).abs() <= 1e-9 * p.snr);
        }

        #[test]
        fn lambda_is_affine(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let s = LogLinearSchedule::default();
            let mid = s.eval(0.5 * (a + b)).unwrap().lambda;
            let avg = 0.5 * (s.eval(a).unwrap().lambda + s.eval(b).unwrap().lambda);
            proptest::prop_assert!((mid - avg).abs() < 1e-12);
        }

        #[test]
        fn snr_strictly_decreasing(s in 0.0f64..0.999, dt in 1e-6f64..1.0) {
            let sched = LogLinearSchedule::default();
            let t = (s + dt).min(1.0);
            proptest::prop_assume!(t > s);
            proptest::prop_assert!(sched.eval(s).unwrap().snr > sched.eval(t).unwrap().snr);
            proptest::prop_assert!(sched.snr_delta(s, t).unwrap() > 0.0);
        }
    }
}
