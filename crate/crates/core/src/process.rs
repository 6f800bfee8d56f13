//! Closed-form Gaussian algebra of the forward, reverse-posterior and
//! generative transitions, including the encoder's mean-shift term.
//!
//! All covariances are isotropic (`var · I`). Transition coefficients between
//! two times are always derived from the [`SchedulePoint`]s at `s` and `t`;
//! `σ²_{t|s}` is formed as `σ_t² · (1 - e^{λ_t - λ_s})` so it never loses
//! precision to cancellation when `s` and `t` are close.

use crate::error::{Error, Result};
use crate::schedule::SchedulePoint;

/// Clamp for `α_s` in `α_{t|s} = α_t / α_s`.
const ALPHA_FLOOR: f64 = 1e-30;

/// Isotropic Gaussian `N(mean, var · I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, var: f64) -> Result<Self> {
        let g = GaussianParams { mean, var };
        g.validate()?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.var > 0.0) || !self.var.is_finite() {
            return Err(Error::domain(format!("variance must be positive, got {}", self.var)));
        }
        if let Some(i) = self.mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::domain(format!("mean[{i}] is not finite")));
        }
        Ok(())
    }
}

/// Coefficients of the transition from `s` to `t` (`s < t`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoefficients {
    /// α_{t|s}
    pub alpha_ts: f64,
    /// σ²_{t|s}
    pub sigma2_ts: f64,
    /// σ_Q², the reverse-posterior variance.
    pub sigma2_q: f64,
}

impl TransitionCoefficients {
    pub fn between(s: &SchedulePoint, t: &SchedulePoint) -> Result<Self> {
        check_order(s, t)?;
        let alpha_ts = t.alpha / s.alpha.max(ALPHA_FLOOR);
        let sigma2_ts = -t.sigma2 * (t.lambda - s.lambda).exp_m1();
        let sigma2_q = sigma2_ts * s.sigma2 / t.sigma2;
        Ok(TransitionCoefficients {
            alpha_ts,
            sigma2_ts,
            sigma2_q,
        })
    }
}

/// Coefficients of `μ_Q = a·z_t + b·x_t + α_s·(x_s - x_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PosteriorCoefficients {
    pub z: f64,
    pub x: f64,
    pub alpha_s: f64,
    pub sigma2_q: f64,
}

impl PosteriorCoefficients {
    pub fn between(s: &SchedulePoint, t: &SchedulePoint) -> Result<Self> {
        let c = TransitionCoefficients::between(s, t)?;
        Ok(PosteriorCoefficients {
            z: c.alpha_ts * s.sigma2 / t.sigma2,
            x: s.alpha * c.sigma2_ts / t.sigma2,
            alpha_s: s.alpha,
            sigma2_q: c.sigma2_q,
        })
    }
}

fn check_order(s: &SchedulePoint, t: &SchedulePoint) -> Result<()> {
    // λ is strictly decreasing in t, so s < t  ⇔  λ_s > λ_t.
    if s.lambda > t.lambda {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "transition needs s < t (λ_s = {} must exceed λ_t = {})",
            s.lambda, t.lambda
        )))
    }
}

fn check_dims(what: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "{what}: dimension mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} contains non-finite values")))
    }
}

/// `q(z_t | x) = N(α_t x_t, σ_t²)` where `x_t` is the encoder output at `t`.
pub fn marginal(x_enc: &[f64], point: &SchedulePoint) -> Result<GaussianParams> {
    check_finite("x_enc", x_enc)?;
    Ok(GaussianParams {
        mean: x_enc.iter().map(|v| point.alpha * v).collect(),
        var: point.sigma2,
    })
}

/// `q(z_t | z_s, x)` with the mean shift `α_t (x_t - x_s)`.
pub fn forward_transition(
    z_s: &[f64],
    x_t: &[f64],
    x_s: &[f64],
    s: &SchedulePoint,
    t: &SchedulePoint,
) -> Result<GaussianParams> {
    check_dims("forward_transition x_t", z_s, x_t)?;
    check_dims("forward_transition x_s", z_s, x_s)?;
    let c = TransitionCoefficients::between(s, t)?;
    let mean = z_s
        .iter()
        .zip(x_t.iter().zip(x_s))
        .map(|(z, (xt, xs))| c.alpha_ts * z + t.alpha * (xt - xs))
        .collect();
    Ok(GaussianParams {
        mean,
        var: c.sigma2_ts,
    })
}

/// `q(z_s | z_t, x)`, the reverse posterior with the encoder's mean shift.
pub fn reverse_posterior(
    z_t: &[f64],
    x_t: &[f64],
    x_s: &[f64],
    s: &SchedulePoint,
    t: &SchedulePoint,
) -> Result<GaussianParams> {
    check_dims("reverse_posterior x_t", z_t, x_t)?;
    check_dims("reverse_posterior x_s", z_t, x_s)?;
    let c = PosteriorCoefficients::between(s, t)?;
    let mean = z_t
        .iter()
        .zip(x_t.iter().zip(x_s))
        .map(|(z, (xt, xs))| c.z * z + c.x * xt + c.alpha_s * (xs - xt))
        .collect();
    Ok(GaussianParams {
        mean,
        var: c.sigma2_q,
    })
}

/// Mean of the generative step `p(z_s | z_t)`, optionally with the
/// counterterm `α_s (λ_s - λ_t) σ_t² x̂`.
pub fn generative_mean(
    z_t: &[f64],
    x_hat: &[f64],
    s: &SchedulePoint,
    t: &SchedulePoint,
    counterterm: bool,
) -> Result<Vec<f64>> {
    check_dims("generative_mean", z_t, x_hat)?;
    let c = PosteriorCoefficients::between(s, t)?;
    let x_coef = if counterterm {
        c.x + s.alpha * (s.lambda - t.lambda) * t.sigma2
    } else {
        c.x
    };
    Ok(z_t
        .iter()
        .zip(x_hat)
        .map(|(z, xh)| c.z * z + x_coef * xh)
        .collect())
}

/// The weighting penalty `g(w) = (d/2)(w - 1 - log w)`.
pub fn weighting_penalty(w: f64, d: usize) -> f64 {
    // w - 1 - log w, arranged to keep precision near w = 1.
    let u = w - 1.0;
    0.5 * d as f64 * (u - u.ln_1p())
}

/// KL(q ‖ p) between isotropic Gaussians, written in the weighted form
/// `g(w) + w/(2σ_Q²) ‖μ_P - μ_Q‖²` with `w = σ_Q² / σ_P²`.
pub fn kl_isotropic(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    check_dims("kl_isotropic", &q.mean, &p.mean)?;
    let d = q.dim();
    let w = q.var / p.var;
    let gap: f64 = q
        .mean
        .iter()
        .zip(&p.mean)
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(weighting_penalty(w, d) + w / (2.0 * q.var) * gap)
}

/// The generative variance minimizing the expected KL for a given expected
/// squared mean gap: `σ_Q² + gap / d`.
pub fn optimal_sigma_p(sigma2_q: f64, mean_sq_gap: f64, d: usize) -> Result<f64> {
    if !(sigma2_q > 0.0) {
        return Err(Error::domain(format!("σ_Q² must be positive, got {sigma2_q}")));
    }
    if !(mean_sq_gap >= 0.0) {
        return Err(Error::domain(format!(
            "expected squared gap must be nonnegative, got {mean_sq_gap}"
        )));
    }
    if d == 0 {
        return Err(Error::domain("dimension must be positive"));
    }
    Ok(sigma2_q + mean_sq_gap / d as f64)
}

/// Expected KL over the data/latent distribution as a function of `σ_P²`,
/// given `σ_Q²` and `E‖μ_P - μ_Q‖²`.
pub fn expected_kl(sigma2_q: f64, sigma2_p: f64, mean_sq_gap: f64, d: usize) -> f64 {
    let w = sigma2_q / sigma2_p;
    weighting_penalty(w, d) + mean_sq_gap / (2.0 * sigma2_p)
}
