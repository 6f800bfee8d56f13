//! Loss terms: discrete-T diffusion loss (with optional weighting), the
//! continuous-time v- and x-parameterized diffusion losses, latent and
//! reconstruction losses, and their aggregation into bits per dimension.
//!
//! Value-level functions take any [`Denoiser`] and [`EncoderSpec`]. The
//! training objective is recorded on a [`Graph`] so it can be differentiated.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::scale_pixel_unchecked;
use crate::encoder::{EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::nn::model::DiffEncModel;
use crate::nn::tape::{Graph, Var};
use crate::predictor::{x_from_v, Denoiser};
use crate::process::{generative_mean, optimal_sigma_p, reverse_posterior, weighting_penalty};
use crate::schedule::{LogLinearSchedule, SchedulePoint};

/// Rows per denoiser call in batched evaluation.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl MonteCarloEstimate {
    /// Sample mean and its standard error.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return MonteCarloEstimate {
                value: f64::NAN,
                std_error: f64::NAN,
                n_samples: 0,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MonteCarloEstimate {
            value: mean,
            std_error,
            n_samples: n,
        }
    }
}

/// Per-datapoint negative ELBO split into its components (nats).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub diffusion: f64,
    pub diffusion_std_error: f64,
    pub latent: f64,
    pub reconstruction: f64,
    pub weighting_penalty: f64,
    pub total_nats: f64,
    pub bpd: f64,
    pub dim: usize,
}

impl LossBreakdown {
    pub fn new(
        diffusion: f64,
        diffusion_std_error: f64,
        latent: f64,
        reconstruction: f64,
        weighting_penalty: f64,
        dim: usize,
    ) -> Self {
        let total_nats = diffusion + latent + reconstruction + weighting_penalty;
        LossBreakdown {
            diffusion,
            diffusion_std_error,
            latent,
            reconstruction,
            weighting_penalty,
            total_nats,
            bpd: to_bpd(total_nats, dim),
            dim,
        }
    }

    /// Converts any nats value of this breakdown to bits per dimension.
    pub fn bits(&self, nats: f64) -> f64 {
        to_bpd(nats, self.dim)
    }
}

pub fn to_bpd(nats: f64, dim: usize) -> f64 {
    nats / (dim as f64 * std::f64::consts::LN_2)
}

// ---------------------------------------------------------------------------
// Reconstruction

/// Negative log-likelihood of one 8-bit pixel under the categorical
/// `p(v | z) ∝ N(z; α₀ scale(v), σ₀²)`, and `E_p[scale(v)]`.
pub(crate) fn pixel_nll(z: f64, target: u8, alpha0: f64, sigma2: f64) -> (f64, f64) {
    let logits = pixel_logits(z, alpha0, sigma2);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (v, &l) in logits.iter().enumerate() {
        let e = (l - max).exp();
        sum += e;
        weighted += e * scale_pixel_unchecked(v as u8);
    }
    let lse = max + sum.ln();
    (lse - logits[target as usize], weighted / sum)
}

fn pixel_logits(z: f64, alpha0: f64, sigma2: f64) -> [f64; 256] {
    let mut out = [0.0; 256];
    for (v, l) in out.iter_mut().enumerate() {
        let r = z - alpha0 * scale_pixel_unchecked(v as u8);
        *l = -r * r / (2.0 * sigma2);
    }
    out
}

/// The normalized 256-way categorical for one latent coordinate.
pub fn pixel_categorical(z: f64, alpha0: f64, sigma2: f64) -> Vec<f64> {
    let logits = pixel_logits(z, alpha0, sigma2);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Most probable pixel value for a latent coordinate.
pub fn decode_pixel(z: f64, alpha0: f64) -> u8 {
    // The logits are a parabola in scale(v); the mode is the nearest level.
    let target = z / alpha0;
    let v = ((target + 1.0) * 127.5).round();
    v.clamp(0.0, 255.0) as u8
}

/// `-Σ_i log p(x_i | z_{0,i})`.
pub fn reconstruction_loss(pixels: &[u8], z0: &[f64], schedule: &LogLinearSchedule) -> Result<f64> {
    if pixels.len() != z0.len() {
        return Err(Error::domain("pixel and latent dimensions differ"));
    }
    let p0 = schedule.point(0.0);
    Ok(pixels
        .iter()
        .zip(z0)
        .map(|(&x, &z)| pixel_nll(z, x, p0.alpha, p0.sigma2).0)
        .sum())
}

// ---------------------------------------------------------------------------
// Latent

/// `½ Σ_i (α₁² x_{1,i}² + σ₁² - log σ₁² - 1)` for one datapoint.
pub fn latent_loss(x: &[f64], encoder: &EncoderSpec, schedule: &LogLinearSchedule) -> Result<f64> {
    let p1 = schedule.point(1.0);
    let x1 = encoder.encode(x, &p1)?;
    Ok(latent_from_encoded(&x1, &p1))
}

fn latent_from_encoded(x1: &[f64], p1: &SchedulePoint) -> f64 {
    let c = p1.sigma2 - p1.log_sigma2() - 1.0;
    0.5 * x1.iter().map(|v| p1.alpha2 * v * v + c).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Continuous-time diffusion loss

/// `x_t` and `D = (dx_t/dλ) / σ_t²` per row, formed so that a trainable
/// encoder with `y = dy = 0` reproduces the non-trainable values bit for bit.
fn encoder_terms(
    encoder: &EncoderSpec,
    x: &[f64],
    points: &[SchedulePoint],
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let d = x.len() / points.len();
    match encoder.kind {
        EncoderKind::Identity => Ok((x.to_vec(), None)),
        EncoderKind::NonTrainable => {
            let xa: Vec<f64> = rows_map(x, d, points, |p, xi| p.alpha2 * xi);
            Ok((xa.clone(), Some(xa)))
        }
        EncoderKind::Trainable => {
            let (y, dy) = encoder.y_and_dy_rows(x, points)?;
            let mut xt = Vec::with_capacity(x.len());
            let mut dd = Vec::with_capacity(x.len());
            for (k, &xi) in x.iter().enumerate() {
                let p = &points[k / d];
                let xa = p.alpha2 * xi;
                xt.push(p.sigma2 * y[k] + xa);
                dd.push((dy[k] - p.alpha2 * y[k]) + xa);
            }
            Ok((xt, Some(dd)))
        }
    }
}

fn rows_map(x: &[f64], d: usize, points: &[SchedulePoint], f: impl Fn(&SchedulePoint, f64) -> f64) -> Vec<f64> {
    x.iter().enumerate().map(|(k, &xi)| f(&points[k / d], xi)).collect()
}

struct ContinuousTerms {
    /// Per-row `v - v̂ + [ct] σ x̂ - σ D`.
    residual: Vec<f64>,
    /// Per-row `x̂ - x_t + [ct] σ² x̂ - dx_t/dλ`.
    x_residual: Vec<f64>,
}

fn continuous_terms(
    x: &[f64],
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    points: &[SchedulePoint],
    eps: &[f64],
    counterterm: bool,
) -> Result<ContinuousTerms> {
    let n = points.len();
    let d = model.dim();
    if x.len() != n * d || eps.len() != n * d {
        return Err(Error::domain(format!(
            "expected {n}×{d} inputs, got x: {}, eps: {}",
            x.len(),
            eps.len()
        )));
    }
    let (xt, dd) = encoder_terms(encoder, x, points)?;
    let z: Vec<f64> = (0..n * d)
        .map(|k| {
            let p = &points[k / d];
            p.alpha * xt[k] + p.sigma * eps[k]
        })
        .collect();
    let v_hat = model.predict_v_rows(&z, points)?;
    let mut residual = Vec::with_capacity(n * d);
    let mut x_residual = Vec::with_capacity(n * d);
    for k in 0..n * d {
        let p = &points[k / d];
        let v = p.alpha * eps[k] - p.sigma * xt[k];
        let x_hat = p.alpha * z[k] - p.sigma * v_hat[k];
        let mut r = v - v_hat[k];
        let mut rx = x_hat - xt[k];
        if counterterm {
            r += p.sigma * x_hat;
            rx += p.sigma2 * x_hat;
        }
        if let Some(dd) = &dd {
            r -= p.sigma * dd[k];
            rx -= p.sigma2 * dd[k];
        }
        residual.push(r);
        x_residual.push(rx);
    }
    Ok(ContinuousTerms { residual, x_residual })
}

fn check_times(points: &[SchedulePoint]) -> Result<()> {
    match points.iter().find(|p| !(0.0..=1.0).contains(&p.t)) {
        Some(p) => Err(Error::domain(format!("t = {} is outside [0, 1]", p.t))),
        None => Ok(()),
    }
}

/// v-parameterized continuous diffusion-loss integrand for each row,
/// `-½ λ' α² ‖v - v̂ + [ct] σ x̂ - σ D‖²`.
pub fn continuous_vloss_rows(
    x: &[f64],
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    points: &[SchedulePoint],
    eps: &[f64],
    counterterm: bool,
) -> Result<Vec<f64>> {
    check_times(points)?;
    let d = model.dim();
    let terms = continuous_terms(x, model, encoder, points, eps, counterterm)?;
    Ok(points
        .iter()
        .zip(terms.residual.chunks_exact(d))
        .map(|(p, r)| -0.5 * p.lambda_prime * p.alpha2 * r.iter().map(|v| v * v).sum::<f64>())
        .collect())
}

/// x-parameterized twin, `-½ λ' e^λ ‖x̂ - x_t + [ct] σ² x̂ - dx_t/dλ‖²`.
pub fn continuous_xloss_rows(
    x: &[f64],
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    points: &[SchedulePoint],
    eps: &[f64],
    counterterm: bool,
) -> Result<Vec<f64>> {
    check_times(points)?;
    let d = model.dim();
    let terms = continuous_terms(x, model, encoder, points, eps, counterterm)?;
    Ok(points
        .iter()
        .zip(terms.x_residual.chunks_exact(d))
        .map(|(p, r)| -0.5 * p.lambda_prime * p.snr * r.iter().map(|v| v * v).sum::<f64>())
        .collect())
}

pub fn continuous_vloss(
    x: &[f64],
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    point: &SchedulePoint,
    eps: &[f64],
    counterterm: bool,
) -> Result<f64> {
    Ok(continuous_vloss_rows(x, model, encoder, std::slice::from_ref(point), eps, counterterm)?[0])
}

pub fn continuous_xloss(
    x: &[f64],
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    point: &SchedulePoint,
    eps: &[f64],
    counterterm: bool,
) -> Result<f64> {
    Ok(continuous_xloss_rows(x, model, encoder, std::slice::from_ref(point), eps, counterterm)?[0])
}

/// The ε-prediction objective `-½ λ' α² ‖ε - ε̂‖²`, which the v-loss
/// approaches as `t → 0`.
pub fn eps_objective(
    x: &[f64],
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    point: &SchedulePoint,
    eps: &[f64],
) -> Result<f64> {
    let x_t = encoder.encode(x, point)?;
    let z: Vec<f64> = x_t.iter().zip(eps).map(|(x, e)| point.alpha * x + point.sigma * e).collect();
    let v_hat = model.predict_v(&z, point)?;
    let eps_hat = crate::predictor::eps_from_v(&z, &v_hat, point);
    let sq: f64 = eps.iter().zip(&eps_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    // ε - ε̂ = α (v - v̂), so the v-loss weight α² absorbs into ‖ε - ε̂‖².
    Ok(-0.5 * point.lambda_prime * sq)
}

// ---------------------------------------------------------------------------
// Discrete-time diffusion loss

/// How the generative variance is chosen in the discrete loss.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightPolicy {
    /// `σ_P = σ_Q` (`w = 1`).
    Unit,
    /// `σ_P² = σ_Q² / w` for a constant `w`.
    Fixed(f64),
    /// `σ_P² = σ_Q² + gap_i / d` from per-step estimates of `E‖μ_P - μ_Q‖²`.
    Optimal(Vec<f64>),
}

/// Contributions of one step `s = (i-1)/T → t = i/T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepTerm {
    pub s: f64,
    pub t: f64,
    pub sigma2_q: f64,
    pub w: f64,
    /// `‖μ_P - μ_Q‖²`
    pub mean_sq_gap: f64,
    pub penalty: f64,
    pub kl: f64,
}

/// Full discrete loss for one datapoint and one noise draw per step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteLoss {
    pub steps: Vec<StepTerm>,
    pub total: f64,
    pub penalty_total: f64,
}

/// Per-step KL in the weighted form `g(w) + w ‖μ_P - μ_Q‖² / (2σ_Q²)`.
/// Every policy goes through here, so `Fixed(1)` is `Unit` exactly.
fn weighted_kl(sigma2_q: f64, w: f64, gap: f64, d: usize) -> (f64, f64) {
    let penalty = weighting_penalty(w, d);
    (penalty + w / (2.0 * sigma2_q) * gap, penalty)
}

fn step_weight(policy: &WeightPolicy, i: usize, sigma2_q: f64, d: usize) -> Result<f64> {
    match policy {
        WeightPolicy::Unit => Ok(1.0),
        WeightPolicy::Fixed(w) => {
            if !(*w > 0.0) {
                return Err(Error::domain(format!("weight must be positive, got {w}")));
            }
            Ok(*w)
        }
        WeightPolicy::Optimal(gaps) => {
            let gap = gaps
                .get(i)
                .ok_or_else(|| Error::domain(format!("no gap estimate for step {}", i + 1)))?;
            Ok(sigma2_q / optimal_sigma_p(sigma2_q, *gap, d)?)
        }
    }
}

/// Exact (deterministic) discrete loss `Σ_i KL(q(z_s|z_t,x) ‖ p(z_s|z_t))`
/// where step `i` uses the noise vector `eps_for(i)` to place `z_t`.
pub fn discrete_diffusion_loss_with(
    x: &[f64],
    steps: usize,
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    schedule: &LogLinearSchedule,
    policy: &WeightPolicy,
    counterterm: bool,
    eps_for: &mut dyn FnMut(usize) -> Vec<f64>,
) -> Result<DiscreteLoss> {
    if steps == 0 {
        return Err(Error::domain("number of steps T must be at least 1"));
    }
    let d = model.dim();
    if x.len() != d {
        return Err(Error::domain("datapoint does not match model dimension"));
    }
    if let WeightPolicy::Optimal(g) = policy {
        if g.len() != steps {
            return Err(Error::domain(format!("{} gap estimates for T = {steps}", g.len())));
        }
    }
    let tf = steps as f64;
    let pts: Vec<SchedulePoint> = (0..=steps).map(|i| schedule.point(i as f64 / tf)).collect();
    let enc = encoder.encode_rows(&x.repeat(steps + 1), &pts)?;

    // One batched denoiser call for all z_t.
    let mut z_all = Vec::with_capacity(steps * d);
    for i in 1..=steps {
        let e = eps_for(i - 1);
        if e.len() != d {
            return Err(Error::domain("noise draw does not match model dimension"));
        }
        let p = &pts[i];
        z_all.extend((0..d).map(|j| p.alpha * enc[i * d + j] + p.sigma * e[j]));
    }
    let v_hat = model.predict_v_rows(&z_all, &pts[1..])?;

    let mut out = Vec::with_capacity(steps);
    let mut total = 0.0;
    let mut penalty_total = 0.0;
    for i in 1..=steps {
        let (ps, pt) = (&pts[i - 1], &pts[i]);
        let z = &z_all[(i - 1) * d..i * d];
        let x_hat = x_from_v(z, &v_hat[(i - 1) * d..i * d], pt);
        let xs = &enc[(i - 1) * d..i * d];
        let xt = &enc[i * d..(i + 1) * d];
        let q = reverse_posterior(z, xt, xs, ps, pt)?;
        let mu_p = generative_mean(z, &x_hat, ps, pt, counterterm)?;
        let gap: f64 = mu_p.iter().zip(&q.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        let w = step_weight(policy, i - 1, q.var, d)?;
        let (kl, penalty) = weighted_kl(q.var, w, gap, d);
        total += kl;
        penalty_total += penalty;
        out.push(StepTerm {
            s: ps.t,
            t: pt.t,
            sigma2_q: q.var,
            w,
            mean_sq_gap: gap,
            penalty,
            kl,
        });
    }
    Ok(DiscreteLoss {
        steps: out,
        total,
        penalty_total,
    })
}

/// Discrete loss with a single shared noise vector for every step.
pub fn discrete_diffusion_loss_fixed_eps(
    x: &[f64],
    steps: usize,
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    schedule: &LogLinearSchedule,
    policy: &WeightPolicy,
    counterterm: bool,
    eps: &[f64],
) -> Result<DiscreteLoss> {
    discrete_diffusion_loss_with(x, steps, model, encoder, schedule, policy, counterterm, &mut |_| {
        eps.to_vec()
    })
}

/// Unbiased Monte Carlo estimate of the discrete loss: `n_rep` independent
/// sweeps, each drawing fresh noise for every step.
#[allow(clippy::too_many_arguments)]
pub fn discrete_diffusion_loss<R: Rng>(
    x: &[f64],
    steps: usize,
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    schedule: &LogLinearSchedule,
    policy: &WeightPolicy,
    counterterm: bool,
    n_rep: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate> {
    let d = model.dim();
    let mut totals = Vec::with_capacity(n_rep.max(1));
    for _ in 0..n_rep.max(1) {
        let r = discrete_diffusion_loss_with(x, steps, model, encoder, schedule, policy, counterterm, &mut |_| {
            standard_normal_vec(rng, d)
        })?;
        totals.push(r.total);
    }
    Ok(MonteCarloEstimate::from_samples(&totals))
}

/// Average `‖μ_P - μ_Q‖²` per step over a bank of noise vectors, the input
/// needed by [`WeightPolicy::Optimal`].
pub fn estimate_step_gaps(
    x: &[f64],
    steps: usize,
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    schedule: &LogLinearSchedule,
    counterterm: bool,
    eps_bank: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if eps_bank.is_empty() {
        return Err(Error::domain("noise bank is empty"));
    }
    let mut gaps = vec![0.0; steps];
    for eps in eps_bank {
        let r = discrete_diffusion_loss_fixed_eps(
            x,
            steps,
            model,
            encoder,
            schedule,
            &WeightPolicy::Unit,
            counterterm,
            eps,
        )?;
        for (g, s) in gaps.iter_mut().zip(&r.steps) {
            *g += s.mean_sq_gap;
        }
    }
    let k = eps_bank.len() as f64;
    Ok(gaps.into_iter().map(|g| g / k).collect())
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------------------
// Evaluation

/// Negative ELBO of a set of 8-bit datapoints (`n × d`, row-major). The
/// diffusion term averages `n_mc` draws of `(t, ε)` per datapoint.
#[allow(clippy::too_many_arguments)]
pub fn elbo_bpd<R: Rng>(
    pixels: &[u8],
    n: usize,
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    schedule: &LogLinearSchedule,
    n_mc: usize,
    counterterm: bool,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let d = model.dim();
    if n == 0 || pixels.len() != n * d {
        return Err(Error::domain(format!(
            "expected {n} datapoints of dimension {d}, got {} values",
            pixels.len()
        )));
    }
    if n_mc == 0 {
        return Err(Error::domain("n_mc must be at least 1"));
    }
    let x: Vec<f64> = pixels.iter().map(|&p| scale_pixel_unchecked(p)).collect();

    // Diffusion: per-datapoint averages over n_mc draws.
    let rows_total = n * n_mc;
    let mut per_point = vec![0.0; n];
    let mut start = 0;
    while start < rows_total {
        let end = (start + EVAL_CHUNK).min(rows_total);
        let m = end - start;
        let mut xr = Vec::with_capacity(m * d);
        let mut pts = Vec::with_capacity(m);
        for r in start..end {
            let i = r / n_mc;
            xr.extend_from_slice(&x[i * d..(i + 1) * d]);
            pts.push(schedule.point(rng.gen::<f64>()));
        }
        let eps = standard_normal_vec(rng, m * d);
        let vals = continuous_vloss_rows(&xr, model, encoder, &pts, &eps, counterterm)?;
        for (r, v) in (start..end).zip(vals) {
            per_point[r / n_mc] += v / n_mc as f64;
        }
        start = end;
    }
    // Standard error of the overall mean from the per-datapoint means.
    let diffusion = MonteCarloEstimate::from_samples(&per_point);

    let p0 = schedule.point(0.0);
    let p1 = schedule.point(1.0);
    let x0 = encoder.encode_rows(&x, &vec![p0; n])?;
    let x1 = encoder.encode_rows(&x, &vec![p1; n])?;
    let mut latent = 0.0;
    let mut recon = 0.0;
    for i in 0..n {
        latent += latent_from_encoded(&x1[i * d..(i + 1) * d], &p1);
        let e = standard_normal_vec(rng, d);
        let z0: Vec<f64> = (0..d).map(|j| p0.alpha * x0[i * d + j] + p0.sigma * e[j]).collect();
        recon += reconstruction_loss(&pixels[i * d..(i + 1) * d], &z0, schedule)?;
    }
    let nf = n as f64;
    Ok(LossBreakdown::new(
        diffusion.value,
        diffusion.std_error,
        latent / nf,
        recon / nf,
        0.0,
        d,
    ))
}

/// One row of the per-timestep loss profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimestepRow {
    pub t: f64,
    pub lambda: f64,
    pub integrand_mean: f64,
    pub integrand_stderr: f64,
}

/// Diffusion-loss integrand at each of `times`, averaged over all
/// datapoints and `n_eps` noise draws each.
#[allow(clippy::too_many_arguments)]
pub fn timestep_profile<R: Rng>(
    pixels: &[u8],
    n: usize,
    model: &dyn Denoiser,
    encoder: &EncoderSpec,
    schedule: &LogLinearSchedule,
    times: &[f64],
    n_eps: usize,
    counterterm: bool,
    rng: &mut R,
) -> Result<Vec<TimestepRow>> {
    let d = model.dim();
    let x: Vec<f64> = pixels.iter().map(|&p| scale_pixel_unchecked(p)).collect();
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let p = schedule.eval(t)?;
        let m = n * n_eps.max(1);
        let mut xr = Vec::with_capacity(m * d);
        for r in 0..m {
            let i = r % n;
            xr.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let eps = standard_normal_vec(rng, m * d);
        let vals = continuous_vloss_rows(&xr, model, encoder, &vec![p; m], &eps, counterterm)?;
        let est = MonteCarloEstimate::from_samples(&vals);
        out.push(TimestepRow {
            t,
            lambda: p.lambda,
            integrand_mean: est.value,
            integrand_stderr: est.std_error,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training objective on the tape

/// Noise and time draws for one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDraws {
    pub t: Vec<f64>,
    /// Diffusion noise, `n × d`.
    pub eps: Vec<f64>,
    /// Noise for the `z_0` draw of the reconstruction term, `n × d`.
    pub eps0: Vec<f64>,
}

impl TrainingDraws {
    pub fn sample<R: Rng>(n: usize, d: usize, rng: &mut R) -> Self {
        let t = (0..n).map(|_| rng.gen::<f64>()).collect();
        let eps = standard_normal_vec(rng, n * d);
        let eps0 = standard_normal_vec(rng, n * d);
        TrainingDraws { t, eps, eps0 }
    }
}

/// Records the training loss (mean over the batch of diffusion + latent +
/// reconstruction) and returns it with its value breakdown.
pub fn training_loss(
    g: &mut Graph,
    model: &DiffEncModel,
    pixels: &[u8],
    draws: &TrainingDraws,
    counterterm: bool,
) -> Result<(Var, LossBreakdown)> {
    let d = model.dim();
    let n = draws.t.len();
    if pixels.len() != n * d || draws.eps.len() != n * d || draws.eps0.len() != n * d {
        return Err(Error::domain("training batch shapes are inconsistent"));
    }
    let sched = model.schedule;
    let x: Vec<f64> = pixels.iter().map(|&p| scale_pixel_unchecked(p)).collect();
    let xv = g.constant(x.clone(), n, d);
    let pts: Vec<SchedulePoint> = draws.t.iter().map(|&t| sched.point(t)).collect();
    let lambdas: Vec<f64> = pts.iter().map(|p| p.lambda).collect();
    let per_row = |f: &dyn Fn(&SchedulePoint) -> f64| -> Vec<f64> { pts.iter().map(f).collect() };
    let alpha = per_row(&|p| p.alpha);
    let sigma = per_row(&|p| p.sigma);
    let alpha2 = per_row(&|p| p.alpha2);
    let sigma2 = per_row(&|p| p.sigma2);
    let ax: Vec<f64> = (0..n * d).map(|k| alpha2[k / d] * x[k]).collect();

    // x_t and D = (dx_t/dλ) / σ².
    let (x_t, dd) = match model.kind() {
        EncoderKind::Identity => (xv, None),
        EncoderKind::NonTrainable => {
            let c = g.constant(ax.clone(), n, d);
            (c, Some(c))
        }
        EncoderKind::Trainable => {
            let h = crate::encoder::fd_step(&sched);
            let y = model.y_graph(g, xv, &lambdas).expect("trainable encoder");
            let lp: Vec<f64> = lambdas.iter().map(|l| l + h).collect();
            let lm: Vec<f64> = lambdas.iter().map(|l| l - h).collect();
            let yp = model.y_graph(g, xv, &lp).expect("trainable encoder");
            let ym = model.y_graph(g, xv, &lm).expect("trainable encoder");
            let diff = g.sub(yp, ym);
            let dy = g.scale(diff, 1.0 / (2.0 * h));
            let sy = g.scale_rows(y, sigma2.clone());
            let x_t = g.add_const(sy, &ax);
            let ay = g.scale_rows(y, alpha2.clone());
            let dmy = g.sub(dy, ay);
            let dd = g.add_const(dmy, &ax);
            (x_t, Some(dd))
        }
    };

    let se: Vec<f64> = (0..n * d).map(|k| sigma[k / d] * draws.eps[k]).collect();
    let ae: Vec<f64> = (0..n * d).map(|k| alpha[k / d] * draws.eps[k]).collect();
    let zs = g.scale_rows(x_t, alpha.clone());
    let z = g.add_const(zs, &se);
    let neg_sigma: Vec<f64> = sigma.iter().map(|s| -s).collect();
    let vs = g.scale_rows(x_t, neg_sigma);
    let v = g.add_const(vs, &ae);
    let v_hat = model.v_hat_graph(g, z, &lambdas);
    let mut r = g.sub(v, v_hat);
    if counterterm {
        let az = g.scale_rows(z, alpha.clone());
        let sv = g.scale_rows(v_hat, sigma.clone());
        let x_hat = g.sub(az, sv);
        let sx = g.scale_rows(x_hat, sigma.clone());
        r = g.add(r, sx);
    }
    if let Some(dd) = dd {
        let sd = g.scale_rows(dd, sigma.clone());
        r = g.sub(r, sd);
    }
    let wts: Vec<f64> = pts.iter().map(|p| -0.5 * p.lambda_prime * p.alpha2).collect();
    let diff_rows = g.weighted_row_sum_sq(r, wts);
    let diffusion = g.mean(diff_rows);

    // Latent term at t = 1.
    let p1 = sched.point(1.0);
    let x1 = encode_at_graph(g, model, xv, &x, n, d, &p1);
    let lat_rows = g.weighted_row_sum_sq(x1, vec![0.5 * p1.alpha2; n]);
    let lat_const = 0.5 * d as f64 * (p1.sigma2 - p1.log_sigma2() - 1.0);
    let lat_mean = g.mean(lat_rows);
    let latent = g.add_const(lat_mean, &[lat_const]);

    // Reconstruction term at t = 0.
    let p0 = sched.point(0.0);
    let x0 = encode_at_graph(g, model, xv, &x, n, d, &p0);
    let e0: Vec<f64> = draws.eps0.iter().map(|e| p0.sigma * e).collect();
    let z0s = g.scale(x0, p0.alpha);
    let z0 = g.add_const(z0s, &e0);
    let rec_rows = g.pixel_nll(z0, pixels.to_vec(), p0.alpha, p0.sigma2);
    let recon = g.mean(rec_rows);

    let dl = g.add(diffusion, latent);
    let total = g.add(dl, recon);
    g.check_finite()?;
    let breakdown = LossBreakdown::new(g.scalar(diffusion), 0.0, g.scalar(latent), g.scalar(recon), 0.0, d);
    Ok((total, breakdown))
}

/// `x_t` at a single fixed time for all rows, as a graph node.
fn encode_at_graph(
    g: &mut Graph,
    model: &DiffEncModel,
    xv: Var,
    x: &[f64],
    n: usize,
    d: usize,
    p: &SchedulePoint,
) -> Var {
    match model.kind() {
        EncoderKind::Identity => xv,
        EncoderKind::NonTrainable => g.constant(x.iter().map(|v| p.alpha2 * v).collect(), n, d),
        EncoderKind::Trainable => {
            let y = model.y_graph(g, xv, &vec![p.lambda; n]).expect("trainable encoder");
            let sy = g.scale(y, p.sigma2);
            let ax: Vec<f64> = x.iter().map(|v| p.alpha2 * v).collect();
            g.add_const(sy, &ax)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::ZeroV;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn categorical_normalizes() {
        let p0 = LogLinearSchedule::default().point(0.0);
        for &z in &[-1.2, -0.3, 0.0, 0.004, 0.77, 1.0] {
            let p = pixel_categorical(z, p0.alpha, p0.sigma2);
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrated_latent_decodes_exactly() {
        let p0 = LogLinearSchedule::default().point(0.0);
        for v in [0u8, 17, 128, 200, 255] {
            let z = p0.alpha * scale_pixel_unchecked(v);
            let (nll, _) = pixel_nll(z, v, p0.alpha, p0.sigma2);
            assert!(nll < 1e-6, "v={v}: {nll}");
            assert_eq!(decode_pixel(z, p0.alpha), v);
            let p = pixel_categorical(z, p0.alpha, p0.sigma2);
            let arg = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, v as usize);
        }
    }

    #[test]
    fn flat_likelihood_is_uniform() {
        let (nll, _) = pixel_nll(0.3, 9, 1.0, 1e12);
        assert!((nll - 256f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn latent_examples() {
        // σ² = 1 and α x₁ = c: loss c²/2. Built directly on the closed form.
        let p = SchedulePoint {
            t: 1.0,
            lambda: -80.0,
            lambda_prime: -1.0,
            alpha: 0.0,
            sigma: 1.0,
            alpha2: 0.0,
            sigma2: 1.0,
            snr: 0.0,
        };
        assert_eq!(latent_from_encoded(&[3.0, -1.0], &p), 0.0);
        let s = LogLinearSchedule::default();
        let x = [0.7, -0.4, 0.1];
        let id = latent_loss(&x, &EncoderSpec::identity(), &s).unwrap();
        let nt = latent_loss(&x, &EncoderSpec::non_trainable(), &s).unwrap();
        assert!(nt < id);
    }

    #[test]
    fn perfect_model_has_zero_discrete_loss() {
        // x̂ ≡ x for the identity encoder: v̂ = (α z - x) / σ.
        struct Perfect(Vec<f64>);
        impl Denoiser for Perfect {
            fn dim(&self) -> usize {
                self.0.len()
            }
            fn predict_v_batch(&self, z: &[f64], n: usize, p: &SchedulePoint) -> Result<Vec<f64>> {
                let d = self.0.len();
                Ok((0..n * d).map(|k| (p.alpha * z[k] - self.0[k % d]) / p.sigma).collect())
            }
        }
        let x = vec![0.3, -0.2];
        let m = Perfect(x.clone());
        let s = LogLinearSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for steps in [1, 7, 64] {
            let est = discrete_diffusion_loss(
                &x,
                steps,
                &m,
                &EncoderSpec::identity(),
                &s,
                &WeightPolicy::Unit,
                false,
                3,
                &mut rng,
            )
            .unwrap();
            assert!(est.value.abs() < 1e-9, "T={steps}: {}", est.value);
        }
    }

    #[test]
    fn fixed_unit_weight_is_unit_policy() {
        let s = LogLinearSchedule::default();
        let m = ZeroV { dim: 3 };
        let x = [0.5, -0.1, 0.9];
        let eps = [0.3, 1.1, -0.7];
        for enc in [EncoderSpec::identity(), EncoderSpec::non_trainable()] {
            let a = discrete_diffusion_loss_fixed_eps(&x, 32, &m, &enc, &s, &WeightPolicy::Unit, true, &eps).unwrap();
            let b = discrete_diffusion_loss_fixed_eps(&x, 32, &m, &enc, &s, &WeightPolicy::Fixed(1.0), true, &eps)
                .unwrap();
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let s = LogLinearSchedule::default();
        let m = ZeroV { dim: 1 };
        let r = discrete_diffusion_loss_fixed_eps(&[0.1], 0, &m, &EncoderSpec::identity(), &s, &WeightPolicy::Unit, false, &[0.0]);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn mc_estimate_of_constant() {
        let e = MonteCarloEstimate::from_samples(&[2.0; 10]);
        assert_eq!(e.value, 2.0);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn breakdown_sums() {
        let b = LossBreakdown::new(1.5, 0.1, 0.25, 0.125, 0.0, 4);
        assert_eq!(b.total_nats, 1.875);
        assert!((b.bpd - 1.875 / (4.0 * std::f64::consts::LN_2)).abs() < 1e-15);
    }
}
