//! Generation: ancestral sampling through `p(z_s | z_t)` and an
//! Euler–Maruyama integrator for the reverse SDE.
//!
//! Neither path evaluates the encoder. Each chain draws its noise from its
//! own ChaCha stream `(seed, chain_index)`, and all chains share one batched
//! denoiser call per step.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::{decode_pixel, pixel_categorical, standard_normal_vec};
use crate::predictor::{eps_from_v, x_from_v, Denoiser};
use crate::process::{generative_mean, optimal_sigma_p, TransitionCoefficients};
use crate::schedule::{LogLinearSchedule, SchedulePoint};

#[derive(Debug, Clone, PartialEq)]
pub enum VarianceMode {
    /// `σ_P² = σ_Q²`.
    SigmaQ,
    /// `σ_P² = σ_Q² + gap_i / d` from a per-step table of `E‖μ_P - μ_Q‖²`,
    /// indexed by step `i = 1..T` at position `i - 1`.
    OptimalFromEstimate(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub variance_mode: VarianceMode,
    pub counterterm: bool,
    pub seed: u64,
    /// Sample pixels from the decoder instead of taking its mode.
    pub stochastic_decode: bool,
    /// Record the mean squared latent norm every `k` steps (0 = never).
    pub trajectory_every: usize,
    /// Steps `i` (latent at `t = i/T` after the update) to keep in full.
    pub snapshot_steps: Vec<usize>,
}

impl SamplerConfig {
    pub fn new(steps: usize, counterterm: bool, seed: u64) -> Self {
        SamplerConfig {
            steps,
            variance_mode: VarianceMode::SigmaQ,
            counterterm,
            seed,
            stochastic_decode: false,
            trajectory_every: 0,
            snapshot_steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub mean_sq_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub n: usize,
    pub dim: usize,
    /// Final latents `z_0`, `n × dim`.
    pub z0: Vec<f64>,
    /// Decoded 8-bit values, `n × dim`.
    pub pixels: Vec<u8>,
    pub trajectory: Vec<TrajectoryRow>,
    /// `(t, latents)` for each requested snapshot step.
    pub snapshots: Vec<(f64, Vec<f64>)>,
}

fn chain_rngs(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(c as u64);
            r
        })
        .collect()
}

fn mean_sq_norm(z: &[f64], n: usize) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>() / n as f64
}

/// Runs `n` independent chains from `z_1 ~ N(0, I)` down to `z_0`.
pub fn ancestral_sample(
    model: &dyn Denoiser,
    schedule: &LogLinearSchedule,
    config: &SamplerConfig,
    n: usize,
) -> Result<SampleOutput> {
    let steps = config.steps;
    if steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    if n == 0 {
        return Err(Error::config("sampler needs at least one chain"));
    }
    if let VarianceMode::OptimalFromEstimate(g) = &config.variance_mode {
        if g.len() != steps {
            return Err(Error::config(format!("variance table has {} entries for T = {steps}", g.len())));
        }
    }
    let d = model.dim();
    let mut rngs = chain_rngs(config.seed, n);
    let mut z: Vec<f64> = vec![0.0; n * d];
    z.par_chunks_mut(d).zip(rngs.par_iter_mut()).for_each(|(row, rng)| {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    });

    let tf = steps as f64;
    let mut trajectory = Vec::new();
    let mut snapshots = Vec::new();
    if config.snapshot_steps.contains(&steps) {
        snapshots.push((1.0, z.clone()));
    }
    for i in (1..=steps).rev() {
        let pt = schedule.point(i as f64 / tf);
        let ps = schedule.point((i - 1) as f64 / tf);
        let v_hat = model.predict_v_batch(&z, n, &pt)?;
        let x_hat = x_from_v(&z, &v_hat, &pt);
        let mu = generative_mean(&z, &x_hat, &ps, &pt, config.counterterm)?;
        let sigma2_q = TransitionCoefficients::between(&ps, &pt)?.sigma2_q;
        let sigma_p = match &config.variance_mode {
            VarianceMode::SigmaQ => sigma2_q,
            VarianceMode::OptimalFromEstimate(g) => optimal_sigma_p(sigma2_q, g[i - 1], d)?,
        }
        .sqrt();
        z.par_chunks_mut(d)
            .zip(mu.par_chunks(d))
            .zip(rngs.par_iter_mut())
            .for_each(|((row, m), rng)| {
                for (v, mv) in row.iter_mut().zip(m) {
                    let e: f64 = rng.sample(StandardNormal);
                    *v = mv + sigma_p * e;
                }
            });
        if let Some(k) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: i,
                msg: format!("non-finite latent in chain {}", k / d),
            });
        }
        let done = steps - i + 1;
        if config.trajectory_every > 0 && (done % config.trajectory_every == 0 || i == 1) {
            trajectory.push(TrajectoryRow {
                step: i - 1,
                t: ps.t,
                mean_sq_norm: mean_sq_norm(&z, n),
            });
        }
        if config.snapshot_steps.contains(&(i - 1)) {
            snapshots.push((ps.t, z.clone()));
        }
    }

    let p0 = schedule.point(0.0);
    let pixels: Vec<u8> = if config.stochastic_decode {
        let mut out = vec![0u8; n * d];
        out.par_chunks_mut(d)
            .zip(z.par_chunks(d))
            .zip(rngs.par_iter_mut())
            .for_each(|((px, zr), rng)| {
                for (p, &zv) in px.iter_mut().zip(zr) {
                    *p = sample_categorical(&pixel_categorical(zv, p0.alpha, p0.sigma2), rng);
                }
            });
        out
    } else {
        z.iter().map(|&v| decode_pixel(v, p0.alpha)).collect()
    };
    Ok(SampleOutput {
        n,
        dim: d,
        z0: z,
        pixels,
        trajectory,
        snapshots,
    })
}

fn sample_categorical<R: Rng>(p: &[f64], rng: &mut R) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (v, &pv) in p.iter().enumerate() {
        acc += pv;
        if u < acc {
            return v as u8;
        }
    }
    (p.len() - 1) as u8
}

// ---------------------------------------------------------------------------
// SDE

/// Forward drift `f = (d log α/dt) z + α λ' dx/dλ`; pass `dx_dlambda = None`
/// for the encoder-free drift.
pub fn forward_drift(z: &[f64], dx_dlambda: Option<&[f64]>, p: &SchedulePoint) -> Vec<f64> {
    let k = p.dlog_alpha_dt();
    match dx_dlambda {
        Some(dx) => z
            .iter()
            .zip(dx)
            .map(|(zv, d)| k * zv + p.alpha * p.lambda_prime * d)
            .collect(),
        None => z.iter().map(|zv| k * zv).collect(),
    }
}

/// Deterministic part of one forward Euler–Maruyama step from `t` to
/// `t + dt` (analysis mode, with the encoder drift).
pub fn forward_sde_mean(z: &[f64], dx_dlambda: &[f64], p: &SchedulePoint, dt: f64) -> Vec<f64> {
    let f = forward_drift(z, Some(dx_dlambda), p);
    z.iter().zip(&f).map(|(zv, fv)| zv + fv * dt).collect()
}

/// One forward Euler–Maruyama step with noise.
pub fn forward_sde_step<R: Rng>(
    z: &[f64],
    dx_dlambda: &[f64],
    p: &SchedulePoint,
    dt: f64,
    rng: &mut R,
) -> Vec<f64> {
    let g = (p.g2() * dt.abs()).sqrt();
    forward_sde_mean(z, dx_dlambda, p, dt)
        .into_iter()
        .map(|m| m + g * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// One reverse-time Euler–Maruyama step (`dt < 0`) of
/// `dz = [f - g² ∇log p] dt + g dw̄` with score `-ε̂ / σ` and no encoder drift.
/// A step that would cross `t = 0` is shortened to end exactly there.
#[allow(clippy::too_many_arguments)]
pub fn sde_step<R: Rng>(
    z: &[f64],
    t: f64,
    dt: f64,
    model: &dyn Denoiser,
    schedule: &LogLinearSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = z.len() / model.dim();
    let mut out = sde_step_batch(z, n, t, dt, model, schedule)?;
    let (dt, _) = clamp_dt(t, dt)?;
    let p = schedule.eval(t)?;
    let g = (p.g2() * dt.abs()).sqrt();
    for v in out.iter_mut() {
        *v += g * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}

fn clamp_dt(t: f64, dt: f64) -> Result<(f64, f64)> {
    if !(dt < 0.0) {
        return Err(Error::domain(format!("reverse SDE step needs dt < 0, got {dt}")));
    }
    let dt = if t + dt < 0.0 { -t } else { dt };
    Ok((dt, t + dt))
}

/// Deterministic part of [`sde_step`] for `n` latents.
pub fn sde_step_batch(
    z: &[f64],
    n: usize,
    t: f64,
    dt: f64,
    model: &dyn Denoiser,
    schedule: &LogLinearSchedule,
) -> Result<Vec<f64>> {
    let (dt, _) = clamp_dt(t, dt)?;
    let p = schedule.eval(t)?;
    let v_hat = model.predict_v_batch(z, n, &p)?;
    let eps_hat = eps_from_v(z, &v_hat, &p);
    let f = forward_drift(z, None, &p);
    let g2 = p.g2();
    Ok(z.iter()
        .zip(&f)
        .zip(&eps_hat)
        .map(|((zv, fv), e)| {
            let score = -e / p.sigma;
            zv + (fv - g2 * score) * dt
        })
        .collect())
}

/// Integrates the reverse SDE from `t = 1` to `t = 0` in `steps` equal steps
/// for `n` chains, returning `z_0`.
pub fn sde_sample(
    model: &dyn Denoiser,
    schedule: &LogLinearSchedule,
    steps: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if steps == 0 || n == 0 {
        return Err(Error::config("SDE sampler needs at least one step and one chain"));
    }
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = standard_normal_vec(&mut rng, n * d);
    let dt = -1.0 / steps as f64;
    for i in (1..=steps).rev() {
        let t = i as f64 / steps as f64;
        let p = schedule.eval(t)?;
        let mut next = sde_step_batch(&z, n, t, dt, model, schedule)?;
        let g = (p.g2() * dt.abs()).sqrt();
        for v in next.iter_mut() {
            *v += g * rng.sample::<f64, _>(StandardNormal);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: i,
                msg: "non-finite latent in SDE integration".into(),
            });
        }
        z = next;
    }
    Ok(z)
}
