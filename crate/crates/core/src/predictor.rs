//! The denoiser interface shared by trained networks and analytic predictors.
//!
//! Everything is expressed through the v-prediction `v̂ = α ε̂ - σ x̂`, from
//! which `x̂ = α z - σ v̂` and `ε̂ = σ z + α v̂` follow.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;
use crate::schedule::SchedulePoint;

pub trait Denoiser: Sync {
    /// Data dimension `d`.
    fn dim(&self) -> usize;

    /// `v̂` for `n` latents stored row-major in `z` (`n × d`), all at `point`.
    fn predict_v_batch(&self, z: &[f64], n: usize, point: &SchedulePoint) -> Result<Vec<f64>>;

    /// `v̂` for rows that each sit at their own schedule point.
    fn predict_v_rows(&self, z: &[f64], points: &[SchedulePoint]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(z.len());
        for (row, p) in z.chunks_exact(d).zip(points) {
            out.extend(self.predict_v_batch(row, 1, p)?);
        }
        Ok(out)
    }

    /// `x̂` for a batch at a common point.
    fn predict_x_batch(&self, z: &[f64], n: usize, point: &SchedulePoint) -> Result<Vec<f64>> {
        let v = self.predict_v_batch(z, n, point)?;
        Ok(x_from_v(z, &v, point))
    }

    fn predict_v(&self, z: &[f64], point: &SchedulePoint) -> Result<Vec<f64>> {
        self.predict_v_batch(z, 1, point)
    }
}

/// `x̂ = α z - σ v̂`.
pub fn x_from_v(z: &[f64], v: &[f64], p: &SchedulePoint) -> Vec<f64> {
    z.iter().zip(v).map(|(z, v)| p.alpha * z - p.sigma * v).collect()
}

/// `ε̂ = σ z + α v̂`.
pub fn eps_from_v(z: &[f64], v: &[f64], p: &SchedulePoint) -> Vec<f64> {
    z.iter().zip(v).map(|(z, v)| p.sigma * z + p.alpha * v).collect()
}

/// `v̂ = (α z - x̂) / σ`, the v-prediction implied by an x-prediction.
pub fn v_from_x(z: &[f64], x: &[f64], p: &SchedulePoint) -> Vec<f64> {
    z.iter().zip(x).map(|(z, x)| (p.alpha * z - x) / p.sigma).collect()
}

/// Wraps a denoiser and counts how many times it is invoked.
pub struct CountingDenoiser<'a, D: ?Sized> {
    inner: &'a D,
    calls: AtomicUsize,
}

impl<'a, D: Denoiser + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        CountingDenoiser {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CountingDenoiser<'_, D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_v_batch(&self, z: &[f64], n: usize, point: &SchedulePoint) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_v_batch(z, n, point)
    }

    fn predict_v_rows(&self, z: &[f64], points: &[SchedulePoint]) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_v_rows(z, points)
    }

    fn predict_x_batch(&self, z: &[f64], n: usize, point: &SchedulePoint) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_x_batch(z, n, point)
    }
}

/// The predictor that always outputs `v̂ = 0`, i.e. `x̂ = α z`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroV {
    pub dim: usize,
}

impl Denoiser for ZeroV {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_v_batch(&self, _z: &[f64], n: usize, _p: &SchedulePoint) -> Result<Vec<f64>> {
        Ok(vec![0.0; n * self.dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_eps_reconstruct_latent() {
        let p = SchedulePoint::from_lambda(0.3, 1.7, -18.3);
        let z = [0.4, -1.3, 2.2];
        let v = [0.9, 0.1, -0.6];
        let x = x_from_v(&z, &v, &p);
        let e = eps_from_v(&z, &v, &p);
        for i in 0..3 {
            assert!((p.alpha * x[i] + p.sigma * e[i] - z[i]).abs() < 1e-12);
        }
        let back = v_from_x(&z, &x, &p);
        for i in 0..3 {
            assert!((back[i] - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn v_reconstruction_identity() {
        // α = 0.6, σ = 0.8, x = 1, ε = 0: z = 0.6, v = -0.8, αz - σv = 1.
        let p = SchedulePoint {
            t: 0.0,
            lambda: (0.36f64 / 0.64).ln(),
            lambda_prime: -1.0,
            alpha: 0.6,
            sigma: 0.8,
            alpha2: 0.36,
            sigma2: 0.64,
            snr: 0.36 / 0.64,
        };
        let x = x_from_v(&[0.6], &[-0.8], &p);
        assert!((x[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn counting_wrapper_counts() {
        let base = ZeroV { dim: 2 };
        let c = CountingDenoiser::new(&base);
        let p = SchedulePoint::from_lambda(0.5, 0.0, -1.0);
        c.predict_v_batch(&[0.0; 4], 2, &p).unwrap();
        c.predict_x_batch(&[0.0; 2], 1, &p).unwrap();
        assert_eq!(c.calls(), 2);
    }
}
