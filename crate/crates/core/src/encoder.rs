//! Time-dependent encoders `x_t = x(λ_t)`.
//!
//! * `Identity`: `x_t = x` (plain variational diffusion model).
//! * `NonTrainable`: `x_t = α_t² x`.
//! * `Trainable`: `x_t = α_t² x + σ_t² y(x, λ_t)` with a learned network `y`
//!   whose output layer starts at zero, so it begins as `NonTrainable`.
//!
//! The encoder is conditioned on `λ`, not `t`. The λ-derivative of the
//! trainable part is a symmetric finite difference of `y` with step
//! `1e-3 · (λ_max - λ_min)`, so gradients of a loss flow through it with plain
//! reverse-mode differentiation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{LogLinearSchedule, SchedulePoint};

/// Relative finite-difference step for `dy/dλ`.
pub const DY_FD_RELATIVE_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Identity,
    #[serde(rename = "nt", alias = "non-trainable")]
    NonTrainable,
    Trainable,
}

impl EncoderKind {
    /// Whether the generative mean carries the counterterm by default.
    pub fn default_counterterm(self) -> bool {
        !matches!(self, EncoderKind::Identity)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Identity => "identity",
            EncoderKind::NonTrainable => "nt",
            EncoderKind::Trainable => "trainable",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "vdm" => Ok(EncoderKind::Identity),
            "nt" | "non-trainable" | "nontrainable" => Ok(EncoderKind::NonTrainable),
            "trainable" => Ok(EncoderKind::Trainable),
            other => Err(Error::config(format!(
                "unknown encoder `{other}` (expected identity, nt or trainable)"
            ))),
        }
    }
}

/// The learned part `y(x, λ)` of the trainable encoder.
pub trait EncoderNetwork: Sync {
    /// `y` for `n = lambdas.len()` rows of `x` (row-major), row `i` at `lambdas[i]`.
    fn y_rows(&self, x: &[f64], lambdas: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy)]
pub struct EncoderSpec<'a> {
    pub kind: EncoderKind,
    net: Option<&'a dyn EncoderNetwork>,
    fd_step: f64,
}

impl fmt::Debug for EncoderSpec<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncoderSpec")
            .field("kind", &self.kind)
            .field("has_net", &self.net.is_some())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

impl<'a> EncoderSpec<'a> {
    pub fn identity() -> Self {
        EncoderSpec {
            kind: EncoderKind::Identity,
            net: None,
            fd_step: 0.0,
        }
    }

    pub fn non_trainable() -> Self {
        EncoderSpec {
            kind: EncoderKind::NonTrainable,
            net: None,
            fd_step: 0.0,
        }
    }

    pub fn trainable(net: &'a dyn EncoderNetwork, schedule: &LogLinearSchedule) -> Self {
        EncoderSpec {
            kind: EncoderKind::Trainable,
            net: Some(net),
            fd_step: fd_step(schedule),
        }
    }

    /// Builds a spec of the given kind; `net` is required iff `Trainable`.
    pub fn of_kind(
        kind: EncoderKind,
        net: Option<&'a dyn EncoderNetwork>,
        schedule: &LogLinearSchedule,
    ) -> Result<Self> {
        match kind {
            EncoderKind::Identity => Ok(Self::identity()),
            EncoderKind::NonTrainable => Ok(Self::non_trainable()),
            EncoderKind::Trainable => net
                .map(|n| Self::trainable(n, schedule))
                .ok_or_else(|| Error::config("trainable encoder requires an inner network")),
        }
    }

    fn net(&self) -> Result<&'a dyn EncoderNetwork> {
        self.net
            .ok_or_else(|| Error::config("trainable encoder requires an inner network"))
    }

    /// `y` and its finite-difference λ-derivative for rows at `points`.
    /// Zero for the non-learned kinds.
    pub fn y_and_dy_rows(&self, x: &[f64], points: &[SchedulePoint]) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.kind != EncoderKind::Trainable {
            return Ok((vec![0.0; x.len()], vec![0.0; x.len()]));
        }
        let net = self.net()?;
        let lambdas: Vec<f64> = points.iter().map(|p| p.lambda).collect();
        let plus: Vec<f64> = lambdas.iter().map(|l| l + self.fd_step).collect();
        let minus: Vec<f64> = lambdas.iter().map(|l| l - self.fd_step).collect();
        let y = net.y_rows(x, &lambdas)?;
        let yp = net.y_rows(x, &plus)?;
        let ym = net.y_rows(x, &minus)?;
        let inv = 1.0 / (2.0 * self.fd_step);
        let dy = yp.iter().zip(&ym).map(|(a, b)| (a - b) * inv).collect();
        Ok((y, dy))
    }

    /// `x_t` for each row of `x` at its own point.
    pub fn encode_rows(&self, x: &[f64], points: &[SchedulePoint]) -> Result<Vec<f64>> {
        let d = row_len(x, points)?;
        match self.kind {
            EncoderKind::Identity => Ok(x.to_vec()),
            EncoderKind::NonTrainable => Ok(per_row(x, d, points, |p, xi| p.alpha2 * xi)),
            EncoderKind::Trainable => {
                let lambdas: Vec<f64> = points.iter().map(|p| p.lambda).collect();
                let y = self.net()?.y_rows(x, &lambdas)?;
                Ok(combine_rows(x, &y, d, points, |p, xi, yi| p.alpha2 * xi + p.sigma2 * yi))
            }
        }
    }

    /// `dx_t/dλ` for each row.
    pub fn encode_dlambda_rows(&self, x: &[f64], points: &[SchedulePoint]) -> Result<Vec<f64>> {
        let d = row_len(x, points)?;
        match self.kind {
            EncoderKind::Identity => Ok(vec![0.0; x.len()]),
            EncoderKind::NonTrainable => {
                Ok(per_row(x, d, points, |p, xi| p.alpha2 * p.sigma2 * xi))
            }
            EncoderKind::Trainable => {
                let (y, dy) = self.y_and_dy_rows(x, points)?;
                let mut out = Vec::with_capacity(x.len());
                for (i, p) in points.iter().enumerate() {
                    for j in 0..d {
                        let k = i * d + j;
                        let a2s2 = p.alpha2 * p.sigma2;
                        out.push(a2s2 * x[k] + p.sigma2 * dy[k] - a2s2 * y[k]);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn encode(&self, x: &[f64], point: &SchedulePoint) -> Result<Vec<f64>> {
        self.encode_rows(x, std::slice::from_ref(point))
    }

    pub fn encode_dlambda(&self, x: &[f64], point: &SchedulePoint) -> Result<Vec<f64>> {
        self.encode_dlambda_rows(x, std::slice::from_ref(point))
    }

    /// Finite-difference rate of change `(x_t - x_s) / (t - s)`.
    pub fn change_heatmap(
        &self,
        x: &[f64],
        schedule: &LogLinearSchedule,
        s: f64,
        t: f64,
    ) -> Result<Vec<f64>> {
        if s >= t {
            return Err(Error::domain(format!("heatmap needs s < t, got s={s}, t={t}")));
        }
        let ps = schedule.eval(s)?;
        let pt = schedule.eval(t)?;
        let xs = self.encode(x, &ps)?;
        let xt = self.encode(x, &pt)?;
        let inv = 1.0 / (t - s);
        Ok(xt.iter().zip(&xs).map(|(a, b)| (a - b) * inv).collect())
    }
}

/// Finite-difference step `h = 1e-3 · (λ_max - λ_min)`.
pub fn fd_step(schedule: &LogLinearSchedule) -> f64 {
    DY_FD_RELATIVE_STEP * schedule.span()
}

/// Sums a channel-major map (`channels × pixels`) over channels.
pub fn channel_sum(map: &[f64], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || map.len() % channels != 0 {
        return Err(Error::domain(format!(
            "map of length {} does not split into {channels} channels",
            map.len()
        )));
    }
    let n = map.len() / channels;
    Ok((0..n).map(|i| (0..channels).map(|c| map[c * n + i]).sum()).collect())
}

fn row_len(x: &[f64], points: &[SchedulePoint]) -> Result<usize> {
    if points.is_empty() || x.len() % points.len() != 0 {
        return Err(Error::domain(format!(
            "{} values do not split into {} rows",
            x.len(),
            points.len()
        )));
    }
    Ok(x.len() / points.len())
}

fn per_row(x: &[f64], d: usize, points: &[SchedulePoint], f: impl Fn(&SchedulePoint, f64) -> f64) -> Vec<f64> {
    x.chunks_exact(d)
        .zip(points)
        .flat_map(|(row, p)| row.iter().map(|&xi| f(p, xi)).collect::<Vec<_>>())
        .collect()
}

fn combine_rows(
    x: &[f64],
    y: &[f64],
    d: usize,
    points: &[SchedulePoint],
    f: impl Fn(&SchedulePoint, f64, f64) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for (i, p) in points.iter().enumerate() {
        for j in 0..d {
            out.push(f(p, x[i * d + j], y[i * d + j]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y(x, λ) = sin(λ) · x + 0.1 λ², a smooth stand-in network.
    struct Smooth;

    impl EncoderNetwork for Smooth {
        fn y_rows(&self, x: &[f64], lambdas: &[f64]) -> Result<Vec<f64>> {
            let d = x.len() / lambdas.len();
            Ok(x.iter()
                .enumerate()
                .map(|(k, xi)| {
                    let l = lambdas[k / d];
                    l.sin() * xi + 0.1 * l * l
                })
                .collect())
        }
    }

    struct Zero;

    impl EncoderNetwork for Zero {
        fn y_rows(&self, x: &[f64], _l: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; x.len()])
        }
    }

    fn x() -> Vec<f64> {
        vec![0.8, -0.35, 0.1, -1.0]
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("nt".parse::<EncoderKind>().unwrap(), EncoderKind::NonTrainable);
        assert_eq!("Identity".parse::<EncoderKind>().unwrap(), EncoderKind::Identity);
        assert!("conv".parse::<EncoderKind>().is_err());
        assert!(!EncoderKind::Identity.default_counterterm());
        assert!(EncoderKind::Trainable.default_counterterm());
    }

    #[test]
    fn non_trainable_examples() {
        let enc = EncoderSpec::non_trainable();
        let p = SchedulePoint::from_lambda(0.5, 0.0, -1.0);
        let out = enc.encode(&x(), &p).unwrap();
        assert_eq!(out, x().iter().map(|v| 0.5 * v).collect::<Vec<_>>());
        let d = enc.encode_dlambda(&x(), &p).unwrap();
        assert_eq!(d, x().iter().map(|v| 0.25 * v).collect::<Vec<_>>());

        let high = SchedulePoint::from_lambda(0.0, 60.0, -1.0);
        let out = enc.encode(&x(), &high).unwrap();
        for (a, b) in out.iter().zip(x()) {
            assert!((a - b).abs() < 1e-20);
        }
    }

    #[test]
    fn identity_examples() {
        let enc = EncoderSpec::identity();
        let p = SchedulePoint::from_lambda(0.5, 1.3, -1.0);
        assert_eq!(enc.encode(&x(), &p).unwrap(), x());
        assert!(enc.encode_dlambda(&x(), &p).unwrap().iter().all(|&v| v == 0.0));
        let s = LogLinearSchedule::default();
        let h = enc.change_heatmap(&x(), &s, 0.2, 0.4).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trainable_at_zero_matches_non_trainable_exactly() {
        let s = LogLinearSchedule::default();
        let net = Zero;
        let tr = EncoderSpec::trainable(&net, &s);
        let nt = EncoderSpec::non_trainable();
        for t in [0.0, 0.13, 0.5, 0.91, 1.0] {
            let p = s.eval(t).unwrap();
            assert_eq!(tr.encode(&x(), &p).unwrap(), nt.encode(&x(), &p).unwrap());
            assert_eq!(
                tr.encode_dlambda(&x(), &p).unwrap(),
                nt.encode_dlambda(&x(), &p).unwrap()
            );
        }
    }

    #[test]
    fn trainable_requires_network() {
        let s = LogLinearSchedule::default();
        assert!(matches!(
            EncoderSpec::of_kind(EncoderKind::Trainable, None, &s),
            Err(Error::Config(_))
        ));
    }

    fn fd_in_lambda(enc: &EncoderSpec, s: &LogLinearSchedule, lambda: f64) -> Vec<f64> {
        let h = 1e-4 * s.span();
        let plus = enc.encode(&x(), &s.point_at_lambda(lambda + h)).unwrap();
        let minus = enc.encode(&x(), &s.point_at_lambda(lambda - h)).unwrap();
        plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    #[test]
    fn dlambda_matches_finite_differences() {
        let s = LogLinearSchedule::default();
        let net = Smooth;
        for (enc, tol) in [(EncoderSpec::non_trainable(), 1e-5), (EncoderSpec::trainable(&net, &s), 1e-3)] {
            for lambda in [-4.0, -1.0, 0.3, 2.5, 7.0] {
                let an = enc.encode_dlambda(&x(), &s.point_at_lambda(lambda)).unwrap();
                let fd = fd_in_lambda(&enc, &s, lambda);
                let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (a, f) in an.iter().zip(&fd) {
                    assert!((a - f).abs() <= tol * scale, "{:?} λ={lambda}: {a} vs {f}", enc.kind);
                }
            }
        }
    }

    #[test]
    fn endpoint_behaviour() {
        let s = LogLinearSchedule::default();
        let nt = EncoderSpec::non_trainable();
        let net = Zero;
        let tr = EncoderSpec::trainable(&net, &s);
        let xv = x();
        let inf = xv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for enc in [nt, tr] {
            let x0 = enc.encode(&xv, &s.eval(0.0).unwrap()).unwrap();
            let err = x0.iter().zip(&xv).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 2e-6 * inf);
        }
        let x1 = nt.encode(&xv, &s.eval(1.0).unwrap()).unwrap();
        assert!(x1.iter().all(|v| v.abs() < 0.01 * inf));
    }

    #[test]
    fn heatmap_examples() {
        let s = LogLinearSchedule::default();
        let nt = EncoderSpec::non_trainable();
        let h = nt.change_heatmap(&x(), &s, 0.9, 1.0).unwrap();
        let a1 = crate::schedule::logistic(s.lambda(1.0));
        let a09 = crate::schedule::logistic(s.lambda(0.9));
        for (hv, xv) in h.iter().zip(x()) {
            assert!((hv - (a1 - a09) * xv / 0.1).abs() < 1e-12);
        }

        // s → t: λ' α² σ² x
        let t = 0.4;
        let h = nt.change_heatmap(&x(), &s, t - 1e-7, t).unwrap();
        let p = s.eval(t).unwrap();
        for (hv, xv) in h.iter().zip(x()) {
            let expected = p.lambda_prime * p.alpha2 * p.sigma2 * xv;
            assert!((hv - expected).abs() < 1e-5 * expected.abs().max(1e-3));
        }

        assert!(nt.change_heatmap(&x(), &s, 0.5, 0.5).is_err());
    }

    #[test]
    fn channel_reduction() {
        let m = [1.0, 2.0, 10.0, 20.0, 100.0, 200.0];
        assert_eq!(channel_sum(&m, 3).unwrap(), vec![111.0, 222.0]);
        assert!(channel_sum(&m, 4).is_err());
    }
}
