//! C ABI over the diffenc library.
//!
//! Every function returns a [`DiffencStatus`]; results go through out
//! pointers. Objects are opaque handles released with their `_free`
//! function. After a failure, `diffenc_last_error_message` gives the message
//! for the calling thread. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffenc::nn::checkpoint;
use diffenc::nn::model::DiffEncModel;
use diffenc::objective::elbo_bpd;
use diffenc::process::{kl_isotropic, optimal_sigma_p};
use diffenc::sampler::{ancestral_sample, SamplerConfig};
use diffenc::{Denoiser, EncoderKind, Error, GaussianParams, LogLinearSchedule};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffencStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Config = 3,
    Parse = 4,
    Numerical = 5,
    Checkpoint = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffencEncoderKind {
    Identity = 0,
    NonTrainable = 1,
    Trainable = 2,
}

/// Opaque schedule handle.
pub struct DiffencSchedule(LogLinearSchedule);

/// Opaque model handle.
pub struct DiffencModel(DiffEncModel);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiffencSchedulePoint {
    pub t: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub snr: f64,
}

/// Loss components in bits per dimension.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiffencLossBreakdown {
    pub total_bpd: f64,
    pub latent_bpd: f64,
    pub diffusion_bpd: f64,
    pub diffusion_se_bpd: f64,
    pub reconstruction_bpd: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DiffencStatus {
    match e {
        Error::Domain(_) => DiffencStatus::Domain,
        Error::Config(_) => DiffencStatus::Config,
        Error::Parse { .. } => DiffencStatus::Parse,
        Error::NonFinite { .. } | Error::Numerical { .. } => DiffencStatus::Numerical,
        Error::Checkpoint(_) => DiffencStatus::Checkpoint,
        Error::Io(_) => DiffencStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Buffer(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DiffencStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DiffencStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            DiffencStatus::NullPointer
        }
        Ok(Err(Fail::Buffer(msg))) => {
            set_error(msg);
            DiffencStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            DiffencStatus::Panic
        }
    }
}

unsafe fn nn<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn write<T>(p: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(v);
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf` (truncating to fit) and returns the full message length in bytes
/// excluding the terminator. `buf` may be null when `len` is 0.
///
/// # Safety
/// `buf` must point to `len` writable bytes when `len > 0`.
#[no_mangle]
pub unsafe extern "C" fn diffenc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if len > 0 && !buf.is_null() {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn diffenc_schedule_new(
    lambda_max: f64,
    lambda_min: f64,
    out: *mut *mut DiffencSchedule,
) -> DiffencStatus {
    guard(|| {
        let s = LogLinearSchedule::new(lambda_max, lambda_min)?;
        write(out, Box::into_raw(Box::new(DiffencSchedule(s))), "out")
    })
}

/// # Safety
/// `schedule` must be null or a handle from `diffenc_schedule_new` that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn diffenc_schedule_free(schedule: *mut DiffencSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// # Safety
/// `schedule` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn diffenc_schedule_eval(
    schedule: *const DiffencSchedule,
    t: f64,
    out: *mut DiffencSchedulePoint,
) -> DiffencStatus {
    guard(|| {
        let s = nn(schedule, "schedule")?;
        let p = s.0.eval(t)?;
        write(
            out,
            DiffencSchedulePoint {
                t: p.t,
                lambda: p.lambda,
                alpha: p.alpha,
                sigma: p.sigma,
                snr: p.snr,
            },
            "out",
        )
    })
}

/// KL between `N(mean_q, var_q I)` and `N(mean_p, var_p I)` of dimension `d`.
///
/// # Safety
/// The mean pointers must reference `d` readable doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn diffenc_kl_isotropic(
    mean_q: *const f64,
    var_q: f64,
    mean_p: *const f64,
    var_p: f64,
    d: usize,
    out: *mut f64,
) -> DiffencStatus {
    guard(|| {
        let q = GaussianParams::new(slice(mean_q, d, "mean_q")?.to_vec(), var_q)?;
        let p = GaussianParams::new(slice(mean_p, d, "mean_p")?.to_vec(), var_p)?;
        write(out, kl_isotropic(&q, &p)?, "out")
    })
}

/// Variance `σ_P²` minimizing the expected KL for a mean-squared gap.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffenc_optimal_sigma_p(
    sigma2_q: f64,
    mean_sq_gap: f64,
    d: usize,
    out: *mut f64,
) -> DiffencStatus {
    guard(|| write(out, optimal_sigma_p(sigma2_q, mean_sq_gap, d)?, "out"))
}

/// Loads a checkpoint written by the library or CLI.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn diffenc_model_load(path: *const c_char, out: *mut *mut DiffencModel) -> DiffencStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::config("checkpoint path is not valid UTF-8"))?;
        let ck = checkpoint::load(Path::new(p))?;
        write(out, Box::into_raw(Box::new(DiffencModel(ck.model))), "out")
    })
}

/// # Safety
/// `model` must be null or a live handle from `diffenc_model_load`.
#[no_mangle]
pub unsafe extern "C" fn diffenc_model_free(model: *mut DiffencModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; the out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn diffenc_model_info(
    model: *const DiffencModel,
    dim: *mut usize,
    kind: *mut DiffencEncoderKind,
) -> DiffencStatus {
    guard(|| {
        let m = &nn(model, "model")?.0;
        write(dim, m.dim(), "dim")?;
        let k = match m.kind() {
            EncoderKind::Identity => DiffencEncoderKind::Identity,
            EncoderKind::NonTrainable => DiffencEncoderKind::NonTrainable,
            EncoderKind::Trainable => DiffencEncoderKind::Trainable,
        };
        write(kind, k, "kind")
    })
}

/// `v̂` for `n` latents (row-major `n × dim`) at time `t`.
///
/// # Safety
/// `z` and `out` must each reference `n · dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn diffenc_model_predict_v(
    model: *const DiffencModel,
    z: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> DiffencStatus {
    guard(|| {
        let m = &nn(model, "model")?.0;
        let len = n * m.dim();
        let zs = slice(z, len, "z")?;
        let p = m.schedule.eval(t)?;
        let v = m.predict_v_batch(zs, n, &p)?;
        slice_mut(out, len, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Draws `n` ancestral samples with `steps` reverse steps and writes the
/// decoded 8-bit values (`n × dim`) to `out`, whose capacity is `out_len`.
///
/// # Safety
/// `out` must reference `out_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn diffenc_model_sample(
    model: *const DiffencModel,
    steps: usize,
    n: usize,
    seed: u64,
    counterterm: bool,
    out: *mut u8,
    out_len: usize,
) -> DiffencStatus {
    guard(|| {
        let m = &nn(model, "model")?.0;
        let need = n * m.dim();
        if out_len < need {
            return Err(Fail::Buffer(format!("sample buffer holds {out_len} bytes, {need} needed")));
        }
        let s = ancestral_sample(m, &m.schedule, &SamplerConfig::new(steps, counterterm, seed), n)?;
        slice_mut(out, need, "out")?.copy_from_slice(&s.pixels);
        Ok(())
    })
}

/// Negative ELBO in bits per dimension of `n` datapoints (`n × dim` bytes).
///
/// # Safety
/// `pixels` must reference `n · dim` bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn diffenc_model_elbo(
    model: *const DiffencModel,
    pixels: *const u8,
    n: usize,
    n_mc: usize,
    seed: u64,
    counterterm: bool,
    out: *mut DiffencLossBreakdown,
) -> DiffencStatus {
    guard(|| {
        let m = &nn(model, "model")?.0;
        let px = slice(pixels, n * m.dim(), "pixels")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = elbo_bpd(px, n, m, &m.encoder_spec(), &m.schedule, n_mc, counterterm, &mut rng)?;
        write(
            out,
            DiffencLossBreakdown {
                total_bpd: b.bpd,
                latent_bpd: b.bits(b.latent),
                diffusion_bpd: b.bits(b.diffusion),
                diffusion_se_bpd: b.bits(b.diffusion_std_error),
                reconstruction_bpd: b.bits(b.reconstruction),
            },
            "out",
        )
    })
}
