use std::ffi::CString;
use std::ptr;

use diffenc::nn::checkpoint;
use diffenc::nn::model::{Architecture, DiffEncModel};
use diffenc::{Denoiser, EncoderKind, GaussianParams, LogLinearSchedule};
use diffenc_ffi::*;

fn last_error() -> String {
    unsafe {
        let n = diffenc_last_error_message(ptr::null_mut(), 0);
        let mut buf = vec![0 as std::ffi::c_char; n + 1];
        diffenc_last_error_message(buf.as_mut_ptr(), buf.len());
        std::ffi::CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn schedule_handle() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(diffenc_schedule_new(13.3, -5.0, &mut s), DiffencStatus::Ok);
        let mut p = DiffencSchedulePoint::default();
        assert_eq!(diffenc_schedule_eval(s, 0.0, &mut p), DiffencStatus::Ok);
        assert_eq!(p.lambda, 13.3);
        assert_eq!(diffenc_schedule_eval(s, 1.0, &mut p), DiffencStatus::Ok);
        assert_eq!(p.lambda, -5.0);
        assert!((p.alpha * p.alpha + p.sigma * p.sigma - 1.0).abs() < 1e-15);
        assert_eq!(diffenc_schedule_eval(s, 1.5, &mut p), DiffencStatus::Domain);
        assert!(!last_error().is_empty());
        diffenc_schedule_free(s);
        diffenc_schedule_free(ptr::null_mut());

        let mut bad = ptr::null_mut();
        assert_eq!(diffenc_schedule_new(-6.0, -5.0, &mut bad), DiffencStatus::Config);
        assert!(bad.is_null());
        assert!(last_error().contains("lambda_max"));
    }
}

#[test]
fn kl_and_variance() {
    let mq = [0.1, -0.4, 0.7];
    let mp = [0.0, -0.2, 0.5];
    let mut out = 0.0;
    unsafe {
        assert_eq!(
            diffenc_kl_isotropic(mq.as_ptr(), 0.3, mp.as_ptr(), 0.6, 3, &mut out),
            DiffencStatus::Ok
        );
    }
    let q = GaussianParams::new(mq.to_vec(), 0.3).unwrap();
    let p = GaussianParams::new(mp.to_vec(), 0.6).unwrap();
    assert_eq!(out, diffenc::process::kl_isotropic(&q, &p).unwrap());
    unsafe {
        assert_eq!(
            diffenc_kl_isotropic(ptr::null(), 0.3, mp.as_ptr(), 0.6, 3, &mut out),
            DiffencStatus::NullPointer
        );
        assert!(last_error().contains("mean_q"));
        assert_eq!(
            diffenc_kl_isotropic(mq.as_ptr(), -1.0, mp.as_ptr(), 0.6, 3, &mut out),
            DiffencStatus::Domain
        );
        assert_eq!(diffenc_optimal_sigma_p(0.01, 0.02, 4, &mut out), DiffencStatus::Ok);
    }
    assert!((out - 0.015).abs() < 1e-15);
}

#[test]
fn error_message_truncates() {
    unsafe {
        let mut out = 0.0;
        diffenc_optimal_sigma_p(-1.0, 0.0, 1, &mut out);
        let full = diffenc_last_error_message(ptr::null_mut(), 0);
        let mut buf = [1 as std::ffi::c_char; 4];
        assert_eq!(diffenc_last_error_message(buf.as_mut_ptr(), 4), full);
        assert_eq!(buf[3], 0);
    }
}

fn saved_model(dir: &std::path::Path) -> (std::path::PathBuf, DiffEncModel) {
    let arch = Architecture {
        dim: 2,
        encoder: EncoderKind::Trainable,
        denoiser_hidden: vec![8, 8],
        encoder_hidden: vec![4],
        n_freq: 2,
    };
    let m = DiffEncModel::new(arch, LogLinearSchedule::default(), 4).unwrap();
    let path = dir.join("m.ckpt");
    checkpoint::save(&path, &m, Some("abc"), None).unwrap();
    (path, m)
}

#[test]
fn model_handle() {
    let dir = tempfile::tempdir().unwrap();
    let (path, m) = saved_model(dir.path());
    let c = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(diffenc_model_load(c.as_ptr(), &mut h), DiffencStatus::Ok);
        let mut dim = 0usize;
        let mut kind = DiffencEncoderKind::Identity;
        assert_eq!(diffenc_model_info(h, &mut dim, &mut kind), DiffencStatus::Ok);
        assert_eq!((dim, kind), (2, DiffencEncoderKind::Trainable));

        let z = [0.3, -1.0, 0.2, 0.9];
        let mut v = [0.0; 4];
        assert_eq!(diffenc_model_predict_v(h, z.as_ptr(), 2, 0.4, v.as_mut_ptr()), DiffencStatus::Ok);
        let p = m.schedule.eval(0.4).unwrap();
        assert_eq!(v.to_vec(), m.predict_v_batch(&z, 2, &p).unwrap());

        let mut small = [0u8; 3];
        assert_eq!(
            diffenc_model_sample(h, 8, 2, 1, true, small.as_mut_ptr(), small.len()),
            DiffencStatus::BufferTooSmall
        );
        let mut a = [0u8; 20];
        let mut b = [0u8; 20];
        assert_eq!(diffenc_model_sample(h, 8, 10, 1, true, a.as_mut_ptr(), 20), DiffencStatus::Ok);
        assert_eq!(diffenc_model_sample(h, 8, 10, 1, true, b.as_mut_ptr(), 20), DiffencStatus::Ok);
        assert_eq!(a, b);

        let px = [128u8, 100, 3, 250];
        let mut lb = DiffencLossBreakdown::default();
        assert_eq!(diffenc_model_elbo(h, px.as_ptr(), 2, 4, 0, true, &mut lb), DiffencStatus::Ok);
        let sum = lb.latent_bpd + lb.diffusion_bpd + lb.reconstruction_bpd;
        assert!((lb.total_bpd - sum).abs() < 1e-12 * sum.abs().max(1.0));
        diffenc_model_free(h);
    }
}

#[test]
fn load_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let junk_path = dir.path().join("junk.ckpt");
    std::fs::write(&junk_path, b"not a checkpoint").unwrap();
    let junk = CString::new(junk_path.to_str().unwrap()).unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(diffenc_model_load(missing.as_ptr(), &mut h), DiffencStatus::Io);
        assert_eq!(diffenc_model_load(junk.as_ptr(), &mut h), DiffencStatus::Parse);
        assert_eq!(diffenc_model_load(ptr::null(), &mut h), DiffencStatus::NullPointer);
        assert!(h.is_null());
    }
}

#[test]
fn header_compiles_as_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/diffenc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["diffenc_model_load", "diffenc_kl_isotropic", "diffenc_last_error_message"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        format!("#include \"{}\"\nint main(void) {{ return DIFFENC_STATUS_OK; }}\n", header.display()),
    )
    .unwrap();
    match std::process::Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler found; skipping compile check"),
    }
}
