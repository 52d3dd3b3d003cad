use std::ffi::{c_char, c_int, CStr, CString};
use std::ptr;

use ebdeconv_ffi::*;

fn last_error() -> String {
    let p = ebd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn image(rows: usize, cols: usize) -> *mut EbdImage {
    let data: Vec<f64> = (0..rows * cols)
        .map(|k| 128.0 + 50.0 * ((k / cols) as f64 / 4.0).sin() * ((k % cols) as f64 / 6.0).cos())
        .collect();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ebd_image_new(rows, cols, data.as_ptr(), &mut out) }, EbdStatus::Ok);
    out
}

#[test]
fn image_round_trip_through_handles() {
    let img = image(6, 9);
    unsafe {
        assert_eq!(ebd_image_rows(img), 6);
        assert_eq!(ebd_image_cols(img), 9);
        let mut buf = vec![0.0; 54];
        assert_eq!(ebd_image_copy_data(img, buf.as_mut_ptr(), buf.len()), EbdStatus::Ok);
        assert_eq!(buf[0], 128.0 + 50.0 * 0.0f64.sin());

        let mut small = vec![0.0; 10];
        assert_eq!(ebd_image_copy_data(img, small.as_mut_ptr(), small.len()), EbdStatus::InvalidArgument);
        assert!(last_error().contains("buffer"));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("x.npy").to_str().unwrap()).unwrap();
        assert_eq!(ebd_image_save(img, path.as_ptr()), EbdStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(ebd_image_load(path.as_ptr(), &mut back), EbdStatus::Ok);
        let mut buf2 = vec![0.0; 54];
        ebd_image_copy_data(back, buf2.as_mut_ptr(), 54);
        assert_eq!(buf, buf2);
        ebd_image_free(back);
        ebd_image_free(img);
    }
}

#[test]
fn null_pointers_and_bad_inputs_map_to_status_codes() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(ebd_image_new(2, 2, ptr::null(), &mut out), EbdStatus::NullPointer);
        assert!(last_error().contains("data"));
        assert_eq!(ebd_image_new(0, 0, ptr::null(), &mut out), EbdStatus::InvalidArgument);

        let missing = CString::new("/nonexistent/x.png").unwrap();
        assert_eq!(ebd_image_load(missing.as_ptr(), &mut out), EbdStatus::Io);

        let img = image(16, 16);
        let alpha = [0.3, 9.0];
        let mut y = ptr::null_mut();
        let st = ebd_degrade(img, EbdFamily::Moffat, alpha.as_ptr(), 2, 30.0, 1, &mut y, ptr::null_mut());
        assert_eq!(st, EbdStatus::InvalidArgument);

        let bad = CString::new("{\"n_iterations\": }").unwrap();
        let mut cal = ptr::null_mut();
        assert_eq!(ebd_calibrate(img, EbdFamily::Gaussian, bad.as_ptr(), 0, &mut cal), EbdStatus::Config);
        assert!(cal.is_null());
        ebd_image_free(img);

        ebd_image_free(ptr::null_mut());
        ebd_calibration_free(ptr::null_mut());
        ebd_string_free(ptr::null_mut());
        assert_eq!(ebd_image_rows(ptr::null()), 0);
    }
}

#[test]
fn success_clears_the_last_error() {
    unsafe {
        let mut out = ptr::null_mut();
        ebd_image_new(2, 2, ptr::null(), &mut out);
        assert!(!ebd_last_error().is_null());
        let img = image(2, 2);
        assert!(ebd_last_error().is_null());
        ebd_image_free(img);
    }
}

#[test]
fn degrade_calibrate_deconvolve_pipeline() {
    unsafe {
        let x = image(32, 32);
        let alpha = [0.4, 0.3];
        let mut y = ptr::null_mut();
        let mut sigma2 = 0.0;
        assert_eq!(
            ebd_degrade(x, EbdFamily::Gaussian, alpha.as_ptr(), 2, 30.0, 5, &mut y, &mut sigma2),
            EbdStatus::Ok
        );
        assert!(sigma2 > 0.0);

        let mut cfg: serde_json::Value =
            serde_json::to_value(ebdeconv::sapg::SapgConfig::desk(ebdeconv::kernels::KernelFamily::Gaussian)).unwrap();
        cfg["n_iterations"] = 40.into();
        cfg["burn_in"] = 20.into();
        cfg["warmup_steps"] = 20.into();
        let cfg = CString::new(cfg.to_string()).unwrap();
        let mut cal = ptr::null_mut();
        assert_eq!(ebd_calibrate(y, EbdFamily::Gaussian, cfg.as_ptr(), 3, &mut cal), EbdStatus::Ok, "{}", last_error());
        assert_eq!(ebd_calibration_iterations(cal), 40);

        let (mut theta, mut s2, mut n) = (0.0, 0.0, 0usize);
        let mut est = [0.0; 1];
        assert_eq!(
            ebd_calibration_estimate(cal, &mut theta, est.as_mut_ptr(), 1, &mut n, &mut s2),
            EbdStatus::InvalidArgument
        );
        assert_eq!(n, 2);
        let mut est = [0.0; 2];
        assert_eq!(ebd_calibration_estimate(cal, &mut theta, est.as_mut_ptr(), 2, &mut n, &mut s2), EbdStatus::Ok);
        assert!(theta > 0.0 && s2 > 0.0);

        let mut json: *mut c_char = ptr::null_mut();
        assert_eq!(ebd_calibration_summary_json(cal, &mut json), EbdStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(v["family"], "gaussian");
        assert_eq!(v["config_echo"]["seed"], 3);
        ebd_string_free(json);

        let mut xhat = ptr::null_mut();
        assert_eq!(ebd_deconvolve(y, EbdFamily::Gaussian, theta, est.as_ptr(), 2, s2, &mut xhat), EbdStatus::Ok);
        assert_eq!(ebd_image_rows(xhat), 32);

        ebd_image_free(xhat);
        ebd_calibration_free(cal);
        ebd_image_free(y);
        ebd_image_free(x);
    }
}

#[test]
fn gradcheck_through_the_abi() {
    let alpha = [0.3];
    let (mut err, mut pass): (f64, c_int) = (1.0, 0);
    let st = unsafe { ebd_gradcheck(EbdFamily::Laplace, alpha.as_ptr(), 1, 16, 0, &mut err, &mut pass) };
    assert_eq!(st, EbdStatus::Ok);
    assert_eq!(pass, 1);
    assert!(err < 1e-4);
}

#[test]
fn header_declares_every_export() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let src = std::fs::read_to_string(format!("{dir}/src/lib.rs")).unwrap();
    let header = std::fs::read_to_string(format!("{dir}/include/ebdeconv.h")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15, "{exports:?}");
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["typedef struct EbdImage EbdImage;", "typedef struct EbdCalibration EbdCalibration;", "EBD_STATUS_OK = 0"] {
        assert!(header.contains(ty), "{ty}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/ebdeconv.h");
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
