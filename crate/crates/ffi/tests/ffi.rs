use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use stoplab_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        stoplab_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn cs(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn new_config(pairs: &[(&str, &str)]) -> *mut StoplabConfig {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(stoplab_config_new(&mut cfg), StoplabStatus::Ok);
        for (k, v) in pairs {
            assert_eq!(
                stoplab_config_set(cfg, cs(k).as_ptr(), cs(v).as_ptr()),
                StoplabStatus::Ok,
                "{k}"
            );
        }
    }
    cfg
}

fn tiny() -> *mut StoplabConfig {
    new_config(&[
        ("data.n_train", "32"),
        ("data.n_test", "8"),
        ("train.steps", "3"),
        ("train.batch", "4"),
        ("model.enc_depth", "4"),
        ("model.enc_dim", "16"),
        ("model.pred_depth", "1"),
        ("model.pred_dim", "8"),
    ])
}

#[test]
fn config_set_get_round_trip() {
    let cfg = new_config(&[("stop.sigma", "0.5")]);
    let mut buf = vec![0 as c_char; 32];
    let mut needed = 0usize;
    unsafe {
        let st = stoplab_config_get(cfg, cs("stop.sigma").as_ptr(), buf.as_mut_ptr(), buf.len(), &mut needed);
        assert_eq!(st, StoplabStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "0.5");
        assert_eq!(needed, 3);

        let st = stoplab_config_get(cfg, cs("paths.run_dir").as_ptr(), buf.as_mut_ptr(), 2, &mut needed);
        assert_eq!(st, StoplabStatus::BufferTooSmall);
        assert_eq!(needed, "runs/stop".len());
        stoplab_config_free(cfg);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let cfg = new_config(&[]);
    unsafe {
        let st = stoplab_config_set(cfg, cs("stop.sgima").as_ptr(), cs("1").as_ptr());
        assert_eq!(st, StoplabStatus::Config);
        assert!(last_error().contains("stop.sgima"), "{}", last_error());

        assert_eq!(
            stoplab_config_set(cfg, ptr::null(), cs("1").as_ptr()),
            StoplabStatus::NullPointer
        );
        assert_eq!(
            stoplab_config_set(ptr::null_mut(), cs("a").as_ptr(), cs("1").as_ptr()),
            StoplabStatus::NullPointer
        );
        let bad = [0xffu8 as c_char, 0];
        assert_eq!(
            stoplab_config_set(cfg, bad.as_ptr(), cs("1").as_ptr()),
            StoplabStatus::InvalidUtf8
        );

        let mut model = ptr::null_mut();
        let st = stoplab_model_load(cfg, cs("/nonexistent/model.bin").as_ptr(), &mut model);
        assert_eq!(st, StoplabStatus::Io);
        assert!(model.is_null());

        let mut out = ptr::null_mut();
        assert_eq!(
            stoplab_config_load(cs("/nonexistent.cfg").as_ptr(), &mut out),
            StoplabStatus::Io
        );

        assert_eq!(
            stoplab_config_set(cfg, cs("stop.sigma").as_ptr(), cs("0.1").as_ptr()),
            StoplabStatus::Ok
        );
        assert_eq!(stoplab_last_error(ptr::null_mut(), 0), 0);
        stoplab_config_free(cfg);
        stoplab_config_free(ptr::null_mut());
        stoplab_model_free(ptr::null_mut());
    }
}

#[test]
fn pretrain_features_save_load() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let run = cs(dir.path().join("run").to_str().unwrap());
    let ckpt = cs(dir.path().join("model.bin").to_str().unwrap());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            stoplab_pretrain(cfg, run.as_ptr(), &mut model),
            StoplabStatus::Ok,
            "{}",
            last_error()
        );
        assert!(dir.path().join("run/metrics.csv").exists());

        let (mut na, mut nm) = (0.0, 0.0);
        assert_eq!(stoplab_model_norms(model, &mut na, &mut nm), StoplabStatus::Ok);
        assert!(na.is_finite() && na > 0.0 && nm.is_finite());

        let mut width = 0usize;
        assert_eq!(
            stoplab_model_feature_width(model, StoplabFeatures::Last4, &mut width),
            StoplabStatus::Ok
        );
        assert_eq!(width, 64);

        let n = 3;
        let images: Vec<f32> = (0..n * 16 * 16).map(|i| (i % 7) as f32 / 7.0).collect();
        let mut feats = vec![0f32; n * width];
        let st = stoplab_model_features(
            model,
            images.as_ptr(),
            n,
            16,
            16,
            1,
            StoplabFeatures::Last4,
            feats.as_mut_ptr(),
            feats.len(),
        );
        assert_eq!(st, StoplabStatus::Ok, "{}", last_error());
        assert!(feats.iter().all(|v| v.is_finite()));

        let mut small = vec![0f32; 4];
        let st = stoplab_model_features(
            model,
            images.as_ptr(),
            n,
            16,
            16,
            1,
            StoplabFeatures::Last4,
            small.as_mut_ptr(),
            small.len(),
        );
        assert_eq!(st, StoplabStatus::BufferTooSmall);
        let st = stoplab_model_features(
            model,
            images.as_ptr(),
            1,
            12,
            16,
            1,
            StoplabFeatures::LastLayer,
            feats.as_mut_ptr(),
            feats.len(),
        );
        assert_eq!(st, StoplabStatus::Dimension, "{}", last_error());

        assert_eq!(stoplab_model_save(model, ckpt.as_ptr()), StoplabStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(
            stoplab_model_load(cfg, ckpt.as_ptr(), &mut loaded),
            StoplabStatus::Ok,
            "{}",
            last_error()
        );
        let mut again = vec![0f32; n * width];
        stoplab_model_features(
            loaded,
            images.as_ptr(),
            n,
            16,
            16,
            1,
            StoplabFeatures::Last4,
            again.as_mut_ptr(),
            again.len(),
        );
        assert_eq!(feats, again);

        let mut copy = ptr::null_mut();
        assert_eq!(stoplab_model_config(loaded, &mut copy), StoplabStatus::Ok);
        let mut buf = vec![0 as c_char; 16];
        stoplab_config_get(
            copy,
            cs("model.enc_dim").as_ptr(),
            buf.as_mut_ptr(),
            buf.len(),
            ptr::null_mut(),
        );
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "16");

        stoplab_config_free(copy);
        stoplab_model_free(loaded);
        stoplab_model_free(model);
        stoplab_config_free(cfg);
    }
}

#[test]
fn verify_reports_pass() {
    let mut passed = -1;
    unsafe {
        assert_eq!(
            stoplab_verify(0, 2000, &mut passed),
            StoplabStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(stoplab_verify(0, 10, ptr::null_mut()), StoplabStatus::NullPointer);
    }
    assert_eq!(passed, 1);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(stoplab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stoplab.h")).unwrap()
}

#[test]
fn header_declares_every_export() {
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let h = header();
    let mut count = 0;
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(h.contains(&format!("{name}(")), "header lacks {name}");
            count += 1;
        }
    }
    assert!(count >= 15, "{count}");
    for item in [
        "STOPLAB_STATUS_OK = 0",
        "STOPLAB_STATUS_BUFFER_TOO_SMALL = 12",
        "typedef struct StoplabModel StoplabModel",
    ] {
        assert!(h.contains(item), "header lacks {item}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(probe) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    if !probe.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let main = dir.path().join("main.c");
    std::fs::write(
        &main,
        "#include \"stoplab.h\"\nint main(void) { StoplabConfig *c = 0; (void)c; return STOPLAB_STATUS_OK; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&main)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
