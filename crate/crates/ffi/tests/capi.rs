use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use alive_ffi::*;

fn last_error() -> String {
    let p = alive_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn batch_counts() {
    assert_eq!(alive_count_batch_items(8, 16, false), 137);
    assert_eq!(alive_count_batch_items(8, 16, true), 265);
}

#[test]
fn scalar_wrappers() {
    assert_eq!(alive_constructor_reward(0.25, 0.0, true), 0.75);
    assert_eq!(alive_constructor_reward(0.0, 0.0, true), 0.0);
    assert_eq!(alive_constructor_reward(0.0, 0.0, false), 1.0);
    assert_eq!(alive_solver_reward(1.0, 0.5, 0.6), 1.3);
    assert_eq!(alive_lambda3(256, 256), 1.0);
    assert_eq!(alive_lambda3(257, 256), 0.0);
    assert!((alive_clipped_term(1.5, 2.0, 0.2, 0.2) - 2.4).abs() < 1e-12);
    assert!((alive_clipped_term(0.5, -1.0, 0.2, 0.2) + 0.8).abs() < 1e-12);
}

#[test]
fn lambda1_uses_config() {
    let cfg = alive_config_new();
    let mut v = 0.0;
    unsafe {
        assert_eq!(alive_lambda1(cfg, 16, &mut v), AliveStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(alive_lambda1(cfg, 15, &mut v), AliveStatus::Ok);
        assert_eq!(v, 0.6);
        let k = CString::new("lambda1.threshold_tokens").unwrap();
        let val = CString::new("4").unwrap();
        assert_eq!(alive_config_set(cfg, k.as_ptr(), val.as_ptr()), AliveStatus::Ok);
        assert_eq!(alive_lambda1(cfg, 4, &mut v), AliveStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(alive_lambda1(ptr::null(), 4, &mut v), AliveStatus::NullPointer);
        alive_config_free(cfg);
    }
}

#[test]
fn normalize_group_roundtrip() {
    let r = [1.0, 0.0, 0.0, 1.0];
    let mut a = [9.0; 4];
    let mut degenerate = true;
    let s = unsafe { alive_normalize_group(r.as_ptr(), r.len(), 1e-8, a.as_mut_ptr(), &mut degenerate) };
    assert_eq!(s, AliveStatus::Ok);
    assert!(!degenerate);
    assert_eq!(a, [1.0, -1.0, -1.0, 1.0]);

    let s = unsafe { alive_normalize_group(r.as_ptr(), 0, 1e-8, a.as_mut_ptr(), &mut degenerate) };
    assert_eq!(s, AliveStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn bad_key_reports_error() {
    let cfg = alive_config_new();
    let k = CString::new("no.such.key").unwrap();
    let v = CString::new("1").unwrap();
    unsafe {
        assert_eq!(alive_config_set(cfg, k.as_ptr(), v.as_ptr()), AliveStatus::Config);
        assert!(last_error().contains("no.such.key"));
        alive_config_free(cfg);
    }
}

#[test]
fn missing_config_file() {
    let p = CString::new("/nonexistent/alive.toml").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { alive_config_load(p.as_ptr(), &mut out) }, AliveStatus::Config);
    assert!(out.is_null());
}

#[test]
fn toy_train_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    let cfg = alive_config_new();
    unsafe {
        for (k, v) in [("total_steps", "6"), ("warmup_steps", "2"), ("M", "2"), ("N", "4")] {
            let (k, v) = (CString::new(k).unwrap(), CString::new(v).unwrap());
            assert_eq!(alive_config_set(cfg, k.as_ptr(), v.as_ptr()), AliveStatus::Ok);
        }
        let mut last = 0;
        assert_eq!(alive_toy_train(cfg, run_dir.as_ptr(), &mut last), AliveStatus::Ok, "{}", last_error());
        assert_eq!(last, 6);
        alive_config_free(cfg);

        let mut out = ptr::null_mut();
        assert_eq!(alive_stats_json(run_dir.as_ptr(), 3, &mut out), AliveStatus::Ok);
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        alive_string_free(out);
        let rows = json.as_array().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1]["last_step"], 6);
    }
}

#[test]
fn header_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/alive.h");
    let src = tempfile::Builder::new().suffix(".c").tempfile().unwrap();
    std::fs::write(src.path(), format!("#include \"{header}\"\nint main(void) {{ return (int)alive_count_batch_items(0, 0, false) - 1; }}\n")).unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg(src.path()).status() {
        Ok(s) => assert!(s.success()),
        Err(_) => eprintln!("no C compiler; header check skipped"),
    }
}
