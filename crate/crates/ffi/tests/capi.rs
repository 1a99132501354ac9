use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use quanta_ffi::*;

fn build(dims: &[usize], rounds: usize, seed: u64) -> *mut QuantaPlan {
    let mut plan = ptr::null_mut();
    let status = unsafe { quanta_plan_build_all_pairs(dims.as_ptr(), dims.len(), rounds, seed, 1.0, &mut plan) };
    assert_eq!(status, QuantaStatus::Ok);
    assert!(!plan.is_null());
    plan
}

fn last_error() -> String {
    let p = quanta_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { quanta_string_free(p) };
    s
}

#[test]
fn plan_queries_and_apply() {
    let plan = build(&[2, 3, 2], 1, 4);
    unsafe {
        assert_eq!(quanta_plan_input_len(plan), 12);
        assert_eq!(quanta_plan_output_len(plan), 12);
        assert_eq!(quanta_plan_gate_count(plan), 3);
        assert_eq!(quanta_plan_param_count(plan), 36 + 16 + 36);

        let mut m = vec![0.0; 144];
        assert_eq!(quanta_plan_materialize(plan, m.as_mut_ptr(), m.len()), QuantaStatus::Ok);

        let xs: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut ys = vec![0.0; 24];
        assert_eq!(quanta_plan_apply(plan, xs.as_ptr(), 2, ys.as_mut_ptr(), ys.len()), QuantaStatus::Ok);
        for b in 0..2 {
            for i in 0..12 {
                let expect: f64 = (0..12).map(|j| m[i * 12 + j] * xs[b * 12 + j]).sum();
                assert!((ys[b * 12 + i] - expect).abs() < 1e-12);
            }
        }
        quanta_plan_free(plan);
    }
}

#[test]
fn stacked_rounds_multiply_gates() {
    let plan = build(&[2, 2, 2, 2], 3, 0);
    unsafe {
        assert_eq!(quanta_plan_gate_count(plan), 18);
        quanta_plan_free(plan);
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.qtf").to_str().unwrap()).unwrap();
    let plan = build(&[3, 2], 1, 9);
    unsafe {
        assert_eq!(quanta_plan_save(plan, path.as_ptr()), QuantaStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(quanta_plan_load(path.as_ptr(), &mut back), QuantaStatus::Ok);
        let (mut a, mut b) = (vec![0.0; 36], vec![0.0; 36]);
        quanta_plan_materialize(plan, a.as_mut_ptr(), 36);
        quanta_plan_materialize(back, b.as_mut_ptr(), 36);
        assert_eq!(a, b);
        quanta_plan_free(plan);
        quanta_plan_free(back);
    }
}

#[test]
fn expressions() {
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(quanta_gen_apply_expr(3, &mut s), QuantaStatus::Ok);
        assert_eq!(take_string(s), "...abc,efbc,diaf,ghde->...ghi");
        assert_eq!(quanta_gen_operator_expr(3, &mut s), QuantaStatus::Ok);
        assert_eq!(take_string(s), "efbc,diaf,ghde->ghiabc");
        assert_eq!(quanta_gen_apply_expr(1, &mut s), QuantaStatus::InvalidArgument);
    }
    assert!(!last_error().is_empty());
}

#[test]
fn numerical_rank_of_outer_product() {
    let data: Vec<f64> = (0..12).map(|k| ((k / 4 + 1) * (k % 4 + 1)) as f64).collect();
    let mut rank = 99;
    unsafe {
        assert_eq!(quanta_numerical_rank(data.as_ptr(), 3, 4, f64::EPSILON, &mut rank), QuantaStatus::Ok);
    }
    assert_eq!(rank, 1);
}

#[test]
fn error_codes() {
    unsafe {
        assert_eq!(quanta_plan_input_len(ptr::null()), 0);
        quanta_plan_free(ptr::null_mut());
        quanta_string_free(ptr::null_mut());

        let mut out = vec![0.0; 4];
        assert_eq!(quanta_plan_materialize(ptr::null(), out.as_mut_ptr(), 4), QuantaStatus::NullPointer);
        assert!(last_error().contains("null"));

        let plan = build(&[2, 2], 1, 1);
        assert_eq!(quanta_plan_materialize(plan, out.as_mut_ptr(), 4), QuantaStatus::BufferTooSmall);
        let xs = [1.0; 4];
        assert_eq!(quanta_plan_apply(plan, xs.as_ptr(), 1, ptr::null_mut(), 4), QuantaStatus::NullPointer);
        quanta_plan_free(plan);

        let mut p = ptr::null_mut();
        let dims = [2usize];
        assert_eq!(quanta_plan_build_all_pairs(dims.as_ptr(), 1, 1, 0, 1.0, &mut p), QuantaStatus::InvalidArgument);
        assert!(p.is_null());

        let missing = CString::new("/nonexistent/dir/p.qtf").unwrap();
        assert_eq!(quanta_plan_load(missing.as_ptr(), &mut p), QuantaStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.qtf");
        std::fs::write(&junk, b"not a qtf file").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(quanta_plan_load(junk.as_ptr(), &mut p), QuantaStatus::Format);

        let mut rank = 0;
        let data = [f64::NAN; 4];
        assert_eq!(quanta_numerical_rank(data.as_ptr(), 2, 2, 1e-12, &mut rank), QuantaStatus::NonFinite);
    }
}

fn header() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/include/quanta.h"))
}

#[test]
fn header_compiles_as_c_and_cpp() {
    assert!(header().exists());
    let text = std::fs::read_to_string(header()).unwrap();
    for name in ["quanta_plan_apply", "quanta_last_error_message", "QUANTA_STATUS_BUFFER_TOO_SMALL", "typedef struct QuantaPlan QuantaPlan"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    for (compiler, std) in [("gcc", "-std=c99"), ("g++", "-std=c++11")] {
        let Ok(out) = Command::new(compiler)
            .args([std, "-Wall", "-Wextra", "-Werror", "-fsyntax-only", "-x"])
            .arg(if compiler == "gcc" { "c" } else { "c++" })
            .arg(header())
            .output()
        else {
            eprintln!("{compiler} not found, skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
