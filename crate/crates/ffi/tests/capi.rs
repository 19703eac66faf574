use std::ffi::{c_char, CStr};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use sarqsm::qsm::fit_qsm;
use sarqsm::simharness::{replication_data, SimDesign};
use sarqsm::{FitOptions, SarData};
use sarqsm_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; sarqsm_last_error_length() + 1];
    unsafe { sarqsm_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

struct Raw {
    y: Vec<f64>,
    x: Vec<f64>,
    from: Vec<usize>,
    to: Vec<usize>,
    w: Vec<f64>,
}

fn raw(d: &SarData) -> Raw {
    let csr = d.weights().csr();
    let (mut from, mut to, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..d.n() {
        let (cols, vals) = csr.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            from.push(i);
            to.push(j);
            w.push(v);
        }
    }
    Raw { y: d.y().to_vec(), x: d.x().as_slice().to_vec(), from, to, w }
}

fn handle(r: &Raw, n: usize, p: usize) -> *mut SarqsmData {
    let mut out = ptr::null_mut();
    let s = unsafe {
        sarqsm_data_new(n, p, r.y.as_ptr(), r.x.as_ptr(), r.from.len(), r.from.as_ptr(), r.to.as_ptr(), r.w.as_ptr(), false, &mut out)
    };
    assert_eq!(s, SarqsmStatus::Ok, "{}", last_error());
    out
}

#[test]
fn fit_through_handles_matches_library() {
    let d = replication_data(&SimDesign { n: 300, base_seed: 5, reps: 1, ..SimDesign::default() }, 0).unwrap();
    let r = raw(&d);
    let data = handle(&r, d.n(), d.p());
    assert_eq!(unsafe { sarqsm_data_n(data) }, 300);

    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { sarqsm_fit(data, SarqsmMethod::Qsm, true, &mut fit) }, SarqsmStatus::Ok, "{}", last_error());
    let dim = unsafe { sarqsm_fit_dim(fit) };
    assert_eq!(dim, 4);
    let mut theta = vec![0.0; dim];
    let mut se = vec![0.0; dim];
    assert_eq!(unsafe { sarqsm_fit_theta(fit, theta.as_mut_ptr(), dim) }, SarqsmStatus::Ok);
    assert_eq!(unsafe { sarqsm_fit_std_errors(fit, se.as_mut_ptr(), dim) }, SarqsmStatus::Ok);

    let want = fit_qsm(&d, &FitOptions { inference: true, ..FitOptions::default() }).unwrap();
    assert_eq!(theta, want.theta.to_vec());
    assert_eq!(se, want.std_errors);

    let mut obj = 0.0;
    assert_eq!(unsafe { sarqsm_concentrated_objective(data, theta[0], &mut obj) }, SarqsmStatus::Ok);
    assert_eq!(obj, sarqsm::qsm::concentrated_objective(&d, theta[0]).unwrap());

    unsafe {
        sarqsm_fit_free(fit);
        sarqsm_data_free(data);
    }
}

#[test]
fn every_method_fits() {
    let d = replication_data(&SimDesign { n: 200, base_seed: 6, reps: 1, ..SimDesign::default() }, 0).unwrap();
    let r = raw(&d);
    let data = handle(&r, d.n(), d.p());
    for m in [SarqsmMethod::Qsm, SarqsmMethod::QsmImproved, SarqsmMethod::Qmle] {
        let mut fit = ptr::null_mut();
        assert_eq!(unsafe { sarqsm_fit(data, m, false, &mut fit) }, SarqsmStatus::Ok, "{m:?}: {}", last_error());
        let mut theta = [0.0; 4];
        assert_eq!(unsafe { sarqsm_fit_theta(fit, theta.as_mut_ptr(), 4) }, SarqsmStatus::Ok);
        assert!((theta[0] - 0.3).abs() < 0.3, "{m:?}: {theta:?}");
        unsafe { sarqsm_fit_free(fit) };
    }
    unsafe { sarqsm_data_free(data) };
}

#[test]
fn bad_edges_report_input_errors() {
    let y = [1.0, 2.0, 0.5];
    let x = [1.0, 1.0, 1.0];
    let mut out = ptr::null_mut();
    let s = unsafe { sarqsm_data_new(3, 1, y.as_ptr(), x.as_ptr(), 2, [0usize, 1].as_ptr(), [1usize, 1].as_ptr(), ptr::null(), true, &mut out) };
    assert_eq!(s, SarqsmStatus::InvalidInput);
    assert!(out.is_null());
    assert!(last_error().contains("self-loop"), "{}", last_error());

    let s = unsafe { sarqsm_data_new(3, 1, y.as_ptr(), x.as_ptr(), 1, [0usize].as_ptr(), [9usize].as_ptr(), ptr::null(), true, &mut out) };
    assert_eq!(s, SarqsmStatus::InvalidInput, "{}", last_error());

    let s = unsafe { sarqsm_data_new(3, 1, ptr::null(), x.as_ptr(), 0, ptr::null(), ptr::null(), ptr::null(), true, &mut out) };
    assert_eq!(s, SarqsmStatus::NullArgument);
}

#[test]
fn accessors_report_buffer_and_availability() {
    let d = replication_data(&SimDesign { n: 150, base_seed: 8, reps: 1, ..SimDesign::default() }, 0).unwrap();
    let r = raw(&d);
    let data = handle(&r, d.n(), d.p());
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { sarqsm_fit(data, SarqsmMethod::Qsm, false, &mut fit) }, SarqsmStatus::Ok);
    let mut buf = [0.0; 4];
    assert_eq!(unsafe { sarqsm_fit_theta(fit, buf.as_mut_ptr(), 3) }, SarqsmStatus::BufferTooSmall);
    assert_eq!(unsafe { sarqsm_fit_std_errors(fit, buf.as_mut_ptr(), 4) }, SarqsmStatus::Unavailable);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { sarqsm_fit_theta(fit, buf.as_mut_ptr(), 4) }, SarqsmStatus::Ok);
    assert_eq!(sarqsm_last_error_length(), 0);
    unsafe {
        sarqsm_fit_free(fit);
        sarqsm_data_free(data);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(sarqsm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(manifest().join("include/sarqsm.h")).unwrap();
    for sym in [
        "sarqsm_data_new",
        "sarqsm_data_free",
        "sarqsm_data_n",
        "sarqsm_concentrated_objective",
        "sarqsm_fit",
        "sarqsm_fit_free",
        "sarqsm_fit_dim",
        "sarqsm_fit_theta",
        "sarqsm_fit_std_errors",
        "sarqsm_last_error_length",
        "sarqsm_last_error_message",
        "sarqsm_version",
        "typedef struct SarqsmData SarqsmData",
        "typedef struct SarqsmFit SarqsmFit",
        "SARQSM_STATUS_BUFFER_TOO_SMALL = 4",
        "SARQSM_METHOD_QSM_IMPROVED = 1",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
}

/// Directory holding the static library built alongside this test binary.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = artifact_dir().join("libsarqsm_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("status 2: edge 0 is a self-loop"), "{stdout}");
    let lambda: f64 = stdout.lines().find_map(|l| l.strip_prefix("lambda ")).unwrap().parse().unwrap();
    assert!(lambda.is_finite() && lambda.abs() < 1.0);
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "sarqsm.h"

int main(void) {
    enum { N = 6 };
    double y[N] = {1.2, -0.3, 2.1, 0.7, 1.9, -1.1};
    double x[2 * N] = {1, 1, 1, 1, 1, 1, 0.5, -1.0, 1.5, 0.2, 0.9, -0.7};
    size_t from[] = {0, 1, 2, 3, 4, 5, 0, 3};
    size_t to[] = {1, 2, 3, 4, 5, 0, 3, 0};
    SarqsmData *data = NULL;
    if (sarqsm_data_new(N, 2, y, x, 8, from, to, NULL, true, &data) != SARQSM_STATUS_OK) return 1;
    SarqsmFit *fit = NULL;
    if (sarqsm_fit(data, SARQSM_METHOD_QSM, false, &fit) != SARQSM_STATUS_OK) return 2;
    double theta[4];
    if (sarqsm_fit_theta(fit, theta, sarqsm_fit_dim(fit)) != SARQSM_STATUS_OK) return 3;
    printf("lambda %.12f\n", theta[0]);
    sarqsm_fit_free(fit);
    sarqsm_data_free(data);

    size_t loop_from[] = {0};
    SarqsmData *bad = NULL;
    SarqsmStatus s = sarqsm_data_new(N, 2, y, x, 1, loop_from, loop_from, NULL, true, &bad);
    char msg[128];
    sarqsm_last_error_message(msg, sizeof msg);
    printf("status %d: %s\n", (int)s, msg);
    return bad == NULL ? 0 : 4;
}
"#;
