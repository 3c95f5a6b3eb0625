use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use layercard_ffi::*;

fn take_string(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { lc_string_free(p) };
    s
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lc_last_error()) }.to_str().unwrap().to_string()
}

fn model(layers: usize, teacher: &[usize], seed: u64) -> *mut LcModel {
    let mut m = ptr::null_mut();
    let st = unsafe {
        lc_model_generate(layers, 8, LcNonlinearity::Tanh as i32, 4, teacher.as_ptr(), teacher.len(), 1.0, seed, &mut m)
    };
    assert_eq!(st, LcStatus::Ok, "{}", last_error());
    m
}

#[test]
fn model_id_matches_library_and_survives_json() {
    let m = model(6, &[2], 3);
    let mut id = ptr::null_mut();
    assert_eq!(unsafe { lc_model_id(m, &mut id) }, LcStatus::Ok);
    let id = take_string(id);

    let spec = layercard::toynet::ToyModelSpec {
        layers: 6,
        width: 8,
        nonlinearity: layercard::toynet::Nonlinearity::Tanh,
        head_dim: 4,
        teacher_layers: vec![2],
        teacher_scale: 1.0,
        seed: 3,
    };
    assert_eq!(id, layercard::card::model_id(&layercard::toynet::generate(&spec).unwrap()));

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { lc_model_to_json(m, &mut json) }, LcStatus::Ok);
    let json = CString::new(take_string(json)).unwrap();
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { lc_model_from_json(json.as_ptr(), &mut back) }, LcStatus::Ok);
    let mut id2 = ptr::null_mut();
    assert_eq!(unsafe { lc_model_id(back, &mut id2) }, LcStatus::Ok);
    assert_eq!(take_string(id2), id);
    assert_eq!(unsafe { lc_model_layers(back) }, 6);
    unsafe {
        lc_model_free(m);
        lc_model_free(back);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { lc_model_id(ptr::null(), &mut out) }, LcStatus::NullPointer);
    assert!(last_error().contains("model"));

    let mut m = ptr::null_mut();
    let st = unsafe { lc_model_generate(1, 8, 1, 1, ptr::null(), 0, 1.0, 0, &mut m) };
    assert_eq!(st, LcStatus::InvalidArgument);
    assert!(last_error().contains("2 layers"));
    assert!(m.is_null());
    assert_eq!(unsafe { lc_model_generate(4, 8, 9, 1, ptr::null(), 0, 1.0, 0, &mut m) }, LcStatus::InvalidArgument);

    let junk = CString::new("{not json").unwrap();
    assert_eq!(unsafe { lc_model_from_json(junk.as_ptr(), &mut m) }, LcStatus::Parse);

    let mut n = 0usize;
    assert_eq!(unsafe { lc_verify(0, 0, &mut n, ptr::null_mut()) }, LcStatus::InvalidArgument);
    assert_eq!(unsafe { lc_model_layers(ptr::null()) }, 0);
    unsafe {
        lc_model_free(ptr::null_mut());
        lc_string_free(ptr::null_mut());
    }
}

#[test]
fn profile_buffers_are_checked_and_filled() {
    let m = model(5, &[1], 0);
    let mut buf = vec![0.0; 4];
    assert_eq!(unsafe { lc_profile_resnorm(m, 32, 1, buf.as_mut_ptr(), 4) }, LcStatus::InvalidArgument);
    buf.push(0.0);
    assert_eq!(unsafe { lc_profile_resnorm(m, 32, 1, buf.as_mut_ptr(), 5) }, LcStatus::Ok);
    assert!(buf.iter().all(|&r| r > 0.0));

    let mut csv = ptr::null_mut();
    assert_eq!(unsafe { lc_profile_csv(m, 32, 1, &mut csv) }, LcStatus::Ok);
    let csv = take_string(csv);
    assert_eq!(csv.lines().count(), 6);
    let resnorm: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(resnorm, buf);
    unsafe { lc_model_free(m) };
}

#[test]
fn card_build_transfer_and_schema_check() {
    let m = model(12, &[4, 5, 6, 7], 1);
    let mut card = ptr::null_mut();
    assert_eq!(unsafe { lc_card_build(m, 64, 1, 64, 2, 3, 4, 40, &mut card) }, LcStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { lc_card_regimes(card) }, 3);

    let mut target = vec![0.0; 12];
    assert_eq!(unsafe { lc_profile_resnorm(m, 64, 1, target.as_mut_ptr(), 12) }, LcStatus::Ok);
    let cards = [card as *const LcCard];
    let mut decision = ptr::null_mut();
    let st = unsafe {
        lc_transfer_select(cards.as_ptr(), 1, target.as_ptr(), 12, 0.9, LcObjective::MaxPerformance as i32, &mut decision)
    };
    assert_eq!(st, LcStatus::Ok, "{}", last_error());
    let decision: serde_json::Value = serde_json::from_str(&take_string(decision)).unwrap();
    assert_eq!(decision["similarities"][0].as_f64(), Some(1.0));

    let mut out = ptr::null_mut();
    let bad_tau = unsafe { lc_transfer_select(cards.as_ptr(), 1, target.as_ptr(), 12, 1.5, 0, &mut out) };
    assert_eq!(bad_tau, LcStatus::InvalidArgument);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { lc_card_to_json(card, &mut json) }, LcStatus::Ok);
    let text = take_string(json);
    let old = CString::new(text.replace("layercard/v1", "layercard/v0")).unwrap();
    let mut parsed = ptr::null_mut();
    assert_eq!(unsafe { lc_card_from_json(old.as_ptr(), &mut parsed) }, LcStatus::SchemaMismatch);
    let same = CString::new(text).unwrap();
    assert_eq!(unsafe { lc_card_from_json(same.as_ptr(), &mut parsed) }, LcStatus::Ok);
    unsafe {
        lc_card_free(parsed);
        lc_card_free(card);
        lc_model_free(m);
    }
}

#[test]
fn spearman_and_verify() {
    let (x, y) = ([1.0, 2.0, 3.0, 4.0], [10.0, 20.0, 40.0, 30.0]);
    let mut s = 0.0;
    assert_eq!(unsafe { lc_spearman(x.as_ptr(), y.as_ptr(), 4, &mut s) }, LcStatus::Ok);
    assert!((s - 0.8).abs() < 1e-12);
    let flat = [1.0; 4];
    assert_eq!(unsafe { lc_spearman(x.as_ptr(), flat.as_ptr(), 4, &mut s) }, LcStatus::InvalidArgument);

    let mut violations = usize::MAX;
    let mut csv = ptr::null_mut();
    assert_eq!(unsafe { lc_verify(4, 0, &mut violations, &mut csv) }, LcStatus::Ok);
    assert_eq!(violations, 0);
    assert_eq!(take_string(csv).lines().count(), 1 + 4 * layercard::verify::CHECKS.len());
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/layercard.h")
}

#[test]
fn header_declares_every_entry_point() {
    let text = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exported: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 15);
    for f in exported {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(text.contains("typedef struct LcModel LcModel;"));
    assert!(text.contains("LC_STATUS_SCHEMA_MISMATCH = 4"));
}

/// Compiles and runs a C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let target_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = target_dir.join("liblayercard_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let dir = std::env::temp_dir().join(format!("layercard-ffi-c-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "layercard.h"

int main(void) {
    size_t teacher[] = {2};
    LcModel *m = NULL;
    if (lc_model_generate(6, 8, LC_NONLINEARITY_TANH, 1, teacher, 1, 1.0, 7, &m) != LC_STATUS_OK) return 1;
    char *id = NULL;
    if (lc_model_id(m, &id) != LC_STATUS_OK || strlen(id) != 64) return 2;
    double r[6];
    if (lc_profile_resnorm(m, 32, 1, r, 6) != LC_STATUS_OK) return 3;
    if (lc_model_generate(1, 8, LC_NONLINEARITY_TANH, 1, NULL, 0, 1.0, 0, &m) != LC_STATUS_INVALID_ARGUMENT) return 4;
    if (strlen(lc_last_error()) == 0) return 5;
    printf("%s\n", id);
    lc_string_free(id);
    lc_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.join("smoke");
    let cc = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("a C compiler named cc");
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&exe).output().unwrap();
    std::fs::remove_dir_all(&dir).ok();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8(run.stdout).unwrap().trim().len(), 64);
}
