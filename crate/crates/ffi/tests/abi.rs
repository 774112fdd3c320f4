use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use kdlab::divergence::{markov_kld, KlKind};
use kdlab::{Sequence, TabularLM, Vocab};
use kdlab_ffi::*;
use rand::SeedableRng;

fn random_model(seed: u64, order: usize) -> TabularLM {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    TabularLM::random(Vocab::new(4, 0).unwrap(), order, 1.5, &mut rng).unwrap()
}

fn handle(m: &TabularLM) -> *mut KdModel {
    let json = CString::new(m.to_json().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { kd_model_from_json(json.as_ptr(), &mut h) },
        KdStatus::Ok
    );
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    let p = kd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn queries_match_the_library() {
    let (p, q) = (random_model(1, 2), random_model(2, 1));
    let (hp, hq) = (handle(&p), handle(&q));
    let ctx = [1u32, 3, 2];
    let mut probs = [0.0; 4];
    let st =
        unsafe { kd_model_next_token_dist(hp, ctx.as_ptr(), ctx.len(), probs.as_mut_ptr(), 4) };
    assert_eq!(st, KdStatus::Ok);
    assert_eq!(probs.to_vec(), p.next_token_dist(&ctx).unwrap());

    let (x, y) = ([1u32, 2], [3u32, 1, 0]);
    let mut lp = 0.0;
    let st = unsafe { kd_model_log_prob(hp, x.as_ptr(), 2, y.as_ptr(), 3, &mut lp) };
    assert_eq!(st, KdStatus::Ok);
    let want = p
        .log_prob_seq(
            &Sequence::prompt(x.to_vec()),
            &Sequence::new(y.to_vec(), true),
        )
        .unwrap();
    assert_eq!(lp, want);

    let mut kl = 0.0;
    let st = unsafe { kd_kl(hp, hq, x.as_ptr(), 2, 5, true, &mut kl) };
    assert_eq!(st, KdStatus::Ok);
    let want = markov_kld(&p, &q, &Sequence::prompt(x.to_vec()), 5, KlKind::Reverse)
        .unwrap()
        .value;
    assert_eq!(kl, want);
    assert!(kd_last_error().is_null());

    let (mut v, mut eos, mut order) = (0usize, 9u32, 0usize);
    assert_eq!(
        unsafe { kd_model_shape(hp, &mut v, &mut eos, &mut order) },
        KdStatus::Ok
    );
    assert_eq!((v, eos, order), (4, 0, 2));
    unsafe {
        kd_model_free(hp);
        kd_model_free(hq);
        kd_model_free(ptr::null_mut());
    }
}

#[test]
fn failures_report_codes_and_messages() {
    let h = handle(&random_model(3, 1));
    let mut probs = [0.0; 3];
    let st = unsafe { kd_model_next_token_dist(h, ptr::null(), 0, probs.as_mut_ptr(), 3) };
    assert_eq!(st, KdStatus::BufferTooSmall);
    assert!(last_error().contains("vocabulary has 4"));

    let mut big = [0.0; 4];
    let bad = [7u32];
    let st = unsafe { kd_model_next_token_dist(h, bad.as_ptr(), 1, big.as_mut_ptr(), 4) };
    assert_eq!(st, KdStatus::InvalidArgument, "{}", last_error());

    let st = unsafe { kd_model_next_token_dist(ptr::null(), ptr::null(), 0, big.as_mut_ptr(), 4) };
    assert_eq!(st, KdStatus::NullPointer);

    let other = handle(&TabularLM::uniform(Vocab::new(5, 0).unwrap(), 1).unwrap());
    let mut kl = 0.0;
    assert_eq!(
        unsafe { kd_kl(h, other, ptr::null(), 0, 3, false, &mut kl) },
        KdStatus::Mismatch
    );

    let mut out = ptr::null_mut();
    let junk = CString::new("{not json").unwrap();
    assert_eq!(
        unsafe { kd_model_from_json(junk.as_ptr(), &mut out) },
        KdStatus::Parse
    );
    assert!(out.is_null());
    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(
        unsafe { kd_model_load(missing.as_ptr(), &mut out) },
        KdStatus::Io
    );
    assert_eq!(
        unsafe { kd_model_uniform(1, 0, 1, &mut out) },
        KdStatus::InvalidArgument
    );
    unsafe {
        kd_model_free(h);
        kd_model_free(other);
    }
}

#[test]
fn save_then_load_round_trips() {
    let m = random_model(4, 2);
    let h = handle(&m);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { kd_model_save(h, path.as_ptr()) }, KdStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(
        unsafe { kd_model_load(path.as_ptr(), &mut back) },
        KdStatus::Ok
    );
    let mut a = [0.0; 4];
    let mut b = [0.0; 4];
    unsafe {
        kd_model_next_token_dist(h, [2u32].as_ptr(), 1, a.as_mut_ptr(), 4);
        kd_model_next_token_dist(back, [2u32].as_ptr(), 1, b.as_mut_ptr(), 4);
        kd_model_free(h);
        kd_model_free(back);
    }
    assert_eq!(a, b);
}

/// Compiles a small C program against the generated header and the static
/// library. Skipped when no C compiler is on PATH.
#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libkdlab_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no cc or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <math.h>
#include <stdio.h>
#include "kdlab.h"

int main(void) {
    KdModel *m = NULL;
    if (kd_model_uniform(3, 0, 1, &m) != KD_STATUS_OK) return 1;
    double p[3];
    uint32_t ctx[1] = {2};
    if (kd_model_next_token_dist(m, ctx, 1, p, 3) != KD_STATUS_OK) return 2;
    for (int i = 0; i < 3; i++) if (fabs(p[i] - 1.0 / 3.0) > 1e-15) return 3;
    double small[2];
    if (kd_model_next_token_dist(m, ctx, 1, small, 2) != KD_STATUS_BUFFER_TOO_SMALL) return 4;
    if (kd_last_error() == NULL) return 5;
    kd_model_free(m);
    puts("ok");
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(
        out.status.success(),
        "smoke exited with {:?}",
        out.status.code()
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
