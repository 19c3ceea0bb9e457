use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use kbvqa_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { kbvqa_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(255));
    String::from_utf8(buf).unwrap()
}

fn build(dim: usize, ids: &[u64], vectors: &[f64]) -> Result<*mut KbvqaIndex, KbvqaStatus> {
    let mut idx = ptr::null_mut();
    let status = unsafe { kbvqa_index_build(dim, ids.as_ptr(), vectors.as_ptr(), ids.len(), &mut idx) };
    if status == KbvqaStatus::Ok {
        Ok(idx)
    } else {
        Err(status)
    }
}

fn search(idx: *const KbvqaIndex, q: &[f64], k: usize) -> Result<Vec<(u64, f64)>, KbvqaStatus> {
    let mut ids = vec![0u64; k];
    let mut scores = vec![0f64; k];
    let mut n = 0usize;
    let status = unsafe {
        kbvqa_index_search(idx, q.as_ptr(), q.len(), k, ids.as_mut_ptr(), scores.as_mut_ptr(), &mut n)
    };
    if status != KbvqaStatus::Ok {
        return Err(status);
    }
    Ok(ids.into_iter().zip(scores).take(n).collect())
}

#[test]
fn build_search_save_load() {
    let idx = build(3, &[5, 9, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
    assert_eq!(unsafe { kbvqa_index_len(idx) }, 3);
    assert_eq!(unsafe { kbvqa_index_dim(idx) }, 3);
    let hits = search(idx, &[1.0, 0.0, 0.0], 2).unwrap();
    // identical directions tie; lower id first
    assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![3, 5]);
    assert!((hits[0].1 - 1.0).abs() < 1e-6);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("i.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { kbvqa_index_save(idx, path.as_ptr()) }, KbvqaStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { kbvqa_index_load(path.as_ptr(), &mut loaded) }, KbvqaStatus::Ok);
    assert_eq!(search(loaded, &[0.3, 0.9, 0.1], 3), search(idx, &[0.3, 0.9, 0.1], 3));
    unsafe {
        kbvqa_index_free(idx);
        kbvqa_index_free(loaded);
        kbvqa_index_free(ptr::null_mut());
    }
}

#[test]
fn error_codes_and_messages() {
    assert_eq!(build(2, &[1, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap_err(), KbvqaStatus::DuplicateId);
    assert!(last_error().contains('1'));

    let idx = build(2, &[1], &[1.0, 0.0]).unwrap();
    assert_eq!(search(idx, &[1.0, 0.0, 0.0], 1).unwrap_err(), KbvqaStatus::DimensionMismatch);
    assert_eq!(search(idx, &[0.0, 0.0], 1).unwrap_err(), KbvqaStatus::InvalidArgument);
    assert_eq!(search(ptr::null(), &[1.0, 0.0], 1).unwrap_err(), KbvqaStatus::NullPointer);
    unsafe { kbvqa_index_free(idx) };

    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.bin").to_str().unwrap()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { kbvqa_index_load(missing.as_ptr(), &mut out) }, KbvqaStatus::Io);
    assert!(out.is_null());

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not an index at all, definitely not").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { kbvqa_index_load(junk.as_ptr(), &mut out) }, KbvqaStatus::CorruptIndex);
    assert!(!last_error().is_empty());
}

#[test]
fn rewards_advantages_and_inspection() {
    let mut r = 0.0;
    for (rank, want) in [(1, 4.0), (6, 3.5), (20, 3.0), (50, 1.0), (100, 0.5), (200, 0.1), (0, -2.5)] {
        assert_eq!(unsafe { kbvqa_retrieval_reward(rank, &mut r) }, KbvqaStatus::Ok);
        assert_eq!(r, want, "rank {rank}");
    }
    assert_eq!(unsafe { kbvqa_retrieval_reward(201, &mut r) }, KbvqaStatus::InvalidArgument);
    let good = CString::new(r#"<think>a</think><answer>{"query": "b"}</answer>"#).unwrap();
    let bad = CString::new("nothing").unwrap();
    unsafe {
        assert_eq!(kbvqa_format_reward(good.as_ptr(), &mut r), KbvqaStatus::Ok);
        assert_eq!(r, 1.0);
        kbvqa_format_reward(bad.as_ptr(), &mut r);
        assert_eq!(r, -4.0);
        assert_eq!(kbvqa_format_reward(ptr::null(), &mut r), KbvqaStatus::NullPointer);
    }

    let rewards = [1.0, 2.0, 3.0, 4.0];
    let mut adv = [0.0; 4];
    assert_eq!(
        unsafe { kbvqa_compute_advantages(rewards.as_ptr(), 4, adv.as_mut_ptr()) },
        KbvqaStatus::Ok
    );
    assert!((adv[0] + 1.3416407864998738).abs() < 1e-12);
    assert_eq!(
        unsafe { kbvqa_compute_advantages(rewards.as_ptr(), 1, adv.as_mut_ptr()) },
        KbvqaStatus::InvalidArgument
    );

    let mut decision = KbvqaDecision::Pass;
    let mut ok = false;
    let fail = CString::new(r#"{"pass": "false", "answer": "1889"}"#).unwrap();
    unsafe { kbvqa_parse_inspection(fail.as_ptr(), &mut decision, &mut ok) };
    assert_eq!((decision, ok), (KbvqaDecision::Fail, true));
    unsafe { kbvqa_parse_inspection(bad.as_ptr(), &mut decision, &mut ok) };
    assert!(!ok);
}

fn target_dir() -> PathBuf {
    // .../target/<profile>/deps/<test binary>
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libkbvqa_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c_smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile/link failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
