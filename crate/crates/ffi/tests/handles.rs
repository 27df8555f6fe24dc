use std::ffi::CString;
use std::ptr;

use moduleformer_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { mf_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn tiny() -> *mut MfModel {
    let mut m = ptr::null_mut();
    let name = CString::new("tiny").unwrap();
    assert_eq!(unsafe { mf_model_new(name.as_ptr(), 3, &mut m) }, MfStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn save_load_logits_round_trip() {
    let m = tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.ckpt").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(mf_model_save(m, path.as_ptr()), MfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(mf_model_load(path.as_ptr(), &mut back), MfStatus::Ok);
        let v = mf_model_vocab_size(m);
        assert_eq!(v, 11);
        let tokens = [1u32, 4, 7, 2];
        let mut a = vec![0.0; 4 * v];
        let mut b = vec![0.0; 4 * v];
        assert_eq!(mf_model_logits(m, tokens.as_ptr(), 4, a.as_mut_ptr(), a.len()), MfStatus::Ok);
        assert_eq!(mf_model_logits(back, tokens.as_ptr(), 4, b.as_mut_ptr(), b.len()), MfStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(
            mf_model_logits(m, tokens.as_ptr(), 4, a.as_mut_ptr(), 3),
            MfStatus::BufferTooSmall
        );
        mf_model_free(back);
        mf_model_free(m);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut m = ptr::null_mut();
        let bad = CString::new("huge").unwrap();
        assert_eq!(mf_model_new(bad.as_ptr(), 0, &mut m), MfStatus::InvalidArgument);
        assert!(last_error().contains("huge"));
        assert_eq!(mf_model_new(ptr::null(), 0, &mut m), MfStatus::NullPointer);
        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(mf_model_load(missing.as_ptr(), &mut m), MfStatus::Io);
        assert!(!last_error().is_empty());

        let m = tiny();
        assert_eq!(last_error(), "");
        let oov = [1u32, 200];
        let mut out = [0.0; 22];
        assert_eq!(mf_model_logits(m, oov.as_ptr(), 2, out.as_mut_ptr(), 22), MfStatus::InvalidArgument);
        assert_eq!(mf_model_param_counts(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), MfStatus::NullPointer);
        mf_model_free(m);
        mf_model_free(ptr::null_mut());
    }
}

#[test]
fn evaluate_generate_and_prune() {
    let m = tiny();
    let tokens: Vec<u32> = (0..200).map(|i| (i * 7 % 11) as u32).collect();
    unsafe {
        let (mut ppl, mut h) = (0.0, 0.0);
        assert_eq!(mf_model_evaluate(m, tokens.as_ptr(), tokens.len(), 0, &mut ppl, &mut h), MfStatus::Ok);
        assert!(ppl.is_finite() && ppl > 1.0);
        assert!(h >= 0.0 && h <= (4f64).ln() + 1e-9);

        let prompt = [1u8, 2, 3];
        let mut out = [0u8; 13];
        let mut len = 0;
        assert_eq!(
            mf_model_generate(m, prompt.as_ptr(), 3, 10, 0.0, 1, out.as_mut_ptr(), out.len(), &mut len),
            MfStatus::Ok
        );
        assert_eq!(len, 13);
        assert_eq!(&out[..3], &prompt);
        assert!(out[3..].iter().all(|&b| b < 11));

        let (mut total, mut expert) = (0u64, 0u64);
        mf_model_param_counts(m, &mut total, &mut expert, ptr::null_mut());
        // tau just below 1 keeps only the most used experts and must refuse
        // when that leaves fewer than k in a layer
        let mut after = 0u64;
        let s = mf_model_prune(m, tokens.as_ptr(), tokens.len(), 0.999_999, &mut after);
        assert!(s == MfStatus::Ok || s == MfStatus::PruneRefused);
        let mut total2 = 0u64;
        mf_model_param_counts(m, &mut total2, ptr::null_mut(), ptr::null_mut());
        if s == MfStatus::PruneRefused {
            assert_eq!(total, total2);
        } else {
            assert!(after <= expert);
        }
        assert_eq!(mf_model_prune(m, tokens.as_ptr(), tokens.len(), 0.0, &mut after), MfStatus::Ok);
        mf_model_free(m);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/moduleformer.h")).unwrap();
    for name in [
        "mf_model_new",
        "mf_model_load",
        "mf_model_save",
        "mf_model_free",
        "mf_model_logits",
        "mf_model_evaluate",
        "mf_model_generate",
        "mf_model_prune",
        "mf_model_param_counts",
        "mf_last_error",
        "MF_STATUS_PRUNE_REFUSED",
        "typedef struct MfModel MfModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/moduleformer.h"))
        .status()
    else {
        eprintln!("no C compiler on PATH, skipping");
        return;
    };
    assert!(status.success());
}
