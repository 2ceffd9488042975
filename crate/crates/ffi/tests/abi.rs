use std::ffi::{CStr, CString};
use std::ptr;

use tapauth_ffi::*;

fn last_error() -> String {
    let p = tapauth_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    tapauth_string_free(p);
    s
}

fn keys() -> [u8; TAPAUTH_KEYPAIR_LEN] {
    let sk = [7u8; TAPAUTH_SK_LEN];
    let nonce = CString::new("0123456789").unwrap();
    let mut out = [0u8; TAPAUTH_KEYPAIR_LEN];
    let st = unsafe { tapauth_derive_keys(sk.as_ptr(), nonce.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(st, TapauthStatus::Ok);
    out
}

#[test]
fn derive_matches_core() {
    use tapauth::crypto::{derive_keys, Nonce10, SecretKey};
    let kp = derive_keys(
        &SecretKey::from_bytes([7u8; 32]),
        &Nonce10::parse("0123456789").unwrap(),
    );
    let k = keys();
    assert_eq!(&k[..32], kp.enc_key());
    assert_eq!(&k[32..], kp.mac_key());
}

#[test]
fn bad_nonce_is_invalid_argument() {
    let sk = [0u8; 32];
    let nonce = CString::new("12345").unwrap();
    let mut out = [0u8; 64];
    let st = unsafe { tapauth_derive_keys(sk.as_ptr(), nonce.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(st, TapauthStatus::InvalidArgument);
    assert!(last_error().contains("nonce"));
}

#[test]
fn seal_open_roundtrip_and_tamper() {
    let k = keys();
    let iv = [3u8; TAPAUTH_IV_LEN];
    let pt = b"registration token";
    let mut env = vec![0u8; 128];
    let mut n = 0usize;
    let st = unsafe {
        tapauth_seal(
            k.as_ptr(),
            iv.as_ptr(),
            pt.as_ptr(),
            pt.len(),
            env.as_mut_ptr(),
            env.len(),
            &mut n,
        )
    };
    assert_eq!(st, TapauthStatus::Ok);
    assert_eq!(n, TAPAUTH_ENVELOPE_HEADER_LEN + 32);
    env.truncate(n);

    let mut out = [0u8; 64];
    let mut m = 0usize;
    let st = unsafe {
        tapauth_open(
            k.as_ptr(),
            env.as_ptr(),
            env.len(),
            out.as_mut_ptr(),
            out.len(),
            &mut m,
        )
    };
    assert_eq!(st, TapauthStatus::Ok);
    assert_eq!(&out[..m], pt);

    env[60] ^= 1;
    let st = unsafe {
        tapauth_open(
            k.as_ptr(),
            env.as_ptr(),
            env.len(),
            out.as_mut_ptr(),
            out.len(),
            &mut m,
        )
    };
    assert_eq!(st, TapauthStatus::MacMismatch);
}

#[test]
fn small_buffer_reports_required_size() {
    let k = keys();
    let iv = [0u8; 16];
    let mut n = 0usize;
    let st = unsafe {
        tapauth_seal(
            k.as_ptr(),
            iv.as_ptr(),
            ptr::null(),
            0,
            ptr::null_mut(),
            0,
            &mut n,
        )
    };
    assert_eq!(st, TapauthStatus::BufferTooSmall);
    assert_eq!(n, TAPAUTH_ENVELOPE_HEADER_LEN + 16);
}

#[test]
fn short_envelope_is_malformed() {
    let k = keys();
    let env = [0u8; 40];
    let mut out = [0u8; 16];
    let mut m = 0usize;
    let st = unsafe {
        tapauth_open(
            k.as_ptr(),
            env.as_ptr(),
            env.len(),
            out.as_mut_ptr(),
            16,
            &mut m,
        )
    };
    assert_eq!(st, TapauthStatus::MalformedEnvelope);
}

#[test]
fn null_arguments_are_rejected() {
    let mut out = [0u8; 64];
    let st = unsafe { tapauth_derive_keys(ptr::null(), ptr::null(), out.as_mut_ptr()) };
    assert_eq!(st, TapauthStatus::NullArgument);
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { tapauth_server_new(ptr::null(), 0, &mut h) },
        TapauthStatus::NullArgument
    );
    assert!(h.is_null());
}

#[test]
fn server_handle_answers_json_lines() {
    let sk = [9u8; 32];
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { tapauth_server_new(sk.as_ptr(), 1, &mut h) },
        TapauthStatus::Ok
    );

    let line = CString::new(r#"{"op":"state","em":"nobody@example.com"}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { tapauth_server_handle(h, line.as_ptr(), &mut out) },
        TapauthStatus::Ok
    );
    assert_eq!(
        unsafe { take(out) },
        r#"{"status":"state","session_state":null}"#
    );

    let bad = CString::new("{").unwrap();
    assert_eq!(
        unsafe { tapauth_server_handle(h, bad.as_ptr(), &mut out) },
        TapauthStatus::Ok
    );
    assert!(unsafe { take(out) }.contains("malformed_message"));
    unsafe { tapauth_server_free(h) };
}

#[test]
fn persistent_server_opens_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let sk = [1u8; 32];
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { tapauth_server_open(sk.as_ptr(), 0, path.as_ptr(), &mut h) },
        TapauthStatus::Ok
    );
    unsafe { tapauth_server_free(h) };
}

#[test]
fn scenario_runs_and_verifies() {
    let cfg = CString::new(r#"{ "name": "ffi", "seed": 11, "kind": "honest_login" }"#).unwrap();
    let mut report = ptr::null_mut();
    let mut transcript = ptr::null_mut();
    assert_eq!(
        unsafe { tapauth_run_scenario(cfg.as_ptr(), &mut report, &mut transcript) },
        TapauthStatus::Ok
    );
    let report: serde_json::Value = serde_json::from_str(&unsafe { take(report) }).unwrap();
    assert_eq!(report["outcome"], "LoginSuccess");
    let transcript = CString::new(unsafe { take(transcript) }).unwrap();

    let mut verdict = ptr::null_mut();
    let mut safe = -1;
    assert_eq!(
        unsafe { tapauth_verify_transcript(transcript.as_ptr(), &mut verdict, &mut safe) },
        TapauthStatus::Ok
    );
    assert_eq!(safe, 1);
    unsafe { tapauth_string_free(verdict) };
}

#[test]
fn config_errors_carry_a_message() {
    let cfg = CString::new(r#"{ "name": "x", "kind": "honest_login" }"#).unwrap();
    let mut report = ptr::null_mut();
    assert_eq!(
        unsafe { tapauth_run_scenario(cfg.as_ptr(), &mut report, ptr::null_mut()) },
        TapauthStatus::Config
    );
    assert!(last_error().contains("seed"));
    assert!(report.is_null());
}

#[test]
fn garbage_transcript_is_rejected() {
    let t = CString::new("not a transcript\n").unwrap();
    let mut r = ptr::null_mut();
    let mut safe = 0;
    assert_eq!(
        unsafe { tapauth_verify_transcript(t.as_ptr(), &mut r, &mut safe) },
        TapauthStatus::Transcript
    );
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(tapauth_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
