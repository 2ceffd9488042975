//! C ABI over the tapauth core.
//!
//! Conventions:
//! - every function returns a [`TapauthStatus`]; results go through out
//!   pointers
//! - strings handed out by the library are NUL-terminated, heap allocated and
//!   must be released with [`tapauth_string_free`]
//! - after a non-`Ok` status, [`tapauth_last_error`] describes what went wrong
//!   on the calling thread
//! - no call unwinds across the boundary; a panic becomes `Internal`

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tapauth::crypto::{
    derive_keys, open, seal_with_iv, CryptoError, Envelope, KeyPair, Nonce10, SecretKey, IV_LEN,
    KEY_LEN,
};
use tapauth::harness::serve::ServeSession;
use tapauth::harness::{run_scenario, verify_transcript_text, RunOptions, ScenarioConfig};
use tapauth::messages::PrincipalId;
use tapauth::server::{FileStore, Server, ServerConfig};

/// Length of a key pair as exchanged over the ABI: `k_e || k_m`.
pub const TAPAUTH_KEYPAIR_LEN: usize = 64;
pub const TAPAUTH_SK_LEN: usize = 32;
pub const TAPAUTH_IV_LEN: usize = 16;
/// Envelope overhead on top of the ciphertext: IV and tag.
pub const TAPAUTH_ENVELOPE_HEADER_LEN: usize = 48;

const _: () = assert!(TAPAUTH_KEYPAIR_LEN == 2 * KEY_LEN);
const _: () = assert!(TAPAUTH_SK_LEN == KEY_LEN);
const _: () = assert!(TAPAUTH_IV_LEN == IV_LEN);
const _: () = assert!(TAPAUTH_ENVELOPE_HEADER_LEN == Envelope::HEADER_LEN);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapauthStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    BufferTooSmall = 4,
    MacMismatch = 5,
    BadPadding = 6,
    MalformedEnvelope = 7,
    Config = 8,
    Io = 9,
    Internal = 10,
    Transcript = 11,
}

/// Opaque handle to a verifier server that answers line-delimited JSON
/// requests.
pub struct TapauthServer {
    session: ServeSession,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("NULs were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(TapauthStatus, String);

impl Fail {
    fn new(status: TapauthStatus, msg: impl Into<String>) -> Self {
        Fail(status, msg.into())
    }
}

impl From<CryptoError> for Fail {
    fn from(e: CryptoError) -> Self {
        let status = match e {
            CryptoError::MacMismatch => TapauthStatus::MacMismatch,
            CryptoError::BadPadding => TapauthStatus::BadPadding,
            CryptoError::MalformedEnvelope(_) => TapauthStatus::MalformedEnvelope,
            CryptoError::EmptyKeyMaterial | CryptoError::InvalidNonce(_) => {
                TapauthStatus::InvalidArgument
            }
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TapauthStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TapauthStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            TapauthStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::new(
            TapauthStatus::NullArgument,
            format!("{what} is null"),
        ))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(TapauthStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn keypair_arg(p: *const u8) -> Result<KeyPair, Fail> {
    let b = bytes_arg(p, TAPAUTH_KEYPAIR_LEN, "keys")?;
    let mut k_e = [0u8; KEY_LEN];
    let mut k_m = [0u8; KEY_LEN];
    k_e.copy_from_slice(&b[..KEY_LEN]);
    k_m.copy_from_slice(&b[KEY_LEN..]);
    Ok(KeyPair::from_parts(k_e, k_m))
}

unsafe fn write_out(
    out: *mut u8,
    cap: usize,
    out_len: *mut usize,
    data: &[u8],
) -> Result<(), Fail> {
    non_null(out_len, "out_len")?;
    *out_len = data.len();
    if data.len() > cap {
        return Err(Fail::new(
            TapauthStatus::BufferTooSmall,
            format!("need {} bytes, have {cap}", data.len()),
        ));
    }
    if !data.is_empty() {
        non_null(out, "out")?;
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    non_null(out, "out")?;
    let c = CString::new(s).map_err(|_| Fail::new(TapauthStatus::Internal, "output holds NUL"))?;
    *out = c.into_raw();
    Ok(())
}

/// Library version as a static string. Do not free.
#[no_mangle]
pub extern "C" fn tapauth_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next tapauth call on the same thread. Do not free.
#[no_mangle]
pub extern "C" fn tapauth_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned through an out pointer. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn tapauth_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Derives `k_e || k_m` from a 32-byte secret and a 10-digit decimal nonce.
///
/// # Safety
/// `k` must point to 32 readable bytes, `nonce` to a NUL-terminated string
/// and `out` to 64 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tapauth_derive_keys(
    k: *const u8,
    nonce: *const c_char,
    out: *mut u8,
) -> TapauthStatus {
    guard(|| {
        let k = bytes_arg(k, TAPAUTH_SK_LEN, "k")?;
        let n = Nonce10::parse(str_arg(nonce, "nonce")?)?;
        non_null(out, "out")?;
        let sk = SecretKey::from_slice(k).expect("length checked");
        let kp = derive_keys(&sk, &n);
        ptr::copy_nonoverlapping(kp.enc_key().as_ptr(), out, KEY_LEN);
        ptr::copy_nonoverlapping(kp.mac_key().as_ptr(), out.add(KEY_LEN), KEY_LEN);
        Ok(())
    })
}

/// Encrypt-then-MAC. Writes `IV || MAC || ciphertext` to `out`. The IV must
/// be fresh and unpredictable for every call.
///
/// On `BufferTooSmall`, `*out_len` holds the required size.
///
/// # Safety
/// `keys` must point to 64 bytes, `iv` to 16, `pt` to `pt_len` (may be NULL
/// when zero), `out` to `out_cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tapauth_seal(
    keys: *const u8,
    iv: *const u8,
    pt: *const u8,
    pt_len: usize,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> TapauthStatus {
    guard(|| {
        let kp = keypair_arg(keys)?;
        let iv: [u8; IV_LEN] = bytes_arg(iv, IV_LEN, "iv")?
            .try_into()
            .expect("length checked");
        let pt = bytes_arg(pt, pt_len, "pt")?;
        write_out(
            out,
            out_cap,
            out_len,
            &seal_with_iv(&kp, &iv, pt).to_bytes(),
        )
    })
}

/// Checks the tag, then decrypts an envelope produced by [`tapauth_seal`].
///
/// # Safety
/// As for [`tapauth_seal`], with `env` pointing to `env_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tapauth_open(
    keys: *const u8,
    env: *const u8,
    env_len: usize,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> TapauthStatus {
    guard(|| {
        let kp = keypair_arg(keys)?;
        let env = Envelope::from_bytes(bytes_arg(env, env_len, "env")?)?;
        write_out(out, out_cap, out_len, &open(&kp, &env)?)
    })
}

/// Creates an in-memory server. `seed` drives its RNG.
///
/// # Safety
/// `sk` must point to 32 bytes and `out` to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn tapauth_server_new(
    sk: *const u8,
    seed: u64,
    out: *mut *mut TapauthServer,
) -> TapauthStatus {
    guard(|| {
        non_null(out, "out")?;
        let sk = SecretKey::from_slice(bytes_arg(sk, TAPAUTH_SK_LEN, "sk")?).expect("32 bytes");
        let server = Server::new(PrincipalId::new("server"), sk, ServerConfig::default());
        *out = Box::into_raw(Box::new(TapauthServer {
            session: ServeSession::new(server, seed),
        }));
        Ok(())
    })
}

/// Like [`tapauth_server_new`] but loads and persists users in `store_dir`.
///
/// # Safety
/// As for [`tapauth_server_new`]; `store_dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tapauth_server_open(
    sk: *const u8,
    seed: u64,
    store_dir: *const c_char,
    out: *mut *mut TapauthServer,
) -> TapauthStatus {
    guard(|| {
        non_null(out, "out")?;
        let sk = SecretKey::from_slice(bytes_arg(sk, TAPAUTH_SK_LEN, "sk")?).expect("32 bytes");
        let dir = Path::new(str_arg(store_dir, "store_dir")?);
        let io = |e: tapauth::server::StoreError| Fail::new(TapauthStatus::Io, e.to_string());
        let fs = FileStore::open(dir).map_err(io)?;
        let docs = fs.load_all().map_err(io)?;
        let server = Server::restore(
            PrincipalId::new("server"),
            sk,
            ServerConfig::default(),
            docs,
        )
        .with_persistence(fs);
        *out = Box::into_raw(Box::new(TapauthServer {
            session: ServeSession::new(server, seed),
        }));
        Ok(())
    })
}

/// Answers one JSON request line (see the `serve` subcommand). Protocol
/// level failures are reported inside the response, so this only fails on
/// bad arguments.
///
/// # Safety
/// `server` must be a live handle, `line` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tapauth_server_handle(
    server: *mut TapauthServer,
    line: *const c_char,
    out: *mut *mut c_char,
) -> TapauthStatus {
    guard(|| {
        non_null(server, "server")?;
        let line = str_arg(line, "line")?;
        let resp = (*server).session.handle_line(line);
        write_string(out, resp)
    })
}

/// Destroys a server handle. NULL is ignored.
///
/// # Safety
/// `server` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn tapauth_server_free(server: *mut TapauthServer) {
    if !server.is_null() {
        drop(Box::from_raw(server));
    }
}

/// Runs a scenario config (JSON, comments allowed) and returns the report as
/// JSON. When `transcript_out` is not NULL it receives the JSON-lines
/// transcript.
///
/// # Safety
/// `config` must be NUL-terminated; `report_out` writable; `transcript_out`
/// NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn tapauth_run_scenario(
    config: *const c_char,
    report_out: *mut *mut c_char,
    transcript_out: *mut *mut c_char,
) -> TapauthStatus {
    guard(|| {
        non_null(report_out, "report_out")?;
        let cfg = ScenarioConfig::parse(str_arg(config, "config")?)
            .map_err(|e| Fail::new(TapauthStatus::Config, e.to_string()))?;
        let report = run_scenario(&cfg, &RunOptions::default())
            .map_err(|e| Fail::new(TapauthStatus::Config, e.to_string()))?;
        let json = serde_json::to_string(&report).expect("reports serialize");
        if !transcript_out.is_null() {
            write_string(transcript_out, report.transcript.to_jsonl())?;
        }
        write_string(report_out, json)
    })
}

/// Re-runs the secrecy and authenticity analysis on a JSON-lines transcript.
/// `*all_safe` is set to 1 when every secret is safe and every accepted OK
/// authentic.
///
/// # Safety
/// `transcript` must be NUL-terminated; `report_out` and `all_safe` writable.
#[no_mangle]
pub unsafe extern "C" fn tapauth_verify_transcript(
    transcript: *const c_char,
    report_out: *mut *mut c_char,
    all_safe: *mut i32,
) -> TapauthStatus {
    guard(|| {
        non_null(report_out, "report_out")?;
        non_null(all_safe, "all_safe")?;
        let r = verify_transcript_text(str_arg(transcript, "transcript")?)
            .map_err(|e| Fail::new(TapauthStatus::Transcript, e.to_string()))?;
        *all_safe = i32::from(r.all_safe());
        write_string(
            report_out,
            serde_json::to_string(&r).expect("reports serialize"),
        )
    })
}
