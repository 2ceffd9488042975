//! Builds tests/c/smoke.c against the generated header and the static
//! library, then runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

fn target_dir() -> PathBuf {
    // target/<profile>/deps/c_consumer-<hash>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libtapauth_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("tapauth_smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c11", "-Wall", "-Wextra", "-Werror"])
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .unwrap_or_else(|e| panic!("running {cc}: {e}"));
    assert!(status.success(), "C build failed");
    let run = Command::new(&out).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(
        run.status.success(),
        "{stdout}{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(stdout.starts_with("ok "));
}

#[test]
fn header_is_valid_cxx() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let src = Path::new(env!("CARGO_TARGET_TMPDIR")).join("include_check.cc");
    std::fs::write(
        &src,
        "#include \"tapauth.h\"\nint main() { return TAPAUTH_STATUS_OK; }\n",
    )
    .unwrap();
    let status = Command::new("c++")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(manifest.join("include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}
