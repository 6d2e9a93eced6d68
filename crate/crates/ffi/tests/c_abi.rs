//! Compile `tests/c/smoke.c` against the generated header and the static
//! library, then run it.

use std::env;
use std::path::PathBuf;
use std::process::Command;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // The test binary lives in target/<profile>/deps, next to the library
    // (or one level up once cargo has copied it there).
    let deps = env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = [deps.join("libspsa_lab_ffi.a"), deps.parent().unwrap().join("libspsa_lab_ffi.a")]
        .into_iter()
        .find(|p| p.exists())
        .unwrap_or_else(|| panic!("libspsa_lab_ffi.a not found near {}", deps.display()));

    let out_dir = tempfile::tempdir().unwrap();
    let exe = out_dir.path().join("smoke");
    let cc = env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap_or_else(|e| panic!("could not run C compiler `{cc}`: {e}"));
    assert!(status.success(), "C compilation failed");

    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
