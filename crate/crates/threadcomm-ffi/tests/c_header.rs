//! Compiles and runs `tests/data/demo.c` against `include/threadcomm.h`
//! and the freshly built static library, proving the handwritten header
//! matches the exported ABI. Skips (with a note) when no C compiler is
//! available.

use std::path::PathBuf;
use std::process::Command;

fn find_cc() -> Option<&'static str> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc)
            .arg("--version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
        {
            return Some(cc);
        }
    }
    None
}

#[test]
fn c_program_links_and_passes() {
    let Some(cc) = find_cc() else {
        eprintln!("skipping: no C compiler on this host");
        return;
    };

    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/debug/deps/c_header-<hash> -> target/debug/libthreadcomm_ffi.a
    let exe = std::env::current_exe().expect("test executable path");
    let libdir = exe
        .parent()
        .and_then(|p| p.parent())
        .expect("target profile directory");
    let staticlib = libdir.join("libthreadcomm_ffi.a");
    assert!(
        staticlib.exists(),
        "static library not found at {}",
        staticlib.display()
    );

    let workdir = tempfile::tempdir().expect("temp dir");
    let bin = workdir.path().join("demo");
    let compile = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Wextra")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/data/demo.c"))
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .output()
        .expect("invoke C compiler");
    assert!(
        compile.status.success(),
        "C compilation failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&bin).output().expect("run C demo");
    assert!(
        run.status.success(),
        "C demo failed (status {:?}):\nstdout:\n{}\nstderr:\n{}",
        run.status.code(),
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(
        String::from_utf8_lossy(&run.stdout).contains("all checks passed"),
        "unexpected demo output"
    );
}
