//! Compiles and runs a small C program against the generated header and the
//! static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "homent.h"

int main(void) {
    size_t k = 0;
    if (homent_moment_condition_count(2, NULL, 0, &k) != HOMENT_STATUS_OK || k != 8) return 1;
    HomentPanel *panel = NULL;
    if (homent_panel_new(NULL, 3, 2, &panel) != HOMENT_STATUS_NULL_POINTER) return 2;
    if (homent_last_error() == NULL || strstr(homent_last_error(), "NULL") == NULL) return 3;
    double m[5];
    if (homent_population_moments("{\"kind\":\"gaussian\"}", 4, m, 5) != HOMENT_STATUS_OK) return 4;
    if (m[4] != 3.0) return 5;
    printf("%s\n", homent_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // .../target/<profile>/deps/header-<hash>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib = target_dir().join("libhoment_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler is required for this test");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
