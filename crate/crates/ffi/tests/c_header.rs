use std::path::{Path, PathBuf};
use std::process::Command;

/// `cargo test` links the rlib only, so the static library is built here, in
/// its own target directory to stay clear of the running build.
fn static_lib() -> PathBuf {
    // .../target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let target = exe.ancestors().nth(3).unwrap().join("c-abi");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args(["build", "-p", "aniso-extremal-ffi", "--lib", "--target-dir"])
        .arg(&target)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .status()
        .unwrap();
    assert!(status.success(), "building the static library failed");
    target.join("debug/libaniso_extremal_ffi.a")
}

#[test]
fn header_declares_the_interface() {
    let h = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/aniso_extremal.h")).unwrap();
    for name in [
        "ae_config_parse",
        "ae_config_free",
        "ae_solve",
        "ae_result_summary",
        "ae_result_shape",
        "ae_result_values",
        "ae_result_free",
        "ae_critical_exponent",
        "ae_epsilon_exponents",
        "ae_last_error",
        "ae_version",
        "typedef struct AeConfig AeConfig",
        "AE_STATUS_OK = 0",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler on PATH; skipping");
        return;
    }
    let lib = static_lib();
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "aniso_extremal.h"

int main(void) {
    const char *toml =
        "[exponents]\np = [2.0, 2.0]\nlinear = true\n"
        "[grid]\nhalf_lengths = [1.0, 1.0]\ncounts = [5, 5]\n";
    AeConfig *cfg = NULL;
    AeResult *res = NULL;
    AeSummary s;
    double ps = 0.0, p[3] = {1.0, 2.0, 2.0};
    char msg[128];
    if (ae_config_parse(toml, &cfg) != AE_STATUS_OK) return 1;
    if (ae_solve(cfg, &res) != AE_STATUS_OK) return 2;
    if (ae_result_summary(res, &s) != AE_STATUS_OK || !s.converged) return 3;
    if (ae_critical_exponent(p, 3, &ps) != AE_STATUS_OK || ps != 3.0) return 4;
    if (ae_solve(NULL, &res) != AE_STATUS_NULL_POINTER) return 5;
    ae_last_error(msg, sizeof msg);
    if (strstr(msg, "null") == NULL) return 6;
    printf("%.12f\n", s.k_eps);
    ae_result_free(res);
    ae_config_free(cfg);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let k: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    // 3x3 interior, h = 1/2: lambda = 2 * 4 * 4 sin^2(pi/8)
    let lam = 32.0 * (std::f64::consts::PI / 8.0).sin().powi(2);
    assert!((k - 0.5 * lam).abs() < 1e-6 * lam, "{k}");
}
