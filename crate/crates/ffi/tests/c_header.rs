//! Compile and run a C program against the generated header and the static
//! library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "hermit.h"

int main(void) {
    double x[40], y[40];
    for (int i = 0; i < 20; i++) {
        double t = i / 10.0 - 1.0;
        x[2 * i] = 1.0;
        x[2 * i + 1] = t;
        y[2 * i] = 2.0 * t;
        y[2 * i + 1] = (i % 5 == 0) ? NAN : (double)(t > 0.0);
    }
    uint32_t fams[2] = {HERMIT_FAMILY_GAUSSIAN, HERMIT_FAMILY_BERNOULLI};
    HermitDataset *ds = NULL;
    if (hermit_dataset_new(x, y, 20, 2, 2, fams, &ds) != HERMIT_STATUS_OK) return 1;
    HermitModel *model = NULL;
    double obj = 0.0;
    if (hermit_fit(ds, 1, HERMIT_PENALTY_GROUP, 1e-3, 1.0, 0, 0, &model, &obj) != HERMIT_STATUS_OK) return 2;
    double pred[40];
    if (hermit_predict(model, x, 20, 2, pred, 40) != HERMIT_STATUS_OK) return 3;
    if (fabs(pred[38] - 1.8) > 0.2) return 4;
    if (hermit_fit(NULL, 1, HERMIT_PENALTY_LASSO, 1.0, 1.0, 0, 0, &model, NULL) != HERMIT_STATUS_NULL_POINTER) return 5;
    printf("%s ok\n", hermit_version());
    hermit_model_free(model);
    hermit_dataset_free(ds);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps/<binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(|p| p.parent()).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib = target_dir().join("libhermit_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler on PATH; skipping");
        return;
    }
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "compile failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stdout));
    assert!(String::from_utf8_lossy(&run.stdout).ends_with("ok\n"));
}
