//! The generated header must stand alone as strict C99 and C++.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include "stacklab.h"

/* Reference every symbol so a missing or misdeclared prototype fails. */
typedef struct {
    const char *(*version)(void);
    const char *(*last_error)(void);
    enum slk_status (*scene_generate)(const char *, uint32_t, uint64_t, struct slk_scene **);
    void (*scene_free)(struct slk_scene *);
    enum slk_status (*scene_block_count)(const struct slk_scene *, uint32_t *);
    enum slk_status (*scene_label)(const struct slk_scene *, uint8_t *);
    enum slk_status (*scene_margin)(const struct slk_scene *, enum slk_verdict *, double *);
    enum slk_status (*scene_render_mask)(const struct slk_scene *, uint8_t *, uintptr_t, uint32_t *);
    enum slk_status (*model_load)(const char *, struct slk_model **);
    void (*model_free)(struct slk_model *);
    enum slk_status (*model_input_side)(const struct slk_model *, uint32_t *);
    enum slk_status (*model_predict)(const struct slk_model *, const uint8_t *, uintptr_t,
                                     uint32_t, double *, uint8_t *);
} api_table;

const api_table API = {
    slk_version,
    slk_last_error,
    slk_scene_generate,
    slk_scene_free,
    slk_scene_block_count,
    slk_scene_label,
    slk_scene_margin,
    slk_scene_render_mask,
    slk_model_load,
    slk_model_free,
    slk_model_input_side,
    slk_model_predict,
};

int probe(void) { return API.version() != 0 && SLK_OK == 0; }
"#;

fn include_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn compile(compiler: &str, std: &str, source: &std::path::Path) {
    let out = Command::new(compiler)
        .arg(format!("-std={std}"))
        .args(["-Wall", "-Wextra", "-Werror", "-fsyntax-only"])
        .arg("-I")
        .arg(include_dir())
        .arg(source)
        .output()
        .unwrap_or_else(|e| panic!("failed to run {compiler}: {e}"));
    assert!(
        out.status.success(),
        "{compiler} -std={std} rejected the header:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn header_compiles_as_c99() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use_header.c");
    std::fs::write(&src, PROGRAM).unwrap();
    compile("cc", "c99", &src);
}

#[test]
fn header_compiles_as_cxx() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use_header.cpp");
    std::fs::write(&src, PROGRAM).unwrap();
    compile("c++", "c++14", &src);
}
