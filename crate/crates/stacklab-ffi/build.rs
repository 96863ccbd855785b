use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("manifest dir"));
    let header = crate_dir.join("include").join("stacklab.h");
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("STACKLAB_H".to_string()),
        cpp_compat: true,
        documentation: true,
        header: Some(
            "/* C ABI for the block-tower stability laboratory.\n\
             * All functions returning slk_status set a thread-local message\n\
             * readable via slk_last_error() on failure. Handles are opaque;\n\
             * free them with the matching slk_*_free function exactly once. */"
                .to_string(),
        ),
        ..cbindgen::Config::default()
    };
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("cbindgen header generation")
        .write_to_file(header);
    println!("cargo:rerun-if-changed=src/lib.rs");
}
