//! Generates the C header into OUT_DIR. When cbindgen cannot parse the
//! crate (for instance after a toolchain change), the committed
//! include/isokann.h is used instead so the build never blocks on header
//! generation. The committed copy is the cbindgen output and is kept in
//! sync by `cargo test -p isokann-ffi` (see tests/header.rs).

use std::env;
use std::path::PathBuf;

fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    println!("cargo:rerun-if-changed=include/isokann.h");

    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let out = PathBuf::from(env::var("OUT_DIR").unwrap()).join("isokann.h");

    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(&out);
        }
        Err(e) => {
            println!("cargo:warning=cbindgen failed ({e}); falling back to committed header");
            std::fs::copy(crate_dir.join("include/isokann.h"), &out)
                .expect("committed include/isokann.h must exist");
        }
    }
    println!("cargo:isokann_header={}", out.display());
}
