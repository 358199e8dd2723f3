use std::path::PathBuf;

// Regenerates include/ringnet.h (committed alongside the crate) whenever
// the exported surface changes. Generation failure fails the build rather
// than shipping a stale header.
fn main() {
    let root = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(root.join("cbindgen.toml")).unwrap();
    cbindgen::Builder::new()
        .with_crate(&root)
        .with_config(config)
        .generate()
        .expect("cbindgen fails to generate the C header")
        .write_to_file(root.join("include/ringnet.h"));
}
