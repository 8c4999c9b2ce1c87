//! The committed C header must match what cbindgen generates from the
//! current source. Regenerate with:
//! `cargo run -p sftkd-ffi --example gen_header`

#[test]
fn committed_header_matches_generated() {
    let crate_dir = env!("CARGO_MANIFEST_DIR");
    let config = cbindgen::Config::from_file(format!("{crate_dir}/cbindgen.toml"))
        .expect("cbindgen.toml parses");
    let mut generated = Vec::new();
    cbindgen::Builder::new()
        .with_crate(crate_dir)
        .with_config(config)
        .generate()
        .expect("header generation")
        .write(&mut generated);
    let committed = std::fs::read(format!("{crate_dir}/include/sftkd.h"))
        .expect("include/sftkd.h exists; regenerate with the gen_header example");
    assert_eq!(
        String::from_utf8_lossy(&committed),
        String::from_utf8_lossy(&generated),
        "include/sftkd.h is stale; regenerate with the gen_header example"
    );
}
