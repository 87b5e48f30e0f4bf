//! The generated header declares every exported symbol and parses as C and C++.

use std::path::Path;
use std::process::Command;

fn header() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mmp_deblur.h")).unwrap()
}

fn exported() -> Vec<String> {
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    src.lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap().trim().to_string())
        .collect()
}

#[test]
fn declares_every_export() {
    let h = header();
    let names = exported();
    assert!(names.len() >= 20, "{names:?}");
    for n in names {
        assert!(h.contains(&format!(" {n}(")) || h.contains(&format!("*{n}(")), "{n} missing from header");
    }
    assert!(h.contains("MMP_STATUS_OK = 0"));
}

#[test]
fn parses_as_c_and_cpp() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(status) = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(dir.join("mmp_deblur.h"))
            .status()
        else {
            eprintln!("{compiler} not available; skipped");
            continue;
        };
        assert!(status.success(), "{compiler} rejected the header");
    }
}
