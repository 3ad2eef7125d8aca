//! Parser output checked against libjpeg's own coefficient dumps.

use std::path::PathBuf;

use tlrc_core::jpeg::{parse_jpeg, sha256, verify_reencode, JpegError, JpegImage};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

/// Same layout as `tools/jpegtool.c dump`.
fn dump(img: &JpegImage) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(img.coeff_planes.len() as u32).to_le_bytes());
    for (plane, comp) in img.coeff_planes.iter().zip(&img.header.frame.components) {
        out.extend_from_slice(&(comp.id as u32).to_le_bytes());
        out.extend_from_slice(&(plane.blocks_v as u32).to_le_bytes());
        out.extend_from_slice(&(plane.blocks_h as u32).to_le_bytes());
        for by in 0..plane.blocks_v {
            for bx in 0..plane.blocks_h {
                for k in 0..64 {
                    out.extend_from_slice(&(plane.coeff(by, bx, k) as i16).to_le_bytes());
                }
            }
        }
    }
    out
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn coefficients_match_libjpeg_digests() {
    let listing = std::fs::read_to_string(data_dir().join("coef_digests.txt")).unwrap();
    let mut checked = 0;
    for line in listing.lines().filter(|l| !l.trim().is_empty()) {
        let (rel, digest) = line.split_once(' ').unwrap();
        let bytes = std::fs::read(data_dir().join(rel)).unwrap();
        let img = parse_jpeg(&bytes).unwrap_or_else(|e| panic!("{rel}: {e}"));
        assert_eq!(hex(&sha256(&dump(&img))), digest.trim(), "{rel}");
        checked += 1;
    }
    assert!(checked >= 70, "only {checked} digests");
}

#[test]
fn synthetic_dumps_match_byte_for_byte() {
    let dir = data_dir().join("synthetic");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "jpg") {
            let img = parse_jpeg(&std::fs::read(&path).unwrap()).unwrap();
            let expected = std::fs::read(path.with_extension("coef")).unwrap();
            assert_eq!(dump(&img), expected, "{}", path.display());
            n += 1;
        }
    }
    assert_eq!(n, 8);
}

#[test]
fn libjpeg_files_reencode_byte_exactly() {
    let listing = std::fs::read_to_string(data_dir().join("coef_digests.txt")).unwrap();
    for line in listing.lines().filter(|l| !l.trim().is_empty()) {
        let rel = line.split(' ').next().unwrap();
        let bytes = std::fs::read(data_dir().join(rel)).unwrap();
        let img = parse_jpeg(&bytes).unwrap();
        let report = verify_reencode(&bytes, &img);
        assert!(report.byte_exact, "{rel}: {} bytes differ", report.mismatch_count);
    }
}

#[test]
fn progressive_file_is_rejected() {
    let bytes = std::fs::read(data_dir().join("unsupported/progressive.jpg")).unwrap();
    assert!(matches!(parse_jpeg(&bytes), Err(JpegError::Unsupported(_))));
}
