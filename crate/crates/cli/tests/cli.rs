use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Mutex, OnceLock};

use tlrc_core::container::Container;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data")
}

fn tlrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlrc")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = tlrc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    model: PathBuf,
}

/// A tiny model trained for a few steps on one gray and one 4:2:0 image.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        std::fs::create_dir(&corpus).unwrap();
        for f in ["heldout/chelsea_0.jpg", "real/coffee_420_q55_r0.jpg"] {
            let src = data_dir().join(f);
            std::fs::copy(&src, corpus.join(src.file_name().unwrap())).unwrap();
        }
        let pre = dir.path().join("pre.tlrm");
        let model = dir.path().join("model.tlrm");
        let common = ["--steps", "2", "--batch", "1", "--tile", "16", "--latent-channels", "4", "--hyper-channels", "4", "--mixtures", "2"];
        let mut args = vec!["train", "--phase", "lossy", "--data", s(&corpus), "--out", s(&pre)];
        args.extend(common);
        ok(&args);
        let mut args = vec!["train", "--phase", "joint", "--data", s(&corpus), "--out", s(&model), "--resume", s(&pre)];
        args.extend(common);
        ok(&args);
        Fixture { dir, model }
    })
}

fn encoded(name: &str) -> PathBuf {
    static LOCK: Mutex<()> = Mutex::new(());
    let f = fixture();
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let out = f.dir.path().join(format!("{}.tlrc", name.replace('/', "_")));
    if !out.exists() {
        ok(&["encode", s(&data_dir().join(name)), s(&out), "--model", s(&f.model)]);
    }
    out
}

#[test]
fn encode_decode_round_trip_is_byte_exact() {
    let f = fixture();
    for name in ["real/flower_gray_q75_r0.jpg", "real/rocket_420_q75_r4.jpg"] {
        let container = encoded(name);
        let back = f.dir.path().join(format!("{}.back.jpg", name.replace('/', "_")));
        ok(&["decode", s(&container), s(&back), "--model", s(&f.model), "--verify"]);
        assert_eq!(std::fs::read(&back).unwrap(), std::fs::read(data_dir().join(name)).unwrap());
    }
}

#[test]
fn inspect_prints_container_and_model_metadata() {
    let f = fixture();
    let out = ok(&["inspect", s(&encoded("real/flower_gray_q75_r0.jpg"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["format"], "tlrc");
    assert!(v["flags"].as_array().unwrap().iter().any(|f| f == "BYTE_EXACT"));
    let sizes = &v["sizes"];
    let parts: u64 = ["lossy", "residual", "raw_scan", "jpeg_header", "framing"].iter().map(|k| sizes[k].as_u64().unwrap()).sum();
    assert_eq!(parts, v["file_bytes"].as_u64().unwrap());

    let out = ok(&["inspect", s(&f.model)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["format"], "tlrm");
    assert_eq!(v["training"]["lossy_steps"], 2);
    assert_eq!(v["training"]["joint_steps"], 2);
    assert_eq!(v["config"]["latent_channels"], 4);
}

#[test]
fn eval_writes_json_and_csv() {
    let f = fixture();
    let corpus = f.dir.path().join("corpus");
    let json = f.dir.path().join("report.json");
    ok(&["eval", "--model", s(&f.model), "--corpus", s(&corpus), "--report", s(&json)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["summary"]["images"], 2);
    let csv = f.dir.path().join("report.csv");
    ok(&["eval", "--model", s(&f.model), "--corpus", s(&corpus), "--report", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().last().unwrap().starts_with("corpus,"));
}

#[test]
fn qp_sweep_prints_one_row_per_quality() {
    let f = fixture();
    let out = ok(&["qp-sweep", "--model", s(&f.model), "--corpus-root", s(&data_dir().join("qp")), "--qps", "55,95"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["jpeg_bpp_monotone"], true);
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(tlrc(&[]).status.code(), Some(1));
    assert_eq!(tlrc(&["encode"]).status.code(), Some(1));
    let f = fixture();
    let bad = f.dir.path().join("report.txt");
    let out = tlrc(&["eval", "--model", s(&f.model), "--corpus", s(&f.dir.path().join("corpus")), "--report", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(tlrc(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_input_exits_with_2() {
    let f = fixture();
    let mut bytes = std::fs::read(encoded("real/flower_gray_q75_r0.jpg")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = f.dir.path().join("corrupt.tlrc");
    std::fs::write(&bad, &bytes).unwrap();
    let out = tlrc(&["decode", s(&bad), s(&f.dir.path().join("x.jpg")), "--model", s(&f.model)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
    let out = tlrc(&["encode", s(&data_dir().join("unsupported/progressive.jpg")), s(&bad), "--model", s(&f.model)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn digest_mismatch_exits_with_3() {
    let f = fixture();
    let mut c = Container::from_bytes(&std::fs::read(encoded("real/flower_gray_q75_r0.jpg")).unwrap()).unwrap();
    c.original_digest[0] ^= 1;
    let forged = f.dir.path().join("forged.tlrc");
    std::fs::write(&forged, c.to_bytes().unwrap()).unwrap();
    let out = tlrc(&["decode", s(&forged), s(&f.dir.path().join("y.jpg")), "--model", s(&f.model)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
