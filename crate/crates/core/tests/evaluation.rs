use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use tlrc_core::eval::{
    bit_saving_pct, evaluate, qp_dir, qp_sweep, res_share_pct, summarize, BaselineSizes, EvalError, EvalReport,
    ImageReport, DEFAULT_QPS,
};
use tlrc_core::model::{Model, ModelConfig};
use tlrc_core::train::{ingest_corpus, initial_model};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn model() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(|| {
        let data = ingest_corpus(&data_dir().join("heldout")).unwrap();
        let cfg = ModelConfig { latent_channels: 4, hyper_channels: 4, mixtures: 2, ..ModelConfig::desk(vec![]) };
        initial_model(&cfg, &data, 1).unwrap()
    })
}

fn heldout_report() -> &'static EvalReport {
    static R: OnceLock<EvalReport> = OnceLock::new();
    R.get_or_init(|| {
        let mut baselines = BaselineSizes::new();
        let sizes: BTreeMap<String, u64> = [("chelsea_0.jpg", 2000), ("flower_0.jpg", 3000)]
            .into_iter()
            .map(|(f, s)| (f.to_string(), s))
            .collect();
        baselines.insert("partial".into(), sizes);
        evaluate(model(), &data_dir().join("heldout"), Some(&baselines)).unwrap()
    })
}

/// (JPEG bpp, method bpp, reported saving %) rows; the savings must follow
/// from the BPP columns to the printed precision.
const SAVING_ROWS: [(f64, f64, f64); 20] = [
    (3.392, 2.777, 18.12),
    (3.219, 2.564, 20.35),
    (2.833, 2.281, 19.48),
    (2.882, 2.302, 20.13),
    (3.392, 2.782, 17.98),
    (3.219, 2.670, 17.04),
    (2.833, 2.339, 17.44),
    (2.882, 2.321, 19.47),
    (3.392, 2.665, 21.43),
    (3.219, 2.526, 21.53),
    (2.833, 2.225, 21.46),
    (2.882, 2.261, 21.55),
    (3.392, 2.834, 16.45),
    (3.219, 2.683, 16.65),
    (2.833, 2.372, 16.27),
    (2.882, 2.406, 16.52),
    (1.0, 1.0, 0.0),
    (2.0, 1.0, 50.0),
    (4.0, 3.0, 25.0),
    (2.0, 2.5, -25.0),
];

#[test]
fn saving_formula_reproduces_reference_rows() {
    for (jpeg, method, expected) in SAVING_ROWS {
        let got = bit_saving_pct(jpeg, method);
        assert!((got - expected).abs() <= 0.05, "{jpeg} -> {method}: {got:.3} vs {expected}");
    }
}

#[test]
fn residual_share_reproduces_reference_rows() {
    let rows = [
        (0.513, 2.152, 80.75, 2.665),
        (0.477, 2.049, 81.16, 2.526),
        (0.449, 1.776, 79.82, 2.225),
        (0.465, 1.796, 79.43, 2.261),
    ];
    for (lossy, residual, expected, total) in rows {
        let got = res_share_pct(lossy, residual);
        assert!((got - expected).abs() <= 0.05, "{got:.3} vs {expected}");
        // The two bitstreams make up the method's BPP.
        assert!((lossy + residual - total).abs() < 1e-9);
    }
    let ours = [21.43, 21.53, 21.46, 21.55];
    let mean = ours.iter().sum::<f64>() / 4.0;
    assert!((mean - 21.49).abs() <= 0.005);
}

fn image(file: &str, w: u16, h: u16, jpeg: usize, tlrc: usize, lossy_bpp: f64, res_bpp: f64) -> ImageReport {
    let px = w as u64 * h as u64;
    let jpeg_bpp = jpeg as f64 * 8.0 / px as f64;
    let tlrc_bpp = tlrc as f64 * 8.0 / px as f64;
    ImageReport {
        file: file.into(),
        width: w,
        height: h,
        jpeg_bytes: jpeg,
        tlrc_bytes: tlrc,
        jpeg_bpp,
        tlrc_bpp,
        bit_saving_pct: bit_saving_pct(jpeg_bpp, tlrc_bpp),
        lossy_bin_bpp: lossy_bpp,
        residual_bin_bpp: res_bpp,
        res_share_pct: res_share_pct(lossy_bpp, res_bpp),
        byte_exact: true,
        latent_model_bits: 0.0,
        latent_coded_bits: 0,
        residual_model_bits: 0.0,
        residual_coded_bits: 0,
        baselines: BTreeMap::new(),
    }
}

#[test]
fn corpus_figures_are_pixel_weighted() {
    // 64 and 192 pixels: bytes 100/300 and 80/150.
    let imgs = [image("a.jpg", 8, 8, 100, 80, 1.0, 9.0), image("b.jpg", 16, 12, 300, 150, 0.5, 5.5)];
    let s = summarize(&imgs, 1, None);
    assert_eq!((s.images, s.skipped, s.pixels), (2, 1, 256));
    assert!((s.jpeg_bpp - 400.0 * 8.0 / 256.0).abs() < 1e-12);
    assert!((s.tlrc_bpp - 230.0 * 8.0 / 256.0).abs() < 1e-12);
    assert!((s.bit_saving_pct - 42.5).abs() < 1e-9);
    assert!((s.mean_bit_saving_pct - 35.0).abs() < 1e-9);
    let lossy = (1.0 * 64.0 + 0.5 * 192.0) / 256.0;
    let res = (9.0 * 64.0 + 5.5 * 192.0) / 256.0;
    assert!((s.lossy_bin_bpp - lossy).abs() < 1e-12 && (s.residual_bin_bpp - res).abs() < 1e-12);
    assert!((s.res_share_pct - res / (lossy + res) * 100.0).abs() < 1e-9);
}

#[test]
fn heldout_report_is_consistent() {
    let r = heldout_report();
    assert_eq!(r.images.len(), 10);
    assert_eq!(r.summary.skipped, 0);
    assert_eq!(r.model_hash.len(), 64);
    for img in &r.images {
        assert!(img.byte_exact, "{}", img.file);
        let px = img.width as f64 * img.height as f64;
        assert!((img.tlrc_bpp - img.tlrc_bytes as f64 * 8.0 / px).abs() < 1e-12);
        assert!(img.lossy_bin_bpp > 0.0 && img.residual_bin_bpp > 0.0);
        assert!(img.lossy_bin_bpp + img.residual_bin_bpp < img.tlrc_bpp);
    }
    let jpeg: usize = r.images.iter().map(|i| i.jpeg_bytes).sum();
    assert!((r.summary.jpeg_bpp - jpeg as f64 * 8.0 / r.summary.pixels as f64).abs() < 1e-12);
}

#[test]
fn baselines_are_reported_per_image_and_only_complete_methods_summarized() {
    let r = heldout_report();
    let chelsea = r.images.iter().find(|i| i.file == "chelsea_0.jpg").unwrap();
    let e = &chelsea.baselines["partial"];
    assert!((e.bpp - 2000.0 * 8.0 / (128.0 * 128.0)).abs() < 1e-12);
    assert!((e.bit_saving_pct - bit_saving_pct(chelsea.jpeg_bpp, e.bpp)).abs() < 1e-12);
    assert!(r.summary.baselines.is_empty());
}

#[test]
fn json_report_round_trips() {
    let r = heldout_report();
    let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(&back, r);
}

#[test]
fn csv_report_has_one_row_per_image_and_a_corpus_row() {
    let r = heldout_report();
    let text = r.to_csv().unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(&headers[0], "file");
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), r.images.len() + 1);
    let last = rows.last().unwrap();
    assert_eq!(&last[0], "corpus");
    let tlrc: usize = r.images.iter().map(|i| i.tlrc_bytes).sum();
    assert_eq!(last[4].parse::<usize>().unwrap(), tlrc);
}

#[test]
fn unsupported_files_are_skipped_in_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["heldout/ihc_0.jpg", "unsupported/progressive.jpg"] {
        let src = data_dir().join(f);
        std::fs::copy(&src, dir.path().join(src.file_name().unwrap())).unwrap();
    }
    let r = evaluate(model(), dir.path(), None).unwrap();
    assert_eq!((r.images.len(), r.summary.skipped), (1, 1));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(evaluate(model(), empty.path(), None), Err(EvalError::EmptyCorpus(_))));
}

#[test]
fn qp_sweep_reports_every_quality() {
    let root = data_dir().join("qp");
    let sweep = qp_sweep(model(), &root, &DEFAULT_QPS).unwrap();
    assert_eq!(sweep.rows.iter().map(|r| r.qp).collect::<Vec<_>>(), DEFAULT_QPS.to_vec());
    assert!(sweep.jpeg_bpp_monotone);
    assert!(sweep.rows.iter().all(|r| r.images == 4));
    assert!(sweep.rows.windows(2).all(|w| w[0].jpeg_bpp < w[1].jpeg_bpp));
    assert!(matches!(qp_sweep(model(), &root, &[55, 50]), Err(EvalError::MissingCorpusForQp(50))));
}

#[test]
fn qp_directories_accept_common_names() {
    let root = tempfile::tempdir().unwrap();
    for d in ["q55", "qp65", "75"] {
        std::fs::create_dir(root.path().join(d)).unwrap();
    }
    assert_eq!(qp_dir(root.path(), 55), Some(root.path().join("q55")));
    assert_eq!(qp_dir(root.path(), 65), Some(root.path().join("qp65")));
    assert_eq!(qp_dir(root.path(), 75), Some(root.path().join("75")));
    assert_eq!(qp_dir(root.path(), 85), None);
}
