//! Corpus evaluation: BPP, bit saving against the source JPEGs, and the
//! lossy/residual bitstream breakdown.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{encode, verify_round_trip, CodecError};
use crate::jpeg::JpegError;
use crate::model::Model;

pub const DEFAULT_QPS: [u8; 5] = [55, 65, 75, 85, 95];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("lossless round trip failed for {file}: {detail}")]
    LosslessViolation { file: String, detail: String },
    #[error("{file}: {source}")]
    Codec { file: String, source: CodecError },
    #[error("no usable JPEG files in {0}")]
    EmptyCorpus(PathBuf),
    #[error("no corpus for QP {0}")]
    MissingCorpusForQp(u8),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad baseline sizes: {0}")]
    Baselines(String),
    #[error("report output: {0}")]
    Output(String),
}

pub fn bits_per_pixel(bytes: usize, pixels: u64) -> f64 {
    bytes as f64 * 8.0 / pixels as f64
}

/// Relative BPP reduction against the JPEG baseline, in percent.
pub fn bit_saving_pct(jpeg_bpp: f64, method_bpp: f64) -> f64 {
    (jpeg_bpp - method_bpp) / jpeg_bpp * 100.0
}

/// Residual share of the lossy + residual bitstreams, in percent.
pub fn res_share_pct(lossy_bpp: f64, residual_bpp: f64) -> f64 {
    residual_bpp / (lossy_bpp + residual_bpp) * 100.0
}

/// Externally measured file sizes per method: `{"lepton": {"a.jpg": 1234}}`.
pub type BaselineSizes = BTreeMap<String, BTreeMap<String, u64>>;

pub fn load_baselines(path: &Path) -> Result<BaselineSizes, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Baselines(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub bpp: f64,
    pub bit_saving_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub file: String,
    pub width: u16,
    pub height: u16,
    pub jpeg_bytes: usize,
    pub tlrc_bytes: usize,
    pub jpeg_bpp: f64,
    pub tlrc_bpp: f64,
    pub bit_saving_pct: f64,
    pub lossy_bin_bpp: f64,
    pub residual_bin_bpp: f64,
    pub res_share_pct: f64,
    pub byte_exact: bool,
    /// Model `−log2` likelihood and coded size of the latent streams.
    pub latent_model_bits: f64,
    pub latent_coded_bits: u64,
    pub residual_model_bits: f64,
    pub residual_coded_bits: u64,
    pub baselines: BTreeMap<String, BaselineEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub images: usize,
    pub skipped: usize,
    pub pixels: u64,
    /// Total bits over total pixels.
    pub jpeg_bpp: f64,
    pub tlrc_bpp: f64,
    pub bit_saving_pct: f64,
    /// Unweighted mean of the per-image savings.
    pub mean_bit_saving_pct: f64,
    pub lossy_bin_bpp: f64,
    pub residual_bin_bpp: f64,
    pub res_share_pct: f64,
    pub baselines: BTreeMap<String, BaselineEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub model_hash: String,
    pub direct_mode: bool,
    pub images: Vec<ImageReport>,
    pub summary: CorpusSummary,
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn list_jpegs(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let io = |source| EvalError::Io { path: dir.to_path_buf(), source };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Transcodes and round-trip checks one file.
pub fn evaluate_file(model: &Model, file: &str, jpeg: &[u8]) -> Result<ImageReport, EvalError> {
    let codec = |source| EvalError::Codec { file: file.to_string(), source };
    let enc = encode(jpeg, model).map_err(codec)?;
    match verify_round_trip(jpeg, &enc.bytes, model) {
        Ok(_) => {}
        Err(CodecError::LosslessViolation(detail)) => {
            return Err(EvalError::LosslessViolation { file: file.to_string(), detail })
        }
        Err(e) => return Err(codec(e)),
    }
    let g = &enc.container.geometry;
    let pixels = g.pixels();
    let sizes = enc.container.sizes();
    let jpeg_bpp = bits_per_pixel(jpeg.len(), pixels);
    let tlrc_bpp = bits_per_pixel(enc.bytes.len(), pixels);
    let lossy_bin_bpp = bits_per_pixel(sizes.lossy, pixels);
    let residual_bin_bpp = bits_per_pixel(sizes.residual, pixels);
    Ok(ImageReport {
        file: file.to_string(),
        width: g.width,
        height: g.height,
        jpeg_bytes: jpeg.len(),
        tlrc_bytes: enc.bytes.len(),
        jpeg_bpp,
        tlrc_bpp,
        bit_saving_pct: bit_saving_pct(jpeg_bpp, tlrc_bpp),
        lossy_bin_bpp,
        residual_bin_bpp,
        res_share_pct: res_share_pct(lossy_bin_bpp, residual_bin_bpp),
        byte_exact: enc.byte_exact,
        latent_model_bits: enc.units.iter().map(|u| u.model_bits_y + u.model_bits_z).sum(),
        latent_coded_bits: 8 * enc.units.iter().map(|u| (u.y_bytes + u.z_bytes) as u64).sum::<u64>(),
        residual_model_bits: enc.units.iter().map(|u| u.model_bits_residual).sum(),
        residual_coded_bits: 8 * enc.units.iter().map(|u| u.residual_bytes as u64).sum::<u64>(),
        baselines: BTreeMap::new(),
    })
}

/// Evaluates every `.jpg`/`.jpeg` in `dir`. Files the codec does not
/// support are skipped; any round-trip mismatch aborts the report.
pub fn evaluate(model: &Model, dir: &Path, baselines: Option<&BaselineSizes>) -> Result<EvalReport, EvalError> {
    let mut images = Vec::new();
    let mut skipped = 0;
    for path in list_jpegs(dir)? {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let bytes = std::fs::read(&path).map_err(|source| EvalError::Io { path: path.clone(), source })?;
        let mut report = match evaluate_file(model, &name, &bytes) {
            Ok(r) => r,
            Err(EvalError::Codec {
                source: CodecError::Jpeg(JpegError::Unsupported(_)) | CodecError::UnsupportedLayout(_),
                ..
            }) => {
                log::warn!("skipping unsupported {}", path.display());
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some(b) = baselines {
            for (method, sizes) in b {
                if let Some(&size) = sizes.get(&name) {
                    let bpp = bits_per_pixel(size as usize, report.width as u64 * report.height as u64);
                    let saving = bit_saving_pct(report.jpeg_bpp, bpp);
                    report.baselines.insert(method.clone(), BaselineEntry { bpp, bit_saving_pct: saving });
                }
            }
        }
        images.push(report);
    }
    if images.is_empty() {
        return Err(EvalError::EmptyCorpus(dir.to_path_buf()));
    }
    let summary = summarize(&images, skipped, baselines);
    Ok(EvalReport {
        corpus: dir.display().to_string(),
        model_hash: model.hash().map(|h| hex(&h)).unwrap_or_default(),
        direct_mode: model.config.direct,
        images,
        summary,
    })
}

pub fn summarize(images: &[ImageReport], skipped: usize, baselines: Option<&BaselineSizes>) -> CorpusSummary {
    let pixels: u64 = images.iter().map(|r| r.width as u64 * r.height as u64).sum();
    let sum = |f: &dyn Fn(&ImageReport) -> usize| images.iter().map(f).sum::<usize>();
    let jpeg_bpp = bits_per_pixel(sum(&|r| r.jpeg_bytes), pixels);
    let tlrc_bpp = bits_per_pixel(sum(&|r| r.tlrc_bytes), pixels);
    let lossy_bin_bpp = images.iter().map(|r| r.lossy_bin_bpp * (r.width as f64 * r.height as f64)).sum::<f64>() / pixels as f64;
    let residual_bin_bpp =
        images.iter().map(|r| r.residual_bin_bpp * (r.width as f64 * r.height as f64)).sum::<f64>() / pixels as f64;
    let mut base = BTreeMap::new();
    for method in baselines.into_iter().flat_map(|b| b.keys()) {
        // Only meaningful when every image has a size for the method.
        let mut bits = 0.0;
        let mut complete = true;
        for r in images {
            match r.baselines.get(method) {
                Some(e) => bits += e.bpp * r.width as f64 * r.height as f64,
                None => complete = false,
            }
        }
        if complete {
            let bpp = bits / pixels as f64;
            base.insert(method.clone(), BaselineEntry { bpp, bit_saving_pct: bit_saving_pct(jpeg_bpp, bpp) });
        }
    }
    CorpusSummary {
        images: images.len(),
        skipped,
        pixels,
        jpeg_bpp,
        tlrc_bpp,
        bit_saving_pct: bit_saving_pct(jpeg_bpp, tlrc_bpp),
        mean_bit_saving_pct: images.iter().map(|r| r.bit_saving_pct).sum::<f64>() / images.len() as f64,
        lossy_bin_bpp,
        residual_bin_bpp,
        res_share_pct: res_share_pct(lossy_bin_bpp, residual_bin_bpp),
        baselines: base,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        serde_json::to_string_pretty(self).map_err(|e| EvalError::Output(e.to_string()))
    }

    /// One row per image plus a final `corpus` row.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| EvalError::Output(e.to_string());
        w.write_record([
            "file",
            "width",
            "height",
            "jpeg_bytes",
            "tlrc_bytes",
            "jpeg_bpp",
            "tlrc_bpp",
            "bit_saving_pct",
            "lossy_bin_bpp",
            "residual_bin_bpp",
            "res_share_pct",
            "byte_exact",
        ])
        .map_err(err)?;
        for r in &self.images {
            w.write_record([
                r.file.clone(),
                r.width.to_string(),
                r.height.to_string(),
                r.jpeg_bytes.to_string(),
                r.tlrc_bytes.to_string(),
                format!("{:.6}", r.jpeg_bpp),
                format!("{:.6}", r.tlrc_bpp),
                format!("{:.4}", r.bit_saving_pct),
                format!("{:.6}", r.lossy_bin_bpp),
                format!("{:.6}", r.residual_bin_bpp),
                format!("{:.4}", r.res_share_pct),
                r.byte_exact.to_string(),
            ])
            .map_err(err)?;
        }
        let s = &self.summary;
        let jpeg_total: usize = self.images.iter().map(|r| r.jpeg_bytes).sum();
        let tlrc_total: usize = self.images.iter().map(|r| r.tlrc_bytes).sum();
        w.write_record([
            "corpus".to_string(),
            String::new(),
            String::new(),
            jpeg_total.to_string(),
            tlrc_total.to_string(),
            format!("{:.6}", s.jpeg_bpp),
            format!("{:.6}", s.tlrc_bpp),
            format!("{:.4}", s.bit_saving_pct),
            format!("{:.6}", s.lossy_bin_bpp),
            format!("{:.6}", s.residual_bin_bpp),
            format!("{:.4}", s.res_share_pct),
            self.images.iter().all(|r| r.byte_exact).to_string(),
        ])
        .map_err(err)?;
        let bytes = w.into_inner().map_err(|e| EvalError::Output(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Output(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpRow {
    pub qp: u8,
    pub images: usize,
    pub jpeg_bpp: f64,
    pub tlrc_bpp: f64,
    pub bit_saving_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSweep {
    pub rows: Vec<QpRow>,
    /// Baseline sanity check: JPEG BPP does not decrease with QP.
    pub jpeg_bpp_monotone: bool,
}

/// Directory holding the pre-encoded corpus for `qp` under `root`:
/// `q{qp}`, `qp{qp}` or `{qp}`.
pub fn qp_dir(root: &Path, qp: u8) -> Option<PathBuf> {
    [format!("q{qp}"), format!("qp{qp}"), qp.to_string()].into_iter().map(|d| root.join(d)).find(|p| p.is_dir())
}

/// Evaluates the same model on one pre-encoded corpus per quality level.
pub fn qp_sweep(model: &Model, root: &Path, qps: &[u8]) -> Result<QpSweep, EvalError> {
    let mut rows = Vec::with_capacity(qps.len());
    for &qp in qps {
        let dir = qp_dir(root, qp).ok_or(EvalError::MissingCorpusForQp(qp))?;
        let r = evaluate(model, &dir, None)?;
        rows.push(QpRow {
            qp,
            images: r.summary.images,
            jpeg_bpp: r.summary.jpeg_bpp,
            tlrc_bpp: r.summary.tlrc_bpp,
            bit_saving_pct: r.summary.bit_saving_pct,
        });
    }
    let mut sorted = rows.clone();
    sorted.sort_by_key(|r| r.qp);
    let jpeg_bpp_monotone = sorted.windows(2).all(|w| w[0].jpeg_bpp <= w[1].jpeg_bpp);
    if !jpeg_bpp_monotone {
        log::warn!("JPEG BPP is not monotone in QP; check the sweep corpora");
    }
    Ok(QpSweep { rows, jpeg_bpp_monotone })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saving_and_share_formulas() {
        assert!((bit_saving_pct(4.0, 3.0) - 25.0).abs() < 1e-12);
        assert!((res_share_pct(1.0, 3.0) - 75.0).abs() < 1e-12);
        assert_eq!(bits_per_pixel(2, 4), 4.0);
    }
}
