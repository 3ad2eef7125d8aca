//! JPEG file ↔ `.tlrc` container.
//!
//! Frame components are grouped by block-grid size into coding units:
//! a lone plane is a luma unit, two equal planes a chroma unit coded
//! Cr then Cb, three equal planes a full unit coded Y, Cr, Cb. Each unit
//! is coded as lossy latents plus the residual against their rounded
//! reconstruction (or the residual against zero in direct mode).

use crate::container::{ComponentGeometry, Container, Flags, FormatError, Geometry, UnitStreams};
use crate::dct_image::{blocks_to_dct_image, dct_image_to_blocks, normalize, DctError, DctImage};
use crate::entropy::EntropyError;
use crate::jpeg::{encode_planes, parse_header, parse_jpeg, sha256, verify_reencode, CoeffPlane, JpegError, JpegHeader};
use crate::lossy::{encode_latents, rate_estimate, reconstruct_int, LossyError, QuantMode};
use crate::model::{Model, ModelError, UnitModel};
use crate::nn::Tensor;
use crate::residual::{decode_residual, encode_residual_measured, ResidualError, SiteEvaluator, UnitKind};

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error(transparent)]
    Jpeg(#[from] JpegError),
    #[error("unsupported component layout: {0}")]
    UnsupportedLayout(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("container was written with a different model")]
    ModelMismatch,
    #[error(transparent)]
    Lossy(#[from] LossyError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Dct(#[from] DctError),
    #[error("lossless round trip failed: {0}")]
    LosslessViolation(String),
}

/// Frame components coded together, in coding order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitPlan {
    pub kind: UnitKind,
    /// Indices into the frame's component list.
    pub components: Vec<usize>,
    /// `(blocks_v, blocks_h)` shared by the components.
    pub blocks: (usize, usize),
}

/// Groups frame components by plane size, in order of first appearance.
pub fn plan_units(header: &JpegHeader) -> Result<Vec<UnitPlan>, CodecError> {
    let dims = header.plane_dims();
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for (i, &d) in dims.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == d) {
            Some((_, members)) => members.push(i),
            None => groups.push((d, vec![i])),
        }
    }
    groups
        .into_iter()
        .map(|(blocks, members)| {
            let kind = UnitKind::from_components(members.len()).ok_or_else(|| {
                CodecError::UnsupportedLayout(format!("{} components share a {}x{} block grid", members.len(), blocks.1, blocks.0))
            })?;
            // Frame order is Y, Cb, Cr; coding order puts Cr before Cb.
            let components = match members.as_slice() {
                [y, cb, cr] => vec![*y, *cr, *cb],
                [cb, cr] => vec![*cr, *cb],
                m => m.to_vec(),
            };
            Ok(UnitPlan { kind, components, blocks })
        })
        .collect()
}

/// Sizes and model bits of one coded unit.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct UnitStats {
    pub kind: UnitKind,
    pub coefficients: usize,
    pub z_bytes: usize,
    pub y_bytes: usize,
    pub residual_bytes: usize,
    /// `−log2` likelihood under the coding distributions.
    pub model_bits_z: f64,
    pub model_bits_y: f64,
    pub model_bits_residual: f64,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub container: Container,
    pub bytes: Vec<u8>,
    pub byte_exact: bool,
    pub units: Vec<UnitStats>,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub jpeg: Vec<u8>,
    pub planes: Vec<CoeffPlane>,
}

fn unit_model<'m>(model: &'m Model, kind: UnitKind) -> Result<&'m UnitModel, CodecError> {
    model
        .unit(kind)
        .ok_or_else(|| CodecError::UnsupportedLayout(format!("model has no {} unit", kind.name())))
}

/// Normalized reconstruction and its integer rounding. In direct mode both
/// are zero.
fn reconstruction(
    unit: &UnitModel,
    model: &Model,
    y_hat: Option<&Tensor<f32>>,
    ids: &[u8],
    (h, w): (usize, usize),
) -> Result<(Tensor<f32>, Vec<DctImage>), CodecError> {
    match (&unit.lossy, y_hat) {
        (Some(net), Some(y_hat)) => {
            let x_hat = net.decompress(&model.store, y_hat, h, w)?;
            let recon = reconstruct_int(&x_hat, &unit.stats, ids)?;
            Ok((x_hat, recon))
        }
        _ => Ok((
            Tensor::zeros([1, 64 * ids.len(), h, w]),
            ids.iter().map(|&id| DctImage::zeros(h, w, id)).collect(),
        )),
    }
}

fn encode_unit(model: &Model, plan: &UnitPlan, stack: Vec<DctImage>) -> Result<(UnitStreams, UnitStats), CodecError> {
    let unit = unit_model(model, plan.kind)?;
    let (h, w) = plan.blocks;
    let ids: Vec<u8> = stack.iter().map(|d| d.component_id).collect();
    let (mut z, mut y, mut bits_z, mut bits_y) = (Vec::new(), Vec::new(), 0.0, 0.0);
    let mut y_hat = None;
    if let Some(net) = &unit.lossy {
        let x_norm = normalize::<f32>(&stack, &unit.stats)?;
        let bundle = net.compress(&model.store, &x_norm)?;
        (z, y) = encode_latents(&bundle)?;
        (bits_y, bits_z) = rate_estimate(&bundle, QuantMode::Round);
        y_hat = Some(bundle.y_hat);
    }
    let (x_hat, recon) = reconstruction(unit, model, y_hat.as_ref(), &ids, (h, w))?;
    let residual: Vec<DctImage> = stack
        .iter()
        .zip(&recon)
        .map(|(x, r)| {
            let mut d = x.clone();
            d.data.iter_mut().zip(&r.data).for_each(|(a, b)| *a -= b);
            d
        })
        .collect();
    let eval = SiteEvaluator::new(&unit.residual, &model.store, &x_hat, &unit.stats.std)?;
    let (r_bytes, bits_r) = encode_residual_measured(&eval, &residual, &unit.stats.std)?;
    let stats = UnitStats {
        kind: plan.kind,
        coefficients: stack.len() * h * w * 64,
        z_bytes: z.len(),
        y_bytes: y.len(),
        residual_bytes: r_bytes.len(),
        model_bits_z: bits_z,
        model_bits_y: bits_y,
        model_bits_residual: bits_r,
    };
    Ok((UnitStreams { kind: plan.kind, z, y, residual: r_bytes }, stats))
}

fn decode_unit(model: &Model, plan: &UnitPlan, streams: &UnitStreams, ids: &[u8]) -> Result<Vec<DctImage>, CodecError> {
    let unit = unit_model(model, plan.kind)?;
    let (h, w) = plan.blocks;
    let y_hat = match &unit.lossy {
        Some(net) => Some(net.decode_latents(&model.store, &streams.z, &streams.y, h, w)?.y_hat),
        None => None,
    };
    let (x_hat, mut recon) = reconstruction(unit, model, y_hat.as_ref(), ids, (h, w))?;
    let eval = SiteEvaluator::new(&unit.residual, &model.store, &x_hat, &unit.stats.std)?;
    let residual = decode_residual(&eval, &streams.residual, &unit.stats.std, ids)?;
    for (x, r) in recon.iter_mut().zip(&residual) {
        for (a, &b) in x.data.iter_mut().zip(&r.data) {
            *a += b;
        }
    }
    Ok(recon)
}

fn geometry(header: &JpegHeader) -> Geometry {
    Geometry {
        width: header.frame.width,
        height: header.frame.height,
        components: header
            .frame
            .components
            .iter()
            .map(|c| ComponentGeometry { id: c.id, h_sampling: c.h_sampling, v_sampling: c.v_sampling })
            .collect(),
    }
}

/// Transcodes a baseline JPEG file.
pub fn encode(jpeg: &[u8], model: &Model) -> Result<Encoded, CodecError> {
    let image = parse_jpeg(jpeg)?;
    let plans = plan_units(&image.header)?;
    for p in &plans {
        unit_model(model, p.kind)?;
    }
    let report = verify_reencode(jpeg, &image);
    let header_len = jpeg.len() - image.original_scan_bytes.len() - image.trailer.len();

    let mut units = Vec::with_capacity(plans.len());
    let mut stats = Vec::with_capacity(plans.len());
    for plan in &plans {
        let stack = plan
            .components
            .iter()
            .map(|&i| blocks_to_dct_image(&image.coeff_planes[i], image.header.frame.components[i].id))
            .collect::<Result<Vec<_>, _>>()?;
        let (s, st) = encode_unit(model, plan, stack)?;
        units.push(s);
        stats.push(st);
    }

    let mut flags = Flags::default();
    flags.set(Flags::BYTE_EXACT, report.byte_exact);
    flags.set(Flags::COEFF_EXACT, !report.byte_exact);
    flags.set(Flags::RAW_SCAN_FALLBACK, !report.byte_exact);
    flags.set(Flags::DIRECT_MODE, model.config.direct);
    if !report.byte_exact {
        log::info!("re-encoding differs in {} bytes; storing the raw scan", report.mismatch_count);
    }
    let container = Container {
        flags,
        geometry: geometry(&image.header),
        jpeg_header: jpeg[..header_len].to_vec(),
        trailer: image.trailer.clone(),
        model_hash: model.hash()?,
        stats_hash: model.stats_hash(),
        units,
        raw_scan: (!report.byte_exact).then(|| image.original_scan_bytes.clone()),
        original_digest: image.original_file_digest,
    };
    let bytes = container.to_bytes()?;
    Ok(Encoded { container, bytes, byte_exact: report.byte_exact, units: stats })
}

/// Rebuilds the JPEG file and its coefficient planes. The output is checked
/// against the stored digest.
pub fn decode(container_bytes: &[u8], model: &Model) -> Result<Decoded, CodecError> {
    let c = Container::from_bytes(container_bytes)?;
    if c.model_hash != model.hash()? || c.stats_hash != model.stats_hash() {
        return Err(CodecError::ModelMismatch);
    }
    if c.direct() != model.config.direct {
        return Err(CodecError::ModelMismatch);
    }
    let (header, end) = parse_header(&c.jpeg_header)?;
    if end != c.jpeg_header.len() {
        return Err(FormatError::Malformed("JPEG header blob extends past the SOS header".into()).into());
    }
    if geometry(&header) != c.geometry {
        return Err(FormatError::Malformed("geometry disagrees with the JPEG header".into()).into());
    }
    let plans = plan_units(&header)?;
    if plans.len() != c.units.len() || plans.iter().zip(&c.units).any(|(p, u)| p.kind != u.kind) {
        return Err(FormatError::Malformed("unit list disagrees with the JPEG header".into()).into());
    }
    let mut planes: Vec<Option<CoeffPlane>> = vec![None; header.frame.components.len()];
    for (plan, streams) in plans.iter().zip(&c.units) {
        let ids: Vec<u8> = plan.components.iter().map(|&i| header.frame.components[i].id).collect();
        let stack = decode_unit(model, plan, streams, &ids)?;
        for (&i, img) in plan.components.iter().zip(&stack) {
            planes[i] = Some(dct_image_to_blocks(img)?);
        }
    }
    let planes: Vec<CoeffPlane> = planes.into_iter().map(|p| p.expect("every component belongs to a unit")).collect();
    let scan = match &c.raw_scan {
        Some(raw) => raw.clone(),
        None => encode_planes(&header, &planes)?,
    };
    let mut jpeg = c.jpeg_header.clone();
    jpeg.extend_from_slice(&scan);
    jpeg.extend_from_slice(&c.trailer);
    if sha256(&jpeg) != c.original_digest {
        return Err(CodecError::LosslessViolation("rebuilt file does not match the stored digest".into()));
    }
    Ok(Decoded { jpeg, planes })
}

/// Decodes `container_bytes` and checks that both the file bytes and every
/// quantized coefficient match `original`.
pub fn verify_round_trip(original: &[u8], container_bytes: &[u8], model: &Model) -> Result<Decoded, CodecError> {
    let decoded = decode(container_bytes, model)?;
    let reference = parse_jpeg(original)?;
    if decoded.planes != reference.coeff_planes {
        return Err(CodecError::LosslessViolation("coefficients differ".into()));
    }
    if decoded.jpeg != original {
        return Err(CodecError::LosslessViolation("file bytes differ".into()));
    }
    Ok(decoded)
}
