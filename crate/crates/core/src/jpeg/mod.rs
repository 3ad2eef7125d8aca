//! Baseline JPEG parsing down to quantized DCT coefficients, and bit-exact
//! re-serialization.
//!
//! Only single-scan sequential Huffman files with 8-bit samples are
//! handled. Everything outside the entropy-coded segment is kept verbatim
//! so that a conforming file can be rebuilt byte for byte.

mod bits;
mod huffman;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::dct_image::ZIGZAG;
use bits::{BitReader, BitWriter};
use huffman::{category, extend, extra_bits, HuffmanDecoder, HuffmanEncoder};
pub use huffman::{standard, HuffmanSpec, TableClass};

/// Absolute quantized DC range for 8-bit baseline files.
pub const DC_MIN: i32 = -2048;
pub const DC_MAX: i32 = 2047;
/// AC range (category ≤ 10).
pub const AC_MIN: i32 = -1023;
pub const AC_MAX: i32 = 1023;

#[derive(Debug, thiserror::Error)]
pub enum JpegError {
    #[error("unsupported JPEG: {0}")]
    Unsupported(String),
    #[error("corrupt JPEG stream: {0}")]
    CorruptStream(String),
    #[error("coefficient {value} in component {component} exceeds the encodable category")]
    CategoryOverflow { component: usize, value: i32 },
    #[error("Huffman table has no code for symbol {symbol:#04x}")]
    MissingCode { symbol: u8 },
}

/// A marker segment copied verbatim from the input, including its marker
/// bytes and any fill bytes that preceded it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub marker: u8,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub id: u8,
    pub h_sampling: u8,
    pub v_sampling: u8,
    pub quant_table_id: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub marker: u8,
    pub precision: u8,
    pub height: u16,
    pub width: u16,
    pub components: Vec<Component>,
}

impl Frame {
    fn max_sampling(&self) -> (usize, usize) {
        let h = self.components.iter().map(|c| c.h_sampling as usize).max().unwrap_or(1);
        let v = self.components.iter().map(|c| c.v_sampling as usize).max().unwrap_or(1);
        (h, v)
    }

    /// MCU grid for an interleaved scan.
    pub fn mcus(&self) -> (usize, usize) {
        let (hmax, vmax) = self.max_sampling();
        (
            (self.width as usize).div_ceil(8 * hmax),
            (self.height as usize).div_ceil(8 * vmax),
        )
    }

    /// Block grid `(blocks_v, blocks_h)` of component `index` in a scan
    /// containing `scan_components` components.
    pub fn block_dims(&self, index: usize, scan_components: usize) -> (usize, usize) {
        let c = &self.components[index];
        if scan_components > 1 {
            let (mx, my) = self.mcus();
            (my * c.v_sampling as usize, mx * c.h_sampling as usize)
        } else {
            let (hmax, vmax) = self.max_sampling();
            let w = (self.width as usize * c.h_sampling as usize).div_ceil(hmax);
            let h = (self.height as usize * c.v_sampling as usize).div_ceil(vmax);
            (h.div_ceil(8), w.div_ceil(8))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanComponent {
    /// Index into `Frame::components`.
    pub component: usize,
    pub dc_table: u8,
    pub ac_table: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanSpec {
    pub components: Vec<ScanComponent>,
    /// Raw SOS segment (marker through the last header byte).
    pub header: Vec<u8>,
}

/// Quantized coefficients of one component laid out block-wise: a matrix
/// of `blocks_v * 8` rows by `blocks_h * 8` columns, natural order inside
/// each block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoeffPlane {
    pub blocks_v: usize,
    pub blocks_h: usize,
    pub data: Vec<i32>,
}

impl CoeffPlane {
    pub fn zeros(blocks_v: usize, blocks_h: usize) -> Self {
        CoeffPlane { blocks_v, blocks_h, data: vec![0; blocks_v * blocks_h * 64] }
    }

    pub fn height(&self) -> usize {
        self.blocks_v * 8
    }

    pub fn width(&self) -> usize {
        self.blocks_h * 8
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.data[row * self.width() + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: i32) {
        let w = self.width();
        self.data[row * w + col] = v;
    }

    /// Coefficient `k` (natural order) of block `(by, bx)`.
    #[inline]
    pub fn coeff(&self, by: usize, bx: usize, k: usize) -> i32 {
        self.get(by * 8 + k / 8, bx * 8 + k % 8)
    }

    #[inline]
    pub fn set_coeff(&mut self, by: usize, bx: usize, k: usize, v: i32) {
        self.set(by * 8 + k / 8, bx * 8 + k % 8, v)
    }
}

/// Fields recovered from everything up to and including the SOS header.
#[derive(Debug, Clone)]
pub struct JpegHeader {
    pub header_segments: Vec<Segment>,
    pub frame: Frame,
    pub quant_tables: BTreeMap<u8, [u16; 64]>,
    pub huffman_tables: BTreeMap<(TableClass, u8), HuffmanSpec>,
    pub restart_interval: u16,
    pub scan: ScanSpec,
}

impl JpegHeader {
    pub fn plane_dims(&self) -> Vec<(usize, usize)> {
        let n = self.scan.components.len();
        (0..self.frame.components.len()).map(|i| self.frame.block_dims(i, n)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct JpegImage {
    pub header: JpegHeader,
    /// Per frame component, absolute quantized coefficients.
    pub coeff_planes: Vec<CoeffPlane>,
    pub original_scan_bytes: Vec<u8>,
    /// EOI marker and anything that followed it.
    pub trailer: Vec<u8>,
    pub original_file_digest: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationReport {
    pub byte_exact: bool,
    pub mismatch_count: usize,
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn read_u16(data: &[u8], pos: usize) -> Result<u16, JpegError> {
    match data.get(pos..pos + 2) {
        Some(b) => Ok(u16::from_be_bytes([b[0], b[1]])),
        None => Err(JpegError::CorruptStream("truncated marker segment".into())),
    }
}

/// Parses SOI and all marker segments up to and including SOS. Returns the
/// header and the offset of the first entropy-coded byte.
pub fn parse_header(data: &[u8]) -> Result<(JpegHeader, usize), JpegError> {
    if data.len() < 2 || data[0] != 0xFF || data[1] != 0xD8 {
        return Err(JpegError::CorruptStream("missing SOI marker".into()));
    }
    let mut pos = 2;
    let mut segments = Vec::new();
    let mut frame: Option<Frame> = None;
    let mut quant_tables = BTreeMap::new();
    let mut huffman_tables = BTreeMap::new();
    let mut restart_interval = 0u16;

    loop {
        let start = pos;
        if data.get(pos) != Some(&0xFF) {
            return Err(JpegError::CorruptStream(format!("expected marker at offset {pos}")));
        }
        while data.get(pos) == Some(&0xFF) {
            pos += 1;
        }
        let marker = *data
            .get(pos)
            .ok_or_else(|| JpegError::CorruptStream("file ends inside marker".into()))?;
        pos += 1;
        if matches!(marker, 0x00 | 0x01 | 0xD0..=0xD9) {
            return Err(JpegError::CorruptStream(format!("unexpected marker 0xFF{marker:02X} in header")));
        }
        let len = read_u16(data, pos)? as usize;
        if len < 2 || pos + len > data.len() {
            return Err(JpegError::CorruptStream(format!("bad length for marker 0xFF{marker:02X}")));
        }
        let payload = &data[pos + 2..pos + len];
        pos += len;
        let raw = data[start..pos].to_vec();

        match marker {
            0xC0 | 0xC1 => {
                if frame.is_some() {
                    return Err(JpegError::CorruptStream("multiple frame headers".into()));
                }
                frame = Some(parse_frame(marker, payload)?);
            }
            0xC2 => return Err(JpegError::Unsupported("progressive DCT (SOF2)".into())),
            0xC3 | 0xC5..=0xC7 | 0xC9..=0xCB | 0xCD..=0xCF => {
                return Err(JpegError::Unsupported(format!("frame type SOF{}", marker - 0xC0)))
            }
            0xCC => return Err(JpegError::Unsupported("arithmetic coding conditioning (DAC)".into())),
            0xC4 => parse_dht(payload, &mut huffman_tables)?,
            0xDB => parse_dqt(payload, &mut quant_tables)?,
            0xDD => {
                if payload.len() != 2 {
                    return Err(JpegError::CorruptStream("bad DRI length".into()));
                }
                restart_interval = u16::from_be_bytes([payload[0], payload[1]]);
            }
            0xDA => {
                let frame = frame.ok_or_else(|| JpegError::CorruptStream("SOS before frame header".into()))?;
                let scan = parse_sos(payload, raw, &frame, &huffman_tables)?;
                for c in &frame.components {
                    if !quant_tables.contains_key(&c.quant_table_id) {
                        return Err(JpegError::CorruptStream(format!(
                            "quantization table {} referenced before definition",
                            c.quant_table_id
                        )));
                    }
                }
                let header = JpegHeader {
                    header_segments: segments,
                    frame,
                    quant_tables,
                    huffman_tables,
                    restart_interval,
                    scan,
                };
                return Ok((header, pos));
            }
            _ => {}
        }
        segments.push(Segment { marker, bytes: raw });
    }
}

fn parse_frame(marker: u8, p: &[u8]) -> Result<Frame, JpegError> {
    if p.len() < 6 {
        return Err(JpegError::CorruptStream("short frame header".into()));
    }
    let precision = p[0];
    if precision != 8 {
        return Err(JpegError::Unsupported(format!("{precision}-bit samples")));
    }
    let height = u16::from_be_bytes([p[1], p[2]]);
    let width = u16::from_be_bytes([p[3], p[4]]);
    let n = p[5] as usize;
    if n == 0 || n > 4 {
        return Err(JpegError::Unsupported(format!("{n} components")));
    }
    if p.len() != 6 + 3 * n {
        return Err(JpegError::CorruptStream("frame header length mismatch".into()));
    }
    if height == 0 || width == 0 {
        return Err(JpegError::Unsupported("zero or deferred (DNL) image dimensions".into()));
    }
    let mut components = Vec::with_capacity(n);
    for i in 0..n {
        let b = &p[6 + 3 * i..9 + 3 * i];
        let (h, v) = (b[1] >> 4, b[1] & 15);
        if !(1..=4).contains(&h) || !(1..=4).contains(&v) || b[2] > 3 {
            return Err(JpegError::CorruptStream("invalid component parameters".into()));
        }
        components.push(Component { id: b[0], h_sampling: h, v_sampling: v, quant_table_id: b[2] });
    }
    Ok(Frame { marker, precision, height, width, components })
}

fn parse_dht(mut p: &[u8], tables: &mut BTreeMap<(TableClass, u8), HuffmanSpec>) -> Result<(), JpegError> {
    while !p.is_empty() {
        if p.len() < 17 {
            return Err(JpegError::CorruptStream("short DHT segment".into()));
        }
        let class = match p[0] >> 4 {
            0 => TableClass::Dc,
            1 => TableClass::Ac,
            _ => return Err(JpegError::CorruptStream("invalid Huffman table class".into())),
        };
        let id = p[0] & 15;
        if id > 3 {
            return Err(JpegError::CorruptStream("invalid Huffman table id".into()));
        }
        let mut bits = [0u8; 16];
        bits.copy_from_slice(&p[1..17]);
        let count: usize = bits.iter().map(|&b| b as usize).sum();
        if p.len() < 17 + count || count > 256 {
            return Err(JpegError::CorruptStream("DHT value list truncated".into()));
        }
        let values = p[17..17 + count].to_vec();
        let spec = HuffmanSpec { bits, values };
        HuffmanDecoder::new(&spec)?;
        tables.insert((class, id), spec);
        p = &p[17 + count..];
    }
    Ok(())
}

fn parse_dqt(mut p: &[u8], tables: &mut BTreeMap<u8, [u16; 64]>) -> Result<(), JpegError> {
    while !p.is_empty() {
        let precision = p[0] >> 4;
        let id = p[0] & 15;
        if id > 3 || precision > 1 {
            return Err(JpegError::CorruptStream("invalid quantization table header".into()));
        }
        let size = if precision == 0 { 64 } else { 128 };
        if p.len() < 1 + size {
            return Err(JpegError::CorruptStream("DQT segment truncated".into()));
        }
        let mut table = [0u16; 64];
        for (k, &natural) in ZIGZAG.iter().enumerate() {
            let v = if precision == 0 {
                p[1 + k] as u16
            } else {
                u16::from_be_bytes([p[1 + 2 * k], p[2 + 2 * k]])
            };
            if v == 0 {
                return Err(JpegError::CorruptStream("zero quantizer".into()));
            }
            if v > 255 {
                return Err(JpegError::Unsupported("quantizer above 255".into()));
            }
            table[natural] = v;
        }
        tables.insert(id, table);
        p = &p[1 + size..];
    }
    Ok(())
}

fn parse_sos(
    p: &[u8],
    raw: Vec<u8>,
    frame: &Frame,
    huffman: &BTreeMap<(TableClass, u8), HuffmanSpec>,
) -> Result<ScanSpec, JpegError> {
    let n = *p.first().ok_or_else(|| JpegError::CorruptStream("empty SOS".into()))? as usize;
    if p.len() != 4 + 2 * n || n == 0 {
        return Err(JpegError::CorruptStream("SOS length mismatch".into()));
    }
    if n != frame.components.len() {
        return Err(JpegError::Unsupported("multi-scan sequential file".into()));
    }
    let mut components = Vec::with_capacity(n);
    for i in 0..n {
        let id = p[1 + 2 * i];
        let tables = p[2 + 2 * i];
        let component = frame
            .components
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| JpegError::CorruptStream(format!("scan references unknown component {id}")))?;
        if components.iter().any(|s: &ScanComponent| s.component == component) {
            return Err(JpegError::CorruptStream("component repeated in scan".into()));
        }
        let (dc_table, ac_table) = (tables >> 4, tables & 15);
        for key in [(TableClass::Dc, dc_table), (TableClass::Ac, ac_table)] {
            if !huffman.contains_key(&key) {
                return Err(JpegError::CorruptStream(format!(
                    "Huffman table {:?}{} referenced before definition",
                    key.0, key.1
                )));
            }
        }
        components.push(ScanComponent { component, dc_table, ac_table });
    }
    let (ss, se, ahal) = (p[1 + 2 * n], p[2 + 2 * n], p[3 + 2 * n]);
    if ss != 0 || se != 63 || ahal != 0 {
        return Err(JpegError::Unsupported("spectral selection / successive approximation".into()));
    }
    Ok(ScanSpec { components, header: raw })
}

/// Finds the end of the entropy-coded segment starting at `start`: the
/// first marker that is neither a stuffed zero nor a restart marker.
fn scan_end(data: &[u8], start: usize) -> usize {
    let mut pos = start;
    while pos < data.len() {
        if data[pos] == 0xFF {
            let mut next = pos + 1;
            while data.get(next) == Some(&0xFF) {
                next += 1;
            }
            match data.get(next) {
                Some(0x00) | Some(0xD0..=0xD7) => pos = next + 1,
                _ => return pos,
            }
        } else {
            pos += 1;
        }
    }
    data.len()
}

#[derive(Debug, Clone, Copy)]
enum Step {
    /// Restart marker with its modulo-8 index.
    Restart(u8),
    Block { scan_index: usize, by: usize, bx: usize },
}

/// Blocks of an interleaved or single-component scan in coding order, with
/// restart points between intervals.
fn coding_order(header: &JpegHeader) -> Vec<Step> {
    let scan = &header.scan.components;
    let interval = header.restart_interval as usize;
    let mut steps = Vec::new();
    let mut restarts = 0u8;
    let mut mcu = 0usize;
    let mut begin_mcu = |steps: &mut Vec<Step>| {
        if interval > 0 && mcu > 0 && mcu % interval == 0 {
            steps.push(Step::Restart(restarts));
            restarts = restarts.wrapping_add(1);
        }
        mcu += 1;
    };
    if scan.len() == 1 {
        let (bv, bh) = header.frame.block_dims(scan[0].component, 1);
        for by in 0..bv {
            for bx in 0..bh {
                begin_mcu(&mut steps);
                steps.push(Step::Block { scan_index: 0, by, bx });
            }
        }
    } else {
        let (mx, my) = header.frame.mcus();
        for y in 0..my {
            for x in 0..mx {
                begin_mcu(&mut steps);
                for (si, sc) in scan.iter().enumerate() {
                    let c = &header.frame.components[sc.component];
                    let (hs, vs) = (c.h_sampling as usize, c.v_sampling as usize);
                    for v in 0..vs {
                        for h in 0..hs {
                            steps.push(Step::Block { scan_index: si, by: y * vs + v, bx: x * hs + h });
                        }
                    }
                }
            }
        }
    }
    steps
}

/// Parses a baseline sequential JPEG file into quantized coefficients.
pub fn parse_jpeg(data: &[u8]) -> Result<JpegImage, JpegError> {
    let (header, scan_start) = parse_header(data)?;
    let end = scan_end(data, scan_start);
    let scan_bytes = &data[scan_start..end];
    let trailer = &data[end..];
    if trailer.len() < 2 || trailer[0] != 0xFF {
        return Err(JpegError::CorruptStream("file ends inside the scan".into()));
    }
    let mut t = 0;
    while trailer.get(t) == Some(&0xFF) {
        t += 1;
    }
    match trailer.get(t) {
        Some(0xD9) => {}
        Some(0xDA) | Some(0xC4) | Some(0xDB) | Some(0xDD) | Some(0xDC) => {
            return Err(JpegError::Unsupported("data after the first scan".into()))
        }
        _ => return Err(JpegError::CorruptStream("scan not followed by EOI".into())),
    }

    let dims = header.plane_dims();
    let mut planes: Vec<CoeffPlane> = dims.iter().map(|&(v, h)| CoeffPlane::zeros(v, h)).collect();
    let mut decoders = Vec::new();
    for sc in &header.scan.components {
        let dc = HuffmanDecoder::new(&header.huffman_tables[&(TableClass::Dc, sc.dc_table)])?;
        let ac = HuffmanDecoder::new(&header.huffman_tables[&(TableClass::Ac, sc.ac_table)])?;
        decoders.push((dc, ac));
    }
    let mut reader = BitReader::new(scan_bytes);
    let mut pred = vec![0i32; header.scan.components.len()];
    for step in coding_order(&header) {
        let (si, by, bx) = match step {
            Step::Restart(n) => {
                pred.iter_mut().for_each(|p| *p = 0);
                reader.restart(n)?;
                continue;
            }
            Step::Block { scan_index, by, bx } => (scan_index, by, bx),
        };
        let (dc, ac) = &decoders[si];
        let plane = &mut planes[header.scan.components[si].component];
        let cat = dc.decode(&mut reader)? as u32;
        if cat > 11 {
            return Err(JpegError::CorruptStream(format!("DC category {cat}")));
        }
        pred[si] += extend(reader.read_bits(cat)?, cat);
        let dcv = pred[si];
        if !(DC_MIN..=DC_MAX).contains(&dcv) {
            return Err(JpegError::CorruptStream(format!("DC value {dcv} out of range")));
        }
        plane.set_coeff(by, bx, 0, dcv);
        let mut k = 1;
        while k < 64 {
            let sym = ac.decode(&mut reader)?;
            let (run, size) = ((sym >> 4) as usize, (sym & 15) as u32);
            if size == 0 {
                match run {
                    15 => {
                        k += 16;
                        continue;
                    }
                    0 => break,
                    _ => return Err(JpegError::CorruptStream(format!("invalid AC symbol {sym:#04x}"))),
                }
            }
            if size > 10 {
                return Err(JpegError::CorruptStream(format!("AC category {size}")));
            }
            k += run;
            if k > 63 {
                return Err(JpegError::CorruptStream("AC run past end of block".into()));
            }
            plane.set_coeff(by, bx, ZIGZAG[k], extend(reader.read_bits(size)?, size));
            k += 1;
        }
        if k > 64 {
            return Err(JpegError::CorruptStream("AC run past end of block".into()));
        }
    }

    Ok(JpegImage {
        header,
        coeff_planes: planes,
        original_scan_bytes: scan_bytes.to_vec(),
        trailer: trailer.to_vec(),
        original_file_digest: sha256(data),
    })
}

/// Deterministically re-encodes the coefficient planes with the image's own
/// Huffman tables, restart interval, byte stuffing and 1-bit padding.
pub fn encode_scan(image: &JpegImage) -> Result<Vec<u8>, JpegError> {
    encode_planes(&image.header, &image.coeff_planes)
}

pub fn encode_planes(header: &JpegHeader, planes: &[CoeffPlane]) -> Result<Vec<u8>, JpegError> {
    let mut encoders = Vec::new();
    for sc in &header.scan.components {
        let dc = header
            .huffman_tables
            .get(&(TableClass::Dc, sc.dc_table))
            .ok_or_else(|| JpegError::CorruptStream("missing DC table".into()))?;
        let ac = header
            .huffman_tables
            .get(&(TableClass::Ac, sc.ac_table))
            .ok_or_else(|| JpegError::CorruptStream("missing AC table".into()))?;
        encoders.push((HuffmanEncoder::new(dc)?, HuffmanEncoder::new(ac)?));
    }
    let mut w = BitWriter::new();
    let mut pred = vec![0i32; header.scan.components.len()];
    for step in coding_order(header) {
        let (si, by, bx) = match step {
            Step::Restart(n) => {
                pred.iter_mut().for_each(|p| *p = 0);
                w.restart_marker(n);
                continue;
            }
            Step::Block { scan_index, by, bx } => (scan_index, by, bx),
        };
        let (dc, ac) = &encoders[si];
        let component = header.scan.components[si].component;
        let plane = &planes[component];
        let dcv = plane.coeff(by, bx, 0);
        let diff = dcv - pred[si];
        pred[si] = dcv;
        let cat = category(diff);
        if cat > 11 {
            return Err(JpegError::CategoryOverflow { component, value: dcv });
        }
        dc.encode(&mut w, cat as u8)?;
        w.write_bits(extra_bits(diff, cat), cat);
        let mut run = 0;
        for &natural in &ZIGZAG[1..] {
            let v = plane.coeff(by, bx, natural);
            if v == 0 {
                run += 1;
                continue;
            }
            let cat = category(v);
            if cat > 10 {
                return Err(JpegError::CategoryOverflow { component, value: v });
            }
            while run >= 16 {
                ac.encode(&mut w, 0xF0)?;
                run -= 16;
            }
            ac.encode(&mut w, ((run << 4) as u8) | cat as u8)?;
            w.write_bits(extra_bits(v, cat), cat);
            run = 0;
        }
        if run > 0 {
            ac.encode(&mut w, 0x00)?;
        }
    }
    Ok(w.finish())
}

/// SOI + verbatim header segments + SOS header + scan + trailer (EOI).
pub fn serialize_jpeg(image: &JpegImage, scan: &[u8]) -> Vec<u8> {
    serialize_parts(&image.header, scan, &image.trailer)
}

pub fn serialize_parts(header: &JpegHeader, scan: &[u8], trailer: &[u8]) -> Vec<u8> {
    let mut out = vec![0xFF, 0xD8];
    for s in &header.header_segments {
        out.extend_from_slice(&s.bytes);
    }
    out.extend_from_slice(&header.scan.header);
    out.extend_from_slice(scan);
    out.extend_from_slice(trailer);
    out
}

/// Checks whether re-encoding the parsed coefficients reproduces the
/// original file byte for byte.
pub fn verify_reencode(original: &[u8], image: &JpegImage) -> VerificationReport {
    let rebuilt = match encode_scan(image) {
        Ok(scan) => serialize_jpeg(image, &scan),
        Err(_) => return VerificationReport { byte_exact: false, mismatch_count: original.len().max(1) },
    };
    let common = original.len().min(rebuilt.len());
    let mismatch_count = original[..common].iter().zip(&rebuilt[..common]).filter(|(a, b)| a != b).count()
        + original.len().abs_diff(rebuilt.len());
    VerificationReport { byte_exact: mismatch_count == 0, mismatch_count }
}

/// Builds a minimal baseline file around the given planes using the
/// standard tables. Used for synthetic test material.
pub fn synthesize(
    width: u16,
    height: u16,
    sampling: &[(u8, u8)],
    restart_interval: u16,
    planes_fn: impl Fn(usize, usize, usize) -> CoeffPlane,
) -> Result<(Vec<u8>, JpegImage), JpegError> {
    let n = sampling.len();
    let mut seg = Vec::new();
    // DQT: flat tables.
    let mut dqt = vec![0xFF, 0xDB, 0x00, 0x43, 0x00];
    dqt.extend(std::iter::repeat_n(1u8, 64));
    seg.push(dqt);
    let mut sof = vec![0xFF, 0xC0];
    let len = 8 + 3 * n as u16;
    sof.extend_from_slice(&len.to_be_bytes());
    sof.push(8);
    sof.extend_from_slice(&height.to_be_bytes());
    sof.extend_from_slice(&width.to_be_bytes());
    sof.push(n as u8);
    for (i, &(h, v)) in sampling.iter().enumerate() {
        sof.extend_from_slice(&[i as u8 + 1, (h << 4) | v, 0]);
    }
    seg.push(sof);
    let tables = [
        (0x00, standard::luma_dc()),
        (0x10, standard::luma_ac()),
        (0x01, standard::chroma_dc()),
        (0x11, standard::chroma_ac()),
    ];
    for (tc, spec) in &tables {
        let mut dht = vec![0xFF, 0xC4];
        let len = 2 + 1 + 16 + spec.values.len() as u16;
        dht.extend_from_slice(&len.to_be_bytes());
        dht.push(*tc);
        dht.extend_from_slice(&spec.bits);
        dht.extend_from_slice(&spec.values);
        seg.push(dht);
    }
    if restart_interval > 0 {
        let mut dri = vec![0xFF, 0xDD, 0x00, 0x04];
        dri.extend_from_slice(&restart_interval.to_be_bytes());
        seg.push(dri);
    }
    let mut sos = vec![0xFF, 0xDA];
    sos.extend_from_slice(&(6 + 2 * n as u16).to_be_bytes());
    sos.push(n as u8);
    for i in 0..n {
        let t = if i == 0 { 0x00 } else { 0x11 };
        sos.extend_from_slice(&[i as u8 + 1, t]);
    }
    sos.extend_from_slice(&[0, 63, 0]);
    seg.push(sos);

    let mut file = vec![0xFF, 0xD8];
    for s in &seg {
        file.extend_from_slice(s);
    }
    let (header, _) = parse_header(&file)?;
    let planes: Vec<CoeffPlane> = header
        .plane_dims()
        .iter()
        .enumerate()
        .map(|(i, &(bv, bh))| planes_fn(i, bv, bh))
        .collect();
    let scan = encode_planes(&header, &planes)?;
    file.extend_from_slice(&scan);
    file.extend_from_slice(&[0xFF, 0xD9]);
    let image = parse_jpeg(&file)?;
    Ok((file, image))
}
