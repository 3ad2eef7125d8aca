//! The `.tlrc` transcoded-image container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TLRC" | version u16 | flags u16
//! width u16 | height u16 | n u8 | n × (id u8, h u8, v u8)
//! u32 len | JPEG header (SOI through the SOS header, verbatim)
//! u32 len | trailer (EOI and anything after it)
//! model hash [32] | norm-stats hash [32]
//! units u8 | per unit: kind u8, [u32 len | z] [u32 len | y] (omitted in
//!            direct mode), u32 len | residual
//! [u32 len | raw scan]   (only with RAW_SCAN_FALLBACK)
//! original file SHA-256 [32]
//! SHA-256 of everything above [32]
//! ```

use crate::jpeg::sha256;
use crate::residual::UnitKind;

pub const CONTAINER_MAGIC: &[u8; 4] = b"TLRC";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("unsupported version: {0}")]
    VersionError(String),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: [usize; 4], found: [usize; 4] },
}

/// Container flag bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags(pub u16);

impl Flags {
    /// Re-encoding the coefficients reproduces the original file.
    pub const BYTE_EXACT: u16 = 1;
    /// Only the coefficients are reproduced by re-encoding.
    pub const COEFF_EXACT: u16 = 2;
    /// The original scan bytes are stored verbatim.
    pub const RAW_SCAN_FALLBACK: u16 = 4;
    /// Coefficients are coded without the lossy branch.
    pub const DIRECT_MODE: u16 = 8;
    const KNOWN: u16 = 15;

    pub fn contains(self, bit: u16) -> bool {
        self.0 & bit != 0
    }

    pub fn set(&mut self, bit: u16, on: bool) {
        if on {
            self.0 |= bit;
        } else {
            self.0 &= !bit;
        }
    }

    pub fn names(self) -> Vec<&'static str> {
        [
            (Self::BYTE_EXACT, "BYTE_EXACT"),
            (Self::COEFF_EXACT, "COEFF_EXACT"),
            (Self::RAW_SCAN_FALLBACK, "RAW_SCAN_FALLBACK"),
            (Self::DIRECT_MODE, "DIRECT_MODE"),
        ]
        .iter()
        .filter(|(b, _)| self.contains(*b))
        .map(|&(_, n)| n)
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentGeometry {
    pub id: u8,
    pub h_sampling: u8,
    pub v_sampling: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    pub width: u16,
    pub height: u16,
    pub components: Vec<ComponentGeometry>,
}

impl Geometry {
    pub fn pixels(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

/// Coded streams of one group of jointly coded components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitStreams {
    pub kind: UnitKind,
    pub z: Vec<u8>,
    pub y: Vec<u8>,
    pub residual: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub flags: Flags,
    pub geometry: Geometry,
    pub jpeg_header: Vec<u8>,
    pub trailer: Vec<u8>,
    pub model_hash: [u8; 32],
    pub stats_hash: [u8; 32],
    pub units: Vec<UnitStreams>,
    pub raw_scan: Option<Vec<u8>>,
    pub original_digest: [u8; 32],
}

/// Byte counts of a serialized container by role. The fields sum to the
/// file size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct SizeBreakdown {
    /// `ẑ` and `ŷ` payloads.
    pub lossy: usize,
    pub residual: usize,
    pub raw_scan: usize,
    /// JPEG header and trailer blobs.
    pub jpeg_header: usize,
    /// Everything else: magic, geometry, hashes, length prefixes.
    pub framing: usize,
}

impl SizeBreakdown {
    pub fn total(&self) -> usize {
        self.lossy + self.residual + self.raw_scan + self.jpeg_header + self.framing
    }
}

pub(crate) fn kind_code(kind: UnitKind) -> u8 {
    match kind {
        UnitKind::Luma => 1,
        UnitKind::Chroma => 2,
        UnitKind::Full => 3,
    }
}

pub(crate) fn kind_from_code(code: u8) -> Result<UnitKind, FormatError> {
    match code {
        1 => Ok(UnitKind::Luma),
        2 => Ok(UnitKind::Chroma),
        3 => Ok(UnitKind::Full),
        _ => Err(FormatError::Malformed(format!("unknown unit kind {code}"))),
    }
}

impl Container {
    pub fn direct(&self) -> bool {
        self.flags.contains(Flags::DIRECT_MODE)
    }

    fn check_flags(&self) -> Result<(), FormatError> {
        let f = self.flags;
        if f.0 & !Flags::KNOWN != 0 {
            return Err(FormatError::VersionError(format!("unknown flags {:#06x}", f.0 & !Flags::KNOWN)));
        }
        if f.contains(Flags::BYTE_EXACT) == f.contains(Flags::COEFF_EXACT) {
            return Err(FormatError::Malformed("exactly one of BYTE_EXACT and COEFF_EXACT must be set".into()));
        }
        if f.contains(Flags::RAW_SCAN_FALLBACK) != self.raw_scan.is_some() {
            return Err(FormatError::Malformed("RAW_SCAN_FALLBACK does not match the raw-scan blob".into()));
        }
        if f.contains(Flags::RAW_SCAN_FALLBACK) && f.contains(Flags::BYTE_EXACT) {
            return Err(FormatError::Malformed("RAW_SCAN_FALLBACK with BYTE_EXACT".into()));
        }
        if self.direct() && self.units.iter().any(|u| !u.z.is_empty() || !u.y.is_empty()) {
            return Err(FormatError::Malformed("latent streams in a direct-mode container".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        self.check_flags()?;
        let g = &self.geometry;
        if g.components.len() > u8::MAX as usize || self.units.len() > u8::MAX as usize {
            return Err(FormatError::Malformed("too many components or units".into()));
        }
        let mut w = ByteWriter::default();
        w.bytes(CONTAINER_MAGIC);
        w.u16(CONTAINER_VERSION);
        w.u16(self.flags.0);
        w.u16(g.width);
        w.u16(g.height);
        w.u8(g.components.len() as u8);
        for c in &g.components {
            w.bytes(&[c.id, c.h_sampling, c.v_sampling]);
        }
        w.blob(&self.jpeg_header)?;
        w.blob(&self.trailer)?;
        w.bytes(&self.model_hash);
        w.bytes(&self.stats_hash);
        w.u8(self.units.len() as u8);
        for u in &self.units {
            w.u8(kind_code(u.kind));
            if !self.direct() {
                w.blob(&u.z)?;
                w.blob(&u.y)?;
            }
            w.blob(&u.residual)?;
        }
        if let Some(raw) = &self.raw_scan {
            w.blob(raw)?;
        }
        w.bytes(&self.original_digest);
        Ok(w.seal())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::open(data, CONTAINER_MAGIC, CONTAINER_VERSION)?;
        let flags = Flags(r.u16()?);
        let width = r.u16()?;
        let height = r.u16()?;
        let n = r.u8()? as usize;
        let mut components = Vec::with_capacity(n);
        for _ in 0..n {
            components.push(ComponentGeometry { id: r.u8()?, h_sampling: r.u8()?, v_sampling: r.u8()? });
        }
        let jpeg_header = r.blob()?.to_vec();
        let trailer = r.blob()?.to_vec();
        let model_hash = r.array32()?;
        let stats_hash = r.array32()?;
        if flags.0 & !Flags::KNOWN != 0 {
            return Err(FormatError::VersionError(format!("unknown flags {:#06x}", flags.0 & !Flags::KNOWN)));
        }
        let direct = flags.contains(Flags::DIRECT_MODE);
        let units_n = r.u8()? as usize;
        let mut units = Vec::with_capacity(units_n);
        for _ in 0..units_n {
            let kind = kind_from_code(r.u8()?)?;
            let (z, y) = if direct { (Vec::new(), Vec::new()) } else { (r.blob()?.to_vec(), r.blob()?.to_vec()) };
            let residual = r.blob()?.to_vec();
            units.push(UnitStreams { kind, z, y, residual });
        }
        let raw_scan = if flags.contains(Flags::RAW_SCAN_FALLBACK) { Some(r.blob()?.to_vec()) } else { None };
        let original_digest = r.array32()?;
        r.finish()?;
        let c = Container {
            flags,
            geometry: Geometry { width, height, components },
            jpeg_header,
            trailer,
            model_hash,
            stats_hash,
            units,
            raw_scan,
            original_digest,
        };
        c.check_flags()?;
        Ok(c)
    }

    /// Serialized size by role, computed from field lengths.
    pub fn sizes(&self) -> SizeBreakdown {
        let mut s = SizeBreakdown {
            jpeg_header: self.jpeg_header.len() + self.trailer.len(),
            raw_scan: self.raw_scan.as_ref().map_or(0, Vec::len),
            ..Default::default()
        };
        let mut framing = 4 + 2 + 2 + 2 + 2 + 1 + 3 * self.geometry.components.len() + 8 + 64 + 1 + 32 + 32;
        for u in &self.units {
            framing += 1 + 4;
            s.residual += u.residual.len();
            if !self.direct() {
                framing += 8;
                s.lossy += u.z.len() + u.y.len();
            }
        }
        if self.raw_scan.is_some() {
            framing += 4;
        }
        s.framing = framing;
        s
    }
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn blob(&mut self, b: &[u8]) -> Result<(), FormatError> {
        let len = u32::try_from(b.len()).map_err(|_| FormatError::Malformed("blob too large".into()))?;
        self.u32(len);
        self.bytes(b);
        Ok(())
    }

    /// Appends the SHA-256 of everything written so far.
    pub fn seal(mut self) -> Vec<u8> {
        let digest = sha256(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Checks magic, version and trailing checksum, in that order.
    pub fn open(data: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Self, FormatError> {
        if data.len() < 6 + 32 || &data[..4] != magic {
            return Err(FormatError::Malformed(format!("missing {} magic", String::from_utf8_lossy(magic))));
        }
        let found = u16::from_le_bytes([data[4], data[5]]);
        if found != version {
            return Err(FormatError::VersionError(format!("version {found}, this build reads {version}")));
        }
        let body = data.len() - 32;
        if sha256(&data[..body]) != data[body..] {
            return Err(FormatError::ChecksumMismatch);
        }
        Ok(ByteReader { data: &data[..body], pos: 6 })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| FormatError::Malformed(format!("truncated at offset {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn blob(&mut self) -> Result<&'a [u8], FormatError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn array32(&mut self) -> Result<[u8; 32], FormatError> {
        let mut out = [0u8; 32];
        out.copy_from_slice(self.take(32)?);
        Ok(out)
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.data.len() {
            return Err(FormatError::Malformed(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(flags: u16, raw: bool) -> Container {
        let direct = flags & Flags::DIRECT_MODE != 0;
        Container {
            flags: Flags(flags),
            geometry: Geometry {
                width: 33,
                height: 17,
                components: vec![
                    ComponentGeometry { id: 1, h_sampling: 2, v_sampling: 2 },
                    ComponentGeometry { id: 2, h_sampling: 1, v_sampling: 1 },
                    ComponentGeometry { id: 3, h_sampling: 1, v_sampling: 1 },
                ],
            },
            jpeg_header: vec![0xFF, 0xD8, 0xFF, 0xDA, 1, 2, 3],
            trailer: vec![0xFF, 0xD9],
            model_hash: [7; 32],
            stats_hash: [9; 32],
            units: vec![
                UnitStreams {
                    kind: UnitKind::Luma,
                    z: if direct { vec![] } else { vec![1, 2] },
                    y: if direct { vec![] } else { vec![3; 40] },
                    residual: vec![4; 100],
                },
                UnitStreams { kind: UnitKind::Chroma, z: vec![], y: vec![], residual: vec![5; 9] },
            ],
            raw_scan: raw.then(|| vec![0xAB; 17]),
            original_digest: [3; 32],
        }
    }

    #[test]
    fn round_trip_and_sizes() {
        for (flags, raw) in [
            (Flags::BYTE_EXACT, false),
            (Flags::COEFF_EXACT | Flags::RAW_SCAN_FALLBACK, true),
            (Flags::BYTE_EXACT | Flags::DIRECT_MODE, false),
        ] {
            let c = sample(flags, raw);
            let bytes = c.to_bytes().unwrap();
            assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
            assert_eq!(c.sizes().total(), bytes.len());
        }
    }

    #[test]
    fn every_flipped_byte_is_detected() {
        let bytes = sample(Flags::BYTE_EXACT, false).to_bytes().unwrap();
        for i in 6..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert_eq!(Container::from_bytes(&b), Err(FormatError::ChecksumMismatch), "byte {i}");
        }
    }

    #[test]
    fn version_bump_is_a_version_error() {
        let mut bytes = sample(Flags::BYTE_EXACT, false).to_bytes().unwrap();
        bytes[4] += 1;
        assert!(matches!(Container::from_bytes(&bytes), Err(FormatError::VersionError(_))));
    }

    #[test]
    fn unknown_flags_are_a_version_error() {
        let mut c = sample(Flags::BYTE_EXACT, false);
        c.flags = Flags(Flags::BYTE_EXACT | 0x100);
        assert!(matches!(c.to_bytes(), Err(FormatError::VersionError(_))));
        // Forge a sealed file with the unknown bit.
        let mut bytes = sample(Flags::BYTE_EXACT, false).to_bytes().unwrap();
        bytes.truncate(bytes.len() - 32);
        bytes[7] |= 0x01;
        let digest = sha256(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(matches!(Container::from_bytes(&bytes), Err(FormatError::VersionError(_))));
    }

    #[test]
    fn inconsistent_flags_are_rejected() {
        assert!(sample(Flags::BYTE_EXACT, true).to_bytes().is_err());
        assert!(sample(Flags::COEFF_EXACT | Flags::RAW_SCAN_FALLBACK, false).to_bytes().is_err());
        assert!(sample(Flags::BYTE_EXACT | Flags::COEFF_EXACT, false).to_bytes().is_err());
        let mut c = sample(Flags::BYTE_EXACT | Flags::DIRECT_MODE, false);
        c.units[0].z = vec![1];
        assert!(c.to_bytes().is_err());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample(Flags::BYTE_EXACT, false).to_bytes().unwrap();
        for n in [0, 5, 37, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..n]).is_err());
        }
    }
}
