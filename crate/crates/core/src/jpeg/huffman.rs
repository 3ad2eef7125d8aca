//! Canonical Huffman tables as defined by DHT segments.

use super::bits::{BitReader, BitWriter};
use super::JpegError;

/// Table class: DC (0) or AC (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TableClass {
    Dc,
    Ac,
}

/// A Huffman table exactly as carried by a DHT segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanSpec {
    /// Number of codes of each length 1..=16.
    pub bits: [u8; 16],
    /// Symbols in order of increasing code length.
    pub values: Vec<u8>,
}

impl HuffmanSpec {
    /// Generates `(code, length)` for every symbol in `values` order and
    /// rejects tables whose code space overflows.
    fn codes(&self) -> Result<Vec<(u16, u8)>, JpegError> {
        let total: usize = self.bits.iter().map(|&b| b as usize).sum();
        if total != self.values.len() || total > 256 {
            return Err(JpegError::CorruptStream("Huffman table length mismatch".into()));
        }
        let mut out = Vec::with_capacity(total);
        let mut code: u32 = 0;
        for (i, &count) in self.bits.iter().enumerate() {
            let len = i as u32 + 1;
            for _ in 0..count {
                if code >= (1 << len) {
                    return Err(JpegError::CorruptStream("Huffman code space overflow".into()));
                }
                out.push((code as u16, len as u8));
                code += 1;
            }
            code <<= 1;
        }
        Ok(out)
    }
}

/// Decoder built with the classic maxcode/valptr arrays.
pub(crate) struct HuffmanDecoder {
    maxcode: [i32; 18],
    valptr: [i32; 17],
    mincode: [i32; 17],
    values: Vec<u8>,
}

impl HuffmanDecoder {
    pub fn new(spec: &HuffmanSpec) -> Result<Self, JpegError> {
        let codes = spec.codes()?;
        let mut maxcode = [-1i32; 18];
        let mut valptr = [0i32; 17];
        let mut mincode = [0i32; 17];
        let mut k = 0usize;
        for len in 1..=16usize {
            let count = spec.bits[len - 1] as usize;
            if count > 0 {
                valptr[len] = k as i32;
                mincode[len] = codes[k].0 as i32;
                k += count;
                maxcode[len] = codes[k - 1].0 as i32;
            }
        }
        maxcode[17] = i32::MAX;
        Ok(HuffmanDecoder { maxcode, valptr, mincode, values: spec.values.clone() })
    }

    pub fn decode(&self, reader: &mut BitReader<'_>) -> Result<u8, JpegError> {
        let mut code = 0i32;
        for len in 1..=16usize {
            code = (code << 1) | reader.read_bit()? as i32;
            if code <= self.maxcode[len] {
                let idx = self.valptr[len] + code - self.mincode[len];
                return Ok(self.values[idx as usize]);
            }
        }
        Err(JpegError::CorruptStream("invalid Huffman code".into()))
    }
}

/// Encoder lookup: symbol → (code, length).
pub(crate) struct HuffmanEncoder {
    table: [(u16, u8); 256],
}

impl HuffmanEncoder {
    pub fn new(spec: &HuffmanSpec) -> Result<Self, JpegError> {
        let mut table = [(0u16, 0u8); 256];
        for (&sym, code) in spec.values.iter().zip(spec.codes()?) {
            table[sym as usize] = code;
        }
        Ok(HuffmanEncoder { table })
    }

    pub fn encode(&self, writer: &mut BitWriter, symbol: u8) -> Result<(), JpegError> {
        let (code, len) = self.table[symbol as usize];
        if len == 0 {
            return Err(JpegError::MissingCode { symbol });
        }
        writer.write_bits(code as u32, len as u32);
        Ok(())
    }
}

/// Magnitude category (number of extra bits) of a coefficient value.
pub(crate) fn category(value: i32) -> u32 {
    32 - value.unsigned_abs().leading_zeros()
}

/// Extra bits for `value` in its category (one's complement for negatives).
pub(crate) fn extra_bits(value: i32, cat: u32) -> u32 {
    if value >= 0 {
        value as u32
    } else {
        (value - 1) as u32 & ((1u32 << cat) - 1)
    }
}

/// Inverse of [`extra_bits`].
pub(crate) fn extend(bits: u32, cat: u32) -> i32 {
    if cat == 0 {
        0
    } else if bits < (1 << (cat - 1)) {
        bits as i32 - (1 << cat) + 1
    } else {
        bits as i32
    }
}

/// The example tables of ITU T.81 Annex K (the "standard" tables used by
/// libjpeg when Huffman optimization is off).
pub mod standard {
    use super::HuffmanSpec;

    pub fn luma_dc() -> HuffmanSpec {
        HuffmanSpec {
            bits: [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
            values: (0..12).collect(),
        }
    }

    pub fn chroma_dc() -> HuffmanSpec {
        HuffmanSpec {
            bits: [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0],
            values: (0..12).collect(),
        }
    }

    pub fn luma_ac() -> HuffmanSpec {
        HuffmanSpec {
            bits: [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d],
            values: vec![
                0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51,
                0x61, 0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1,
                0x15, 0x52, 0xd1, 0xf0, 0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18,
                0x19, 0x1a, 0x25, 0x26, 0x27, 0x28, 0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39,
                0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57,
                0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75,
                0x76, 0x77, 0x78, 0x79, 0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92,
                0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7,
                0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3,
                0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8,
                0xd9, 0xda, 0xe1, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1, 0xf2,
                0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa,
            ],
        }
    }

    pub fn chroma_ac() -> HuffmanSpec {
        HuffmanSpec {
            bits: [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77],
            values: vec![
                0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07,
                0x61, 0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09,
                0x23, 0x33, 0x52, 0xf0, 0x15, 0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25,
                0xf1, 0x17, 0x18, 0x19, 0x1a, 0x26, 0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38,
                0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56,
                0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74,
                0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
                0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5,
                0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba,
                0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6,
                0xd7, 0xd8, 0xd9, 0xda, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf2,
                0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa,
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_and_extend_round_trip() {
        for v in -2047..=2047 {
            let cat = category(v);
            assert_eq!(extend(extra_bits(v, cat), cat), v, "value {v}");
        }
        assert_eq!(category(0), 0);
        assert_eq!(category(-1), 1);
        assert_eq!(category(1023), 10);
        assert_eq!(category(2047), 11);
        assert_eq!(category(3000), 12);
    }

    #[test]
    fn standard_tables_round_trip_every_symbol() {
        for spec in [standard::luma_dc(), standard::luma_ac(), standard::chroma_dc(), standard::chroma_ac()] {
            let enc = HuffmanEncoder::new(&spec).unwrap();
            let dec = HuffmanDecoder::new(&spec).unwrap();
            let mut w = BitWriter::new();
            for &s in &spec.values {
                enc.encode(&mut w, s).unwrap();
            }
            let bytes = w.finish();
            let mut r = BitReader::new(&bytes);
            for &s in &spec.values {
                assert_eq!(dec.decode(&mut r).unwrap(), s);
            }
        }
    }

    #[test]
    fn overfull_table_is_rejected() {
        let spec = HuffmanSpec { bits: [3, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], values: vec![0, 1, 2] };
        assert!(HuffmanDecoder::new(&spec).is_err());
    }
}
