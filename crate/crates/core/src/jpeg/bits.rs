//! Bit-level access to entropy-coded JPEG segments.

use super::JpegError;

/// Reads bits MSB-first from an entropy-coded segment, removing byte
/// stuffing. A marker other than a stuffed `0xFF00` terminates the data;
/// requesting bits past it is a corrupt stream.
pub(crate) struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        BitReader { data, pos: 0, acc: 0, nbits: 0 }
    }

    fn fill_byte(&mut self) -> Result<(), JpegError> {
        let byte = *self
            .data
            .get(self.pos)
            .ok_or_else(|| JpegError::CorruptStream("entropy-coded data ends mid-block".into()))?;
        if byte == 0xFF {
            match self.data.get(self.pos + 1) {
                Some(0x00) => self.pos += 2,
                _ => {
                    return Err(JpegError::CorruptStream(
                        "marker encountered inside entropy-coded data".into(),
                    ))
                }
            }
        } else {
            self.pos += 1;
        }
        self.acc = (self.acc << 8) | byte as u32;
        self.nbits += 8;
        Ok(())
    }

    pub fn read_bit(&mut self) -> Result<u32, JpegError> {
        if self.nbits == 0 {
            self.fill_byte()?;
        }
        self.nbits -= 1;
        Ok((self.acc >> self.nbits) & 1)
    }

    pub fn read_bits(&mut self, count: u32) -> Result<u32, JpegError> {
        let mut v = 0;
        for _ in 0..count {
            v = (v << 1) | self.read_bit()?;
        }
        Ok(v)
    }

    /// Discards the remaining bits of the current byte and consumes the
    /// expected restart marker.
    pub fn restart(&mut self, index: u8) -> Result<(), JpegError> {
        self.nbits = 0;
        self.acc = 0;
        let expected = 0xD0 + (index & 7);
        match (self.data.get(self.pos), self.data.get(self.pos + 1)) {
            (Some(0xFF), Some(&m)) if m == expected => {
                self.pos += 2;
                Ok(())
            }
            _ => Err(JpegError::CorruptStream(format!(
                "expected restart marker RST{} at scan offset {}",
                index & 7,
                self.pos
            ))),
        }
    }
}

/// Writes bits MSB-first with `0xFF` byte stuffing.
pub(crate) struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter { out: Vec::new(), acc: 0, nbits: 0 }
    }

    pub fn write_bits(&mut self, value: u32, count: u32) {
        debug_assert!(count <= 16);
        if count == 0 {
            return;
        }
        self.acc = (self.acc << count) | (value & ((1 << count) - 1));
        self.nbits += count;
        while self.nbits >= 8 {
            self.nbits -= 8;
            let byte = (self.acc >> self.nbits) as u8;
            self.push(byte);
        }
        self.acc &= (1 << self.nbits) - 1;
    }

    fn push(&mut self, byte: u8) {
        self.out.push(byte);
        if byte == 0xFF {
            self.out.push(0x00);
        }
    }

    /// Pads the final partial byte with 1-bits.
    pub fn pad(&mut self) {
        if self.nbits > 0 {
            let fill = 8 - self.nbits;
            self.write_bits((1 << fill) - 1, fill);
        }
    }

    pub fn restart_marker(&mut self, index: u8) {
        self.pad();
        self.out.push(0xFF);
        self.out.push(0xD0 + (index & 7));
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.pad();
        self.out
    }
}
