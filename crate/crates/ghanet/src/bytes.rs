//! Little-endian cursor that reports byte offsets on failure.

use crate::error::FormatError;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(FormatError::Truncated {
                offset: self.buf.len(),
                needed: n - left,
                what,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &'static str) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != expected.as_bytes() {
            return Err(FormatError::BadMagic {
                found: String::from_utf8_lossy(found).into_owned(),
                expected,
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// `n` finite float32 values widened to f64.
    pub fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, FormatError> {
        let start = self.pos;
        let bytes = n
            .checked_mul(4)
            .ok_or(FormatError::Invalid {
                offset: start,
                what,
                message: format!("{n} values overflow the address space"),
            })?;
        let raw = self.take(bytes, what)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(FormatError::NonFinite { offset: start + 4 * i })
                }
            })
            .collect()
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Trailing {
                offset: self.pos,
                count: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}
