//! Little-endian binary framing shared by the corpus and checkpoint files.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// `u32` length followed by the bytes.
    pub fn prefixed(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }

    /// Rank, dims, then values as `f32`.
    pub fn array(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.values() {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub(crate) struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    pub fn new(buf: &'b [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn prefixed(&mut self, what: &str) -> Result<&'b [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    pub fn utf8(&mut self, what: &str) -> Result<&'b str> {
        let start = self.offset();
        let b = self.prefixed(what)?;
        std::str::from_utf8(b).map_err(|_| Error::Format {
            offset: start,
            detail: format!("{what} is not UTF-8"),
        })
    }

    pub fn array(&mut self, what: &str) -> Result<Tensor> {
        let start = self.offset();
        let rank = self.u32(what)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format {
                offset: start,
                detail: format!("{what}: implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(what)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = match n {
            Some(n) if n > 0 && n <= (self.buf.len() - self.pos) / 4 => n,
            _ => {
                return Err(self.err(format!("{what}: shape {shape:?} does not fit the remaining bytes")));
            }
        };
        let raw = self.take(4 * n, what)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(&shape, values).map_err(|_| Error::Format {
            offset: start,
            detail: format!("{what}: bad shape {shape:?}"),
        })
    }
}

/// Hex SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Checks an 8-byte magic of the form `<family><2-digit version>`.
pub(crate) fn check_magic(r: &mut Reader<'_>, expected: &[u8; 8]) -> Result<()> {
    let got = r.take(8, "magic")?;
    if got == expected {
        return Ok(());
    }
    if got[..6] == expected[..6] {
        return Err(Error::UnsupportedVersion {
            found: String::from_utf8_lossy(&got[6..]).into_owned(),
            expected: String::from_utf8_lossy(&expected[6..]).into_owned(),
        });
    }
    Err(Error::Format {
        offset: 0,
        detail: format!("bad magic {:?}", String::from_utf8_lossy(got)),
    })
}

/// Rounds every value to the nearest `f32`.
pub fn round_to_f32(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}
