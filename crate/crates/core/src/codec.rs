//! Little-endian binary framing shared by the on-disk formats.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("trailing bytes after payload: {0}")]
    Trailing(usize),
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
}

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut enc = Encoder { buf: Vec::new() };
        enc.buf.extend_from_slice(magic);
        enc.u32(version);
        enc
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        for &v in vs {
            self.f64(v);
        }
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Checks the magic and returns the decoder positioned after the version,
    /// along with the version.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(Self, u32), FormatError> {
        let mut dec = Decoder { bytes, pos: 0 };
        let found: [u8; 4] = dec.take(4)?.try_into().expect("4 bytes");
        if &found != magic {
            return Err(FormatError::BadMagic { expected: *magic, found });
        }
        let version = dec.u32()?;
        Ok((dec, version))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(FormatError::Truncated(self.pos)),
        }
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| FormatError::Invalid(e.to_string()))
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(FormatError::Trailing(self.bytes.len() - self.pos))
        }
    }
}

/// Splits a text artifact into its optional `# provenance:` line and the body lines.
pub fn split_provenance(text: &str) -> (Option<&str>, impl Iterator<Item = (usize, &str)>) {
    let mut lines = text.lines().enumerate().peekable();
    let mut provenance = None;
    if let Some((_, first)) = lines.peek() {
        if let Some(rest) = first.strip_prefix("# provenance: ") {
            provenance = Some(rest);
            lines.next();
        }
    }
    (provenance, lines.map(|(i, l)| (i + 1, l)))
}

pub fn provenance_line(provenance: &str) -> String {
    if provenance.is_empty() {
        String::new()
    } else {
        format!("# provenance: {provenance}\n")
    }
}
