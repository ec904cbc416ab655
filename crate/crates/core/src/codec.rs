//! Canonical byte encoding shared by every hashed or persisted structure.
//!
//! A canonical record is a sequence of fields. Each field is written as a
//! 4-byte little-endian length followed by the field bytes. Integers are
//! 8-byte little-endian, reals are 8-byte IEEE-754 little-endian, strings are
//! UTF-8. Records that start with a type tag write the tag as a bare byte.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("field at offset {offset} has length {found}, expected {expected}")]
    BadLength {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown tag {0:#04x}")]
    UnknownTag(u8),
    #[error("invalid utf-8 in string field")]
    Utf8,
    #[error("{0} trailing bytes after record")]
    Trailing(usize),
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// A 256-bit SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl FromStr for Digest {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s.trim()).map_err(|e| DecodeError::Invalid(e.to_string()))?;
        let arr: [u8; 32] = bytes.try_into().map_err(|v: Vec<u8>| DecodeError::BadLength {
            offset: 0,
            expected: 32,
            found: v.len(),
        })?;
        Ok(Digest(arr))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Builds canonical records.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_tag(tag: u8) -> Self {
        let mut enc = Self::new();
        enc.tag(tag);
        enc
    }

    pub fn tag(&mut self, tag: u8) -> &mut Self {
        self.buf.push(tag);
        self
    }

    pub fn bytes(&mut self, field: &[u8]) -> &mut Self {
        let len = u32::try_from(field.len()).expect("canonical field larger than 4 GiB");
        self.buf.extend_from_slice(&len.to_le_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.bytes(&d.0)
    }

    /// Vector of reals as one field: 8-byte LE count, then each value.
    pub fn f64_slice(&mut self, values: &[f64]) -> &mut Self {
        let mut inner = Vec::with_capacity(8 + values.len() * 8);
        inner.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            inner.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&inner)
    }

    /// Appends bytes without a length prefix.
    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn raw_u64(&mut self, v: u64) -> &mut Self {
        self.raw(&v.to_le_bytes())
    }

    pub fn raw_f64(&mut self, v: f64) -> &mut Self {
        self.raw(&v.to_le_bytes())
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Reads canonical records produced by [`Encoder`].
#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated(self.pos))?;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated(self.pos));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn tag(&mut self) -> Result<u8, DecodeError> {
        Ok(self.raw(1)?[0])
    }

    pub fn raw_u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.raw(8)?.try_into().unwrap()))
    }

    pub fn raw_f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.raw(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = u32::from_le_bytes(self.raw(4)?.try_into().unwrap()) as usize;
        self.raw(len)
    }

    fn fixed(&mut self, expected: usize) -> Result<&'a [u8], DecodeError> {
        let offset = self.pos;
        let field = self.bytes()?;
        if field.len() != expected {
            return Err(DecodeError::BadLength {
                offset,
                expected,
                found: field.len(),
            });
        }
        Ok(field)
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.fixed(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.fixed(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<&'a str, DecodeError> {
        std::str::from_utf8(self.bytes()?).map_err(|_| DecodeError::Utf8)
    }

    pub fn digest(&mut self) -> Result<Digest, DecodeError> {
        Ok(Digest(self.fixed(32)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>, DecodeError> {
        let offset = self.pos;
        let field = self.bytes()?;
        let mut inner = Decoder::new(field);
        let n = inner.raw_u64()? as usize;
        if field.len() != 8 + n.saturating_mul(8) {
            return Err(DecodeError::BadLength {
                offset,
                expected: 8usize.saturating_add(n.saturating_mul(8)),
                found: field.len(),
            });
        }
        (0..n).map(|_| inner.raw_f64()).collect()
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}
