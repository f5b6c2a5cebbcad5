//! Byte-level framing shared by every wire message.
//!
//! A message is a one-byte kind tag followed by fields. A field is a 4-byte
//! big-endian length and that many bytes. Counts are bare 4-byte big-endian
//! integers, timestamps are 8-byte big-endian fields, and real numbers are
//! decimal ASCII in Rust's shortest round-trip notation.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Query = 1,
    Batch = 2,
    Response = 3,
    RequestForAnswer = 4,
    TicketBatch = 5,
    TicketExchange = 6,
    /// Broker to requester: the response did not arrive in time.
    NonDelivery = 7,
    /// Anonymizer to RA neighbour: asks for queries to merge.
    CollabProbe = 8,
    /// Reply to a probe, carrying zero or more queries.
    CollabHandoff = 9,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Result<Self, CodecError> {
        use MessageKind::*;
        Ok(match b {
            1 => Query,
            2 => Batch,
            3 => Response,
            4 => RequestForAnswer,
            5 => TicketBatch,
            6 => TicketExchange,
            7 => NonDelivery,
            8 => CollabProbe,
            9 => CollabHandoff,
            other => return Err(CodecError::UnknownKind(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("message truncated")]
    Truncated,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("expected message kind {expected:?}, found {found:?}")]
    WrongKind { expected: MessageKind, found: MessageKind },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("field is not valid UTF-8")]
    Utf8,
    #[error("field is not a valid number: {0:?}")]
    Number(String),
    #[error("invalid field value: {0}")]
    Invalid(String),
}

#[derive(Debug, Default)]
pub struct FieldWriter {
    buf: Vec<u8>,
}

impl FieldWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_kind(kind: MessageKind) -> Self {
        Self { buf: vec![kind as u8] }
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn text(&mut self, s: &str) -> &mut Self {
        self.field(s.as_bytes())
    }

    pub fn real(&mut self, v: f64) -> &mut Self {
        self.text(&format_real(v))
    }

    pub fn timestamp(&mut self, ms: u64) -> &mut Self {
        self.field(&ms.to_be_bytes())
    }

    pub fn count(&mut self, n: usize) -> &mut Self {
        let n = u32::try_from(n).expect("count exceeds u32");
        self.buf.extend_from_slice(&n.to_be_bytes());
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Decimal text for a coordinate; parses back to the identical `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v}")
}

pub fn parse_real(s: &str) -> Result<f64, CodecError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CodecError::Number(s.to_owned()))
}

pub struct FieldReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> FieldReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// Reads the kind tag and checks it.
    pub fn expect_kind(buf: &'a [u8], expected: MessageKind) -> Result<Self, CodecError> {
        let mut r = Self::new(buf);
        let found = r.kind()?;
        if found != expected {
            return Err(CodecError::WrongKind { expected, found });
        }
        Ok(r)
    }

    pub fn kind(&mut self) -> Result<MessageKind, CodecError> {
        let b = *self.buf.get(self.pos).ok_or(CodecError::Truncated)?;
        self.pos += 1;
        MessageKind::from_byte(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(CodecError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    pub fn count(&mut self) -> Result<usize, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    pub fn field(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.count()?;
        self.take(len)
    }

    pub fn text(&mut self) -> Result<&'a str, CodecError> {
        std::str::from_utf8(self.field()?).map_err(|_| CodecError::Utf8)
    }

    pub fn real(&mut self) -> Result<f64, CodecError> {
        parse_real(self.text()?)
    }

    pub fn timestamp(&mut self) -> Result<u64, CodecError> {
        let f = self.field()?;
        let arr: [u8; 8] = f
            .try_into()
            .map_err(|_| CodecError::Invalid(format!("timestamp of {} bytes", f.len())))?;
        Ok(u64::from_be_bytes(arr))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}
