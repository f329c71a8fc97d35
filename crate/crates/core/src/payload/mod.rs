//! Data-plane envelope carried inside publish payloads.
//!
//! Byte layout (all integers big-endian), format version 1:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FLMQ"
//! 4       1     format_version (1)
//! 5       1     kind (1..=7, see EnvelopeKind)
//! 6       1     flags (bit0 = body is zlib-compressed, other bits 0)
//! 7       1+n   fed     (u8 length + ASCII)
//! .       1+n   cep     (u8 length + ASCII)
//! .       1+n   client  (u8 length + ASCII, length 0 = not applicable)
//! .       4     round
//! .       4     model_version
//! .       4+n   body    (u32 length + bytes as transmitted)
//! ```
//!
//! Compression is zlib (RFC 1950) at level 6. The decoded `body` is always
//! the uncompressed bytes; `compressed` records how it travelled.

mod model_list;
mod params;

pub use model_list::*;
pub use params::*;

use std::io::{Read, Write};

use bytes::{Buf, BufMut, BytesMut};
use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::codec::MAX_REMAINING_LENGTH;
use crate::topic::Identifier;

pub const MAGIC: [u8; 4] = *b"FLMQ";
pub const FORMAT_VERSION: u8 = 1;
const FLAG_COMPRESSED: u8 = 0x01;

/// Envelope bytes excluding identifiers and body.
pub const FIXED_OVERHEAD: usize = 4 + 1 + 1 + 1 + 3 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown envelope kind {0}")]
    UnknownKind(u8),
    #[error("unknown flag bits {0:#04x}")]
    UnknownFlags(u8),
    #[error("truncated envelope or body")]
    TruncatedBody,
    #[error("trailing bytes after envelope")]
    TrailingBytes,
    #[error("body decompression failed")]
    DecompressionFailure,
    #[error("invalid identifier in envelope header")]
    InvalidIdentifier,
    #[error("layout declares {declared} values but {actual} present")]
    LayoutMismatch { declared: usize, actual: usize },
    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: usize },
    #[error("malformed body: {0}")]
    MalformedBody(&'static str),
    #[error("envelope kind {0:?} does not carry parameters")]
    WrongKind(EnvelopeKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvelopeKind {
    ModelTemplate = 1,
    GlobalModel = 2,
    LocalUpdate = 3,
    ModelListRequest = 4,
    ModelListReply = 5,
    ModelDownloadRequest = 6,
    ModelDownloadReply = 7,
}

impl EnvelopeKind {
    pub const ALL: [EnvelopeKind; 7] = [
        EnvelopeKind::ModelTemplate,
        EnvelopeKind::GlobalModel,
        EnvelopeKind::LocalUpdate,
        EnvelopeKind::ModelListRequest,
        EnvelopeKind::ModelListReply,
        EnvelopeKind::ModelDownloadRequest,
        EnvelopeKind::ModelDownloadReply,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == v)
    }

    pub fn carries_parameters(self) -> bool {
        matches!(
            self,
            EnvelopeKind::ModelTemplate | EnvelopeKind::GlobalModel | EnvelopeKind::LocalUpdate
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: EnvelopeKind,
    pub compressed: bool,
    pub fed: Identifier,
    pub cep: Identifier,
    pub client: Option<Identifier>,
    pub round: u32,
    pub model_version: u32,
    pub body: Vec<u8>,
}

impl Envelope {
    pub fn new(kind: EnvelopeKind, fed: &Identifier, cep: &Identifier, body: Vec<u8>) -> Self {
        Envelope {
            kind,
            compressed: false,
            fed: fed.clone(),
            cep: cep.clone(),
            client: None,
            round: 0,
            model_version: 0,
            body,
        }
    }

    pub fn with_client(mut self, client: &Identifier) -> Self {
        self.client = Some(client.clone());
        self
    }

    pub fn with_round(mut self, round: u32) -> Self {
        self.round = round;
        self
    }

    pub fn with_version(mut self, version: u32) -> Self {
        self.model_version = version;
        self
    }

    pub fn compressed(mut self, on: bool) -> Self {
        self.compressed = on;
        self
    }

    pub fn parameters(&self) -> Result<ParameterSet, PayloadError> {
        if !self.kind.carries_parameters() {
            return Err(PayloadError::WrongKind(self.kind));
        }
        ParameterSet::decode(&self.body)
    }

    /// Envelope bytes other than the body.
    pub fn overhead(&self) -> usize {
        FIXED_OVERHEAD
            + self.fed.as_str().len()
            + self.cep.as_str().len()
            + self.client.as_ref().map_or(0, |c| c.as_str().len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let body = if self.compressed {
            let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(6));
            enc.write_all(&self.body).expect("in-memory write");
            enc.finish().expect("in-memory write")
        } else {
            self.body.clone()
        };
        let mut out = BytesMut::with_capacity(self.overhead() + body.len());
        out.put_slice(&MAGIC);
        out.put_u8(FORMAT_VERSION);
        out.put_u8(self.kind as u8);
        out.put_u8(if self.compressed { FLAG_COMPRESSED } else { 0 });
        for id in [Some(&self.fed), Some(&self.cep), self.client.as_ref()] {
            let s = id.map_or("", |i| i.as_str());
            out.put_u8(s.len() as u8);
            out.put_slice(s.as_bytes());
        }
        out.put_u32(self.round);
        out.put_u32(self.model_version);
        out.put_u32(body.len() as u32);
        out.put_slice(&body);
        out.to_vec()
    }

    pub fn decode(mut buf: &[u8]) -> Result<Self, PayloadError> {
        if buf.len() < 4 {
            return Err(PayloadError::TruncatedBody);
        }
        if buf[..4] != MAGIC {
            return Err(PayloadError::BadMagic);
        }
        buf.advance(4);
        if buf.remaining() < 3 {
            return Err(PayloadError::TruncatedBody);
        }
        let version = buf.get_u8();
        if version != FORMAT_VERSION {
            return Err(PayloadError::UnsupportedVersion(version));
        }
        let raw_kind = buf.get_u8();
        let kind = EnvelopeKind::from_u8(raw_kind).ok_or(PayloadError::UnknownKind(raw_kind))?;
        let flags = buf.get_u8();
        if flags & !FLAG_COMPRESSED != 0 {
            return Err(PayloadError::UnknownFlags(flags));
        }
        let ident = |buf: &mut &[u8]| -> Result<Option<Identifier>, PayloadError> {
            if buf.remaining() < 1 {
                return Err(PayloadError::TruncatedBody);
            }
            let n = buf.get_u8() as usize;
            if buf.remaining() < n {
                return Err(PayloadError::TruncatedBody);
            }
            if n == 0 {
                return Ok(None);
            }
            let s = std::str::from_utf8(&buf[..n]).map_err(|_| PayloadError::InvalidIdentifier)?;
            let id = Identifier::new(s).map_err(|_| PayloadError::InvalidIdentifier)?;
            buf.advance(n);
            Ok(Some(id))
        };
        let fed = ident(&mut buf)?.ok_or(PayloadError::InvalidIdentifier)?;
        let cep = ident(&mut buf)?.ok_or(PayloadError::InvalidIdentifier)?;
        let client = ident(&mut buf)?;
        if buf.remaining() < 12 {
            return Err(PayloadError::TruncatedBody);
        }
        let round = buf.get_u32();
        let model_version = buf.get_u32();
        let body_len = buf.get_u32() as usize;
        if buf.remaining() < body_len {
            return Err(PayloadError::TruncatedBody);
        }
        if buf.remaining() > body_len {
            return Err(PayloadError::TrailingBytes);
        }
        let compressed = flags & FLAG_COMPRESSED != 0;
        let body = if compressed {
            let mut out = Vec::new();
            ZlibDecoder::new(buf)
                .take(MAX_REMAINING_LENGTH as u64 + 1)
                .read_to_end(&mut out)
                .map_err(|_| PayloadError::DecompressionFailure)?;
            if out.len() > MAX_REMAINING_LENGTH {
                return Err(PayloadError::DecompressionFailure);
            }
            out
        } else {
            buf.to_vec()
        };
        Ok(Envelope {
            kind,
            compressed,
            fed,
            cep,
            client,
            round,
            model_version,
            body,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn sample() -> Envelope {
        let params = ParameterSet::zeros(&[("w", 2), ("b", 1)]).with_num_samples(3);
        Envelope::new(EnvelopeKind::LocalUpdate, &id("f"), &id("c"), params.encode())
            .with_client(&id("k"))
            .with_round(5)
            .with_version(4)
    }

    #[test]
    fn roundtrip_plain_and_compressed() {
        for compressed in [false, true] {
            let e = sample().compressed(compressed);
            let enc = e.encode();
            assert_eq!(Envelope::decode(&enc).unwrap(), e);
            assert_eq!(enc, e.encode(), "encoding is deterministic");
        }
    }

    #[test]
    fn header_errors() {
        let enc = sample().encode();
        let mut bad = enc.clone();
        bad[0] ^= 0xFF;
        assert_eq!(Envelope::decode(&bad), Err(PayloadError::BadMagic));
        let mut bad = enc.clone();
        bad[4] = 2;
        assert_eq!(Envelope::decode(&bad), Err(PayloadError::UnsupportedVersion(2)));
        let mut bad = enc.clone();
        bad[5] = 9;
        assert_eq!(Envelope::decode(&bad), Err(PayloadError::UnknownKind(9)));
        let mut bad = enc.clone();
        bad[6] = 0x80;
        assert_eq!(Envelope::decode(&bad), Err(PayloadError::UnknownFlags(0x80)));
        assert_eq!(
            Envelope::decode(&enc[..enc.len() - 1]),
            Err(PayloadError::TruncatedBody)
        );
        let mut long = enc.clone();
        long.push(0);
        assert_eq!(Envelope::decode(&long), Err(PayloadError::TrailingBytes));
    }

    #[test]
    fn corrupt_compressed_body() {
        let e = sample().compressed(true);
        let mut enc = e.encode();
        let n = enc.len();
        enc[n - 3] ^= 0x55;
        assert_eq!(Envelope::decode(&enc), Err(PayloadError::DecompressionFailure));
    }

    #[test]
    fn zero_vector_compresses_below_ten_percent() {
        let params = ParameterSet::zeros(&[("w", 9_999), ("b", 1)]).with_num_samples(200);
        let raw = params.encode();
        let e = Envelope::new(EnvelopeKind::LocalUpdate, &id("f"), &id("c"), raw.clone())
            .with_client(&id("k"))
            .compressed(true);
        let enc = e.encode();
        assert!(
            enc.len() * 10 < raw.len(),
            "encoded {} vs raw body {}",
            enc.len(),
            raw.len()
        );
    }

    #[test]
    fn overhead_is_bounded() {
        let e = sample();
        let enc = e.encode();
        assert_eq!(enc.len() - e.body.len(), e.overhead());
        assert!(e.overhead() <= 64 + 3);
    }

    /// Frozen bytes for a small envelope; other implementations check
    /// against the same vector (see docs/wire-format.md).
    #[test]
    fn golden_vector() {
        let e = Envelope::new(
            EnvelopeKind::ModelDownloadRequest,
            &id("f1"),
            &id("c1"),
            vec![0, 0, 0, 2],
        )
        .with_client(&id("k"))
        .with_round(7)
        .with_version(0);
        let expected = concat!(
            "464c4d51", // magic
            "01",       // format version
            "06",       // ModelDownloadRequest
            "00",       // flags
            "026631",   // fed "f1"
            "026331",   // cep "c1"
            "016b",     // client "k"
            "00000007", // round
            "00000000", // model_version
            "00000004", // body length
            "00000002", // body: requested version 2
        );
        assert_eq!(hex::encode(e.encode()), expected);
    }
}
