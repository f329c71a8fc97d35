//! Bodies of the model request/reply channel.
//!
//! ```text
//! ModelListRequest     (empty)
//! ModelDownloadRequest version:u32
//! ModelListReply       status:u8 count:u32 entry*
//!   entry              version:u32 round:u32 created_at:u64 digest:[32]
//!                      contributors:u16 (len:u8 id)*
//! ModelDownloadReply   status:u8 version:u32 model_bytes...
//! ```

use bytes::{Buf, BufMut};

use super::PayloadError;
use crate::topic::Identifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReplyStatus {
    Ok = 0,
    UnknownVersion = 1,
    MalformedRequest = 2,
    TooLarge = 3,
    IntegrityFailure = 4,
    StorageFailure = 5,
}

impl ReplyStatus {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => ReplyStatus::Ok,
            1 => ReplyStatus::UnknownVersion,
            2 => ReplyStatus::MalformedRequest,
            3 => ReplyStatus::TooLarge,
            4 => ReplyStatus::IntegrityFailure,
            5 => ReplyStatus::StorageFailure,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelListEntry {
    pub model_version: u32,
    pub round: u32,
    pub created_at: u64,
    pub contributors: Vec<Identifier>,
    pub digest: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelListReply {
    pub status: ReplyStatus,
    pub entries: Vec<ModelListEntry>,
}

impl ModelListReply {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.put_u8(self.status as u8);
        out.put_u32(self.entries.len() as u32);
        for e in &self.entries {
            out.put_u32(e.model_version);
            out.put_u32(e.round);
            out.put_u64(e.created_at);
            out.put_slice(&e.digest);
            out.put_u16(e.contributors.len() as u16);
            for c in &e.contributors {
                out.put_u8(c.as_str().len() as u8);
                out.put_slice(c.as_str().as_bytes());
            }
        }
        out
    }

    pub fn decode(mut buf: &[u8]) -> Result<Self, PayloadError> {
        let status = read_status(&mut buf)?;
        need(buf, 4)?;
        let count = buf.get_u32() as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            need(buf, 4 + 4 + 8 + 32 + 2)?;
            let model_version = buf.get_u32();
            let round = buf.get_u32();
            let created_at = buf.get_u64();
            let mut digest = [0u8; 32];
            buf.copy_to_slice(&mut digest);
            let n = buf.get_u16() as usize;
            let mut contributors = Vec::with_capacity(n);
            for _ in 0..n {
                need(buf, 1)?;
                let len = buf.get_u8() as usize;
                need(buf, len)?;
                let s = std::str::from_utf8(&buf[..len]).map_err(|_| PayloadError::InvalidIdentifier)?;
                contributors.push(Identifier::new(s).map_err(|_| PayloadError::InvalidIdentifier)?);
                buf.advance(len);
            }
            entries.push(ModelListEntry {
                model_version,
                round,
                created_at,
                contributors,
                digest,
            });
        }
        if buf.has_remaining() {
            return Err(PayloadError::TrailingBytes);
        }
        Ok(ModelListReply { status, entries })
    }
}

pub fn encode_download_request(version: u32) -> Vec<u8> {
    version.to_be_bytes().to_vec()
}

pub fn decode_download_request(buf: &[u8]) -> Result<u32, PayloadError> {
    let raw: [u8; 4] = buf
        .try_into()
        .map_err(|_| PayloadError::MalformedBody("download request must be 4 bytes"))?;
    Ok(u32::from_be_bytes(raw))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDownloadReply {
    pub status: ReplyStatus,
    pub model_version: u32,
    /// Stored global-model body; empty unless `status` is Ok.
    pub model: Vec<u8>,
}

impl ModelDownloadReply {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.model.len());
        out.put_u8(self.status as u8);
        out.put_u32(self.model_version);
        out.put_slice(&self.model);
        out
    }

    pub fn decode(mut buf: &[u8]) -> Result<Self, PayloadError> {
        let status = read_status(&mut buf)?;
        need(buf, 4)?;
        let model_version = buf.get_u32();
        Ok(ModelDownloadReply {
            status,
            model_version,
            model: buf.to_vec(),
        })
    }
}

fn need(buf: &[u8], n: usize) -> Result<(), PayloadError> {
    if buf.len() < n {
        Err(PayloadError::TruncatedBody)
    } else {
        Ok(())
    }
}

fn read_status(buf: &mut &[u8]) -> Result<ReplyStatus, PayloadError> {
    need(buf, 1)?;
    let raw = buf.get_u8();
    ReplyStatus::from_u8(raw).ok_or(PayloadError::MalformedBody("unknown reply status"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_reply_roundtrip() {
        let reply = ModelListReply {
            status: ReplyStatus::Ok,
            entries: vec![ModelListEntry {
                model_version: 3,
                round: 3,
                created_at: 1_700_000_000,
                contributors: vec![Identifier::new("a").unwrap(), Identifier::new("b").unwrap()],
                digest: [7; 32],
            }],
        };
        assert_eq!(ModelListReply::decode(&reply.encode()).unwrap(), reply);
        let enc = reply.encode();
        assert_eq!(
            ModelListReply::decode(&enc[..enc.len() - 1]),
            Err(PayloadError::TruncatedBody)
        );
    }

    #[test]
    fn download_bodies() {
        assert_eq!(decode_download_request(&encode_download_request(42)).unwrap(), 42);
        assert!(decode_download_request(&[1, 2, 3]).is_err());
        let r = ModelDownloadReply {
            status: ReplyStatus::UnknownVersion,
            model_version: 99,
            model: vec![],
        };
        assert_eq!(ModelDownloadReply::decode(&r.encode()).unwrap(), r);
    }
}
