//! MQTT-subset wire codec.
//!
//! Framing is MQTT 3.1.1. A level-5 CONNECT may carry a property block with
//! receive-maximum (0x21) and maximum-packet-size (0x27); any other property,
//! will messages, AUTH packets and topic aliases are rejected at decode.

mod packet;

pub use packet::*;

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

/// Largest value a Remaining Length varint can hold (256 MB - 1).
pub const MAX_REMAINING_LENGTH: usize = 268_435_455;

const PROP_RECEIVE_MAXIMUM: u8 = 0x21;
const PROP_MAXIMUM_PACKET_SIZE: u8 = 0x27;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    /// The buffer holds a valid prefix; read more bytes and retry.
    #[error("incomplete packet")]
    Incomplete,
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("value {value} exceeds limit {limit}")]
    ValueTooLarge { value: usize, limit: usize },
    /// Encode-side invariant violation (e.g. qos 1 publish without packet id).
    #[error("invalid packet: {0}")]
    InvalidPacket(&'static str),
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::Malformed(msg.into())
}

pub fn encode_remaining_length(n: usize) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(4);
    write_remaining_length(n, &mut out)?;
    Ok(out)
}

fn write_remaining_length(mut n: usize, out: &mut impl BufMut) -> Result<(), CodecError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(CodecError::ValueTooLarge {
            value: n,
            limit: MAX_REMAINING_LENGTH,
        });
    }
    loop {
        let mut byte = (n % 128) as u8;
        n /= 128;
        if n > 0 {
            byte |= 0x80;
        }
        out.put_u8(byte);
        if n == 0 {
            return Ok(());
        }
    }
}

fn remaining_length_len(n: usize) -> usize {
    match n {
        0..=127 => 1,
        128..=16_383 => 2,
        16_384..=2_097_151 => 3,
        _ => 4,
    }
}

/// Returns `(value, bytes_consumed)`.
pub fn decode_remaining_length(buf: &[u8]) -> Result<(usize, usize), CodecError> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for i in 0..4 {
        let Some(&byte) = buf.get(i) else {
            return Err(CodecError::Incomplete);
        };
        value += (byte & 0x7F) as usize * multiplier;
        if byte & 0x80 == 0 {
            return Ok((value, i + 1));
        }
        multiplier *= 128;
    }
    Err(malformed("remaining length longer than 4 bytes"))
}

fn check_packet_id(id: u16) -> Result<(), CodecError> {
    if id == 0 {
        Err(CodecError::InvalidPacket("packet identifier 0"))
    } else {
        Ok(())
    }
}

fn string_len(s: &str) -> Result<usize, CodecError> {
    if s.len() > u16::MAX as usize {
        return Err(CodecError::ValueTooLarge {
            value: s.len(),
            limit: u16::MAX as usize,
        });
    }
    Ok(2 + s.len())
}

fn put_str(out: &mut BytesMut, s: &str) {
    out.put_u16(s.len() as u16);
    out.put_slice(s.as_bytes());
}

fn connect_props_len(c: &Connect) -> usize {
    c.receive_maximum.map_or(0, |_| 3) + c.max_packet_size.map_or(0, |_| 5)
}

/// Remaining Length of the packet (everything after the fixed header).
fn body_len(p: &Packet) -> Result<usize, CodecError> {
    Ok(match p {
        Packet::Connect(c) => {
            let mut n = 6 + 1 + 1 + 2; // "MQTT", level, flags, keep-alive
            if c.protocol == ProtocolLevel::V5 {
                let props = connect_props_len(c);
                n += remaining_length_len(props) + props;
            } else if c.receive_maximum.is_some() || c.max_packet_size.is_some() {
                return Err(CodecError::InvalidPacket("connect properties need protocol level 5"));
            }
            n += string_len(&c.client_id)?;
            if let Some(u) = &c.username {
                n += string_len(u)?;
            }
            if let Some(pw) = &c.password {
                if pw.len() > u16::MAX as usize {
                    return Err(CodecError::ValueTooLarge {
                        value: pw.len(),
                        limit: u16::MAX as usize,
                    });
                }
                n += 2 + pw.len();
            }
            n
        }
        Packet::ConnAck(_) => 2,
        Packet::Publish(p) => {
            match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, None) => {}
                (QoS::AtMostOnce, Some(_)) => return Err(CodecError::InvalidPacket("qos 0 publish with packet id")),
                (_, None) => return Err(CodecError::InvalidPacket("qos > 0 publish without packet id")),
                (_, Some(id)) => check_packet_id(id)?,
            }
            if p.qos == QoS::AtMostOnce && p.dup {
                return Err(CodecError::InvalidPacket("dup flag on qos 0 publish"));
            }
            string_len(&p.topic)? + p.packet_id.map_or(0, |_| 2) + p.payload.len()
        }
        Packet::PubAck(id) | Packet::PubRec(id) | Packet::PubRel(id) | Packet::PubComp(id) => {
            check_packet_id(*id)?;
            2
        }
        Packet::Subscribe(s) => {
            check_packet_id(s.packet_id)?;
            if s.filters.is_empty() {
                return Err(CodecError::InvalidPacket("subscribe without filters"));
            }
            let mut n = 2;
            for (f, _) in &s.filters {
                n += string_len(f)? + 1;
            }
            n
        }
        Packet::SubAck(s) => {
            check_packet_id(s.packet_id)?;
            if s.codes.is_empty() {
                return Err(CodecError::InvalidPacket("suback without codes"));
            }
            2 + s.codes.len()
        }
        Packet::Unsubscribe(u) => {
            check_packet_id(u.packet_id)?;
            if u.filters.is_empty() {
                return Err(CodecError::InvalidPacket("unsubscribe without filters"));
            }
            let mut n = 2;
            for f in &u.filters {
                n += string_len(f)?;
            }
            n
        }
        Packet::UnsubAck(u) => {
            check_packet_id(u.packet_id)?;
            2 + u.codes.len()
        }
        Packet::PingReq | Packet::PingResp | Packet::Disconnect => 0,
    })
}

fn control_byte(p: &Packet) -> u8 {
    let flags = match p {
        Packet::Publish(p) => ((p.dup as u8) << 3) | (p.qos.as_u8() << 1) | p.retain as u8,
        Packet::PubRel(_) | Packet::Subscribe(_) | Packet::Unsubscribe(_) => 0b0010,
        _ => 0,
    };
    (p.type_code() << 4) | flags
}

/// Total encoded size in bytes, without encoding.
pub fn encoded_len(p: &Packet) -> Result<usize, CodecError> {
    let body = body_len(p)?;
    if body > MAX_REMAINING_LENGTH {
        return Err(CodecError::ValueTooLarge {
            value: body,
            limit: MAX_REMAINING_LENGTH,
        });
    }
    Ok(1 + remaining_length_len(body) + body)
}

/// Non-payload bytes of an encoded publish: fixed header plus packet id
/// (the topic and its length prefix are excluded).
pub fn publish_overhead(p: &Publish) -> Result<usize, CodecError> {
    let total = encoded_len(&Packet::Publish(p.clone()))?;
    Ok(total - (p.topic.len() + 2 + p.payload.len()))
}

pub fn encode_packet(p: &Packet) -> Result<Bytes, CodecError> {
    let mut out = BytesMut::new();
    encode_packet_into(p, &mut out)?;
    Ok(out.freeze())
}

pub fn encode_packet_into(p: &Packet, out: &mut BytesMut) -> Result<(), CodecError> {
    let body = body_len(p)?;
    out.reserve(1 + remaining_length_len(body.min(MAX_REMAINING_LENGTH)) + body);
    out.put_u8(control_byte(p));
    write_remaining_length(body, out)?;
    match p {
        Packet::Connect(c) => {
            put_str(out, "MQTT");
            out.put_u8(c.protocol.as_u8());
            let mut flags = 0u8;
            if c.username.is_some() {
                flags |= 0x80;
            }
            if c.password.is_some() {
                flags |= 0x40;
            }
            if c.clean_session {
                flags |= 0x02;
            }
            out.put_u8(flags);
            out.put_u16(c.keep_alive);
            if c.protocol == ProtocolLevel::V5 {
                write_remaining_length(connect_props_len(c), out)?;
                if let Some(rm) = c.receive_maximum {
                    out.put_u8(PROP_RECEIVE_MAXIMUM);
                    out.put_u16(rm);
                }
                if let Some(mps) = c.max_packet_size {
                    out.put_u8(PROP_MAXIMUM_PACKET_SIZE);
                    out.put_u32(mps);
                }
            }
            put_str(out, &c.client_id);
            if let Some(u) = &c.username {
                put_str(out, u);
            }
            if let Some(pw) = &c.password {
                out.put_u16(pw.len() as u16);
                out.put_slice(pw);
            }
        }
        Packet::ConnAck(a) => {
            out.put_u8(a.session_present as u8);
            out.put_u8(a.code);
        }
        Packet::Publish(p) => {
            put_str(out, &p.topic);
            if let Some(id) = p.packet_id {
                out.put_u16(id);
            }
            out.put_slice(&p.payload);
        }
        Packet::PubAck(id) | Packet::PubRec(id) | Packet::PubRel(id) | Packet::PubComp(id) => {
            out.put_u16(*id);
        }
        Packet::Subscribe(s) => {
            out.put_u16(s.packet_id);
            for (f, q) in &s.filters {
                put_str(out, f);
                out.put_u8(q.as_u8());
            }
        }
        Packet::SubAck(s) => {
            out.put_u16(s.packet_id);
            for c in &s.codes {
                out.put_u8(c.to_u8());
            }
        }
        Packet::Unsubscribe(u) => {
            out.put_u16(u.packet_id);
            for f in &u.filters {
                put_str(out, f);
            }
        }
        Packet::UnsubAck(u) => {
            out.put_u16(u.packet_id);
            for c in &u.codes {
                out.put_u8(c.to_u8());
            }
        }
        Packet::PingReq | Packet::PingResp | Packet::Disconnect => {}
    }
    Ok(())
}

/// Validates the control byte on its own, so garbage is reported as
/// malformed before the rest of the packet arrives.
fn check_control_byte(byte: u8) -> Result<(), CodecError> {
    let kind = byte >> 4;
    let flags = byte & 0x0F;
    match kind {
        0 => Err(malformed("reserved packet type 0")),
        15 => Err(malformed("AUTH packets are not supported")),
        3 => {
            let qos = (flags >> 1) & 0b11;
            if qos == 3 {
                Err(malformed("publish qos 3"))
            } else if qos == 0 && flags & 0b1000 != 0 {
                Err(malformed("dup flag on qos 0 publish"))
            } else {
                Ok(())
            }
        }
        6 | 8 | 10 if flags != 0b0010 => Err(malformed(format!("bad fixed-header flags for type {kind}"))),
        6 | 8 | 10 => Ok(()),
        _ if flags != 0 => Err(malformed(format!("bad fixed-header flags for type {kind}"))),
        _ => Ok(()),
    }
}

/// Reads the fixed header; returns `(remaining_length, header_len)`.
fn peek_header(buf: &[u8]) -> Result<(usize, usize), CodecError> {
    let Some(&first) = buf.first() else {
        return Err(CodecError::Incomplete);
    };
    check_control_byte(first)?;
    let (len, used) = decode_remaining_length(&buf[1..])?;
    Ok((len, 1 + used))
}

/// Decodes one packet from the front of `buf`. Copies the packet bytes; use
/// [`decode_packet_bytes`] to share payload storage with the input.
pub fn decode_packet(buf: &[u8]) -> Result<(Packet, usize), CodecError> {
    let (len, header) = peek_header(buf)?;
    let total = header + len;
    if buf.len() < total {
        return Err(CodecError::Incomplete);
    }
    let frame = Bytes::copy_from_slice(&buf[..total]);
    Ok((decode_frame(buf[0], frame.slice(header..))?, total))
}

pub fn decode_packet_bytes(buf: &Bytes) -> Result<(Packet, usize), CodecError> {
    let (len, header) = peek_header(buf)?;
    let total = header + len;
    if buf.len() < total {
        return Err(CodecError::Incomplete);
    }
    Ok((decode_frame(buf[0], buf.slice(header..total))?, total))
}

struct Cursor {
    buf: Bytes,
    pos: usize,
}

impl Cursor {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| malformed("body shorter than declared fields"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes([self.u8()?, self.u8()?, self.u8()?, self.u8()?]))
    }

    fn take(&mut self, n: usize) -> Result<Bytes, CodecError> {
        if self.remaining() < n {
            return Err(malformed("body shorter than declared fields"));
        }
        let out = self.buf.slice(self.pos..self.pos + n);
        self.pos += n;
        Ok(out)
    }

    fn binary(&mut self) -> Result<Bytes, CodecError> {
        let n = self.u16()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let raw = self.binary()?;
        let s = std::str::from_utf8(&raw).map_err(|_| malformed("invalid UTF-8 string"))?;
        if s.contains('\0') {
            return Err(malformed("NUL character in string"));
        }
        Ok(s.to_string())
    }

    fn packet_id(&mut self) -> Result<u16, CodecError> {
        match self.u16()? {
            0 => Err(malformed("packet identifier 0")),
            id => Ok(id),
        }
    }

    fn varint(&mut self) -> Result<usize, CodecError> {
        let (v, used) = decode_remaining_length(&self.buf[self.pos..]).map_err(|e| match e {
            CodecError::Incomplete => malformed("truncated property length"),
            other => other,
        })?;
        self.pos += used;
        Ok(v)
    }

    fn finish(&self) -> Result<(), CodecError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(malformed("trailing bytes after packet body"))
        }
    }
}

fn decode_frame(control: u8, body: Bytes) -> Result<Packet, CodecError> {
    let kind = control >> 4;
    let flags = control & 0x0F;
    let mut c = Cursor { buf: body, pos: 0 };
    let packet = match kind {
        1 => Packet::Connect(decode_connect(&mut c)?),
        2 => {
            let ack_flags = c.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(malformed("reserved connack flags"));
            }
            Packet::ConnAck(ConnAck {
                session_present: ack_flags & 1 == 1,
                code: c.u8()?,
            })
        }
        3 => {
            let qos = QoS::from_u8((flags >> 1) & 0b11).ok_or_else(|| malformed("publish qos 3"))?;
            let topic = c.string()?;
            if !crate::topic::is_valid_topic_name(&topic) {
                return Err(malformed("invalid publish topic name"));
            }
            let packet_id = if qos == QoS::AtMostOnce {
                None
            } else {
                Some(c.packet_id()?)
            };
            let payload = c.take(c.remaining())?;
            Packet::Publish(Publish {
                dup: flags & 0b1000 != 0,
                qos,
                retain: flags & 1 == 1,
                topic,
                packet_id,
                payload,
            })
        }
        4 => Packet::PubAck(c.packet_id()?),
        5 => Packet::PubRec(c.packet_id()?),
        6 => Packet::PubRel(c.packet_id()?),
        7 => Packet::PubComp(c.packet_id()?),
        8 => {
            let packet_id = c.packet_id()?;
            let mut filters = Vec::new();
            while c.remaining() > 0 {
                let f = c.string()?;
                let opts = c.u8()?;
                if opts & 0xFC != 0 {
                    return Err(malformed("unsupported subscription options"));
                }
                let q = QoS::from_u8(opts).ok_or_else(|| malformed("subscription qos 3"))?;
                filters.push((f, q));
            }
            if filters.is_empty() {
                return Err(malformed("subscribe without filters"));
            }
            Packet::Subscribe(Subscribe { packet_id, filters })
        }
        9 => {
            let packet_id = c.packet_id()?;
            let mut codes = Vec::new();
            while c.remaining() > 0 {
                let b = c.u8()?;
                codes.push(SubAckCode::from_u8(b).ok_or_else(|| malformed(format!("suback code {b:#x}")))?);
            }
            if codes.is_empty() {
                return Err(malformed("suback without codes"));
            }
            Packet::SubAck(SubAck { packet_id, codes })
        }
        10 => {
            let packet_id = c.packet_id()?;
            let mut filters = Vec::new();
            while c.remaining() > 0 {
                filters.push(c.string()?);
            }
            if filters.is_empty() {
                return Err(malformed("unsubscribe without filters"));
            }
            Packet::Unsubscribe(Unsubscribe { packet_id, filters })
        }
        11 => {
            let packet_id = c.packet_id()?;
            let mut codes = Vec::new();
            while c.remaining() > 0 {
                let b = c.u8()?;
                codes.push(UnsubAckCode::from_u8(b).ok_or_else(|| malformed(format!("unsuback code {b:#x}")))?);
            }
            Packet::UnsubAck(UnsubAck { packet_id, codes })
        }
        12 => Packet::PingReq,
        13 => Packet::PingResp,
        14 => Packet::Disconnect,
        _ => return Err(malformed(format!("packet type {kind}"))),
    };
    c.finish()?;
    Ok(packet)
}

fn decode_connect(c: &mut Cursor) -> Result<Connect, CodecError> {
    if c.string()? != "MQTT" {
        return Err(malformed("protocol name is not MQTT"));
    }
    let protocol = match c.u8()? {
        4 => ProtocolLevel::V311,
        5 => ProtocolLevel::V5,
        other => return Err(malformed(format!("unsupported protocol level {other}"))),
    };
    let flags = c.u8()?;
    if flags & 0x01 != 0 {
        return Err(malformed("reserved connect flag set"));
    }
    if flags & 0x04 != 0 {
        return Err(malformed("will messages are not supported"));
    }
    if flags & 0x38 != 0 {
        return Err(malformed("will qos/retain without will flag"));
    }
    let has_user = flags & 0x80 != 0;
    let has_password = flags & 0x40 != 0;
    let keep_alive = c.u16()?;
    let mut receive_maximum = None;
    let mut max_packet_size = None;
    if protocol == ProtocolLevel::V5 {
        let props_len = c.varint()?;
        if props_len > c.remaining() {
            return Err(malformed("property block overruns packet"));
        }
        let end = c.pos + props_len;
        while c.pos < end {
            match c.u8()? {
                PROP_RECEIVE_MAXIMUM if receive_maximum.is_none() => {
                    let v = c.u16()?;
                    if v == 0 {
                        return Err(malformed("receive maximum 0"));
                    }
                    receive_maximum = Some(v);
                }
                PROP_MAXIMUM_PACKET_SIZE if max_packet_size.is_none() => {
                    let v = c.u32()?;
                    if v == 0 || v as usize > MAX_REMAINING_LENGTH {
                        return Err(malformed("maximum packet size out of range"));
                    }
                    max_packet_size = Some(v);
                }
                PROP_RECEIVE_MAXIMUM | PROP_MAXIMUM_PACKET_SIZE => return Err(malformed("duplicate connect property")),
                other => return Err(malformed(format!("unsupported connect property {other:#x}"))),
            }
        }
        if c.pos != end {
            return Err(malformed("property block length mismatch"));
        }
    }
    let client_id = c.string()?;
    let username = if has_user { Some(c.string()?) } else { None };
    let password = if has_password { Some(c.binary()?) } else { None };
    Ok(Connect {
        protocol,
        client_id,
        clean_session: flags & 0x02 != 0,
        keep_alive,
        username,
        password,
        receive_maximum,
        max_packet_size,
    })
}

/// Incremental decoder for a byte stream. Owned by one connection reader.
#[derive(Debug)]
pub struct StreamDecoder {
    buf: BytesMut,
    max_packet_size: usize,
}

impl Default for StreamDecoder {
    fn default() -> Self {
        StreamDecoder::new(MAX_REMAINING_LENGTH + 5)
    }
}

impl StreamDecoder {
    /// `max_packet_size` bounds the total encoded size of accepted packets.
    pub fn new(max_packet_size: usize) -> Self {
        StreamDecoder {
            buf: BytesMut::new(),
            max_packet_size,
        }
    }

    pub fn push(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete packet, `Ok(None)` if more bytes are needed.
    pub fn next_packet(&mut self) -> Result<Option<Packet>, CodecError> {
        let (len, header) = match peek_header(&self.buf) {
            Ok(v) => v,
            Err(CodecError::Incomplete) => return Ok(None),
            Err(e) => return Err(e),
        };
        let total = header + len;
        if total > self.max_packet_size {
            return Err(CodecError::ValueTooLarge {
                value: total,
                limit: self.max_packet_size,
            });
        }
        if self.buf.len() < total {
            return Ok(None);
        }
        let frame = self.buf.split_to(total).freeze();
        decode_frame(frame[0], frame.slice(header..)).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar decoder used as the varint oracle.
    fn oracle_decode(bytes: &[u8]) -> usize {
        let mut value = 0usize;
        for (i, b) in bytes.iter().enumerate() {
            value |= ((b & 0x7F) as usize) << (7 * i);
        }
        value
    }

    #[test]
    fn remaining_length_examples() {
        assert_eq!(encode_remaining_length(0).unwrap(), vec![0x00]);
        assert_eq!(encode_remaining_length(127).unwrap(), vec![0x7F]);
        assert_eq!(encode_remaining_length(128).unwrap(), vec![0x80, 0x01]);
        assert_eq!(encode_remaining_length(16_383).unwrap(), vec![0xFF, 0x7F]);
        assert_eq!(encode_remaining_length(16_384).unwrap(), vec![0x80, 0x80, 0x01]);
        assert_eq!(
            encode_remaining_length(MAX_REMAINING_LENGTH).unwrap(),
            vec![0xFF, 0xFF, 0xFF, 0x7F]
        );
        assert!(matches!(
            encode_remaining_length(MAX_REMAINING_LENGTH + 1),
            Err(CodecError::ValueTooLarge { .. })
        ));
        for n in [
            0,
            1,
            127,
            128,
            300,
            16_383,
            16_384,
            2_097_151,
            2_097_152,
            MAX_REMAINING_LENGTH,
        ] {
            let enc = encode_remaining_length(n).unwrap();
            assert_eq!(oracle_decode(&enc), n);
            assert_eq!(enc.len(), remaining_length_len(n));
        }
    }

    #[test]
    fn remaining_length_decode_errors() {
        assert_eq!(decode_remaining_length(&[0x7F]).unwrap(), (127, 1));
        assert_eq!(decode_remaining_length(&[0x80, 0x01, 0xAA]).unwrap(), (128, 2));
        assert!(matches!(
            decode_remaining_length(&[0x80, 0x80, 0x80, 0x80, 0x01]),
            Err(CodecError::Malformed(_))
        ));
        assert_eq!(decode_remaining_length(&[0x80]), Err(CodecError::Incomplete));
        assert_eq!(decode_remaining_length(&[]), Err(CodecError::Incomplete));
    }

    #[test]
    fn fixed_control_bytes() {
        assert_eq!(&encode_packet(&Packet::PingReq).unwrap()[..], &[0xC0, 0x00]);
        assert_eq!(&encode_packet(&Packet::PingResp).unwrap()[..], &[0xD0, 0x00]);
        assert_eq!(&encode_packet(&Packet::Disconnect).unwrap()[..], &[0xE0, 0x00]);
        assert_eq!(
            &encode_packet(&Packet::PubRel(1)).unwrap()[..],
            &[0x62, 0x02, 0x00, 0x01]
        );
        assert_eq!(
            &encode_packet(&Packet::PubAck(258)).unwrap()[..],
            &[0x40, 0x02, 0x01, 0x02]
        );
    }

    #[test]
    fn publish_minimum_overhead() {
        let p = Publish::new("f/c/job_request", Bytes::new());
        let enc = encode_packet(&Packet::Publish(p.clone())).unwrap();
        assert_eq!(enc.len() - (p.topic.len() + 2), 2);
        assert_eq!(publish_overhead(&p).unwrap(), 2);
    }

    #[test]
    fn reserved_and_illegal_bytes() {
        assert!(matches!(decode_packet(&[0xF0, 0x00]), Err(CodecError::Malformed(_))));
        assert!(matches!(decode_packet(&[0x00, 0x00]), Err(CodecError::Malformed(_))));
        // publish with qos bits = 3
        assert!(matches!(decode_packet(&[0x36, 0x00]), Err(CodecError::Malformed(_))));
        // subscribe with wrong flags
        assert!(matches!(decode_packet(&[0x80, 0x00]), Err(CodecError::Malformed(_))));
        // reserved type reported even without a length byte
        assert!(matches!(decode_packet(&[0xF0]), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn oversized_publish_rejected() {
        let topic = "t".repeat(60_000);
        let payload = Bytes::from(vec![0u8; MAX_REMAINING_LENGTH - 55]);
        let p = Packet::Publish(Publish::new(topic, payload));
        assert!(matches!(encode_packet(&p), Err(CodecError::ValueTooLarge { .. })));
        assert!(matches!(encoded_len(&p), Err(CodecError::ValueTooLarge { .. })));
    }

    #[test]
    fn publish_invariants_enforced_on_encode() {
        let mut p = Publish::new("a", Bytes::new());
        p.qos = QoS::AtLeastOnce;
        assert!(matches!(
            encode_packet(&Packet::Publish(p.clone())),
            Err(CodecError::InvalidPacket(_))
        ));
        p.packet_id = Some(0);
        assert!(encode_packet(&Packet::Publish(p.clone())).is_err());
        p.packet_id = Some(7);
        assert!(encode_packet(&Packet::Publish(p)).is_ok());
    }

    #[test]
    fn connect_v5_properties_roundtrip() {
        let c = Connect {
            protocol: ProtocolLevel::V5,
            client_id: "clientA".into(),
            clean_session: true,
            keep_alive: 30,
            username: Some("clientA".into()),
            password: Some(Bytes::from_static(b"s3cret")),
            receive_maximum: Some(5),
            max_packet_size: Some(1 << 20),
        };
        let enc = encode_packet(&Packet::Connect(c.clone())).unwrap();
        assert_eq!(decode_packet(&enc).unwrap(), (Packet::Connect(c), enc.len()));
    }

    #[test]
    fn will_and_unknown_properties_rejected() {
        // 3.1.1 CONNECT with will flag set
        let mut raw = vec![
            0x10, 0x0C, 0x00, 0x04, b'M', b'Q', b'T', b'T', 4, 0x06, 0x00, 0x3C, 0x00, 0x00,
        ];
        assert!(matches!(decode_packet(&raw), Err(CodecError::Malformed(_))));
        // level 5 with session-expiry property (0x11)
        raw = vec![
            0x10, 0x12, 0x00, 0x04, b'M', b'Q', b'T', b'T', 5, 0x02, 0x00, 0x3C, 0x05, 0x11, 0, 0, 0, 10, 0x00, 0x00,
        ];
        assert!(matches!(decode_packet(&raw), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn stream_decoder_handles_split_and_batched_input() {
        let a = encode_packet(&Packet::PingReq).unwrap();
        let b = encode_packet(&Packet::Publish(Publish::new("x/y", Bytes::from_static(b"hello")))).unwrap();
        let mut all = a.to_vec();
        all.extend_from_slice(&b);
        let mut dec = StreamDecoder::default();
        for byte in &all[..all.len() - 1] {
            dec.push(&[*byte]);
        }
        assert_eq!(dec.next_packet().unwrap(), Some(Packet::PingReq));
        assert_eq!(dec.next_packet().unwrap(), None);
        dec.push(&all[all.len() - 1..]);
        assert!(matches!(dec.next_packet().unwrap(), Some(Packet::Publish(_))));
        assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn stream_decoder_enforces_size_limit() {
        let b = encode_packet(&Packet::Publish(Publish::new("x", Bytes::from(vec![1u8; 100])))).unwrap();
        let mut dec = StreamDecoder::new(50);
        dec.push(&b[..3]);
        assert!(matches!(dec.next_packet(), Err(CodecError::ValueTooLarge { .. })));
    }
}
