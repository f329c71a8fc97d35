use bytes::Bytes;

/// Delivery guarantee carried in Publish and Subscribe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl QoS {
    pub fn from_u8(v: u8) -> Option<QoS> {
        match v {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            2 => Some(QoS::ExactlyOnce),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

/// CONNECT protocol level. V5 connects carry a property block restricted to
/// receive-maximum and maximum-packet-size; every other packet uses the
/// 3.1.1 layout regardless of level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolLevel {
    V311,
    V5,
}

impl ProtocolLevel {
    pub fn as_u8(self) -> u8 {
        match self {
            ProtocolLevel::V311 => 4,
            ProtocolLevel::V5 => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub protocol: ProtocolLevel,
    pub client_id: String,
    pub clean_session: bool,
    pub keep_alive: u16,
    pub username: Option<String>,
    pub password: Option<Bytes>,
    /// Only encoded for [`ProtocolLevel::V5`].
    pub receive_maximum: Option<u16>,
    /// Only encoded for [`ProtocolLevel::V5`].
    pub max_packet_size: Option<u32>,
}

/// CONNACK reason codes. Values follow MQTT 5; 3.1.1 peers get the closest
/// legacy return code via [`ConnAckCode::legacy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConnAckCode {
    Success,
    UnspecifiedError,
    MalformedPacket,
    UnsupportedProtocolVersion,
    ClientIdentifierNotValid,
    BadUsernameOrPassword,
    NotAuthorized,
    ServerUnavailable,
    Banned,
}

impl ConnAckCode {
    pub fn to_u8(self) -> u8 {
        match self {
            ConnAckCode::Success => 0x00,
            ConnAckCode::UnspecifiedError => 0x80,
            ConnAckCode::MalformedPacket => 0x81,
            ConnAckCode::UnsupportedProtocolVersion => 0x84,
            ConnAckCode::ClientIdentifierNotValid => 0x85,
            ConnAckCode::BadUsernameOrPassword => 0x86,
            ConnAckCode::NotAuthorized => 0x87,
            ConnAckCode::ServerUnavailable => 0x88,
            ConnAckCode::Banned => 0x8A,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0x00 => ConnAckCode::Success,
            0x80 => ConnAckCode::UnspecifiedError,
            0x81 => ConnAckCode::MalformedPacket,
            0x84 => ConnAckCode::UnsupportedProtocolVersion,
            0x85 => ConnAckCode::ClientIdentifierNotValid,
            0x86 => ConnAckCode::BadUsernameOrPassword,
            0x87 => ConnAckCode::NotAuthorized,
            0x88 => ConnAckCode::ServerUnavailable,
            0x8A => ConnAckCode::Banned,
            // 3.1.1 return codes
            0x01 => ConnAckCode::UnsupportedProtocolVersion,
            0x02 => ConnAckCode::ClientIdentifierNotValid,
            0x03 => ConnAckCode::ServerUnavailable,
            0x04 => ConnAckCode::BadUsernameOrPassword,
            0x05 => ConnAckCode::NotAuthorized,
            _ => return None,
        })
    }

    /// 3.1.1 return code for this reason.
    pub fn legacy(self) -> u8 {
        match self {
            ConnAckCode::Success => 0,
            ConnAckCode::UnsupportedProtocolVersion => 1,
            ConnAckCode::ClientIdentifierNotValid => 2,
            ConnAckCode::ServerUnavailable | ConnAckCode::UnspecifiedError | ConnAckCode::MalformedPacket => 3,
            ConnAckCode::BadUsernameOrPassword => 4,
            ConnAckCode::NotAuthorized | ConnAckCode::Banned => 5,
        }
    }

    pub fn is_success(self) -> bool {
        self == ConnAckCode::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnAck {
    pub session_present: bool,
    /// Raw return byte as it appears on the wire.
    pub code: u8,
}

impl ConnAck {
    pub fn reason(&self) -> Option<ConnAckCode> {
        ConnAckCode::from_u8(self.code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    /// Present iff `qos` is at least 1.
    pub packet_id: Option<u16>,
    pub payload: Bytes,
}

impl Publish {
    pub fn new(topic: impl Into<String>, payload: impl Into<Bytes>) -> Self {
        Publish {
            dup: false,
            qos: QoS::AtMostOnce,
            retain: false,
            topic: topic.into(),
            packet_id: None,
            payload: payload.into(),
        }
    }
}

/// Per-filter SUBACK result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubAckCode {
    Granted(QoS),
    /// 0x80
    Failure,
    /// 0x87, sent to V5 peers instead of the generic failure.
    NotAuthorized,
}

impl SubAckCode {
    pub fn to_u8(self) -> u8 {
        match self {
            SubAckCode::Granted(q) => q.as_u8(),
            SubAckCode::Failure => 0x80,
            SubAckCode::NotAuthorized => 0x87,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0..=2 => QoS::from_u8(v).map(SubAckCode::Granted),
            0x80 => Some(SubAckCode::Failure),
            0x87 => Some(SubAckCode::NotAuthorized),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnsubAckCode {
    Success,
    NoSubscriptionExisted,
    NotAuthorized,
}

impl UnsubAckCode {
    pub fn to_u8(self) -> u8 {
        match self {
            UnsubAckCode::Success => 0x00,
            UnsubAckCode::NoSubscriptionExisted => 0x11,
            UnsubAckCode::NotAuthorized => 0x87,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0x00 => Some(UnsubAckCode::Success),
            0x11 => Some(UnsubAckCode::NoSubscriptionExisted),
            0x87 => Some(UnsubAckCode::NotAuthorized),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    pub filters: Vec<(String, QoS)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubAck {
    pub packet_id: u16,
    pub codes: Vec<SubAckCode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unsubscribe {
    pub packet_id: u16,
    pub filters: Vec<String>,
}

/// `codes` is empty for 3.1.1 peers, whose UNSUBACK has no payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnsubAck {
    pub packet_id: u16,
    pub codes: Vec<UnsubAckCode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck(ConnAck),
    Publish(Publish),
    PubAck(u16),
    PubRec(u16),
    PubRel(u16),
    PubComp(u16),
    Subscribe(Subscribe),
    SubAck(SubAck),
    Unsubscribe(Unsubscribe),
    UnsubAck(UnsubAck),
    PingReq,
    PingResp,
    Disconnect,
}

impl Packet {
    pub fn type_code(&self) -> u8 {
        match self {
            Packet::Connect(_) => 1,
            Packet::ConnAck(_) => 2,
            Packet::Publish(_) => 3,
            Packet::PubAck(_) => 4,
            Packet::PubRec(_) => 5,
            Packet::PubRel(_) => 6,
            Packet::PubComp(_) => 7,
            Packet::Subscribe(_) => 8,
            Packet::SubAck(_) => 9,
            Packet::Unsubscribe(_) => 10,
            Packet::UnsubAck(_) => 11,
            Packet::PingReq => 12,
            Packet::PingResp => 13,
            Packet::Disconnect => 14,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Packet::Connect(_) => "CONNECT",
            Packet::ConnAck(_) => "CONNACK",
            Packet::Publish(_) => "PUBLISH",
            Packet::PubAck(_) => "PUBACK",
            Packet::PubRec(_) => "PUBREC",
            Packet::PubRel(_) => "PUBREL",
            Packet::PubComp(_) => "PUBCOMP",
            Packet::Subscribe(_) => "SUBSCRIBE",
            Packet::SubAck(_) => "SUBACK",
            Packet::Unsubscribe(_) => "UNSUBSCRIBE",
            Packet::UnsubAck(_) => "UNSUBACK",
            Packet::PingReq => "PINGREQ",
            Packet::PingResp => "PINGRESP",
            Packet::Disconnect => "DISCONNECT",
        }
    }
}
