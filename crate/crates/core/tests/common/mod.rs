#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use proptest::prelude::*;

use fedmq::broker::{BrokerConfig, BrokerCore, CredentialStore, Metrics};
use fedmq::codec::{
    ConnAck, Connect, Packet, ProtocolLevel, Publish, QoS, SubAck, SubAckCode, Subscribe, UnsubAck, UnsubAckCode,
    Unsubscribe,
};
use fedmq::topic::{canonical_client_acl, canonical_ps_acl, Identifier};

pub fn id(s: &str) -> Identifier {
    Identifier::new(s).unwrap()
}

pub fn qos() -> impl Strategy<Value = QoS> {
    prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce), Just(QoS::ExactlyOnce)]
}

fn text() -> impl Strategy<Value = String> {
    "[^\u{0}]{0,12}"
}

fn topic_name() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_/ é-]{1,24}"
}

fn packet_id() -> impl Strategy<Value = u16> {
    1u16..
}

pub fn publish() -> impl Strategy<Value = Publish> {
    (
        any::<bool>(),
        qos(),
        any::<bool>(),
        topic_name(),
        packet_id(),
        prop::collection::vec(any::<u8>(), 0..64),
    )
        .prop_map(|(dup, qos, retain, topic, pid, payload)| Publish {
            dup: dup && qos != QoS::AtMostOnce,
            qos,
            retain,
            topic,
            packet_id: (qos != QoS::AtMostOnce).then_some(pid),
            payload: Bytes::from(payload),
        })
}

fn connect() -> impl Strategy<Value = Connect> {
    (
        any::<bool>(),
        text(),
        any::<bool>(),
        any::<u16>(),
        prop::option::of(text()),
        prop::option::of(prop::collection::vec(any::<u8>(), 0..32)),
        prop::option::of(1u16..),
        prop::option::of(1u32..=268_435_455),
    )
        .prop_map(
            |(v5, client_id, clean_session, keep_alive, username, password, rm, mps)| Connect {
                protocol: if v5 { ProtocolLevel::V5 } else { ProtocolLevel::V311 },
                client_id,
                clean_session,
                keep_alive,
                username,
                password: password.map(Bytes::from),
                receive_maximum: rm.filter(|_| v5),
                max_packet_size: mps.filter(|_| v5),
            },
        )
}

fn suback_code() -> impl Strategy<Value = SubAckCode> {
    prop_oneof![
        qos().prop_map(SubAckCode::Granted),
        Just(SubAckCode::Failure),
        Just(SubAckCode::NotAuthorized)
    ]
}

fn unsuback_code() -> impl Strategy<Value = UnsubAckCode> {
    prop_oneof![
        Just(UnsubAckCode::Success),
        Just(UnsubAckCode::NoSubscriptionExisted),
        Just(UnsubAckCode::NotAuthorized)
    ]
}

/// Any packet the codec accepts.
pub fn packet() -> impl Strategy<Value = Packet> {
    prop_oneof![
        connect().prop_map(Packet::Connect),
        (any::<bool>(), any::<u8>()).prop_map(|(s, code)| Packet::ConnAck(ConnAck {
            session_present: s,
            code
        })),
        publish().prop_map(Packet::Publish),
        packet_id().prop_map(Packet::PubAck),
        packet_id().prop_map(Packet::PubRec),
        packet_id().prop_map(Packet::PubRel),
        packet_id().prop_map(Packet::PubComp),
        (packet_id(), prop::collection::vec((text(), qos()), 1..5))
            .prop_map(|(packet_id, filters)| Packet::Subscribe(Subscribe { packet_id, filters })),
        (packet_id(), prop::collection::vec(suback_code(), 1..5))
            .prop_map(|(packet_id, codes)| Packet::SubAck(SubAck { packet_id, codes })),
        (packet_id(), prop::collection::vec(text(), 1..5))
            .prop_map(|(packet_id, filters)| Packet::Unsubscribe(Unsubscribe { packet_id, filters })),
        (packet_id(), prop::collection::vec(unsuback_code(), 0..5))
            .prop_map(|(packet_id, codes)| Packet::UnsubAck(UnsubAck { packet_id, codes })),
        Just(Packet::PingReq),
        Just(Packet::PingResp),
        Just(Packet::Disconnect),
    ]
}

pub fn connect_packet(client: &str, secret: &str, receive_maximum: Option<u16>) -> Packet {
    Packet::Connect(Connect {
        protocol: if receive_maximum.is_some() {
            ProtocolLevel::V5
        } else {
            ProtocolLevel::V311
        },
        client_id: client.into(),
        clean_session: true,
        keep_alive: 0,
        username: Some(client.into()),
        password: Some(Bytes::copy_from_slice(secret.as_bytes())),
        receive_maximum,
        max_packet_size: None,
    })
}

/// Credentials for a PS named `ps` and the given clients on federation
/// `f/c`, with the secret of each in enrollment order (PS first).
pub fn federation_credentials(clients: &[&str]) -> (CredentialStore, Vec<String>) {
    let pairs = [(id("f"), id("c"))];
    let mut creds = CredentialStore::new();
    let mut secrets = vec![creds.enroll(id("ps"), "ps", canonical_ps_acl(&pairs), 1).unwrap()];
    for c in clients {
        secrets.push(creds.enroll(id(c), c, canonical_client_acl(&id(c), &pairs), 1).unwrap());
    }
    (creds, secrets)
}

pub fn core_with(clients: &[&str], config: BrokerConfig) -> (BrokerCore, Vec<String>) {
    let (creds, secrets) = federation_credentials(clients);
    (BrokerCore::new(config, creds, Arc::new(Metrics::default())), secrets)
}

pub const T0: Duration = Duration::ZERO;
