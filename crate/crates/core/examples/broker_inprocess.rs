//! Drives the sans-IO broker core directly: authentication, per-filter
//! SUBACK codes, fan-out, and the disconnect on an unauthorized publish.

use std::sync::Arc;
use std::time::Duration;

use fedmq::broker::{BrokerConfig, BrokerCore, BrokerOutput, ConnectionId, CredentialStore, Metrics};
use fedmq::codec::{Connect, Packet, ProtocolLevel, Publish, QoS, Subscribe};
use fedmq::topic::{canonical_client_acl, canonical_ps_acl, Identifier};

fn connect(id: &str, secret: &str) -> Packet {
    Packet::Connect(Connect {
        protocol: ProtocolLevel::V311,
        client_id: id.into(),
        clean_session: true,
        keep_alive: 0,
        username: Some(id.into()),
        password: Some(secret.as_bytes().to_vec().into()),
        receive_maximum: None,
        max_packet_size: None,
    })
}

fn show(label: &str, out: Vec<BrokerOutput>) {
    for o in out {
        match o {
            BrokerOutput::Send(c, Packet::Publish(p)) => {
                println!("{label}: deliver to {c}: {} {:?}", p.topic, p.payload)
            }
            BrokerOutput::Send(c, p) => println!("{label}: send to {c}: {p:?}"),
            BrokerOutput::Close(c, why) => println!("{label}: close {c}: {why:?}"),
        }
    }
}

fn main() {
    let id = |s: &str| Identifier::new(s).unwrap();
    let pairs = [(id("f"), id("c"))];
    let mut creds = CredentialStore::new();
    let ps_secret = creds.enroll(id("ps"), "ps", canonical_ps_acl(&pairs), 1).unwrap();
    let mut secrets = Vec::new();
    for name in ["clinic_a", "clinic_b"] {
        secrets.push(
            creds
                .enroll(id(name), name, canonical_client_acl(&id(name), &pairs), 1)
                .unwrap(),
        );
    }
    let mut broker = BrokerCore::new(BrokerConfig::default(), creds, Arc::new(Metrics::default()));
    let t = Duration::ZERO;
    let (ps, a, b, eve) = (ConnectionId(1), ConnectionId(2), ConnectionId(3), ConnectionId(4));

    show("ps", broker.handle_packet(ps, connect("ps", &ps_secret), t));
    show("a", broker.handle_packet(a, connect("clinic_a", &secrets[0]), t));
    show("b", broker.handle_packet(b, connect("clinic_b", &secrets[1]), t));
    show("eve", broker.handle_packet(eve, connect("clinic_b", "guess"), t));

    let sub = |id, filters: &[&str]| {
        Packet::Subscribe(Subscribe {
            packet_id: id,
            filters: filters.iter().map(|f| (f.to_string(), QoS::AtMostOnce)).collect(),
        })
    };
    show(
        "a",
        broker.handle_packet(a, sub(1, &["f/c/job_request", "f/c/model_reply/clinic_b"]), t),
    );
    show("b", broker.handle_packet(b, sub(1, &["f/c/job_request"]), t));
    show("ps", broker.handle_packet(ps, sub(1, &["f/c/job_replies/#"]), t));

    show(
        "ps",
        broker.handle_packet(
            ps,
            Packet::Publish(Publish::new("f/c/job_request", &b"template"[..])),
            t,
        ),
    );
    show(
        "a",
        broker.handle_packet(
            a,
            Packet::Publish(Publish::new("f/c/job_replies/clinic_a", &b"update"[..])),
            t,
        ),
    );
    show(
        "a",
        broker.handle_packet(
            a,
            Packet::Publish(Publish::new("f/c/job_replies/clinic_b", &b"forged"[..])),
            t,
        ),
    );
    println!("sessions left: {}", broker.session_count());
}
