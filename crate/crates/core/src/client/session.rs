use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use bytes::Bytes;
use tracing::debug;

use crate::codec::{
    ConnAck, Connect, Packet, ProtocolLevel, Publish, QoS, SubAckCode, Subscribe, UnsubAckCode, Unsubscribe,
};

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub client_id: String,
    pub username: String,
    pub secret: String,
    pub keep_alive: u16,
    pub receive_maximum: Option<u16>,
    pub max_packet_size: Option<u32>,
    pub retry_interval: Duration,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>, username: impl Into<String>, secret: impl Into<String>) -> Self {
        ClientOptions {
            client_id: client_id.into(),
            username: username.into(),
            secret: secret.into(),
            keep_alive: 30,
            receive_maximum: None,
            max_packet_size: None,
            retry_interval: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    Connected,
    Refused(u8),
    /// An application message. QoS 2 messages appear exactly once, QoS 1
    /// messages may repeat.
    Message(Publish),
    SubAck {
        packet_id: u16,
        codes: Vec<SubAckCode>,
    },
    UnsubAck {
        packet_id: u16,
        codes: Vec<UnsubAckCode>,
    },
    /// Our QoS 1/2 publish completed its handshake.
    Published {
        packet_id: u16,
    },
    PingResp,
    Disconnected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pending {
    PubAck,
    PubRec,
    PubComp,
    SubAck,
    UnsubAck,
}

#[derive(Debug)]
struct Outgoing {
    packet: Packet,
    awaiting: Pending,
    last_sent: Duration,
}

/// Client protocol state without I/O.
#[derive(Debug)]
pub struct ClientSession {
    opts: ClientOptions,
    connected: bool,
    next_packet_id: u16,
    outbound: BTreeMap<u16, Outgoing>,
    inbound_qos2: HashSet<u16>,
    last_sent: Duration,
    ping_sent: Option<Duration>,
}

impl ClientSession {
    pub fn new(opts: ClientOptions) -> Self {
        ClientSession {
            opts,
            connected: false,
            next_packet_id: 0,
            outbound: BTreeMap::new(),
            inbound_qos2: HashSet::new(),
            last_sent: Duration::ZERO,
            ping_sent: None,
        }
    }

    pub fn options(&self) -> &ClientOptions {
        &self.opts
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn inflight(&self) -> usize {
        self.outbound.len()
    }

    pub fn connect(&mut self, now: Duration) -> Packet {
        self.last_sent = now;
        Packet::Connect(Connect {
            protocol: ProtocolLevel::V5,
            client_id: self.opts.client_id.clone(),
            clean_session: true,
            keep_alive: self.opts.keep_alive,
            username: Some(self.opts.username.clone()),
            password: Some(Bytes::from(self.opts.secret.clone().into_bytes())),
            receive_maximum: self.opts.receive_maximum,
            max_packet_size: self.opts.max_packet_size,
        })
    }

    fn allocate(&mut self) -> u16 {
        loop {
            self.next_packet_id = self.next_packet_id.wrapping_add(1).max(1);
            if !self.outbound.contains_key(&self.next_packet_id) {
                return self.next_packet_id;
            }
        }
    }

    fn track(&mut self, id: u16, packet: Packet, awaiting: Pending, now: Duration) -> Packet {
        self.last_sent = now;
        self.outbound.insert(
            id,
            Outgoing {
                packet: packet.clone(),
                awaiting,
                last_sent: now,
            },
        );
        packet
    }

    pub fn publish(
        &mut self,
        topic: &str,
        payload: Bytes,
        qos: QoS,
        retain: bool,
        now: Duration,
    ) -> (Option<u16>, Packet) {
        let mut p = Publish {
            qos,
            retain,
            ..Publish::new(topic, payload)
        };
        if qos == QoS::AtMostOnce {
            self.last_sent = now;
            return (None, Packet::Publish(p));
        }
        let id = self.allocate();
        p.packet_id = Some(id);
        let awaiting = if qos == QoS::AtLeastOnce {
            Pending::PubAck
        } else {
            Pending::PubRec
        };
        (Some(id), self.track(id, Packet::Publish(p), awaiting, now))
    }

    pub fn subscribe(&mut self, filters: Vec<(String, QoS)>, now: Duration) -> (u16, Packet) {
        let id = self.allocate();
        let packet = Packet::Subscribe(Subscribe { packet_id: id, filters });
        (id, self.track(id, packet, Pending::SubAck, now))
    }

    pub fn unsubscribe(&mut self, filters: Vec<String>, now: Duration) -> (u16, Packet) {
        let id = self.allocate();
        let packet = Packet::Unsubscribe(Unsubscribe { packet_id: id, filters });
        (id, self.track(id, packet, Pending::UnsubAck, now))
    }

    pub fn ping(&mut self, now: Duration) -> Packet {
        self.last_sent = now;
        self.ping_sent.get_or_insert(now);
        Packet::PingReq
    }

    /// Processes one inbound packet. Returns packets to send and events for
    /// the application.
    pub fn handle(&mut self, packet: Packet, now: Duration) -> (Vec<Packet>, Vec<ClientEvent>) {
        let mut send = Vec::new();
        let mut events = Vec::new();
        match packet {
            Packet::ConnAck(ConnAck { code, .. }) => {
                if code == 0 {
                    self.connected = true;
                    events.push(ClientEvent::Connected);
                } else {
                    events.push(ClientEvent::Refused(code));
                }
            }
            Packet::Publish(p) => match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, _) => events.push(ClientEvent::Message(p)),
                (QoS::AtLeastOnce, Some(id)) => {
                    send.push(Packet::PubAck(id));
                    events.push(ClientEvent::Message(p));
                }
                (QoS::ExactlyOnce, Some(id)) => {
                    send.push(Packet::PubRec(id));
                    if self.inbound_qos2.insert(id) {
                        events.push(ClientEvent::Message(p));
                    }
                }
                _ => events.push(ClientEvent::Disconnected("publish without packet id".into())),
            },
            Packet::PubRel(id) => {
                self.inbound_qos2.remove(&id);
                send.push(Packet::PubComp(id));
            }
            Packet::PubAck(id) => self.complete(id, Pending::PubAck, &mut events),
            Packet::PubComp(id) => self.complete(id, Pending::PubComp, &mut events),
            Packet::PubRec(id) => match self.outbound.get_mut(&id) {
                Some(o) if matches!(o.awaiting, Pending::PubRec | Pending::PubComp) => {
                    o.awaiting = Pending::PubComp;
                    o.packet = Packet::PubRel(id);
                    o.last_sent = now;
                    send.push(Packet::PubRel(id));
                }
                _ => debug!(id, "PubRec for unknown packet id"),
            },
            Packet::SubAck(a) => {
                if self
                    .outbound
                    .get(&a.packet_id)
                    .is_some_and(|o| o.awaiting == Pending::SubAck)
                {
                    self.outbound.remove(&a.packet_id);
                    events.push(ClientEvent::SubAck {
                        packet_id: a.packet_id,
                        codes: a.codes,
                    });
                }
            }
            Packet::UnsubAck(a) => {
                if self
                    .outbound
                    .get(&a.packet_id)
                    .is_some_and(|o| o.awaiting == Pending::UnsubAck)
                {
                    self.outbound.remove(&a.packet_id);
                    events.push(ClientEvent::UnsubAck {
                        packet_id: a.packet_id,
                        codes: a.codes,
                    });
                }
            }
            Packet::PingResp => {
                self.ping_sent = None;
                events.push(ClientEvent::PingResp);
            }
            other => events.push(ClientEvent::Disconnected(format!(
                "unexpected {} from broker",
                other.name()
            ))),
        }
        if !send.is_empty() {
            self.last_sent = now;
        }
        (send, events)
    }

    fn complete(&mut self, id: u16, expected: Pending, events: &mut Vec<ClientEvent>) {
        if self.outbound.get(&id).is_some_and(|o| o.awaiting == expected) {
            self.outbound.remove(&id);
            events.push(ClientEvent::Published { packet_id: id });
        } else {
            debug!(id, "acknowledgement for unknown packet id");
        }
    }

    /// Retransmissions and keep-alive pings due at `now`. Returns `Err` if
    /// the broker stopped answering pings.
    pub fn tick(&mut self, now: Duration) -> Result<Vec<Packet>, String> {
        let keep_alive = Duration::from_secs(self.opts.keep_alive.into());
        if let Some(sent) = self.ping_sent {
            if !keep_alive.is_zero() && now.saturating_sub(sent) > keep_alive {
                return Err("no ping response within keep-alive".into());
            }
        }
        let mut send = Vec::new();
        for o in self.outbound.values_mut() {
            if now.saturating_sub(o.last_sent) < self.opts.retry_interval {
                continue;
            }
            o.last_sent = now;
            if let Packet::Publish(p) = &mut o.packet {
                p.dup = true;
            }
            send.push(o.packet.clone());
        }
        if !send.is_empty() {
            self.last_sent = now;
        }
        if !keep_alive.is_zero() && self.ping_sent.is_none() && now.saturating_sub(self.last_sent) >= keep_alive {
            send.push(self.ping(now));
        }
        Ok(send)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session() -> ClientSession {
        let mut s = ClientSession::new(ClientOptions {
            retry_interval: Duration::from_secs(1),
            keep_alive: 10,
            ..ClientOptions::new("clientA", "clientA", "pw")
        });
        s.handle(
            Packet::ConnAck(ConnAck {
                session_present: false,
                code: 0,
            }),
            Duration::ZERO,
        );
        s
    }

    #[test]
    fn qos2_receive_is_deduped() {
        let mut s = session();
        let p = Publish {
            qos: QoS::ExactlyOnce,
            packet_id: Some(3),
            ..Publish::new("t", &b"x"[..])
        };
        let (send, ev) = s.handle(Packet::Publish(p.clone()), Duration::ZERO);
        assert_eq!(send, vec![Packet::PubRec(3)]);
        assert_eq!(ev.len(), 1);
        let (send, ev) = s.handle(Packet::Publish(Publish { dup: true, ..p.clone() }), Duration::ZERO);
        assert_eq!(send, vec![Packet::PubRec(3)]);
        assert!(ev.is_empty());
        assert_eq!(s.handle(Packet::PubRel(3), Duration::ZERO).0, vec![Packet::PubComp(3)]);
        assert_eq!(s.handle(Packet::Publish(p), Duration::ZERO).1.len(), 1);
    }

    #[test]
    fn qos2_send_handshake_and_retry() {
        let mut s = session();
        let (id, _) = s.publish("t", Bytes::from_static(b"x"), QoS::ExactlyOnce, false, Duration::ZERO);
        let id = id.unwrap();
        let resend = s.tick(Duration::from_secs(2)).unwrap();
        assert!(matches!(&resend[0], Packet::Publish(p) if p.dup));
        let (send, _) = s.handle(Packet::PubRec(id), Duration::from_secs(2));
        assert_eq!(send, vec![Packet::PubRel(id)]);
        assert_eq!(s.tick(Duration::from_secs(4)).unwrap(), vec![Packet::PubRel(id)]);
        let (_, ev) = s.handle(Packet::PubComp(id), Duration::from_secs(4));
        assert_eq!(ev, vec![ClientEvent::Published { packet_id: id }]);
        assert_eq!(s.inflight(), 0);
    }

    #[test]
    fn keepalive_ping_and_expiry() {
        let mut s = session();
        assert!(s.tick(Duration::from_secs(5)).unwrap().is_empty());
        assert_eq!(s.tick(Duration::from_secs(10)).unwrap(), vec![Packet::PingReq]);
        assert!(s.tick(Duration::from_secs(15)).unwrap().is_empty());
        assert!(s.tick(Duration::from_secs(21)).is_err());
    }
}
