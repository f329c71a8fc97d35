use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use tracing::{debug, info, warn};

use super::auth::{AuthOutcome, CredentialStore};
use super::metrics::Metrics;
use super::trie::SubscriptionTrie;
use crate::codec::{
    ConnAck, ConnAckCode, Connect, Packet, ProtocolLevel, Publish, QoS, SubAck, SubAckCode, Subscribe, UnsubAck,
    UnsubAckCode, Unsubscribe, MAX_REMAINING_LENGTH,
};
use crate::topic::{authorize, authorize_filter, AclRule, Action, Channel, Identifier, TopicFilter, TopicPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnectionId(pub u64);

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conn#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloseReason {
    AuthFailed,
    NotAuthorized,
    Protocol(String),
    SessionTakenOver,
    KeepAliveTimeout,
    ClientDisconnect,
    CredentialsRevoked,
    SlowConsumer,
    Shutdown,
}

impl fmt::Display for CloseReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CloseReason::AuthFailed => f.write_str("authentication failed"),
            CloseReason::NotAuthorized => f.write_str("not authorized"),
            CloseReason::Protocol(m) => write!(f, "protocol error: {m}"),
            CloseReason::SessionTakenOver => f.write_str("session taken over"),
            CloseReason::KeepAliveTimeout => f.write_str("keep-alive timeout"),
            CloseReason::ClientDisconnect => f.write_str("client disconnected"),
            CloseReason::CredentialsRevoked => f.write_str("credentials revoked"),
            CloseReason::SlowConsumer => f.write_str("slow consumer"),
            CloseReason::Shutdown => f.write_str("broker shutdown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerOutput {
    Send(ConnectionId, Packet),
    /// The core has already forgotten the connection; the transport should
    /// flush pending writes and close it.
    Close(ConnectionId, CloseReason),
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub max_qos: QoS,
    pub max_queue_per_client: usize,
    /// Largest inbound packet accepted, framing included.
    pub max_packet_size: usize,
    /// Inflight window used for peers that do not announce one.
    pub default_receive_maximum: u16,
    pub retry_interval: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            max_qos: QoS::ExactlyOnce,
            max_queue_per_client: 1000,
            max_packet_size: MAX_REMAINING_LENGTH + 5,
            default_receive_maximum: 32,
            retry_interval: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutState {
    AwaitPubAck,
    AwaitPubRec,
    AwaitPubComp,
}

#[derive(Debug)]
struct Inflight {
    publish: Publish,
    state: OutState,
    last_sent: Duration,
}

#[derive(Debug)]
struct Session {
    client_id: Identifier,
    protocol: ProtocolLevel,
    acl: Vec<AclRule>,
    keep_alive: Duration,
    last_seen: Duration,
    receive_maximum: usize,
    max_packet_size: usize,
    subscriptions: HashMap<String, (TopicFilter, QoS)>,
    next_packet_id: u16,
    outbound: BTreeMap<u16, Inflight>,
    queue: VecDeque<Publish>,
    queued_bytes: usize,
    inbound_qos2: HashSet<u16>,
}

impl Session {
    fn allocate_packet_id(&mut self) -> u16 {
        loop {
            self.next_packet_id = self.next_packet_id.wrapping_add(1).max(1);
            if !self.outbound.contains_key(&self.next_packet_id) {
                return self.next_packet_id;
            }
        }
    }
}

fn publish_size(p: &Publish) -> usize {
    let remaining = 2 + p.topic.len() + if p.qos == QoS::AtMostOnce { 0 } else { 2 } + p.payload.len();
    let varint = match remaining {
        0..=127 => 1,
        128..=16_383 => 2,
        16_384..=2_097_151 => 3,
        _ => 4,
    };
    1 + varint + remaining
}

/// Sans-IO broker: all session state lives here and is driven by decoded
/// packets and clock ticks. The caller owns sockets and time.
pub struct BrokerCore {
    config: BrokerConfig,
    credentials: CredentialStore,
    metrics: Arc<Metrics>,
    trie: SubscriptionTrie<ConnectionId>,
    sessions: BTreeMap<ConnectionId, Session>,
    by_client: HashMap<Identifier, ConnectionId>,
    retained: BTreeMap<String, (Bytes, QoS)>,
}

impl BrokerCore {
    pub fn new(config: BrokerConfig, credentials: CredentialStore, metrics: Arc<Metrics>) -> Self {
        BrokerCore {
            config,
            credentials,
            metrics,
            trie: SubscriptionTrie::new(),
            sessions: BTreeMap::new(),
            by_client: HashMap::new(),
            retained: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub fn credentials(&self) -> &CredentialStore {
        &self.credentials
    }

    pub fn credentials_mut(&mut self) -> &mut CredentialStore {
        &mut self.credentials
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_connected(&self, conn: ConnectionId) -> bool {
        self.sessions.contains_key(&conn)
    }

    pub fn client_of(&self, conn: ConnectionId) -> Option<&Identifier> {
        self.sessions.get(&conn).map(|s| &s.client_id)
    }

    pub fn connection_of(&self, client: &Identifier) -> Option<ConnectionId> {
        self.by_client.get(client).copied()
    }

    pub fn queued_bytes(&self, conn: ConnectionId) -> usize {
        self.sessions.get(&conn).map_or(0, |s| s.queued_bytes)
    }

    pub fn queue_len(&self, conn: ConnectionId) -> usize {
        self.sessions.get(&conn).map_or(0, |s| s.queue.len())
    }

    pub fn inflight_len(&self, conn: ConnectionId) -> usize {
        self.sessions.get(&conn).map_or(0, |s| s.outbound.len())
    }

    /// Upper bound on queued bytes for any one session.
    pub fn queue_byte_bound(&self) -> usize {
        self.config.max_queue_per_client * self.config.max_packet_size
    }

    /// Outstanding QoS handshakes across all sessions, in both directions.
    pub fn pending_handshakes(&self) -> usize {
        self.sessions
            .values()
            .map(|s| s.outbound.len() + s.inbound_qos2.len())
            .sum()
    }

    pub fn retained_topics(&self) -> impl Iterator<Item = &str> {
        self.retained.keys().map(String::as_str)
    }

    pub fn handle_packet(&mut self, conn: ConnectionId, packet: Packet, now: Duration) -> Vec<BrokerOutput> {
        let mut out = Vec::new();
        if let Packet::Connect(c) = packet {
            if self.sessions.contains_key(&conn) {
                self.protocol_close(conn, "second CONNECT on one connection", &mut out);
            } else {
                self.handle_connect(conn, c, now, &mut out);
            }
            return out;
        }
        let Some(session) = self.sessions.get_mut(&conn) else {
            // nothing is processed before a successful CONNACK
            Metrics::incr(&self.metrics.protocol_errors);
            out.push(BrokerOutput::Close(
                conn,
                CloseReason::Protocol(format!("{} before CONNECT", packet.name())),
            ));
            return out;
        };
        session.last_seen = now;
        match packet {
            Packet::Publish(p) => self.handle_publish(conn, p, now, &mut out),
            Packet::PubAck(id) => self.handle_ack(conn, id, OutState::AwaitPubAck, now, &mut out),
            Packet::PubRec(id) => self.handle_ack(conn, id, OutState::AwaitPubRec, now, &mut out),
            Packet::PubComp(id) => self.handle_ack(conn, id, OutState::AwaitPubComp, now, &mut out),
            Packet::PubRel(id) => {
                session.inbound_qos2.remove(&id);
                out.push(BrokerOutput::Send(conn, Packet::PubComp(id)));
            }
            Packet::Subscribe(s) => self.handle_subscribe(conn, s, now, &mut out),
            Packet::Unsubscribe(u) => self.handle_unsubscribe(conn, u, &mut out),
            Packet::PingReq => out.push(BrokerOutput::Send(conn, Packet::PingResp)),
            Packet::Disconnect => {
                self.drop_session(conn);
                out.push(BrokerOutput::Close(conn, CloseReason::ClientDisconnect));
            }
            other => {
                let msg = format!("unexpected {} from client", other.name());
                self.protocol_close(conn, &msg, &mut out);
            }
        }
        out
    }

    /// Transport-level loss of a connection.
    pub fn connection_lost(&mut self, conn: ConnectionId) -> bool {
        self.drop_session(conn)
    }

    /// Retransmits overdue QoS handshakes, enforces keep-alive and applies
    /// credential file changes.
    pub fn tick(&mut self, now: Duration) -> Vec<BrokerOutput> {
        let mut out = Vec::new();
        match self.credentials.reload_if_changed() {
            Ok(true) => self.apply_credential_changes(&mut out),
            Ok(false) => {}
            Err(e) => warn!(error = %e, "credential reload failed, keeping previous contents"),
        }
        let retry = self.config.retry_interval;
        let mut expired = Vec::new();
        for (&conn, s) in &mut self.sessions {
            if !s.keep_alive.is_zero() && now.saturating_sub(s.last_seen) > s.keep_alive.mul_f64(1.5) {
                expired.push(conn);
                continue;
            }
            for (&id, inflight) in &mut s.outbound {
                if now.saturating_sub(inflight.last_sent) < retry {
                    continue;
                }
                inflight.last_sent = now;
                Metrics::incr(&self.metrics.retransmissions);
                let packet = match inflight.state {
                    OutState::AwaitPubComp => Packet::PubRel(id),
                    _ => {
                        inflight.publish.dup = true;
                        Packet::Publish(inflight.publish.clone())
                    }
                };
                out.push(BrokerOutput::Send(conn, packet));
            }
        }
        for conn in expired {
            Metrics::incr(&self.metrics.keepalive_timeouts);
            self.drop_session(conn);
            out.push(BrokerOutput::Close(conn, CloseReason::KeepAliveTimeout));
        }
        out
    }

    /// Closes every session.
    pub fn shutdown(&mut self) -> Vec<BrokerOutput> {
        let conns: Vec<ConnectionId> = self.sessions.keys().copied().collect();
        conns
            .into_iter()
            .map(|c| {
                self.drop_session(c);
                BrokerOutput::Close(c, CloseReason::Shutdown)
            })
            .collect()
    }

    /// Closes a session on behalf of the transport, e.g. a stalled writer.
    pub fn evict(&mut self, conn: ConnectionId, reason: CloseReason) -> Vec<BrokerOutput> {
        if self.drop_session(conn) {
            vec![BrokerOutput::Close(conn, reason)]
        } else {
            Vec::new()
        }
    }

    fn apply_credential_changes(&mut self, out: &mut Vec<BrokerOutput>) {
        let mut revoked = Vec::new();
        for (&conn, s) in &mut self.sessions {
            match self.credentials.get(&s.client_id) {
                Some(rec) if rec.enabled => s.acl = rec.acl.clone(),
                _ => revoked.push(conn),
            }
        }
        for conn in revoked {
            info!(%conn, "credentials revoked, closing session");
            self.drop_session(conn);
            out.push(BrokerOutput::Close(conn, CloseReason::CredentialsRevoked));
        }
    }

    fn handle_connect(&mut self, conn: ConnectionId, c: Connect, now: Duration, out: &mut Vec<BrokerOutput>) {
        let refuse = |code: ConnAckCode, out: &mut Vec<BrokerOutput>, reason: CloseReason| {
            let code = match c.protocol {
                ProtocolLevel::V5 => code.to_u8(),
                ProtocolLevel::V311 => code.legacy(),
            };
            out.push(BrokerOutput::Send(
                conn,
                Packet::ConnAck(ConnAck {
                    session_present: false,
                    code,
                }),
            ));
            out.push(BrokerOutput::Close(conn, reason));
        };
        let Ok(client_id) = Identifier::new(c.client_id.clone()) else {
            Metrics::incr(&self.metrics.auth_failures);
            refuse(ConnAckCode::ClientIdentifierNotValid, out, CloseReason::AuthFailed);
            return;
        };
        if let Err(e) = self.credentials.reload_if_changed() {
            warn!(error = %e, "credential reload failed, keeping previous contents");
        }
        let username = c.username.as_deref().unwrap_or("");
        let secret = c.password.as_deref().unwrap_or(&[]);
        let (outcome, acl) = self.credentials.authenticate(client_id.as_str(), username, secret);
        let acl = acl.map(<[AclRule]>::to_vec);
        match outcome {
            AuthOutcome::Accepted => {}
            AuthOutcome::BadCredentials => {
                Metrics::incr(&self.metrics.auth_failures);
                info!(%conn, client = %client_id, "rejected credentials");
                refuse(ConnAckCode::NotAuthorized, out, CloseReason::AuthFailed);
                return;
            }
            AuthOutcome::Disabled => {
                Metrics::incr(&self.metrics.auth_failures);
                info!(%conn, client = %client_id, "disabled client refused");
                refuse(ConnAckCode::Banned, out, CloseReason::AuthFailed);
                return;
            }
        }
        if let Some(old) = self.by_client.get(&client_id).copied() {
            info!(client = %client_id, %old, new = %conn, "session takeover");
            Metrics::incr(&self.metrics.sessions_taken_over);
            self.drop_session(old);
            out.push(BrokerOutput::Close(old, CloseReason::SessionTakenOver));
        }
        let receive_maximum = match c.receive_maximum {
            Some(0) | None => self.config.default_receive_maximum,
            Some(n) => n,
        };
        let session = Session {
            client_id: client_id.clone(),
            protocol: c.protocol,
            acl: acl.unwrap_or_default(),
            keep_alive: Duration::from_secs(c.keep_alive.into()),
            last_seen: now,
            receive_maximum: receive_maximum.into(),
            max_packet_size: c.max_packet_size.map_or(usize::MAX, |n| n as usize),
            subscriptions: HashMap::new(),
            next_packet_id: 0,
            outbound: BTreeMap::new(),
            queue: VecDeque::new(),
            queued_bytes: 0,
            inbound_qos2: HashSet::new(),
        };
        self.sessions.insert(conn, session);
        self.by_client.insert(client_id.clone(), conn);
        Metrics::incr(&self.metrics.connections_accepted);
        Metrics::incr(&self.metrics.connections_active);
        debug!(%conn, client = %client_id, "connected");
        out.push(BrokerOutput::Send(
            conn,
            Packet::ConnAck(ConnAck {
                session_present: false,
                code: 0,
            }),
        ));
    }

    fn handle_publish(&mut self, conn: ConnectionId, p: Publish, now: Duration, out: &mut Vec<BrokerOutput>) {
        let size = publish_size(&p);
        if size > self.config.max_packet_size {
            self.protocol_close(conn, "publish exceeds maximum packet size", out);
            return;
        }
        let session = self.sessions.get_mut(&conn).expect("checked by caller");
        if !authorize(&session.acl, Action::Publish, &p.topic) {
            Metrics::incr(&self.metrics.acl_denied_publish);
            warn!(%conn, client = %session.client_id, topic = %p.topic, "unauthorized publish");
            self.drop_session(conn);
            out.push(BrokerOutput::Close(conn, CloseReason::NotAuthorized));
            return;
        }
        Metrics::incr(&self.metrics.publishes_received);
        Metrics::add(&self.metrics.bytes_received, p.payload.len() as u64);
        let ack = match (p.qos, p.packet_id) {
            (QoS::AtMostOnce, _) => None,
            (QoS::AtLeastOnce, Some(id)) => Some(Packet::PubAck(id)),
            (QoS::ExactlyOnce, Some(id)) => {
                if !session.inbound_qos2.insert(id) {
                    // duplicate before PubRel: acknowledge again, route nothing
                    out.push(BrokerOutput::Send(conn, Packet::PubRec(id)));
                    return;
                }
                Some(Packet::PubRec(id))
            }
            _ => {
                self.protocol_close(conn, "publish without packet id", out);
                return;
            }
        };
        if is_job_request(&p.topic) {
            if p.payload.is_empty() {
                self.retained.remove(&p.topic);
            } else {
                self.retained.insert(p.topic.clone(), (p.payload.clone(), p.qos));
            }
            Metrics::incr(&self.metrics.retained_messages);
        }
        let mut targets: Vec<(ConnectionId, QoS)> = self.trie.matches(&p.topic).into_iter().collect();
        targets.sort_unstable_by_key(|(c, _)| *c);
        if !targets.is_empty() {
            Metrics::incr(&self.metrics.publishes_routed);
        }
        // the ack goes out before deliveries
        out.extend(ack.map(|a| BrokerOutput::Send(conn, a)));
        for (target, sub_qos) in targets {
            let delivery = Publish {
                dup: false,
                qos: p.qos.min(sub_qos),
                retain: false,
                topic: p.topic.clone(),
                packet_id: None,
                payload: p.payload.clone(),
            };
            self.deliver(target, delivery, now, out);
        }
    }

    fn deliver(&mut self, conn: ConnectionId, mut p: Publish, now: Duration, out: &mut Vec<BrokerOutput>) {
        let Some(s) = self.sessions.get_mut(&conn) else { return };
        let size = publish_size(&p);
        if size > s.max_packet_size {
            Metrics::incr(&self.metrics.oversize_drops);
            return;
        }
        if p.qos == QoS::AtMostOnce {
            Metrics::incr(&self.metrics.deliveries);
            Metrics::add(&self.metrics.bytes_delivered, p.payload.len() as u64);
            out.push(BrokerOutput::Send(conn, Packet::Publish(p)));
            return;
        }
        if s.outbound.len() < s.receive_maximum && s.queue.is_empty() {
            let id = s.allocate_packet_id();
            p.packet_id = Some(id);
            let state = if p.qos == QoS::AtLeastOnce {
                OutState::AwaitPubAck
            } else {
                OutState::AwaitPubRec
            };
            s.outbound.insert(
                id,
                Inflight {
                    publish: p.clone(),
                    state,
                    last_sent: now,
                },
            );
            Metrics::incr(&self.metrics.deliveries);
            Metrics::add(&self.metrics.bytes_delivered, p.payload.len() as u64);
            out.push(BrokerOutput::Send(conn, Packet::Publish(p)));
            return;
        }
        if self.config.max_queue_per_client == 0 {
            Metrics::incr(&self.metrics.queue_drops);
            return;
        }
        while s.queue.len() >= self.config.max_queue_per_client {
            let dropped = s.queue.pop_front().expect("non-empty");
            s.queued_bytes -= publish_size(&dropped);
            Metrics::incr(&self.metrics.queue_drops);
        }
        s.queued_bytes += size;
        s.queue.push_back(p);
        self.metrics
            .queue_high_water_bytes
            .fetch_max(s.queued_bytes as u64, std::sync::atomic::Ordering::Relaxed);
    }

    fn drain_queue(&mut self, conn: ConnectionId, now: Duration, out: &mut Vec<BrokerOutput>) {
        let Some(s) = self.sessions.get_mut(&conn) else { return };
        while s.outbound.len() < s.receive_maximum {
            let Some(mut p) = s.queue.pop_front() else { break };
            s.queued_bytes -= publish_size(&p);
            let id = s.allocate_packet_id();
            p.packet_id = Some(id);
            let state = if p.qos == QoS::AtLeastOnce {
                OutState::AwaitPubAck
            } else {
                OutState::AwaitPubRec
            };
            s.outbound.insert(
                id,
                Inflight {
                    publish: p.clone(),
                    state,
                    last_sent: now,
                },
            );
            Metrics::incr(&self.metrics.deliveries);
            Metrics::add(&self.metrics.bytes_delivered, p.payload.len() as u64);
            out.push(BrokerOutput::Send(conn, Packet::Publish(p)));
        }
    }

    fn handle_ack(&mut self, conn: ConnectionId, id: u16, kind: OutState, now: Duration, out: &mut Vec<BrokerOutput>) {
        let s = self.sessions.get_mut(&conn).expect("checked by caller");
        let state = s.outbound.get(&id).map(|i| i.state);
        match (kind, state) {
            (OutState::AwaitPubAck, Some(OutState::AwaitPubAck))
            | (OutState::AwaitPubComp, Some(OutState::AwaitPubComp)) => {
                s.outbound.remove(&id);
                self.drain_queue(conn, now, out);
            }
            (OutState::AwaitPubRec, Some(OutState::AwaitPubRec | OutState::AwaitPubComp)) => {
                let inflight = s.outbound.get_mut(&id).expect("present");
                inflight.state = OutState::AwaitPubComp;
                inflight.last_sent = now;
                out.push(BrokerOutput::Send(conn, Packet::PubRel(id)));
            }
            _ => {
                let msg = format!("acknowledgement for unknown packet id {id}");
                self.protocol_close(conn, &msg, out);
            }
        }
    }

    fn handle_subscribe(&mut self, conn: ConnectionId, sub: Subscribe, now: Duration, out: &mut Vec<BrokerOutput>) {
        let s = self.sessions.get_mut(&conn).expect("checked by caller");
        let mut codes = Vec::with_capacity(sub.filters.len());
        let mut granted = Vec::new();
        for (text, qos) in sub.filters {
            let Ok(filter) = TopicFilter::parse(&text) else {
                codes.push(SubAckCode::Failure);
                continue;
            };
            if !authorize_filter(&s.acl, Action::Subscribe, &filter) {
                Metrics::incr(&self.metrics.acl_denied_subscribe);
                debug!(%conn, client = %s.client_id, filter = %text, "subscribe refused");
                codes.push(match s.protocol {
                    ProtocolLevel::V5 => SubAckCode::NotAuthorized,
                    ProtocolLevel::V311 => SubAckCode::Failure,
                });
                continue;
            }
            let qos = qos.min(self.config.max_qos);
            self.trie.insert(&filter, conn, qos);
            s.subscriptions.insert(text, (filter.clone(), qos));
            codes.push(SubAckCode::Granted(qos));
            granted.push((filter, qos));
        }
        out.push(BrokerOutput::Send(
            conn,
            Packet::SubAck(SubAck {
                packet_id: sub.packet_id,
                codes,
            }),
        ));
        for (filter, qos) in granted {
            let matching: Vec<(String, Bytes, QoS)> = self
                .retained
                .iter()
                .filter(|(t, _)| filter.matches(t))
                .map(|(t, (b, q))| (t.clone(), b.clone(), *q))
                .collect();
            for (topic, payload, retained_qos) in matching {
                let p = Publish {
                    dup: false,
                    qos: qos.min(retained_qos),
                    retain: true,
                    topic,
                    packet_id: None,
                    payload,
                };
                self.deliver(conn, p, now, out);
            }
        }
    }

    fn handle_unsubscribe(&mut self, conn: ConnectionId, unsub: Unsubscribe, out: &mut Vec<BrokerOutput>) {
        let s = self.sessions.get_mut(&conn).expect("checked by caller");
        let mut codes = Vec::with_capacity(unsub.filters.len());
        for text in &unsub.filters {
            match s.subscriptions.remove(text) {
                Some((filter, _)) => {
                    self.trie.remove(&filter, &conn);
                    codes.push(UnsubAckCode::Success);
                }
                None => codes.push(UnsubAckCode::NoSubscriptionExisted),
            }
        }
        if s.protocol == ProtocolLevel::V311 {
            codes.clear();
        }
        out.push(BrokerOutput::Send(
            conn,
            Packet::UnsubAck(UnsubAck {
                packet_id: unsub.packet_id,
                codes,
            }),
        ));
    }

    fn protocol_close(&mut self, conn: ConnectionId, msg: &str, out: &mut Vec<BrokerOutput>) {
        Metrics::incr(&self.metrics.protocol_errors);
        warn!(%conn, "{msg}");
        self.drop_session(conn);
        out.push(BrokerOutput::Close(conn, CloseReason::Protocol(msg.to_string())));
    }

    fn drop_session(&mut self, conn: ConnectionId) -> bool {
        let Some(s) = self.sessions.remove(&conn) else {
            return false;
        };
        for (filter, _) in s.subscriptions.values() {
            self.trie.remove(filter, &conn);
        }
        if self.by_client.get(&s.client_id) == Some(&conn) {
            self.by_client.remove(&s.client_id);
        }
        self.metrics
            .connections_active
            .fetch_sub(1, std::sync::atomic::Ordering::Relaxed);
        Metrics::incr(&self.metrics.connections_closed);
        true
    }
}

fn is_job_request(topic: &str) -> bool {
    TopicPath::parse(topic).is_ok_and(|p| p.channel() == Channel::JobRequest)
}
