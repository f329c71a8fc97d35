//! Deterministic in-memory network: a [`BrokerCore`] and any number of
//! [`ClientSession`]s exchanging packets over links with virtual latency
//! and random loss.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::time::Duration;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::broker::{BrokerCore, BrokerOutput, ConnectionId};
use crate::client::{ClientEvent, ClientOptions, ClientSession};
use crate::codec::{encoded_len, Packet, QoS};

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub latency: Duration,
    /// Extra uniformly distributed delay in `[0, jitter]`.
    pub jitter: Duration,
    /// Probability that a packet is lost. Applied in both directions once a
    /// connection's CONNACK has been received.
    pub drop_rate: f64,
    pub seed: u64,
    /// Period of broker and client timers.
    pub tick: Duration,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            latency: Duration::from_millis(5),
            jitter: Duration::ZERO,
            drop_rate: 0.0,
            seed: 0,
            tick: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub packets: u64,
    pub bytes: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    ToBroker,
    ToClient,
}

#[derive(Debug)]
enum Cargo {
    Packet(Dir, Packet),
    /// The broker closed the socket; arrives after anything it sent first.
    Closed(String),
}

#[derive(Debug)]
struct Transit {
    at: Duration,
    seq: u64,
    conn: ConnectionId,
    cargo: Cargo,
}

impl PartialEq for Transit {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Transit {}

impl Ord for Transit {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Transit {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct Endpoint {
    session: ClientSession,
    open: bool,
    /// Set when the broker side has dropped the connection.
    broker_closed: bool,
    events: VecDeque<ClientEvent>,
    drop_rate: Option<f64>,
}

pub struct InMemoryNet {
    core: BrokerCore,
    config: NetConfig,
    rng: ChaCha8Rng,
    now: Duration,
    next_tick: Duration,
    seq: u64,
    next_conn: u64,
    queue: BinaryHeap<Reverse<Transit>>,
    endpoints: BTreeMap<ConnectionId, Endpoint>,
    stats: NetStats,
}

impl InMemoryNet {
    pub fn new(core: BrokerCore, config: NetConfig) -> Self {
        InMemoryNet {
            core,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            next_tick: config.tick,
            config,
            now: Duration::ZERO,
            seq: 0,
            next_conn: 1,
            queue: BinaryHeap::new(),
            endpoints: BTreeMap::new(),
            stats: NetStats::default(),
        }
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn core(&self) -> &BrokerCore {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut BrokerCore {
        &mut self.core
    }

    pub fn set_drop_rate(&mut self, rate: f64) {
        self.config.drop_rate = rate;
    }

    /// Overrides the loss rate of one connection's link.
    pub fn set_link_drop_rate(&mut self, conn: ConnectionId, rate: Option<f64>) {
        if let Some(e) = self.endpoints.get_mut(&conn) {
            e.drop_rate = rate;
        }
    }

    /// Opens a connection and sends CONNECT. Run the network to receive
    /// the CONNACK.
    pub fn connect(&mut self, opts: ClientOptions) -> ConnectionId {
        let conn = ConnectionId(self.next_conn);
        self.next_conn += 1;
        let mut session = ClientSession::new(opts);
        let packet = session.connect(self.now);
        self.endpoints.insert(
            conn,
            Endpoint {
                session,
                open: true,
                broker_closed: false,
                events: VecDeque::new(),
                drop_rate: None,
            },
        );
        self.transmit(Dir::ToBroker, conn, packet);
        conn
    }

    pub fn is_open(&self, conn: ConnectionId) -> bool {
        self.endpoints.get(&conn).is_some_and(|e| e.open)
    }

    pub fn is_connected(&self, conn: ConnectionId) -> bool {
        self.endpoints
            .get(&conn)
            .is_some_and(|e| e.open && e.session.is_connected())
    }

    pub fn client_inflight(&self, conn: ConnectionId) -> usize {
        self.endpoints.get(&conn).map_or(0, |e| e.session.inflight())
    }

    pub fn publish(
        &mut self,
        conn: ConnectionId,
        topic: &str,
        payload: impl Into<Bytes>,
        qos: QoS,
        retain: bool,
    ) -> Option<u16> {
        let now = self.now;
        let e = self.endpoints.get_mut(&conn).filter(|e| e.open)?;
        let (id, packet) = e.session.publish(topic, payload.into(), qos, retain, now);
        self.transmit(Dir::ToBroker, conn, packet);
        id
    }

    pub fn subscribe(&mut self, conn: ConnectionId, filters: &[(&str, QoS)]) -> Option<u16> {
        let now = self.now;
        let e = self.endpoints.get_mut(&conn).filter(|e| e.open)?;
        let (id, packet) = e
            .session
            .subscribe(filters.iter().map(|(f, q)| (f.to_string(), *q)).collect(), now);
        self.transmit(Dir::ToBroker, conn, packet);
        Some(id)
    }

    pub fn unsubscribe(&mut self, conn: ConnectionId, filters: &[&str]) -> Option<u16> {
        let now = self.now;
        let e = self.endpoints.get_mut(&conn).filter(|e| e.open)?;
        let (id, packet) = e
            .session
            .unsubscribe(filters.iter().map(|f| f.to_string()).collect(), now);
        self.transmit(Dir::ToBroker, conn, packet);
        Some(id)
    }

    /// Sends PINGREQ.
    pub fn ping(&mut self, conn: ConnectionId) {
        let now = self.now;
        if let Some(e) = self.endpoints.get_mut(&conn).filter(|e| e.open) {
            let p = e.session.ping(now);
            self.transmit(Dir::ToBroker, conn, p);
        }
    }

    /// Injects a raw packet from a client, bypassing its session. Used to
    /// exercise protocol violations.
    pub fn inject(&mut self, conn: ConnectionId, packet: Packet) {
        if self.is_open(conn) {
            self.transmit(Dir::ToBroker, conn, packet);
        }
    }

    /// Graceful DISCONNECT.
    pub fn disconnect(&mut self, conn: ConnectionId) {
        if self.is_open(conn) {
            self.transmit(Dir::ToBroker, conn, Packet::Disconnect);
            self.endpoints.get_mut(&conn).expect("open").open = false;
        }
    }

    /// Abrupt loss of the connection, as if the socket died.
    pub fn kill(&mut self, conn: ConnectionId) {
        if let Some(e) = self.endpoints.get_mut(&conn) {
            e.broker_closed = true;
            if e.open {
                e.open = false;
                e.events
                    .push_back(ClientEvent::Disconnected("connection killed".into()));
            }
        }
        self.core.connection_lost(conn);
    }

    pub fn take_events(&mut self, conn: ConnectionId) -> Vec<ClientEvent> {
        self.endpoints
            .get_mut(&conn)
            .map_or_else(Vec::new, |e| e.events.drain(..).collect())
    }

    /// Connections with undelivered events.
    pub fn pending_event_conns(&self) -> Vec<ConnectionId> {
        self.endpoints
            .iter()
            .filter(|(_, e)| !e.events.is_empty())
            .map(|(c, _)| *c)
            .collect()
    }

    fn transmit(&mut self, dir: Dir, conn: ConnectionId, packet: Packet) {
        let Some(e) = self.endpoints.get(&conn) else { return };
        let size = encoded_len(&packet).unwrap_or(0) as u64;
        self.stats.packets += 1;
        self.stats.bytes += size;
        let lossy = e.session.is_connected() && !matches!(packet, Packet::Disconnect);
        let rate = e.drop_rate.unwrap_or(self.config.drop_rate);
        if lossy && rate > 0.0 && self.rng.random_bool(rate.min(1.0)) {
            self.stats.dropped += 1;
            return;
        }
        let jitter = if self.config.jitter.is_zero() {
            Duration::ZERO
        } else {
            self.config.jitter.mul_f64(self.rng.random::<f64>())
        };
        self.enqueue(conn, jitter, Cargo::Packet(dir, packet));
    }

    fn enqueue(&mut self, conn: ConnectionId, extra: Duration, cargo: Cargo) {
        self.seq += 1;
        let at = self.now + self.config.latency + extra;
        self.queue.push(Reverse(Transit {
            at,
            seq: self.seq,
            conn,
            cargo,
        }));
    }

    /// Time of the next packet arrival or timer.
    pub fn next_time(&self) -> Duration {
        self.queue
            .peek()
            .map_or(self.next_tick, |Reverse(t)| t.at.min(self.next_tick))
    }

    /// Processes the next arrival or timer if it is due at or before
    /// `limit`. Returns false if nothing was due.
    pub fn step(&mut self, limit: Duration) -> bool {
        let next = self.next_time();
        if next > limit {
            self.now = self.now.max(limit);
            return false;
        }
        self.now = self.now.max(next);
        let packet_due = self.queue.peek().is_some_and(|Reverse(t)| t.at <= self.next_tick);
        if packet_due {
            let Reverse(t) = self.queue.pop().expect("peeked");
            self.deliver(t);
        } else {
            self.next_tick += self.config.tick;
            self.timers();
        }
        true
    }

    pub fn run_until(&mut self, t: Duration) {
        while self.step(t) {}
    }

    pub fn run_for(&mut self, d: Duration) {
        self.run_until(self.now + d);
    }

    /// Runs until no packets are in flight and no QoS handshake is open,
    /// or until `limit` elapses. Returns true if the network went quiet.
    pub fn run_until_quiet(&mut self, limit: Duration) -> bool {
        let end = self.now + limit;
        loop {
            if self.is_quiet() {
                return true;
            }
            if !self.step(end) {
                return self.is_quiet();
            }
        }
    }

    fn is_quiet(&self) -> bool {
        self.queue.is_empty()
            && self.core.pending_handshakes() == 0
            && self.endpoints.values().all(|e| !e.open || e.session.inflight() == 0)
    }

    fn timers(&mut self) {
        let now = self.now;
        let out = self.core.tick(now);
        self.apply(out);
        let conns: Vec<ConnectionId> = self.endpoints.iter().filter(|(_, e)| e.open).map(|(c, _)| *c).collect();
        for conn in conns {
            let e = self.endpoints.get_mut(&conn).expect("listed");
            if !e.session.is_connected() {
                continue;
            }
            match e.session.tick(now) {
                Ok(packets) => {
                    for p in packets {
                        self.transmit(Dir::ToBroker, conn, p);
                    }
                }
                Err(reason) => {
                    e.open = false;
                    e.broker_closed = true;
                    e.events.push_back(ClientEvent::Disconnected(reason));
                    self.core.connection_lost(conn);
                }
            }
        }
    }

    fn deliver(&mut self, t: Transit) {
        let Some(e) = self.endpoints.get_mut(&t.conn) else {
            return;
        };
        match t.cargo {
            Cargo::Closed(reason) => {
                if e.open {
                    e.open = false;
                    e.events.push_back(ClientEvent::Disconnected(reason));
                }
            }
            Cargo::Packet(Dir::ToBroker, packet) => {
                if e.broker_closed {
                    return;
                }
                let out = self.core.handle_packet(t.conn, packet, self.now);
                self.apply(out);
            }
            Cargo::Packet(Dir::ToClient, packet) => {
                if !e.open {
                    return;
                }
                let (send, events) = e.session.handle(packet, self.now);
                e.events.extend(events);
                for p in send {
                    self.transmit(Dir::ToBroker, t.conn, p);
                }
            }
        }
    }

    fn apply(&mut self, outputs: Vec<BrokerOutput>) {
        for o in outputs {
            match o {
                BrokerOutput::Send(conn, packet) => {
                    if self.is_open(conn) {
                        self.transmit(Dir::ToClient, conn, packet);
                    }
                }
                BrokerOutput::Close(conn, reason) => {
                    if let Some(e) = self.endpoints.get_mut(&conn) {
                        if !e.broker_closed {
                            e.broker_closed = true;
                            self.enqueue(conn, self.config.jitter, Cargo::Closed(reason.to_string()));
                        }
                    }
                }
            }
        }
    }
}
