use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use thiserror::Error;
use tracing::debug;

use super::{ClientEvent, ClientOptions, ClientSession};
use crate::broker::transport::{PlainTcp, StreamWrapper};
use crate::codec::{
    encode_packet, CodecError, ConnAckCode, Packet, Publish, QoS, StreamDecoder, SubAckCode, MAX_REMAINING_LENGTH,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("connection refused by broker: {}", describe(*.0))]
    Refused(u8),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("connection closed: {0}")]
    Closed(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

fn describe(code: u8) -> String {
    ConnAckCode::from_u8(code).map_or_else(|| format!("code {code:#04x}"), |c| format!("{c:?}"))
}

impl ClientError {
    /// True if the broker rejected our credentials rather than the network
    /// failing.
    pub fn is_auth_failure(&self) -> bool {
        matches!(self, ClientError::Refused(_))
    }
}

struct Shared {
    session: Mutex<ClientSession>,
    writer: Mutex<Box<dyn Write + Send>>,
    shutdown: Box<dyn Fn() + Send + Sync>,
    alive: AtomicBool,
    epoch: Instant,
}

impl Shared {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn write(&self, packets: &[Packet]) -> io::Result<()> {
        let mut w = self.writer.lock().expect("writer lock");
        for p in packets {
            let bytes = encode_packet(p).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
            w.write_all(&bytes)?;
        }
        w.flush()
    }
}

/// Blocking MQTT client over TCP. A background thread reads packets, runs
/// acknowledgements and keep-alive, and forwards events.
pub struct MqttClient {
    shared: Arc<Shared>,
    events: Receiver<ClientEvent>,
    stash: Mutex<VecDeque<ClientEvent>>,
    reader: Option<JoinHandle<()>>,
}

impl MqttClient {
    pub fn connect(addr: impl ToSocketAddrs, opts: ClientOptions, timeout: Duration) -> Result<Self, ClientError> {
        Self::connect_with(addr, opts, &PlainTcp, timeout)
    }

    pub fn connect_with(
        addr: impl ToSocketAddrs,
        opts: ClientOptions,
        wrapper: &dyn StreamWrapper,
        timeout: Duration,
    ) -> Result<Self, ClientError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let mut last = io::Error::new(io::ErrorKind::InvalidInput, "no address");
        let stream = addrs
            .iter()
            .find_map(|a| TcpStream::connect_timeout(a, timeout).map_err(|e| last = e).ok())
            .ok_or(last)?;
        stream.set_nodelay(true)?;
        // the reader wakes up this often to run retries and pings
        stream.set_read_timeout(Some(Duration::from_millis(50)))?;
        let wrapped = wrapper.wrap(stream)?;
        let shared = Arc::new(Shared {
            session: Mutex::new(ClientSession::new(opts)),
            writer: Mutex::new(wrapped.writer),
            shutdown: wrapped.shutdown,
            alive: AtomicBool::new(true),
            epoch: Instant::now(),
        });
        let (tx, rx) = unbounded();
        let connect = shared.session.lock().expect("session").connect(shared.now());
        shared.write(&[connect])?;
        let reader = thread::Builder::new().name("mqtt-client".into()).spawn({
            let shared = shared.clone();
            let max = shared.session.lock().expect("session").options().max_packet_size;
            let max = max.map_or(MAX_REMAINING_LENGTH + 5, |m| m as usize);
            move || read_loop(shared, wrapped.reader, tx, max)
        })?;
        let client = MqttClient {
            shared,
            events: rx,
            stash: Mutex::new(VecDeque::new()),
            reader: Some(reader),
        };
        let deadline = Instant::now() + timeout;
        match client.wait_for(deadline, "CONNACK", |e| {
            matches!(e, ClientEvent::Connected | ClientEvent::Refused(_))
        })? {
            ClientEvent::Connected => Ok(client),
            ClientEvent::Refused(code) => Err(ClientError::Refused(code)),
            _ => unreachable!(),
        }
    }

    pub fn client_id(&self) -> String {
        self.shared.session.lock().expect("session").options().client_id.clone()
    }

    pub fn is_alive(&self) -> bool {
        self.shared.alive.load(Ordering::SeqCst)
    }

    pub fn inflight(&self) -> usize {
        self.shared.session.lock().expect("session").inflight()
    }

    pub fn publish(
        &self,
        topic: &str,
        payload: impl Into<Bytes>,
        qos: QoS,
        retain: bool,
    ) -> Result<Option<u16>, ClientError> {
        self.ensure_alive()?;
        let mut s = self.shared.session.lock().expect("session");
        let (id, packet) = s.publish(topic, payload.into(), qos, retain, self.shared.now());
        self.shared.write(&[packet])?;
        Ok(id)
    }

    /// Publishes and waits for the QoS handshake to complete.
    pub fn publish_wait(
        &self,
        topic: &str,
        payload: impl Into<Bytes>,
        qos: QoS,
        retain: bool,
        timeout: Duration,
    ) -> Result<(), ClientError> {
        let Some(id) = self.publish(topic, payload, qos, retain)? else {
            return Ok(());
        };
        let deadline = Instant::now() + timeout;
        self.wait_for(
            deadline,
            "publish acknowledgement",
            |e| matches!(e, ClientEvent::Published { packet_id } if *packet_id == id),
        )?;
        Ok(())
    }

    pub fn subscribe(&self, filters: &[(&str, QoS)], timeout: Duration) -> Result<Vec<SubAckCode>, ClientError> {
        self.ensure_alive()?;
        let id = {
            let mut s = self.shared.session.lock().expect("session");
            let list = filters.iter().map(|(f, q)| (f.to_string(), *q)).collect();
            let (id, packet) = s.subscribe(list, self.shared.now());
            self.shared.write(&[packet])?;
            id
        };
        let deadline = Instant::now() + timeout;
        match self.wait_for(
            deadline,
            "SUBACK",
            |e| matches!(e, ClientEvent::SubAck { packet_id, .. } if *packet_id == id),
        )? {
            ClientEvent::SubAck { codes, .. } => Ok(codes),
            _ => unreachable!(),
        }
    }

    pub fn unsubscribe(&self, filters: &[&str], timeout: Duration) -> Result<(), ClientError> {
        self.ensure_alive()?;
        let id = {
            let mut s = self.shared.session.lock().expect("session");
            let (id, packet) = s.unsubscribe(filters.iter().map(|f| f.to_string()).collect(), self.shared.now());
            self.shared.write(&[packet])?;
            id
        };
        let deadline = Instant::now() + timeout;
        self.wait_for(
            deadline,
            "UNSUBACK",
            |e| matches!(e, ClientEvent::UnsubAck { packet_id, .. } if *packet_id == id),
        )?;
        Ok(())
    }

    /// Round-trip time of one PINGREQ.
    pub fn ping(&self, timeout: Duration) -> Result<Duration, ClientError> {
        self.ensure_alive()?;
        let start = Instant::now();
        {
            let mut s = self.shared.session.lock().expect("session");
            let p = s.ping(self.shared.now());
            self.shared.write(&[p])?;
        }
        self.wait_for(start + timeout, "PINGRESP", |e| matches!(e, ClientEvent::PingResp))?;
        Ok(start.elapsed())
    }

    /// Next event, or `None` on timeout.
    pub fn next_event(&self, timeout: Duration) -> Option<ClientEvent> {
        if let Some(e) = self.stash.lock().expect("stash").pop_front() {
            return Some(e);
        }
        self.events.recv_timeout(timeout).ok()
    }

    /// Next application message, skipping other events. Returns `None` on
    /// timeout or once the connection is gone.
    pub fn next_message(&self, timeout: Duration) -> Option<Publish> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.next_event(left)? {
                ClientEvent::Message(p) => return Some(p),
                ClientEvent::Disconnected(_) => return None,
                _ => {}
            }
        }
    }

    fn ensure_alive(&self) -> Result<(), ClientError> {
        if self.is_alive() {
            Ok(())
        } else {
            Err(ClientError::Closed("connection lost".into()))
        }
    }

    fn wait_for(
        &self,
        deadline: Instant,
        what: &'static str,
        want: impl Fn(&ClientEvent) -> bool,
    ) -> Result<ClientEvent, ClientError> {
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.events.recv_timeout(left) {
                Ok(e) if want(&e) => return Ok(e),
                Ok(ClientEvent::Disconnected(reason)) => {
                    self.stash
                        .lock()
                        .expect("stash")
                        .push_back(ClientEvent::Disconnected(reason.clone()));
                    return Err(ClientError::Closed(reason));
                }
                Ok(other) => self.stash.lock().expect("stash").push_back(other),
                Err(RecvTimeoutError::Timeout) => return Err(ClientError::Timeout(what)),
                Err(RecvTimeoutError::Disconnected) => return Err(ClientError::Closed("reader stopped".into())),
            }
        }
    }

    /// Sends DISCONNECT and closes the socket.
    pub fn disconnect(mut self) {
        if self.is_alive() {
            let _ = self.shared.write(&[Packet::Disconnect]);
        }
        self.close();
    }

    fn close(&mut self) {
        self.shared.alive.store(false, Ordering::SeqCst);
        (self.shared.shutdown)();
        if let Some(t) = self.reader.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MqttClient {
    fn drop(&mut self) {
        self.close();
    }
}

fn read_loop(shared: Arc<Shared>, mut reader: Box<dyn Read + Send>, tx: Sender<ClientEvent>, max_packet: usize) {
    let mut decoder = StreamDecoder::new(max_packet);
    let mut buf = vec![0u8; 64 * 1024];
    let reason = 'outer: loop {
        if !shared.alive.load(Ordering::SeqCst) {
            break "closed locally".to_string();
        }
        match reader.read(&mut buf) {
            Ok(0) => break "closed by broker".to_string(),
            Ok(n) => decoder.push(&buf[..n]),
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted
                ) => {}
            Err(e) => break e.to_string(),
        }
        loop {
            let packet = match decoder.next_packet() {
                Ok(Some(p)) => p,
                Ok(None) => break,
                Err(e) => break 'outer format!("undecodable input: {e}"),
            };
            let (send, events) = shared.session.lock().expect("session").handle(packet, shared.now());
            if let Err(e) = shared.write(&send) {
                break 'outer e.to_string();
            }
            for e in events {
                if let ClientEvent::Disconnected(r) = &e {
                    let r = r.clone();
                    let _ = tx.send(e);
                    shared.alive.store(false, Ordering::SeqCst);
                    (shared.shutdown)();
                    return debug!(reason = %r, "client reader stopped");
                }
                let _ = tx.send(e);
            }
        }
        let due = shared.session.lock().expect("session").tick(shared.now());
        match due {
            Ok(send) => {
                if let Err(e) = shared.write(&send) {
                    break e.to_string();
                }
            }
            Err(e) => break e,
        }
    };
    debug!(%reason, "client reader stopped");
    shared.alive.store(false, Ordering::SeqCst);
    (shared.shutdown)();
    let _ = tx.send(ClientEvent::Disconnected(reason));
}
