//! TCP front-end for [`BrokerCore`].
//!
//! One core thread owns the broker state. Every connection gets a reader
//! thread that decodes packets and forwards them to the core, and a writer
//! thread fed through a bounded channel. When a writer falls behind, QoS 0
//! deliveries to it are dropped and counted; anything else evicts the
//! connection as a slow consumer.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender, TrySendError};
use tracing::{debug, info, warn};

use super::transport::{PlainTcp, StreamWrapper};
use super::{BrokerConfig, BrokerCore, BrokerOutput, CloseReason, ConnectionId, CredentialStore, Metrics};
use crate::codec::{encode_packet, Packet, QoS, StreamDecoder};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub broker: BrokerConfig,
    pub tick_interval: Duration,
    /// Packets buffered per connection writer.
    pub writer_queue: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 1883)),
            broker: BrokerConfig::default(),
            tick_interval: Duration::from_millis(100),
            writer_queue: 1024,
        }
    }
}

type Inspect = Box<dyn FnOnce(&mut BrokerCore) + Send>;

enum CoreMsg {
    Accepted {
        conn: ConnectionId,
        writer: Sender<WriterMsg>,
        shutdown: Arc<dyn Fn() + Send + Sync>,
    },
    Packet(ConnectionId, Packet),
    Lost(ConnectionId),
    Inspect(Inspect),
    Shutdown {
        grace: Duration,
    },
}

enum WriterMsg {
    Data(Bytes),
    Close,
}

/// Cloneable control handle for a running server.
#[derive(Clone)]
pub struct ServerHandle {
    tx: Sender<CoreMsg>,
    metrics: Arc<Metrics>,
    local_addr: SocketAddr,
    stopping: Arc<AtomicBool>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    /// Runs `f` on the core thread and returns its result.
    pub fn inspect<R: Send + 'static>(&self, f: impl FnOnce(&mut BrokerCore) -> R + Send + 'static) -> Option<R> {
        let (tx, rx) = bounded(1);
        let job: Inspect = Box::new(move |core| {
            let _ = tx.send(f(core));
        });
        self.tx.send(CoreMsg::Inspect(job)).ok()?;
        rx.recv().ok()
    }

    /// Stops accepting, waits up to `grace` for inflight QoS handshakes to
    /// finish, then closes every connection.
    pub fn shutdown(&self, grace: Duration) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.tx.send(CoreMsg::Shutdown { grace });
        // wake the acceptor
        let _ = TcpStream::connect_timeout(&self.local_addr, Duration::from_millis(200));
    }
}

pub struct BrokerServer {
    handle: ServerHandle,
    core_thread: Option<JoinHandle<()>>,
    accept_thread: Option<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn start(config: ServerConfig, credentials: CredentialStore) -> io::Result<Self> {
        Self::start_with(config, credentials, Arc::new(PlainTcp))
    }

    pub fn start_with(
        config: ServerConfig,
        credentials: CredentialStore,
        wrapper: Arc<dyn StreamWrapper>,
    ) -> io::Result<Self> {
        let listener = TcpListener::bind(config.bind)?;
        let local_addr = listener.local_addr()?;
        let metrics = Arc::new(Metrics::default());
        let core = BrokerCore::new(config.broker.clone(), credentials, metrics.clone());
        let (tx, rx) = unbounded();
        let stopping = Arc::new(AtomicBool::new(false));
        let handle = ServerHandle {
            tx: tx.clone(),
            metrics: metrics.clone(),
            local_addr,
            stopping: stopping.clone(),
        };

        let core_thread = thread::Builder::new().name("broker-core".into()).spawn({
            let tick = config.tick_interval;
            move || CoreLoop::new(core, tick).run(rx)
        })?;
        let accept_thread = thread::Builder::new().name("broker-accept".into()).spawn({
            let max_packet = config.broker.max_packet_size;
            let writer_queue = config.writer_queue;
            move || accept_loop(listener, tx, stopping, wrapper, max_packet, writer_queue)
        })?;
        info!(addr = %local_addr, "broker listening");
        Ok(BrokerServer {
            handle,
            core_thread: Some(core_thread),
            accept_thread: Some(accept_thread),
        })
    }

    pub fn handle(&self) -> ServerHandle {
        self.handle.clone()
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.handle.local_addr
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.handle.metrics
    }

    /// Blocks until the server has stopped.
    pub fn join(mut self) {
        self.join_threads();
    }

    pub fn shutdown(mut self, grace: Duration) {
        self.handle.shutdown(grace);
        self.join_threads();
    }

    fn join_threads(&mut self) {
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        if let Some(t) = self.core_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        if self.core_thread.is_some() {
            self.handle.shutdown(Duration::ZERO);
            self.join_threads();
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    tx: Sender<CoreMsg>,
    stopping: Arc<AtomicBool>,
    wrapper: Arc<dyn StreamWrapper>,
    max_packet: usize,
    writer_queue: usize,
) {
    static NEXT_CONN: AtomicU64 = AtomicU64::new(1);
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!(error = %e, "accept failed");
                continue;
            }
        };
        let peer = stream.peer_addr().ok();
        let _ = stream.set_nodelay(true);
        let wrapped = match wrapper.wrap(stream) {
            Ok(w) => w,
            Err(e) => {
                warn!(?peer, error = %e, "stream wrapping failed");
                continue;
            }
        };
        let conn = ConnectionId(NEXT_CONN.fetch_add(1, Ordering::Relaxed));
        debug!(%conn, ?peer, "accepted");
        let shutdown: Arc<dyn Fn() + Send + Sync> = Arc::from(wrapped.shutdown);
        let (wtx, wrx) = bounded(writer_queue);
        if tx
            .send(CoreMsg::Accepted {
                conn,
                writer: wtx,
                shutdown: shutdown.clone(),
            })
            .is_err()
        {
            break;
        }
        let spawned = thread::Builder::new()
            .name(format!("broker-w{}", conn.0))
            .spawn({
                let shutdown = shutdown.clone();
                let writer = wrapped.writer;
                move || writer_loop(writer, wrx, shutdown)
            })
            .and_then(|_| {
                let tx = tx.clone();
                let reader = wrapped.reader;
                thread::Builder::new()
                    .name(format!("broker-r{}", conn.0))
                    .spawn(move || reader_loop(conn, reader, tx, max_packet))
            });
        if let Err(e) = spawned {
            warn!(%conn, error = %e, "could not spawn connection threads");
            shutdown();
            let _ = tx.send(CoreMsg::Lost(conn));
        }
    }
}

fn reader_loop(conn: ConnectionId, mut reader: Box<dyn Read + Send>, tx: Sender<CoreMsg>, max_packet: usize) {
    let mut decoder = StreamDecoder::new(max_packet);
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        };
        decoder.push(&buf[..n]);
        loop {
            match decoder.next_packet() {
                Ok(Some(p)) => {
                    if tx.send(CoreMsg::Packet(conn, p)).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    debug!(%conn, error = %e, "undecodable input");
                    let _ = tx.send(CoreMsg::Lost(conn));
                    return;
                }
            }
        }
    }
    let _ = tx.send(CoreMsg::Lost(conn));
}

fn writer_loop(mut writer: Box<dyn Write + Send>, rx: Receiver<WriterMsg>, shutdown: Arc<dyn Fn() + Send + Sync>) {
    while let Ok(msg) = rx.recv() {
        match msg {
            WriterMsg::Data(bytes) => {
                if writer.write_all(&bytes).is_err() {
                    break;
                }
                // coalesce whatever is already queued before flushing
                if rx.is_empty() && writer.flush().is_err() {
                    break;
                }
            }
            WriterMsg::Close => {
                let _ = writer.flush();
                break;
            }
        }
    }
    shutdown();
}

struct Conn {
    writer: Sender<WriterMsg>,
    shutdown: Arc<dyn Fn() + Send + Sync>,
}

struct CoreLoop {
    core: BrokerCore,
    conns: HashMap<ConnectionId, Conn>,
    /// Closed connections whose writer gets a moment to flush before the
    /// socket is torn down regardless.
    closing: Vec<(Instant, Arc<dyn Fn() + Send + Sync>)>,
    tick: Duration,
    epoch: Instant,
}

const CLOSE_LINGER: Duration = Duration::from_secs(2);

impl CoreLoop {
    fn new(core: BrokerCore, tick: Duration) -> Self {
        CoreLoop {
            core,
            conns: HashMap::new(),
            closing: Vec::new(),
            tick,
            epoch: Instant::now(),
        }
    }

    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn run(mut self, rx: Receiver<CoreMsg>) {
        let mut next_tick = Instant::now() + self.tick;
        let mut deadline: Option<Instant> = None;
        loop {
            let wait = next_tick.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(CoreMsg::Accepted { conn, writer, shutdown }) => {
                    if deadline.is_some() {
                        shutdown();
                    } else {
                        self.conns.insert(conn, Conn { writer, shutdown });
                    }
                }
                Ok(CoreMsg::Packet(conn, packet)) => {
                    // input still queued from a connection we already closed
                    if self.conns.contains_key(&conn) {
                        let out = self.core.handle_packet(conn, packet, self.now());
                        self.apply(out);
                    }
                }
                Ok(CoreMsg::Lost(conn)) => {
                    if let Some(c) = self.conns.remove(&conn) {
                        (c.shutdown)();
                    }
                    self.core.connection_lost(conn);
                }
                Ok(CoreMsg::Inspect(f)) => f(&mut self.core),
                Ok(CoreMsg::Shutdown { grace }) => {
                    info!(pending = self.core.pending_handshakes(), "shutting down");
                    deadline = Some(Instant::now() + grace);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            if Instant::now() >= next_tick {
                let out = self.core.tick(self.now());
                self.apply(out);
                let now = Instant::now();
                self.closing.retain(|(at, shutdown)| {
                    let due = *at <= now;
                    if due {
                        shutdown();
                    }
                    !due
                });
                next_tick = now + self.tick;
            }
            if let Some(d) = deadline {
                if self.core.pending_handshakes() == 0 || Instant::now() >= d {
                    break;
                }
            }
        }
        let out = self.core.shutdown();
        self.apply(out);
        for (_, c) in self.conns.drain() {
            (c.shutdown)();
        }
        // give writers a moment to flush their final packets
        let linger = Instant::now() + Duration::from_millis(200);
        while !self.closing.is_empty() && Instant::now() < linger {
            thread::sleep(Duration::from_millis(10));
            self.closing.retain(|(_, s)| Arc::strong_count(s) > 1);
        }
        for (_, shutdown) in self.closing.drain(..) {
            shutdown();
        }
        info!("broker stopped");
    }

    fn apply(&mut self, outputs: Vec<BrokerOutput>) {
        let mut queue = std::collections::VecDeque::from(outputs);
        while let Some(o) = queue.pop_front() {
            match o {
                BrokerOutput::Send(conn, packet) => {
                    let Some(c) = self.conns.get(&conn) else { continue };
                    let qos0 = matches!(&packet, Packet::Publish(p) if p.qos == QoS::AtMostOnce);
                    let bytes = match encode_packet(&packet) {
                        Ok(b) => b,
                        Err(e) => {
                            warn!(%conn, error = %e, "could not encode outbound packet");
                            continue;
                        }
                    };
                    match c.writer.try_send(WriterMsg::Data(bytes)) {
                        Ok(()) => {}
                        Err(TrySendError::Full(_)) if qos0 => {
                            Metrics::incr(&self.core.metrics().qos0_backpressure_drops);
                        }
                        Err(TrySendError::Full(_)) => {
                            warn!(%conn, "writer backlog full, evicting");
                            queue.extend(self.core.evict(conn, CloseReason::SlowConsumer));
                            if let Some(c) = self.conns.remove(&conn) {
                                (c.shutdown)();
                            }
                        }
                        Err(TrySendError::Disconnected(_)) => {
                            self.conns.remove(&conn);
                            self.core.connection_lost(conn);
                        }
                    }
                }
                BrokerOutput::Close(conn, reason) => {
                    debug!(%conn, %reason, "closing");
                    if let Some(c) = self.conns.remove(&conn) {
                        if c.writer.try_send(WriterMsg::Close).is_err() {
                            (c.shutdown)();
                        } else {
                            self.closing.push((Instant::now() + CLOSE_LINGER, c.shutdown));
                        }
                    }
                }
            }
        }
    }
}
