//! Long-running TCP front-ends: broker, parameter server and agent.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;
use tracing::{error, info, warn};

use super::config::{BrokerSettings, ConfigError, NodeConfig};
use super::{AgentNode, NodeError, NodeOutput, PsNode};
use crate::broker::{AuthError, BrokerServer, CredentialStore, Metrics, ServerHandle};
use crate::client::{ClientError, ClientEvent, ClientOptions, MqttClient};
use crate::codec::{QoS, SubAckCode};
use crate::fl::synth_dataset;
use crate::store::{ModelStore, StoreError};

/// Process exit codes shared by every subcommand.
pub mod exit {
    pub const OK: u8 = 0;
    pub const RUNTIME: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const CONFLICT: u8 = 3;
}

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const ACK_TIMEOUT: Duration = Duration::from_secs(10);
const POLL: Duration = Duration::from_millis(50);
/// How long a stopping node waits for its own qos handshakes.
const DRAIN: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("credentials: {0}")]
    Credentials(#[from] AuthError),
    #[error("cannot listen: {0}")]
    Bind(std::io::Error),
    #[error("authentication failed: {0}")]
    Auth(ClientError),
    #[error("subscription to {0} refused by broker")]
    SubscribeRefused(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("{0}")]
    Runtime(String),
}

impl DaemonError {
    pub fn exit_code(&self) -> u8 {
        match self {
            DaemonError::Config(_) | DaemonError::Credentials(_) => exit::CONFIG,
            _ => exit::RUNTIME,
        }
    }
}

/// Exponential reconnect delay with jitter in `[d/2, d]`.
#[derive(Debug, Clone)]
pub struct Backoff {
    initial: Duration,
    max: Duration,
    current: Duration,
}

impl Backoff {
    pub fn new(initial: Duration, max: Duration) -> Self {
        Backoff {
            initial,
            max,
            current: initial,
        }
    }

    pub fn next_delay(&mut self) -> Duration {
        let d = self.current;
        self.current = (self.current * 2).min(self.max);
        let half = d / 2;
        half + half.mul_f64(rand::rng().random::<f64>())
    }

    pub fn reset(&mut self) {
        self.current = self.initial;
    }
}

fn sleep_unless(stop: &AtomicBool, d: Duration) {
    let end = Instant::now() + d;
    while !stop.load(Ordering::SeqCst) {
        let left = end.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return;
        }
        thread::sleep(left.min(POLL));
    }
}

/// Connects and subscribes, retrying transport failures with backoff.
/// Returns `None` if `stop` was raised first. A refused CONNACK is final.
fn establish(
    cfg: &NodeConfig,
    secret: &str,
    subs: &[(String, QoS)],
    backoff: &mut Backoff,
    stop: &AtomicBool,
) -> Result<Option<MqttClient>, DaemonError> {
    while !stop.load(Ordering::SeqCst) {
        let opts = ClientOptions {
            keep_alive: cfg.keep_alive_s,
            ..ClientOptions::new(cfg.client_id.as_str(), cfg.username(), secret)
        };
        let attempt = MqttClient::connect(cfg.broker.as_str(), opts, CONNECT_TIMEOUT).and_then(|c| {
            let refs: Vec<(&str, QoS)> = subs.iter().map(|(f, q)| (f.as_str(), *q)).collect();
            let codes = c.subscribe(&refs, ACK_TIMEOUT)?;
            Ok((c, codes))
        });
        match attempt {
            Ok((client, codes)) => {
                if let Some(i) = codes.iter().position(|c| !matches!(c, SubAckCode::Granted(_))) {
                    return Err(DaemonError::SubscribeRefused(subs[i].0.clone()));
                }
                backoff.reset();
                info!(broker = %cfg.broker, client = %cfg.client_id, "connected");
                return Ok(Some(client));
            }
            Err(e) if e.is_auth_failure() => return Err(DaemonError::Auth(e)),
            Err(e) => {
                let delay = backoff.next_delay();
                warn!(broker = %cfg.broker, error = %e, retry_in_ms = delay.as_millis() as u64, "broker unreachable");
                sleep_unless(stop, delay);
            }
        }
    }
    Ok(None)
}

fn apply(client: &MqttClient, outputs: Vec<NodeOutput>) -> Result<(), ClientError> {
    for o in outputs {
        match o {
            NodeOutput::Publish {
                topic,
                payload,
                qos,
                retain,
            } => {
                client.publish(&topic, payload, qos, retain)?;
            }
            NodeOutput::Unsubscribe(filters) => {
                let refs: Vec<&str> = filters.iter().map(String::as_str).collect();
                client.unsubscribe(&refs, ACK_TIMEOUT)?;
            }
            NodeOutput::Finished => {}
        }
    }
    Ok(())
}

fn drain_and_disconnect(client: MqttClient) {
    let end = Instant::now() + DRAIN;
    while client.is_alive() && client.inflight() > 0 && Instant::now() < end {
        let _ = client.next_event(POLL);
    }
    client.disconnect();
}

/// How a node daemon ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeExit {
    /// PS ran every round, or the agent left its federations.
    Completed,
    Stopped,
}

/// Drives rounds over TCP until every configured pair has finished or
/// `stop` is raised. After a reconnect the current model is published
/// again so clients that missed it can catch up.
pub fn run_ps(cfg: &NodeConfig, stop: &AtomicBool) -> Result<NodeExit, DaemonError> {
    cfg.validate_ps()?;
    let secret = cfg.resolve_secret()?;
    let store = Arc::new(ModelStore::open(cfg.store_dir.as_ref().expect("validated"))?);
    let mut node = PsNode::new(store, &cfg.federations(), cfg.round.clone(), cfg.data.dim)?;
    let (initial, max) = cfg.reconnect_bounds();
    let mut backoff = Backoff::new(initial, max);
    let epoch = Instant::now();
    let mut started = false;

    while let Some(client) = establish(cfg, &secret, &node.subscriptions(), &mut backoff, stop)? {
        let first = if started {
            node.rebroadcast()
        } else {
            started = true;
            node.start(epoch.elapsed())
        };
        let mut result = apply(&client, first);
        while result.is_ok() {
            if node.is_finished() {
                drain_and_disconnect(client);
                return Ok(NodeExit::Completed);
            }
            if stop.load(Ordering::SeqCst) {
                drain_and_disconnect(client);
                return Ok(NodeExit::Stopped);
            }
            result = match client.next_event(POLL) {
                Some(ClientEvent::Message(p)) => apply(&client, node.on_message(&p.topic, &p.payload, epoch.elapsed())),
                Some(ClientEvent::Disconnected(reason)) => Err(ClientError::Closed(reason)),
                _ => Ok(()),
            }
            .and_then(|_| apply(&client, node.tick(epoch.elapsed())));
        }
        if let Err(e) = result {
            warn!(error = %e, "lost broker connection");
        }
    }
    Ok(NodeExit::Stopped)
}

/// Trains on the configured synthetic shard whenever a model is announced.
/// Raising `leave` unsubscribes from every federation and returns.
pub fn run_agent(cfg: &NodeConfig, stop: &AtomicBool, leave: &AtomicBool) -> Result<NodeExit, DaemonError> {
    cfg.validate_agent()?;
    let secret = cfg.resolve_secret()?;
    let d = &cfg.data;
    let data = synth_dataset(d.seed, d.samples, d.dim, d.class_separation);
    let r = &cfg.round;
    let mut node = AgentNode::new(
        cfg.client_id.clone(),
        &cfg.federations(),
        data,
        r.local_epochs,
        r.learning_rate,
        r.qos,
        r.compress,
    );
    let (initial, max) = cfg.reconnect_bounds();
    let mut backoff = Backoff::new(initial, max);
    // either flag ends the connect loop
    let halt = AtomicBool::new(false);

    loop {
        halt.store(
            stop.load(Ordering::SeqCst) || leave.load(Ordering::SeqCst),
            Ordering::SeqCst,
        );
        let Some(client) = establish(cfg, &secret, &node.subscriptions(), &mut backoff, &halt)? else {
            return Ok(NodeExit::Stopped);
        };
        let mut result = Ok(());
        while result.is_ok() {
            if leave.load(Ordering::SeqCst) {
                let left = apply(&client, node.leave());
                drain_and_disconnect(client);
                return match left {
                    Ok(_) => Ok(NodeExit::Completed),
                    Err(e) => Err(DaemonError::Runtime(format!("leave did not complete: {e}"))),
                };
            }
            if stop.load(Ordering::SeqCst) {
                drain_and_disconnect(client);
                return Ok(NodeExit::Stopped);
            }
            result = match client.next_event(POLL) {
                Some(ClientEvent::Message(p)) => apply(&client, node.on_message(&p.topic, &p.payload)),
                Some(ClientEvent::Disconnected(reason)) => Err(ClientError::Closed(reason)),
                _ => Ok(()),
            };
        }
        if let Err(e) = result {
            warn!(error = %e, "lost broker connection");
        }
    }
}

/// A started broker whose credentials come from files.
pub struct BrokerDaemon {
    server: BrokerServer,
    settings: BrokerSettings,
}

impl BrokerDaemon {
    pub fn start(settings: &BrokerSettings) -> Result<Self, DaemonError> {
        let config = settings.server_config()?;
        let creds = CredentialStore::load(&settings.credentials, &settings.acl)?;
        let server = BrokerServer::start(config, creds).map_err(DaemonError::Bind)?;
        info!(addr = %server.local_addr(), "broker ready");
        Ok(BrokerDaemon {
            server,
            settings: settings.clone(),
        })
    }

    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.server.local_addr()
    }

    pub fn handle(&self) -> ServerHandle {
        self.server.handle()
    }

    /// Serves until `stop` is raised. Counters are written to the metrics
    /// file every interval, whenever `dump` is raised, and at exit.
    pub fn run(self, stop: &AtomicBool, dump: &AtomicBool) -> Result<(), DaemonError> {
        let interval = Duration::from_secs(self.settings.metrics_interval_s.max(1));
        let mut next_dump = Instant::now() + interval;
        let write = |metrics: &Metrics| {
            if let Some(path) = &self.settings.metrics_file {
                if let Err(e) = write_metrics(path, metrics) {
                    error!(path = %path.display(), error = %e, "cannot write metrics");
                }
            }
        };
        while !stop.load(Ordering::SeqCst) {
            thread::sleep(POLL);
            if dump.swap(false, Ordering::SeqCst) || Instant::now() >= next_dump {
                write(self.server.metrics());
                next_dump = Instant::now() + interval;
            }
        }
        info!("shutting down");
        let metrics = self.server.metrics().clone();
        self.server
            .shutdown(Duration::from_millis(self.settings.shutdown_grace_ms));
        write(&metrics);
        Ok(())
    }
}

/// Replaces `path` with the rendered counters.
pub fn write_metrics(path: &Path, metrics: &Metrics) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, metrics.render())?;
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_to_cap_with_jitter() {
        let mut b = Backoff::new(Duration::from_secs(1), Duration::from_secs(60));
        let nominal = [1u64, 2, 4, 8, 16, 32, 60, 60];
        for n in nominal {
            let d = b.next_delay();
            let n = Duration::from_secs(n);
            assert!(d >= n / 2 && d <= n, "{d:?} outside [{:?}, {n:?}]", n / 2);
        }
        b.reset();
        assert!(b.next_delay() <= Duration::from_secs(1));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(
            DaemonError::Config(ConfigError::Invalid("x".into())).exit_code(),
            exit::CONFIG
        );
        assert_eq!(DaemonError::Runtime("x".into()).exit_code(), exit::RUNTIME);
    }
}
