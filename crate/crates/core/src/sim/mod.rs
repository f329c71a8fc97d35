//! One-process federation harness: broker, parameter server and agents
//! over the in-memory network.

mod net;
mod scenario;

pub use net::*;
pub use scenario::*;

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;
use tracing::info;

use crate::broker::{BrokerConfig, BrokerCore, ConnectionId, CredentialStore, Metrics};
use crate::client::{ClientEvent, ClientOptions};
use crate::fl::{logistic, synth_dataset, Dataset};
use crate::payload::ParameterSet;
use crate::runtime::{AgentNode, NodeError, NodeOutput, PsNode};
use crate::store::{ModelStore, StoreError};
use crate::topic::{canonical_client_acl, canonical_ps_acl, Identifier};

/// Hash cost for credentials minted inside the simulator.
const SIM_HASH_ITERATIONS: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    pub model_version: u32,
    pub accuracy: f64,
    pub contributors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub scenario: String,
    pub rounds_completed: u32,
    pub finished: bool,
    pub final_accuracy: f64,
    pub rounds_to_target: Option<u32>,
    pub stalls: u64,
    pub simulated_ms: u64,
    pub wall_ms: u64,
    pub messages: u64,
    pub bytes: u64,
    pub dropped: u64,
    pub broker_deliveries: u64,
    pub broker_retransmissions: u64,
    pub rounds: Vec<RoundRecord>,
    /// Final global parameters, for cross-checks against other transports.
    #[serde(skip)]
    pub final_model: Vec<f64>,
}

/// Datasets for every client, in scenario order, plus the held-out set.
pub fn scenario_data(s: &Scenario) -> (Vec<Dataset>, Dataset) {
    let shards = (0..s.clients.len())
        .map(|i| synth_dataset(s.client_seed(i), s.client_samples(i), s.dim, s.class_separation))
        .collect();
    let test = synth_dataset(s.test_seed(), s.test_samples, s.dim, s.class_separation);
    (shards, test)
}

struct Agent {
    conn: ConnectionId,
    node: AgentNode,
}

/// Runs `scenario` with the model store rooted at `store_dir`.
pub fn run_sim(scenario: &Scenario, store_dir: &Path) -> Result<SimReport, SimError> {
    scenario.validate()?;
    let wall = Instant::now();
    let pair = (scenario.fed.clone(), scenario.cep.clone());
    let federations = [pair.clone()];
    let retry = Duration::from_millis(scenario.network.retry_ms);

    let mut creds = CredentialStore::new();
    let ps_id = Identifier::new("ps").expect("static");
    let enroll = |creds: &mut CredentialStore, id: &Identifier, acl| {
        creds
            .enroll(id.clone(), id.as_str(), acl, SIM_HASH_ITERATIONS)
            .map_err(|e| SimError::Setup(e.to_string()))
    };
    let options = |id: &Identifier, secret: String| ClientOptions {
        keep_alive: 0,
        retry_interval: retry,
        ..ClientOptions::new(id.as_str(), id.as_str(), secret)
    };
    let ps_secret = enroll(&mut creds, &ps_id, canonical_ps_acl(&federations))?;
    let mut secrets = Vec::new();
    for c in &scenario.clients {
        secrets.push(enroll(&mut creds, &c.id, canonical_client_acl(&c.id, &federations))?);
    }

    let broker = BrokerConfig {
        retry_interval: retry,
        ..BrokerConfig::default()
    };
    let metrics = Arc::new(Metrics::default());
    let mut net = InMemoryNet::new(BrokerCore::new(broker, creds, metrics.clone()), scenario.net_config());

    let store = Arc::new(ModelStore::open(store_dir)?);
    let mut ps = PsNode::new(store.clone(), &federations, scenario.round.clone(), scenario.dim)?;
    let ps_conn = net.connect(options(&ps_id, ps_secret));

    let (shards, test) = scenario_data(scenario);
    let mut agents: Vec<Agent> = Vec::new();
    for ((spec, data), secret) in scenario.clients.iter().zip(shards).zip(secrets) {
        let leave = scenario
            .churn
            .iter()
            .find(|c| c.client == spec.id)
            .map(|c| c.leave_after_round);
        let node = AgentNode::new(
            spec.id.clone(),
            &federations,
            data,
            scenario.round.local_epochs,
            scenario.round.learning_rate,
            scenario.round.qos,
            scenario.round.compress,
        )
        .leave_after(leave);
        let conn = net.connect(options(&spec.id, secret));
        agents.push(Agent { conn, node });
    }

    // handshakes are never dropped, so one RTT settles every CONNACK
    net.run_for(Duration::from_millis(
        2 * scenario.network.latency_ms + 2 * scenario.network.jitter_ms + 1,
    ));
    let subscribe = |net: &mut InMemoryNet, conn, subs: Vec<(String, crate::codec::QoS)>| {
        let refs: Vec<(&str, crate::codec::QoS)> = subs.iter().map(|(f, q)| (f.as_str(), *q)).collect();
        net.subscribe(conn, &refs)
    };
    if !net.is_connected(ps_conn) {
        return Err(SimError::Setup("parameter server could not connect".into()));
    }
    subscribe(&mut net, ps_conn, ps.subscriptions());
    for a in &agents {
        if !net.is_connected(a.conn) {
            return Err(SimError::Setup(format!("{} could not connect", a.node.client_id())));
        }
        subscribe(&mut net, a.conn, a.node.subscriptions());
    }
    net.run_until_quiet(Duration::from_secs(60));

    let out = ps.start(net.now());
    apply(&mut net, ps_conn, out);
    let limit = Duration::from_millis(scenario.time_limit_ms);
    while !ps.is_finished() {
        let progressed = net.step(limit);
        for conn in net.pending_event_conns() {
            for event in net.take_events(conn) {
                let ClientEvent::Message(p) = event else { continue };
                let now = net.now();
                let outputs = if conn == ps_conn {
                    ps.on_message(&p.topic, &p.payload, now)
                } else if let Some(a) = agents.iter_mut().find(|a| a.conn == conn) {
                    a.node.on_message(&p.topic, &p.payload)
                } else {
                    Vec::new()
                };
                apply(&mut net, conn, outputs);
            }
        }
        let out = ps.tick(net.now());
        apply(&mut net, ps_conn, out);
        if !progressed {
            break;
        }
    }
    // let the final broadcast and outstanding handshakes settle
    net.run_until_quiet(Duration::from_secs(5));

    let server = ps.server(&pair.0, &pair.1).expect("configured pair");
    let mut rounds = Vec::new();
    let mut rounds_to_target = None;
    for entry in store.list_models(&pair.0, &pair.1)? {
        let body = store.fetch_model(&pair.0, &pair.1, entry.model_version)?;
        let params = ParameterSet::decode(&body).map_err(|e| SimError::Setup(e.to_string()))?;
        let accuracy = logistic::accuracy(&params, &test).map_err(|e| SimError::Setup(e.to_string()))?;
        if rounds_to_target.is_none() && accuracy >= scenario.target_accuracy {
            rounds_to_target = Some(entry.round);
        }
        rounds.push(RoundRecord {
            round: entry.round,
            model_version: entry.model_version,
            accuracy,
            contributors: entry.contributors.iter().map(|c| c.to_string()).collect(),
        });
    }
    let final_accuracy =
        logistic::accuracy(server.current_global(), &test).map_err(|e| SimError::Setup(e.to_string()))?;
    let stats = net.stats();
    let report = SimReport {
        scenario: scenario.name.clone(),
        rounds_completed: server.stats().rounds_completed,
        finished: ps.is_finished(),
        final_accuracy,
        rounds_to_target,
        stalls: server.stats().stalls,
        simulated_ms: net.now().as_millis() as u64,
        wall_ms: wall.elapsed().as_millis() as u64,
        messages: stats.packets,
        bytes: stats.bytes,
        dropped: stats.dropped,
        broker_deliveries: Metrics::get(&metrics.deliveries),
        broker_retransmissions: Metrics::get(&metrics.retransmissions),
        rounds,
        final_model: server.current_global().values().to_vec(),
    };
    info!(
        scenario = %report.scenario,
        rounds = report.rounds_completed,
        accuracy = report.final_accuracy,
        "simulation finished"
    );
    Ok(report)
}

fn apply(net: &mut InMemoryNet, conn: ConnectionId, outputs: Vec<NodeOutput>) {
    for o in outputs {
        match o {
            NodeOutput::Publish {
                topic,
                payload,
                qos,
                retain,
            } => {
                net.publish(conn, &topic, payload, qos, retain);
            }
            NodeOutput::Unsubscribe(filters) => {
                let refs: Vec<&str> = filters.iter().map(String::as_str).collect();
                net.unsubscribe(conn, &refs);
            }
            NodeOutput::Finished => {}
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ReportLine<'a> {
    Round(&'a RoundRecord),
    Summary {
        scenario: &'a str,
        rounds_completed: u32,
        finished: bool,
        final_accuracy: f64,
        rounds_to_target: Option<u32>,
        stalls: u64,
        simulated_ms: u64,
        wall_ms: u64,
        messages: u64,
        bytes: u64,
        dropped: u64,
        broker_deliveries: u64,
        broker_retransmissions: u64,
        contributors_per_version: BTreeMap<u32, usize>,
    },
}

impl SimReport {
    /// One JSON object per line: a `round` record per stored version, then
    /// a closing `summary`.
    pub fn write_jsonl(&self, mut w: impl Write) -> io::Result<()> {
        for r in &self.rounds {
            serde_json::to_writer(&mut w, &ReportLine::Round(r))?;
            w.write_all(b"\n")?;
        }
        let summary = ReportLine::Summary {
            scenario: &self.scenario,
            rounds_completed: self.rounds_completed,
            finished: self.finished,
            final_accuracy: self.final_accuracy,
            rounds_to_target: self.rounds_to_target,
            stalls: self.stalls,
            simulated_ms: self.simulated_ms,
            wall_ms: self.wall_ms,
            messages: self.messages,
            bytes: self.bytes,
            dropped: self.dropped,
            broker_deliveries: self.broker_deliveries,
            broker_retransmissions: self.broker_retransmissions,
            contributors_per_version: self
                .rounds
                .iter()
                .map(|r| (r.model_version, r.contributors.len()))
                .collect(),
        };
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n")
    }

    /// `round,accuracy` rows for plotting.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "round,accuracy")?;
        for r in &self.rounds {
            writeln!(w, "{},{:.6}", r.round, r.accuracy)?;
        }
        Ok(())
    }
}
