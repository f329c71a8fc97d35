//! Daemons over real sockets: the broker, PS and agents as they run in a
//! deployment, plus the `fedmq` binary's exit codes.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use fedmq::client::{ClientError, ClientEvent, ClientOptions, MqttClient};
use fedmq::codec::{decode_packet, encode_packet, ConnAckCode, Connect, Packet, ProtocolLevel, QoS};
use fedmq::payload::ParameterSet;
use fedmq::runtime::admin;
use fedmq::runtime::config::{BrokerSettings, DataSpec, FederationRef, NodeConfig, ReconnectSpec};
use fedmq::runtime::{run_agent, run_ps, BrokerDaemon, DaemonError, NodeExit};
use fedmq::sim::{run_sim, Scenario};
use fedmq::store::ModelStore;
use fedmq::topic::Identifier;

const TIMEOUT: Duration = Duration::from_secs(5);

fn id(s: &str) -> Identifier {
    Identifier::new(s).unwrap()
}

fn settings(dir: &Path, bind: &str) -> BrokerSettings {
    let text = format!(
        "bind = \"{bind}\"\ncredentials = \"creds\"\nacl = \"acl\"\nmetrics_file = \"metrics.txt\"\nshutdown_grace_ms = 200\nretry_ms = 300\n"
    );
    BrokerSettings::from_toml(&text, dir).unwrap()
}

/// Enrolls a PS named `ps` and the given clients; returns their secrets.
fn enroll_all(
    s: &BrokerSettings,
    fed: &Identifier,
    cep: &Identifier,
    clients: &[Identifier],
) -> BTreeMap<String, String> {
    let mut secrets = BTreeMap::new();
    let ps = admin::enroll(s, id("ps"), None, fed.clone(), cep.clone(), true, 1).unwrap();
    secrets.insert("ps".to_string(), ps.secret);
    for c in clients {
        let e = admin::enroll(s, c.clone(), None, fed.clone(), cep.clone(), false, 1).unwrap();
        secrets.insert(c.to_string(), e.secret);
    }
    secrets
}

struct RunningBroker {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<()>,
}

impl RunningBroker {
    fn start(s: &BrokerSettings) -> Self {
        let daemon = BrokerDaemon::start(s).unwrap();
        let addr = daemon.local_addr();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::spawn(move || daemon.run(&flag, &AtomicBool::new(false)).unwrap());
        RunningBroker { addr, stop, thread }
    }

    fn stop(self) {
        self.stop.store(true, Ordering::SeqCst);
        self.thread.join().unwrap();
    }
}

fn node_config(addr: SocketAddr, client: &str, secret: &str, scenario: &Scenario) -> NodeConfig {
    NodeConfig {
        broker: addr.to_string(),
        client_id: id(client),
        username: None,
        secret: Some(secret.to_string()),
        secret_file: None,
        federations: vec![FederationRef {
            fed: scenario.fed.clone(),
            cep: scenario.cep.clone(),
        }],
        round: scenario.round.clone(),
        store_dir: None,
        data: DataSpec {
            seed: 0,
            samples: scenario.samples_per_client,
            dim: scenario.dim,
            class_separation: scenario.class_separation,
        },
        keep_alive_s: 30,
        reconnect: ReconnectSpec {
            initial_ms: 50,
            max_ms: 400,
        },
        log_level: None,
    }
}

struct Federation {
    ps: JoinHandle<Result<NodeExit, DaemonError>>,
    agents: Vec<JoinHandle<Result<NodeExit, DaemonError>>>,
    stop: Arc<AtomicBool>,
}

/// Starts a PS and one agent per scenario client, each with the same data
/// shard the simulator would give it.
fn spawn_federation(
    addr: SocketAddr,
    scenario: &Scenario,
    secrets: &BTreeMap<String, String>,
    store: &Path,
) -> Federation {
    let stop = Arc::new(AtomicBool::new(false));
    let mut ps_cfg = node_config(addr, "ps", &secrets["ps"], scenario);
    ps_cfg.store_dir = Some(store.to_path_buf());
    let flag = stop.clone();
    let ps = thread::spawn(move || run_ps(&ps_cfg, &flag));
    let agents = scenario
        .clients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut cfg = node_config(addr, c.id.as_str(), &secrets[c.id.as_str()], scenario);
            cfg.data.seed = scenario.client_seed(i);
            cfg.data.samples = scenario.client_samples(i);
            let flag = stop.clone();
            thread::spawn(move || run_agent(&cfg, &flag, &AtomicBool::new(false)))
        })
        .collect();
    Federation { ps, agents, stop }
}

impl Federation {
    fn finish(self) -> NodeExit {
        let exit = self.ps.join().unwrap().unwrap();
        self.stop.store(true, Ordering::SeqCst);
        for a in self.agents {
            assert_eq!(a.join().unwrap().unwrap(), NodeExit::Stopped);
        }
        exit
    }
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("examples/scenarios")
            .join(format!("{name}.toml")),
    )
    .unwrap()
}

fn options(client: &str, secret: &str) -> ClientOptions {
    ClientOptions {
        receive_maximum: Some(16),
        ..ClientOptions::new(client, client, secret)
    }
}

#[test]
fn deployment_matches_simulator() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("three_clinics");
    let report = run_sim(&sc, &dir.path().join("sim.store")).unwrap();

    let s = settings(dir.path(), "127.0.0.1:0");
    let clients: Vec<Identifier> = sc.clients.iter().map(|c| c.id.clone()).collect();
    let secrets = enroll_all(&s, &sc.fed, &sc.cep, &clients);
    let broker = RunningBroker::start(&s);
    let store_dir = dir.path().join("tcp.store");
    let started = Instant::now();
    let fed = spawn_federation(broker.addr, &sc, &secrets, &store_dir);
    assert_eq!(fed.finish(), NodeExit::Completed);
    eprintln!(
        "tcp deployment: {} rounds in {:?}",
        sc.round.max_rounds,
        started.elapsed()
    );
    broker.stop();

    let sim_store = ModelStore::open(dir.path().join("sim.store")).unwrap();
    let tcp_store = ModelStore::open(&store_dir).unwrap();
    let sim_list = sim_store.list_models(&sc.fed, &sc.cep).unwrap();
    let tcp_list = tcp_store.list_models(&sc.fed, &sc.cep).unwrap();
    assert_eq!(tcp_list.len(), sim_list.len());
    assert_eq!(tcp_list.len() as u32, sc.round.max_rounds);
    let mut worst = 0f64;
    for (a, b) in sim_list.iter().zip(&tcp_list) {
        assert_eq!(a.model_version, b.model_version);
        assert_eq!(a.contributors, b.contributors);
        let pa = ParameterSet::decode(&sim_store.fetch_model(&sc.fed, &sc.cep, a.model_version).unwrap()).unwrap();
        let pb = ParameterSet::decode(&tcp_store.fetch_model(&sc.fed, &sc.cep, b.model_version).unwrap()).unwrap();
        for (x, y) in pa.values().iter().zip(pb.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    let last = ParameterSet::decode(&tcp_store.fetch_model(&sc.fed, &sc.cep, sc.round.max_rounds).unwrap()).unwrap();
    for (x, y) in last.values().iter().zip(&report.final_model) {
        worst = worst.max((x - y).abs());
    }
    assert!(worst <= 1e-9, "tcp and simulated models differ by {worst}");
}

#[test]
fn training_resumes_after_broker_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = scenario("three_clinics");
    sc.round.round_timeout = Duration::from_millis(1500);
    // open-ended so the broker goes down mid-run; stopped below
    sc.round.max_rounds = 1_000_000;
    let s = settings(dir.path(), "127.0.0.1:0");
    let clients: Vec<Identifier> = sc.clients.iter().map(|c| c.id.clone()).collect();
    let secrets = enroll_all(&s, &sc.fed, &sc.cep, &clients);
    let broker = RunningBroker::start(&s);
    let addr = broker.addr;
    let store_dir = dir.path().join("store");
    let fed = spawn_federation(addr, &sc, &secrets, &store_dir);

    let store = ModelStore::open(&store_dir).unwrap();
    let latest = || store.latest_version(&sc.fed, &sc.cep).unwrap_or(0);
    let deadline = Instant::now() + Duration::from_secs(30);
    while latest() < 3 {
        assert!(Instant::now() < deadline, "no progress before the restart");
        thread::sleep(Duration::from_millis(1));
    }
    broker.stop();
    let at_crash = latest();
    thread::sleep(Duration::from_millis(300));

    let restarted = RunningBroker::start(&settings(dir.path(), &addr.to_string()));
    let back = Instant::now();
    let limit = sc.round.round_timeout * 2;
    while latest() <= at_crash {
        assert!(back.elapsed() < limit, "no new model within {limit:?} of the restart");
        thread::sleep(Duration::from_millis(5));
    }
    eprintln!("resumed after {:?}, crash at version {at_crash}", back.elapsed());
    fed.stop.store(true, Ordering::SeqCst);
    assert_eq!(fed.finish(), NodeExit::Stopped);
    restarted.stop();

    let list = store.list_models(&sc.fed, &sc.cep).unwrap();
    let versions: Vec<u32> = list.iter().map(|e| e.model_version).collect();
    assert!(versions.len() as u32 > at_crash);
    assert_eq!(versions, (1..=versions.len() as u32).collect::<Vec<_>>());
    assert!(list.iter().all(|e| !e.contributors.is_empty()));
}

#[test]
fn second_connection_takes_over_session() {
    let dir = tempfile::tempdir().unwrap();
    let s = settings(dir.path(), "127.0.0.1:0");
    let secrets = enroll_all(&s, &id("f"), &id("c"), &[id("clinic_a")]);
    let broker = RunningBroker::start(&s);

    let first = MqttClient::connect(broker.addr, options("clinic_a", &secrets["clinic_a"]), TIMEOUT).unwrap();
    let second = MqttClient::connect(broker.addr, options("clinic_a", &secrets["clinic_a"]), TIMEOUT).unwrap();
    let deadline = Instant::now() + TIMEOUT;
    loop {
        match first.next_event(Duration::from_millis(50)) {
            Some(ClientEvent::Disconnected(_)) => break,
            _ if !first.is_alive() => break,
            _ => assert!(Instant::now() < deadline, "old connection still open"),
        }
    }
    assert!(second.ping(TIMEOUT).is_ok());
    second.disconnect();
    broker.stop();
}

#[test]
fn revoked_client_is_disconnected_and_refused() {
    let dir = tempfile::tempdir().unwrap();
    let s = settings(dir.path(), "127.0.0.1:0");
    let secrets = enroll_all(&s, &id("f"), &id("c"), &[id("clinic_a")]);
    let broker = RunningBroker::start(&s);
    let secret = &secrets["clinic_a"];

    let live = MqttClient::connect(broker.addr, options("clinic_a", secret), TIMEOUT).unwrap();
    admin::revoke(&s, &id("clinic_a")).unwrap();
    let deadline = Instant::now() + TIMEOUT;
    while live.is_alive() {
        assert!(Instant::now() < deadline, "revoked session still open");
        let _ = live.next_event(Duration::from_millis(50));
    }

    match MqttClient::connect(broker.addr, options("clinic_a", secret), TIMEOUT) {
        Err(ClientError::Refused(code)) => assert_eq!(code, ConnAckCode::Banned.to_u8()),
        Err(e) => panic!("expected a refused connack, got {e}"),
        Ok(_) => panic!("revoked client was accepted"),
    }
    assert_eq!(
        raw_v311_connack(broker.addr, "clinic_a", secret),
        ConnAckCode::Banned.legacy()
    );
    // wrong secret is rejected the same way an unknown client is
    match MqttClient::connect(broker.addr, options("ps", "not-the-secret"), TIMEOUT) {
        Err(e) => assert!(e.is_auth_failure(), "{e}"),
        Ok(_) => panic!("bad secret was accepted"),
    }
    broker.stop();
}

#[test]
fn client_cannot_publish_outside_acl_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let s = settings(dir.path(), "127.0.0.1:0");
    let secrets = enroll_all(&s, &id("f"), &id("c"), &[id("clinic_a"), id("clinic_b")]);
    let broker = RunningBroker::start(&s);

    let b = MqttClient::connect(broker.addr, options("clinic_b", &secrets["clinic_b"]), TIMEOUT).unwrap();
    let codes = b
        .subscribe(&[("f/c/model_reply/clinic_a", QoS::AtLeastOnce)], TIMEOUT)
        .unwrap();
    assert!(codes.iter().all(|c| !matches!(c, fedmq::codec::SubAckCode::Granted(_))));

    let a = MqttClient::connect(broker.addr, options("clinic_a", &secrets["clinic_a"]), TIMEOUT).unwrap();
    let _ = a.publish("f/c/job_replies/clinic_b", &b"forged"[..], QoS::AtMostOnce, false);
    let deadline = Instant::now() + TIMEOUT;
    while a.is_alive() {
        assert!(Instant::now() < deadline, "offending publisher not disconnected");
        let _ = a.next_event(Duration::from_millis(50));
    }
    assert!(b.ping(TIMEOUT).is_ok());
    broker.stop();
}

/// The TCP client always speaks MQTT 5, so 3.1.1 is checked by hand.
fn raw_v311_connack(addr: SocketAddr, client: &str, secret: &str) -> u8 {
    let connect = Packet::Connect(Connect {
        protocol: ProtocolLevel::V311,
        client_id: client.into(),
        clean_session: true,
        keep_alive: 30,
        username: Some(client.into()),
        password: Some(secret.as_bytes().to_vec().into()),
        receive_maximum: None,
        max_packet_size: None,
    });
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(TIMEOUT)).unwrap();
    stream.write_all(&encode_packet(&connect).unwrap()).unwrap();
    let mut buf = [0u8; 4];
    stream.read_exact(&mut buf).unwrap();
    match decode_packet(&buf).unwrap().0 {
        Packet::ConnAck(a) => a.code,
        other => panic!("expected connack, got {other:?}"),
    }
}

fn fedmq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedmq"))
}

fn write_broker_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("broker.toml");
    std::fs::write(
        &path,
        "bind = \"127.0.0.1:0\"\ncredentials = \"creds\"\nacl = \"acl\"\nmetrics_file = \"metrics.txt\"\nshutdown_grace_ms = 200\n",
    )
    .unwrap();
    path
}

#[test]
fn binary_rejects_malformed_acl_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_broker_config(dir.path());
    let out = fedmq()
        .args(["admin", "--config"])
        .arg(&config)
        .args(["enroll", "ps", "f", "c", "--ps", "--iterations", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("secret "));

    let dup = fedmq()
        .args(["admin", "--config"])
        .arg(&config)
        .args(["enroll", "ps", "f", "c"])
        .output()
        .unwrap();
    assert_eq!(dup.status.code(), Some(3));

    let acl = dir.path().join("acl");
    let mut text = std::fs::read_to_string(&acl).unwrap();
    let bad_line = text.lines().count() + 1;
    text.push_str("ps publish\n");
    std::fs::write(&acl, text).unwrap();

    let out = fedmq().arg("broker").arg("--config").arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains(&format!(":{bad_line}:")),
        "no line number in {stderr:?}"
    );

    let missing = fedmq()
        .args(["ps", "--config"])
        .arg(dir.path().join("nope.toml"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn binary_broker_stops_on_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_broker_config(dir.path());
    let out = fedmq()
        .args(["admin", "--config"])
        .arg(&config)
        .args(["enroll", "clinic_a", "f", "c", "--iterations", "1"])
        .output()
        .unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let secret = stdout
        .lines()
        .find_map(|l| l.strip_prefix("secret "))
        .unwrap()
        .to_string();

    let mut child = fedmq()
        .arg("broker")
        .arg("--config")
        .arg(&config)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr: SocketAddr = line.trim().strip_prefix("listening on ").unwrap().parse().unwrap();

    let client = MqttClient::connect(addr, options("clinic_a", &secret), TIMEOUT).unwrap();
    assert!(client.ping(TIMEOUT).is_ok());
    let killed = Command::new("kill")
        .args(["-TERM", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(killed.success());
    let deadline = Instant::now() + Duration::from_secs(10);
    let status = loop {
        if let Some(s) = child.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "broker ignored SIGTERM");
        thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(status.code(), Some(0));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(!metrics.is_empty());
}
