//! A broker on a local port with a parameter server and two clients
//! talking through blocking TCP clients.

use std::time::Duration;

use fedmq::broker::{BrokerServer, CredentialStore, ServerConfig};
use fedmq::client::{ClientOptions, MqttClient};
use fedmq::codec::QoS;
use fedmq::topic::{canonical_client_acl, canonical_ps_acl, Identifier};

const T: Duration = Duration::from_secs(5);

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let id = |s: &str| Identifier::new(s).unwrap();
    let pairs = [(id("f"), id("c"))];
    let mut creds = CredentialStore::new();
    let ps_secret = creds.enroll(id("ps"), "ps", canonical_ps_acl(&pairs), 1000)?;
    let a_secret = creds.enroll(
        id("clinic_a"),
        "clinic_a",
        canonical_client_acl(&id("clinic_a"), &pairs),
        1000,
    )?;
    let b_secret = creds.enroll(
        id("clinic_b"),
        "clinic_b",
        canonical_client_acl(&id("clinic_b"), &pairs),
        1000,
    )?;

    let config = ServerConfig {
        bind: "127.0.0.1:0".parse()?,
        ..ServerConfig::default()
    };
    let server = BrokerServer::start(config, creds)?;
    let addr = server.local_addr();
    println!("broker on {addr}");

    let ps = MqttClient::connect(addr, ClientOptions::new("ps", "ps", ps_secret), T)?;
    ps.subscribe(&[("f/c/job_replies/#", QoS::AtLeastOnce)], T)?;
    // retained, so clients subscribing later still get it
    ps.publish_wait("f/c/job_request", &b"model v0"[..], QoS::AtLeastOnce, true, T)?;

    let a = MqttClient::connect(addr, ClientOptions::new("clinic_a", "clinic_a", a_secret), T)?;
    let b = MqttClient::connect(addr, ClientOptions::new("clinic_b", "clinic_b", b_secret.clone()), T)?;
    for (name, c) in [("clinic_a", &a), ("clinic_b", &b)] {
        let codes = c.subscribe(
            &[
                ("f/c/job_request", QoS::AtLeastOnce),
                ("f/c/job_replies/#", QoS::AtMostOnce),
            ],
            T,
        )?;
        println!("{name} SUBACK {codes:?}");
        let m = c.next_message(T).expect("retained template");
        println!("{name} received {} {:?}", m.topic, m.payload);
        c.publish_wait(
            &format!("f/c/job_replies/{name}"),
            format!("update from {name}"),
            QoS::AtLeastOnce,
            false,
            T,
        )?;
    }
    for _ in 0..2 {
        let m = ps.next_message(T).expect("update");
        println!("ps received {} {:?}", m.topic, m.payload);
    }
    println!("ping rtt {:?}", ps.ping(T)?);

    match MqttClient::connect(addr, ClientOptions::new("clinic_b", "clinic_b", "wrong"), T) {
        Err(e) => println!("wrong secret: {e}"),
        Ok(_) => println!("wrong secret accepted?"),
    }
    // a second login with the same id replaces the first session
    let b2 = MqttClient::connect(addr, ClientOptions::new("clinic_b", "clinic_b", b_secret), T)?;
    std::thread::sleep(Duration::from_millis(200));
    println!("old clinic_b alive: {}, new alive: {}", b.is_alive(), b2.is_alive());

    print!("{}", server.metrics().render());
    server.shutdown(Duration::from_secs(1));
    Ok(())
}
