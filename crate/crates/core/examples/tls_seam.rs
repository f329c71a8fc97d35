//! The stream-wrapper seam where TLS plugs in. This wrapper only counts
//! bytes on the broker side; a TLS wrapper would perform its handshake in
//! `wrap` and hand back the encrypted reader and writer.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use fedmq::broker::transport::{StreamWrapper, WrappedStream};
use fedmq::broker::{BrokerServer, CredentialStore, ServerConfig};
use fedmq::client::{ClientOptions, MqttClient};
use fedmq::codec::QoS;
use fedmq::topic::{canonical_client_acl, Identifier};

#[derive(Default)]
struct Metered {
    read: Arc<AtomicU64>,
    written: Arc<AtomicU64>,
}

struct Counting<T> {
    inner: T,
    n: Arc<AtomicU64>,
}

impl<T: Read> Read for Counting<T> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let k = self.inner.read(buf)?;
        self.n.fetch_add(k as u64, Ordering::Relaxed);
        Ok(k)
    }
}

impl<T: Write> Write for Counting<T> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let k = self.inner.write(buf)?;
        self.n.fetch_add(k as u64, Ordering::Relaxed);
        Ok(k)
    }
    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

impl StreamWrapper for Metered {
    fn wrap(&self, stream: TcpStream) -> io::Result<WrappedStream> {
        let reader = Counting {
            inner: stream.try_clone()?,
            n: self.read.clone(),
        };
        let closer = stream.try_clone()?;
        Ok(WrappedStream {
            reader: Box::new(reader),
            writer: Box::new(Counting {
                inner: stream,
                n: self.written.clone(),
            }),
            shutdown: Box::new(move || {
                let _ = closer.shutdown(Shutdown::Both);
            }),
        })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let id = Identifier::new("clinic_a")?;
    let pairs = [(Identifier::new("f")?, Identifier::new("c")?)];
    let mut creds = CredentialStore::new();
    let secret = creds.enroll(id.clone(), "clinic_a", canonical_client_acl(&id, &pairs), 1000)?;

    let wrapper = Arc::new(Metered::default());
    let (read, written) = (wrapper.read.clone(), wrapper.written.clone());
    let config = ServerConfig {
        bind: "127.0.0.1:0".parse()?,
        ..ServerConfig::default()
    };
    let server = BrokerServer::start_with(config, creds, wrapper)?;

    let t = Duration::from_secs(5);
    let client = MqttClient::connect(
        server.local_addr(),
        ClientOptions::new("clinic_a", "clinic_a", secret),
        t,
    )?;
    client.subscribe(&[("f/c/job_request", QoS::AtMostOnce)], t)?;
    client.publish_wait("f/c/job_replies/clinic_a", vec![0u8; 1000], QoS::AtLeastOnce, false, t)?;
    client.disconnect();
    server.shutdown(Duration::from_secs(1));
    println!(
        "broker read {} bytes and wrote {} bytes through the wrapper",
        read.load(Ordering::Relaxed),
        written.load(Ordering::Relaxed)
    );
    Ok(())
}
