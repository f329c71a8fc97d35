//! Stream wrapping seam. A TLS implementation wraps the accepted (or
//! dialed) TCP stream here and neither the broker core nor the client
//! state machine needs to know.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};

pub struct WrappedStream {
    pub reader: Box<dyn Read + Send>,
    pub writer: Box<dyn Write + Send>,
    /// Unblocks a reader stuck in `read` and tears the stream down.
    pub shutdown: Box<dyn Fn() + Send + Sync>,
}

pub trait StreamWrapper: Send + Sync + 'static {
    fn wrap(&self, stream: TcpStream) -> io::Result<WrappedStream>;
}

/// Unencrypted TCP.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainTcp;

impl StreamWrapper for PlainTcp {
    fn wrap(&self, stream: TcpStream) -> io::Result<WrappedStream> {
        let reader = stream.try_clone()?;
        let closer = stream.try_clone()?;
        Ok(WrappedStream {
            reader: Box::new(reader),
            writer: Box::new(stream),
            shutdown: Box::new(move || {
                let _ = closer.shutdown(Shutdown::Both);
            }),
        })
    }
}
