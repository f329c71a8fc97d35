//! MQTT client: protocol state in [`ClientSession`], blocking TCP I/O in
//! [`MqttClient`].

mod session;
mod tcp;

pub use session::*;
pub use tcp::*;
