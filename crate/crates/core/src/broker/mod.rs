//! Publish/subscribe broker: credentials, ACL enforcement, wildcard
//! routing, QoS handshakes and per-session flow control.

pub mod auth;
mod core;
mod metrics;
pub mod server;
pub mod transport;
mod trie;

pub use self::core::*;
pub use auth::{AuthError, AuthOutcome, ClientCredentials, CredentialStore, SecretHash, DEFAULT_ITERATIONS};
pub use metrics::Metrics;
pub use server::{BrokerServer, ServerConfig, ServerHandle};
pub use trie::SubscriptionTrie;
