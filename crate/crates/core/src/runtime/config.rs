//! TOML configuration for the daemons. Relative paths are resolved against
//! the directory holding the config file. Command-line flags and `FEDMQ_*`
//! environment variables override file values; the binary applies them
//! through the `apply_*` helpers so the precedence lives in one place.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::broker::{BrokerConfig, ServerConfig};
use crate::codec::QoS;
use crate::fl::RoundConfig;
use crate::topic::Identifier;

use super::FedCep;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationRef {
    pub fed: Identifier,
    pub cep: Identifier,
}

/// Synthetic local shard of an agent. The parameter server only reads
/// `dim`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub seed: u64,
    pub samples: usize,
    pub dim: usize,
    pub class_separation: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            seed: 1,
            samples: 200,
            dim: 4,
            class_separation: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconnectSpec {
    pub initial_ms: u64,
    pub max_ms: u64,
}

impl Default for ReconnectSpec {
    fn default() -> Self {
        ReconnectSpec {
            initial_ms: 1_000,
            max_ms: 60_000,
        }
    }
}

/// Configuration shared by the `ps` and `agent` daemons.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    #[serde(default = "default_broker")]
    pub broker: String,
    pub client_id: Identifier,
    /// Defaults to the client id.
    pub username: Option<String>,
    pub secret: Option<String>,
    pub secret_file: Option<PathBuf>,
    pub federations: Vec<FederationRef>,
    /// Round schedule for the PS. Agents take `local_epochs`,
    /// `learning_rate`, `qos` and `compress` from here as well.
    #[serde(default)]
    pub round: RoundConfig,
    /// Model store root; required for the PS.
    pub store_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default = "default_keep_alive")]
    pub keep_alive_s: u16,
    #[serde(default)]
    pub reconnect: ReconnectSpec,
    pub log_level: Option<String>,
}

fn default_broker() -> String {
    "127.0.0.1:1883".into()
}

fn default_keep_alive() -> u16 {
    30
}

impl NodeConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: NodeConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: base.display().to_string(),
            source,
        })?;
        resolve(base, &mut cfg.secret_file);
        resolve(base, &mut cfg.store_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn apply_overrides(&mut self, broker: Option<String>, secret_file: Option<PathBuf>, log_level: Option<String>) {
        if let Some(b) = broker {
            self.broker = b;
        }
        if let Some(f) = secret_file {
            self.secret = None;
            self.secret_file = Some(f);
        }
        if log_level.is_some() {
            self.log_level = log_level;
        }
    }

    pub fn username(&self) -> &str {
        self.username.as_deref().unwrap_or(self.client_id.as_str())
    }

    pub fn federations(&self) -> Vec<FedCep> {
        self.federations
            .iter()
            .map(|f| (f.fed.clone(), f.cep.clone()))
            .collect()
    }

    /// The inline secret, or the first line of `secret_file`.
    pub fn resolve_secret(&self) -> Result<String, ConfigError> {
        match (&self.secret, &self.secret_file) {
            (Some(s), None) => Ok(s.clone()),
            (None, Some(path)) => {
                let text = read(path)?;
                match text.lines().next().map(str::trim) {
                    Some(s) if !s.is_empty() => Ok(s.to_string()),
                    _ => invalid(format!("{}: secret file is empty", path.display())),
                }
            }
            (Some(_), Some(_)) => invalid("set either secret or secret_file, not both"),
            (None, None) => invalid("one of secret or secret_file is required"),
        }
    }

    pub fn reconnect_bounds(&self) -> (Duration, Duration) {
        (
            Duration::from_millis(self.reconnect.initial_ms),
            Duration::from_millis(self.reconnect.max_ms),
        )
    }

    fn validate_common(&self) -> Result<(), ConfigError> {
        if self.federations.is_empty() {
            return invalid("at least one [[federations]] entry is required");
        }
        self.resolve_secret()?;
        if self.reconnect.initial_ms == 0 || self.reconnect.max_ms < self.reconnect.initial_ms {
            return invalid("reconnect.initial_ms must be positive and not above reconnect.max_ms");
        }
        self.round.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate_ps(&self) -> Result<(), ConfigError> {
        self.validate_common()?;
        if self.store_dir.is_none() {
            return invalid("store_dir is required for the parameter server");
        }
        if self.data.dim == 0 {
            return invalid("data.dim must be positive");
        }
        Ok(())
    }

    pub fn validate_agent(&self) -> Result<(), ConfigError> {
        self.validate_common()?;
        if self.data.dim == 0 || self.data.samples == 0 {
            return invalid("data.dim and data.samples must be positive");
        }
        Ok(())
    }
}

/// Configuration of the `broker` daemon.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerSettings {
    #[serde(default = "default_bind")]
    pub bind: String,
    pub credentials: PathBuf,
    pub acl: PathBuf,
    /// Counter dump target, rewritten periodically and on SIGUSR1.
    pub metrics_file: Option<PathBuf>,
    #[serde(default = "default_metrics_interval")]
    pub metrics_interval_s: u64,
    #[serde(default = "default_max_qos")]
    pub max_qos: u8,
    #[serde(default = "default_queue")]
    pub max_queue_per_client: usize,
    pub max_packet_size: Option<usize>,
    #[serde(default = "default_receive_maximum")]
    pub receive_maximum: u16,
    #[serde(default = "default_retry_ms")]
    pub retry_ms: u64,
    #[serde(default = "default_grace_ms")]
    pub shutdown_grace_ms: u64,
    pub log_level: Option<String>,
}

fn default_bind() -> String {
    "127.0.0.1:1883".into()
}
fn default_metrics_interval() -> u64 {
    60
}
fn default_max_qos() -> u8 {
    2
}
fn default_queue() -> usize {
    1000
}
fn default_receive_maximum() -> u16 {
    32
}
fn default_retry_ms() -> u64 {
    5_000
}
fn default_grace_ms() -> u64 {
    2_000
}

impl BrokerSettings {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut s: BrokerSettings = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: base.display().to_string(),
            source,
        })?;
        for p in [&mut s.credentials, &mut s.acl] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        resolve(base, &mut s.metrics_file);
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    /// `port` replaces only the port of `bind`.
    pub fn apply_overrides(&mut self, port: Option<u16>, log_level: Option<String>) -> Result<(), ConfigError> {
        if let Some(port) = port {
            let mut addr = self.bind_addr()?;
            addr.set_port(port);
            self.bind = addr.to_string();
        }
        if log_level.is_some() {
            self.log_level = log_level;
        }
        Ok(())
    }

    pub fn bind_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.bind
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("bind {:?} is not an ip:port address", self.bind)))
    }

    pub fn server_config(&self) -> Result<ServerConfig, ConfigError> {
        let Some(max_qos) = QoS::from_u8(self.max_qos) else {
            return invalid("max_qos must be 0, 1 or 2");
        };
        if self.receive_maximum == 0 || self.max_queue_per_client == 0 || self.retry_ms == 0 {
            return invalid("receive_maximum, max_queue_per_client and retry_ms must be positive");
        }
        let defaults = BrokerConfig::default();
        Ok(ServerConfig {
            bind: self.bind_addr()?,
            broker: BrokerConfig {
                max_qos,
                max_queue_per_client: self.max_queue_per_client,
                max_packet_size: self.max_packet_size.unwrap_or(defaults.max_packet_size),
                default_receive_maximum: self.receive_maximum,
                retry_interval: Duration::from_millis(self.retry_ms),
            },
            ..ServerConfig::default()
        })
    }
}
