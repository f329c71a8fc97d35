use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::net::NetConfig;
use crate::fl::RoundConfig;
use crate::topic::Identifier;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// A one-process federation run. See `examples/scenarios/*.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub fed: Identifier,
    pub cep: Identifier,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_samples")]
    pub samples_per_client: usize,
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    /// Accuracy whose first crossing is reported as `rounds_to_target`.
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    /// Upper bound on simulated time, in milliseconds.
    #[serde(default = "default_time_limit")]
    pub time_limit_ms: u64,
    #[serde(default)]
    pub round: RoundConfig,
    #[serde(default)]
    pub network: NetworkSpec,
    pub clients: Vec<ClientSpec>,
    #[serde(default)]
    pub churn: Vec<ChurnSpec>,
}

fn default_dim() -> usize {
    4
}
fn default_samples() -> usize {
    200
}
fn default_separation() -> f64 {
    4.0
}
fn default_test_samples() -> usize {
    1000
}
fn default_target() -> f64 {
    0.95
}
fn default_time_limit() -> u64 {
    3_600_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub latency_ms: u64,
    pub jitter_ms: u64,
    pub drop_rate: f64,
    pub tick_ms: u64,
    /// Broker and client retransmission interval.
    pub retry_ms: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            latency_ms: 5,
            jitter_ms: 0,
            drop_rate: 0.0,
            tick_ms: 100,
            retry_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub id: Identifier,
    /// Data seed; defaults to a value derived from the scenario seed and
    /// the client's position.
    pub seed: Option<u64>,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSpec {
    pub client: Identifier,
    /// The client unsubscribes when the model for the following round is
    /// announced.
    pub leave_after_round: u32,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if self.clients.is_empty() {
            return invalid("at least one client is required");
        }
        if self.dim == 0 {
            return invalid("dim must be positive");
        }
        if !(0.0..1.0).contains(&self.network.drop_rate) {
            return invalid("drop_rate must be in [0, 1)");
        }
        if self.network.tick_ms == 0 || self.network.retry_ms == 0 {
            return invalid("tick_ms and retry_ms must be positive");
        }
        let mut ids: Vec<&Identifier> = self.clients.iter().map(|c| &c.id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("client ids must be unique");
        }
        if let Some(c) = self
            .churn
            .iter()
            .find(|c| !self.clients.iter().any(|k| k.id == c.client))
        {
            return Err(ScenarioError::Invalid(format!(
                "churn names unknown client {}",
                c.client
            )));
        }
        self.round.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            latency: Duration::from_millis(self.network.latency_ms),
            jitter: Duration::from_millis(self.network.jitter_ms),
            drop_rate: self.network.drop_rate,
            seed: self.seed,
            tick: Duration::from_millis(self.network.tick_ms),
        }
    }

    pub fn client_seed(&self, index: usize) -> u64 {
        self.clients[index]
            .seed
            .unwrap_or(self.seed.wrapping_mul(1000).wrapping_add(index as u64 + 1))
    }

    pub fn client_samples(&self, index: usize) -> usize {
        self.clients[index].samples.unwrap_or(self.samples_per_client)
    }

    /// Seed of the held-out evaluation set.
    pub fn test_seed(&self) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(999)
    }
}
