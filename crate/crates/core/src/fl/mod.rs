//! Federated-learning round logic and the synthetic training workload.

mod aggregate;
mod data;
pub mod logistic;
mod ps;
mod trainer;

pub use aggregate::*;
pub use data::*;
pub use ps::*;
pub use trainer::*;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::QoS;
use crate::payload::PayloadError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlError {
    #[error("no updates to aggregate")]
    EmptyUpdateSet,
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("total sample weight is zero")]
    ZeroTotalWeight,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset shape is inconsistent")]
    BadDataset,
    #[error("template for round {got} is older than round {last}")]
    StaleRound { got: u32, last: u32 },
    #[error("invalid round config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Payload(#[from] PayloadError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    pub min_clients: usize,
    #[serde(with = "duration_ms", rename = "round_timeout_ms")]
    pub round_timeout: Duration,
    pub max_rounds: u32,
    pub local_epochs: u32,
    pub learning_rate: f64,
    #[serde(with = "qos_serde")]
    pub qos: QoS,
    /// zlib-compress model bodies in envelopes.
    pub compress: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            min_clients: 3,
            round_timeout: Duration::from_secs(30),
            max_rounds: 30,
            local_epochs: 5,
            learning_rate: 0.1,
            qos: QoS::AtMostOnce,
            compress: false,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        if self.min_clients == 0 {
            return Err(FlError::InvalidConfig("min_clients must be at least 1"));
        }
        if self.round_timeout.is_zero() {
            return Err(FlError::InvalidConfig("round_timeout must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FlError::InvalidConfig("learning_rate must be positive"));
        }
        Ok(())
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

pub(crate) mod qos_serde {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::codec::QoS;

    pub fn serialize<S: Serializer>(q: &QoS, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(q.as_u8())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<QoS, D::Error> {
        let v = u8::deserialize(d)?;
        QoS::from_u8(v).ok_or_else(|| D::Error::custom(format!("qos must be 0, 1 or 2, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(RoundConfig::default().validate().is_ok());
        let bad = RoundConfig {
            min_clients: 0,
            ..RoundConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RoundConfig {
            round_timeout: Duration::ZERO,
            ..RoundConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn defaults_follow_reference_topology() {
        let c = RoundConfig::default();
        assert_eq!(c.min_clients, 3);
        assert_eq!(c.qos, QoS::AtMostOnce);
    }
}
