//! Operator commands that edit the broker's credential files or read the
//! model store. A running broker picks up credential edits on its next
//! tick.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use super::config::{BrokerSettings, ConfigError};
use super::daemon::exit;
use crate::broker::{AuthError, CredentialStore};
use crate::store::{ModelStore, StoreError};
use crate::topic::{canonical_client_acl, canonical_ps_acl, AclRule, Identifier};

#[derive(Debug, Error)]
pub enum AdminError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no metrics file configured")]
    NoMetricsFile,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl AdminError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AdminError::Auth(
                AuthError::DuplicateClient(_) | AuthError::DuplicateUsername(_) | AuthError::UnknownClient(_),
            ) => exit::CONFLICT,
            AdminError::Config(_) | AdminError::Auth(_) | AdminError::NoMetricsFile => exit::CONFIG,
            _ => exit::RUNTIME,
        }
    }
}

/// Result of `enroll`. The secret is not recoverable afterwards.
#[derive(Debug, Clone)]
pub struct Enrollment {
    pub client_id: Identifier,
    pub username: String,
    pub secret: String,
    pub fed: Identifier,
    pub cep: Identifier,
    pub acl: Vec<AclRule>,
}

impl fmt::Display for Enrollment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "client_id {}", self.client_id)?;
        writeln!(f, "username {}", self.username)?;
        writeln!(f, "secret {}", self.secret)?;
        writeln!(f, "federation {} {}", self.fed, self.cep)?;
        for rule in &self.acl {
            writeln!(f, "{} {}", rule.action.as_str(), rule.filter)?;
        }
        Ok(())
    }
}

/// Adds a client with the canonical ACL for one `(fed, cep)`. With `ps`
/// set the parameter-server rule set is granted instead.
pub fn enroll(
    settings: &BrokerSettings,
    client_id: Identifier,
    username: Option<&str>,
    fed: Identifier,
    cep: Identifier,
    ps: bool,
    iterations: u32,
) -> Result<Enrollment, AdminError> {
    let mut store = CredentialStore::load(&settings.credentials, &settings.acl)?;
    let pair = [(fed.clone(), cep.clone())];
    let acl = if ps {
        canonical_ps_acl(&pair)
    } else {
        canonical_client_acl(&client_id, &pair)
    };
    let username = username.unwrap_or(client_id.as_str()).to_string();
    let secret = store.enroll(client_id.clone(), &username, acl.clone(), iterations)?;
    store.save()?;
    Ok(Enrollment {
        client_id,
        username,
        secret,
        fed,
        cep,
        acl,
    })
}

/// Disables a client. Its live session is closed by the broker.
pub fn revoke(settings: &BrokerSettings, client_id: &Identifier) -> Result<(), AdminError> {
    let mut store = CredentialStore::load(&settings.credentials, &settings.acl)?;
    store.set_enabled(client_id, false)?;
    store.save()?;
    Ok(())
}

pub fn models(store_dir: &Path, fed: &Identifier, cep: &Identifier) -> Result<String, AdminError> {
    Ok(ModelStore::open(store_dir)?.describe(fed, cep)?)
}

/// The counters the broker last wrote to its metrics file.
pub fn metrics(settings: &BrokerSettings) -> Result<String, AdminError> {
    let path = settings.metrics_file.as_ref().ok_or(AdminError::NoMetricsFile)?;
    std::fs::read_to_string(path).map_err(|source| AdminError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(dir: &Path) -> BrokerSettings {
        BrokerSettings::from_toml("credentials = \"creds\"\nacl = \"acl\"\n", dir).unwrap()
    }

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    #[test]
    fn enroll_revoke_cycle() {
        let dir = tempfile::tempdir().unwrap();
        let s = settings(dir.path());
        let e = enroll(&s, id("clinic_a"), None, id("f"), id("c"), false, 1).unwrap();
        assert_eq!(e.secret.len(), 48);
        let text = e.to_string();
        assert!(text.contains("subscribe f/c/job_request"));
        assert!(text.contains("publish f/c/job_replies/clinic_a"));

        let dup = enroll(&s, id("clinic_a"), None, id("f"), id("c"), false, 1).unwrap_err();
        assert_eq!(dup.exit_code(), exit::CONFLICT);

        let store = CredentialStore::load(&s.credentials, &s.acl).unwrap();
        let (outcome, _) = store.authenticate("clinic_a", "clinic_a", e.secret.as_bytes());
        assert_eq!(outcome, crate::broker::AuthOutcome::Accepted);

        revoke(&s, &id("clinic_a")).unwrap();
        let store = CredentialStore::load(&s.credentials, &s.acl).unwrap();
        let (outcome, _) = store.authenticate("clinic_a", "clinic_a", e.secret.as_bytes());
        assert_eq!(outcome, crate::broker::AuthOutcome::Disabled);

        assert_eq!(revoke(&s, &id("nobody")).unwrap_err().exit_code(), exit::CONFLICT);
    }

    #[test]
    fn ps_enrollment_gets_wildcards() {
        let dir = tempfile::tempdir().unwrap();
        let e = enroll(&settings(dir.path()), id("ps"), None, id("f"), id("c"), true, 1).unwrap();
        let text = e.to_string();
        assert!(text.contains("subscribe f/c/job_replies/#"));
        assert!(text.contains("publish f/c/job_request"));
    }
}
