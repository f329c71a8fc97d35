//! Credentials and ACL files.
//!
//! Credentials file, one record per line, fields separated by whitespace:
//!
//! ```text
//! <client_id> <username> <salt_hex> pbkdf2-sha256:<iterations>:<hash_hex> <enabled 0|1>
//! ```
//!
//! ACL file, one rule per line: `<client_id> <publish|subscribe> <filter>`.
//! In both files blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use pbkdf2::pbkdf2_hmac;
use rand::RngCore;
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::topic::{AclRule, Action, Identifier, TopicFilter};

pub const DEFAULT_ITERATIONS: u32 = 100_000;
const HASH_SCHEME: &str = "pbkdf2-sha256";
const SALT_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("{path}:{line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("client {0} is already enrolled")]
    DuplicateClient(Identifier),
    #[error("username {0} is already taken")]
    DuplicateUsername(String),
    #[error("unknown client {0}")]
    UnknownClient(Identifier),
    #[error("invalid username {0:?}")]
    InvalidUsername(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretHash {
    pub iterations: u32,
    pub salt: Vec<u8>,
    pub hash: [u8; 32],
}

impl fmt::Debug for SecretHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretHash")
            .field("iterations", &self.iterations)
            .finish_non_exhaustive()
    }
}

impl SecretHash {
    pub fn derive(secret: &[u8], salt: Vec<u8>, iterations: u32) -> Self {
        let mut hash = [0u8; 32];
        pbkdf2_hmac::<Sha256>(secret, &salt, iterations, &mut hash);
        SecretHash { iterations, salt, hash }
    }

    pub fn with_random_salt(secret: &[u8], iterations: u32) -> Self {
        let mut salt = vec![0u8; SALT_LEN];
        rand::rng().fill_bytes(&mut salt);
        Self::derive(secret, salt, iterations)
    }

    pub fn verify(&self, secret: &[u8]) -> bool {
        let mut candidate = [0u8; 32];
        pbkdf2_hmac::<Sha256>(secret, &self.salt, self.iterations, &mut candidate);
        candidate.ct_eq(&self.hash).into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientCredentials {
    pub client_id: Identifier,
    pub username: String,
    pub secret_hash: SecretHash,
    pub acl: Vec<AclRule>,
    pub enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthOutcome {
    Accepted,
    BadCredentials,
    Disabled,
}

/// Random secret handed to a client once at enrollment.
pub fn generate_secret() -> String {
    let mut bytes = [0u8; 24];
    rand::rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

fn valid_username(u: &str) -> bool {
    !u.is_empty() && u.len() <= 255 && !u.starts_with('#') && !u.chars().any(char::is_whitespace)
}

#[derive(Debug, Default)]
pub struct CredentialStore {
    clients: BTreeMap<Identifier, ClientCredentials>,
    files: Option<Files>,
}

#[derive(Debug)]
struct Files {
    credentials: PathBuf,
    acl: PathBuf,
    stamp: (Option<SystemTime>, Option<SystemTime>),
}

fn mtime(path: &Path) -> Option<SystemTime> {
    fs::metadata(path).and_then(|m| m.modified()).ok()
}

impl CredentialStore {
    /// Empty in-memory store.
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads both files. A missing file counts as empty so that `admin
    /// enroll` can bootstrap a fresh deployment.
    pub fn load(credentials: impl Into<PathBuf>, acl: impl Into<PathBuf>) -> Result<Self, AuthError> {
        let credentials = credentials.into();
        let acl = acl.into();
        let stamp = (mtime(&credentials), mtime(&acl));
        let clients = parse_files(&credentials, &acl)?;
        Ok(CredentialStore {
            clients,
            files: Some(Files {
                credentials,
                acl,
                stamp,
            }),
        })
    }

    /// Re-reads the backing files if either changed on disk. On a parse
    /// error the previous contents stay in force.
    pub fn reload_if_changed(&mut self) -> Result<bool, AuthError> {
        let Some(files) = &mut self.files else {
            return Ok(false);
        };
        let stamp = (mtime(&files.credentials), mtime(&files.acl));
        if stamp == files.stamp {
            return Ok(false);
        }
        let clients = parse_files(&files.credentials, &files.acl)?;
        files.stamp = stamp;
        self.clients = clients;
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn get(&self, client_id: &Identifier) -> Option<&ClientCredentials> {
        self.clients.get(client_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClientCredentials> {
        self.clients.values()
    }

    pub fn insert(&mut self, record: ClientCredentials) -> Result<(), AuthError> {
        if self.clients.contains_key(&record.client_id) {
            return Err(AuthError::DuplicateClient(record.client_id));
        }
        if !valid_username(&record.username) {
            return Err(AuthError::InvalidUsername(record.username));
        }
        if self.clients.values().any(|c| c.username == record.username) {
            return Err(AuthError::DuplicateUsername(record.username));
        }
        self.clients.insert(record.client_id.clone(), record);
        Ok(())
    }

    /// Creates a record with a fresh secret and returns the secret.
    pub fn enroll(
        &mut self,
        client_id: Identifier,
        username: &str,
        acl: Vec<AclRule>,
        iterations: u32,
    ) -> Result<String, AuthError> {
        let secret = generate_secret();
        self.insert(ClientCredentials {
            client_id,
            username: username.to_string(),
            secret_hash: SecretHash::with_random_salt(secret.as_bytes(), iterations),
            acl,
            enabled: true,
        })?;
        Ok(secret)
    }

    pub fn set_enabled(&mut self, client_id: &Identifier, enabled: bool) -> Result<(), AuthError> {
        let record = self
            .clients
            .get_mut(client_id)
            .ok_or_else(|| AuthError::UnknownClient(client_id.clone()))?;
        record.enabled = enabled;
        Ok(())
    }

    /// Checks a CONNECT's credentials. The username must belong to the
    /// record whose client id the connection claims.
    pub fn authenticate(&self, client_id: &str, username: &str, secret: &[u8]) -> (AuthOutcome, Option<&[AclRule]>) {
        let Some(record) = self.clients.values().find(|c| c.username == username) else {
            return (AuthOutcome::BadCredentials, None);
        };
        if record.client_id.as_str() != client_id || !record.secret_hash.verify(secret) {
            return (AuthOutcome::BadCredentials, None);
        }
        if !record.enabled {
            return (AuthOutcome::Disabled, None);
        }
        (AuthOutcome::Accepted, Some(&record.acl))
    }

    /// Writes both files through a temporary file and rename.
    pub fn save(&mut self) -> Result<(), AuthError> {
        let Some(files) = &mut self.files else {
            return Ok(());
        };
        let mut creds = String::new();
        let mut acl = String::new();
        for c in self.clients.values() {
            creds.push_str(&format!(
                "{} {} {} {}:{}:{} {}\n",
                c.client_id,
                c.username,
                hex::encode(&c.secret_hash.salt),
                HASH_SCHEME,
                c.secret_hash.iterations,
                hex::encode(c.secret_hash.hash),
                u8::from(c.enabled)
            ));
            for rule in &c.acl {
                acl.push_str(&format!("{} {} {}\n", c.client_id, rule.action.as_str(), rule.filter));
            }
        }
        write_atomic(&files.credentials, &creds)?;
        write_atomic(&files.acl, &acl)?;
        files.stamp = (mtime(&files.credentials), mtime(&files.acl));
        Ok(())
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), AuthError> {
    let io = |source| AuthError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents.as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, AuthError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(source) => {
            return Err(AuthError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

fn parse_files(cred_path: &Path, acl_path: &Path) -> Result<BTreeMap<Identifier, ClientCredentials>, AuthError> {
    let mut store = CredentialStore::new();
    for (line, text) in read_lines(cred_path)? {
        let err = |message: String| AuthError::Config {
            path: cred_path.to_path_buf(),
            line,
            message,
        };
        let record = parse_credential(&text).map_err(err)?;
        store.insert(record).map_err(|e| err(e.to_string()))?;
    }
    for (line, text) in read_lines(acl_path)? {
        let err = |message: String| AuthError::Config {
            path: acl_path.to_path_buf(),
            line,
            message,
        };
        let fields: Vec<&str> = text.split_whitespace().collect();
        let [client, action, filter] = fields[..] else {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        };
        let client = Identifier::new(client).map_err(|e| err(e.to_string()))?;
        let action: Action = action
            .parse()
            .map_err(|e: crate::topic::TopicError| err(e.to_string()))?;
        let filter = TopicFilter::parse(filter).map_err(|e| err(e.to_string()))?;
        let record = store
            .clients
            .get_mut(&client)
            .ok_or_else(|| err(format!("no credentials for client {client}")))?;
        record.acl.push(AclRule::new(action, filter));
    }
    Ok(store.clients)
}

fn parse_credential(text: &str) -> Result<ClientCredentials, String> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    let [client_id, username, salt, hash, enabled] = fields[..] else {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    };
    let client_id = Identifier::new(client_id).map_err(|e| e.to_string())?;
    let salt = hex::decode(salt).map_err(|_| "salt is not hex".to_string())?;
    let mut parts = hash.split(':');
    let (Some(HASH_SCHEME), Some(iters), Some(hex_hash), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(format!("hash must look like {HASH_SCHEME}:<iterations>:<hex>"));
    };
    let iterations: u32 = iters.parse().ok().filter(|&n| n > 0).ok_or("bad iteration count")?;
    let hash: [u8; 32] = hex::decode(hex_hash)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or("hash must be 32 hex-encoded bytes")?;
    let enabled = match enabled {
        "1" => true,
        "0" => false,
        other => return Err(format!("enabled must be 0 or 1, found {other:?}")),
    };
    Ok(ClientCredentials {
        client_id,
        username: username.to_string(),
        secret_hash: SecretHash { iterations, salt, hash },
        acl: Vec::new(),
        enabled,
    })
}
