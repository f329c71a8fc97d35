//! Versioned on-disk registry of global models.
//!
//! Layout under the store root:
//!
//! ```text
//! <root>/<fed>/<cep>/manifest.log          append-only, one line per version
//! <root>/<fed>/<cep>/0000000001.model      GlobalModel body bytes of version 1
//! ```
//!
//! Manifest line (space separated, newline terminated):
//!
//! ```text
//! 1 <version> <round> <created_at_unix_s> <sha256_hex> <contributors|->
//! ```
//!
//! The leading `1` is the line format version; contributors are
//! comma-separated client ids. A version exists once its manifest line is
//! complete; model files are written to a temp name and renamed before the
//! line is appended, so a crash at any point leaves either N or N-1
//! versions. A torn trailing line is ignored on read and truncated by the
//! next write.

mod channel;

pub use channel::*;

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::payload::{ModelListEntry, ParameterSet, PayloadError};
use crate::topic::Identifier;

const MANIFEST: &str = "manifest.log";
const LINE_FORMAT: &str = "1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("model body does not decode: {0}")]
    CorruptBody(PayloadError),
    #[error("unknown model version {version} for {fed}/{cep}")]
    UnknownVersion {
        fed: Identifier,
        cep: Identifier,
        version: u32,
    },
    #[error("digest mismatch for {fed}/{cep} version {version}")]
    IntegrityFailure {
        fed: Identifier,
        cep: Identifier,
        version: u32,
    },
    #[error("corrupt manifest line {line} in {path}")]
    CorruptManifest { path: PathBuf, line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelVersionRecord {
    pub fed: Identifier,
    pub cep: Identifier,
    pub model_version: u32,
    pub round: u32,
    pub contributors: Vec<Identifier>,
    pub created_at: u64,
    pub digest: [u8; 32],
    pub body: Vec<u8>,
}

impl ModelVersionRecord {
    pub fn entry(&self) -> ModelListEntry {
        ModelListEntry {
            model_version: self.model_version,
            round: self.round,
            created_at: self.created_at,
            contributors: self.contributors.clone(),
            digest: self.digest,
        }
    }
}

pub fn digest(body: &[u8]) -> [u8; 32] {
    Sha256::digest(body).into()
}

/// Single writer, any number of readers (in-process or other processes).
#[derive(Debug)]
pub struct ModelStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl ModelStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ModelStore {
            root,
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, fed: &Identifier, cep: &Identifier) -> PathBuf {
        self.root.join(fed.as_str()).join(cep.as_str())
    }

    fn model_path(dir: &Path, version: u32) -> PathBuf {
        dir.join(format!("{version:010}.model"))
    }

    pub fn store_model(
        &self,
        fed: &Identifier,
        cep: &Identifier,
        round: u32,
        contributors: &[Identifier],
        body: &[u8],
    ) -> Result<ModelVersionRecord, StoreError> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.store_model_at(fed, cep, round, contributors, body, now)
    }

    pub fn store_model_at(
        &self,
        fed: &Identifier,
        cep: &Identifier,
        round: u32,
        contributors: &[Identifier],
        body: &[u8],
        created_at: u64,
    ) -> Result<ModelVersionRecord, StoreError> {
        ParameterSet::decode(body).map_err(StoreError::CorruptBody)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.dir(fed, cep);
        fs::create_dir_all(&dir)?;
        let entries = read_manifest(&dir)?;
        let version = entries.last().map_or(1, |e| e.model_version + 1);
        let record = ModelVersionRecord {
            fed: fed.clone(),
            cep: cep.clone(),
            model_version: version,
            round,
            contributors: contributors.to_vec(),
            created_at,
            digest: digest(body),
            body: body.to_vec(),
        };
        let tmp = write_temp(&dir, version, body)?;
        fs::rename(&tmp, Self::model_path(&dir, version))?;
        append_manifest(&dir, &record)?;
        Ok(record)
    }

    /// Entries in ascending version order; empty for unknown pairs.
    pub fn list_models(&self, fed: &Identifier, cep: &Identifier) -> Result<Vec<ModelListEntry>, StoreError> {
        read_manifest(&self.dir(fed, cep))
    }

    pub fn latest_version(&self, fed: &Identifier, cep: &Identifier) -> Result<u32, StoreError> {
        Ok(self.list_models(fed, cep)?.last().map_or(0, |e| e.model_version))
    }

    /// Returns the stored body after re-verifying its digest.
    pub fn fetch_model(&self, fed: &Identifier, cep: &Identifier, version: u32) -> Result<Vec<u8>, StoreError> {
        Ok(self.fetch_record(fed, cep, version)?.body)
    }

    pub fn fetch_record(
        &self,
        fed: &Identifier,
        cep: &Identifier,
        version: u32,
    ) -> Result<ModelVersionRecord, StoreError> {
        let dir = self.dir(fed, cep);
        let entry = read_manifest(&dir)?
            .into_iter()
            .find(|e| e.model_version == version)
            .ok_or_else(|| StoreError::UnknownVersion {
                fed: fed.clone(),
                cep: cep.clone(),
                version,
            })?;
        let mut body = Vec::new();
        File::open(Self::model_path(&dir, version))?.read_to_end(&mut body)?;
        if digest(&body) != entry.digest {
            return Err(StoreError::IntegrityFailure {
                fed: fed.clone(),
                cep: cep.clone(),
                version,
            });
        }
        Ok(ModelVersionRecord {
            fed: fed.clone(),
            cep: cep.clone(),
            model_version: entry.model_version,
            round: entry.round,
            contributors: entry.contributors,
            created_at: entry.created_at,
            digest: entry.digest,
            body,
        })
    }

    /// Human-readable manifest dump.
    pub fn describe(&self, fed: &Identifier, cep: &Identifier) -> Result<String, StoreError> {
        let mut out = format!("# {fed}/{cep}\n# version round created_at digest contributors\n");
        for e in self.list_models(fed, cep)? {
            let contributors: Vec<&str> = e.contributors.iter().map(Identifier::as_str).collect();
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                e.model_version,
                e.round,
                e.created_at,
                hex::encode(e.digest),
                if contributors.is_empty() {
                    "-".to_string()
                } else {
                    contributors.join(",")
                }
            ));
        }
        Ok(out)
    }
}

fn write_temp(dir: &Path, version: u32, body: &[u8]) -> io::Result<PathBuf> {
    let tmp = dir.join(format!(".{version:010}.model.tmp"));
    let mut f = File::create(&tmp)?;
    f.write_all(body)?;
    f.sync_all()?;
    Ok(tmp)
}

fn manifest_line(r: &ModelVersionRecord) -> String {
    let contributors: Vec<&str> = r.contributors.iter().map(Identifier::as_str).collect();
    format!(
        "{LINE_FORMAT} {} {} {} {} {}\n",
        r.model_version,
        r.round,
        r.created_at,
        hex::encode(r.digest),
        if contributors.is_empty() {
            "-".to_string()
        } else {
            contributors.join(",")
        }
    )
}

fn append_manifest(dir: &Path, record: &ModelVersionRecord) -> io::Result<()> {
    let path = dir.join(MANIFEST);
    let mut f = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
    let len = f.metadata()?.len();
    if len > 0 {
        // drop a torn tail left by an interrupted append
        let text = fs::read(&path)?;
        let keep = text.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if keep as u64 != len {
            f.set_len(keep as u64)?;
        }
    }
    f.write_all(manifest_line(record).as_bytes())?;
    f.sync_all()?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

fn parse_line(line: &str) -> Option<ModelListEntry> {
    let mut parts = line.split(' ');
    if parts.next()? != LINE_FORMAT {
        return None;
    }
    let model_version = parts.next()?.parse().ok()?;
    let round = parts.next()?.parse().ok()?;
    let created_at = parts.next()?.parse().ok()?;
    let digest: [u8; 32] = hex::decode(parts.next()?).ok()?.try_into().ok()?;
    let contributors = match parts.next()? {
        "-" => Vec::new(),
        list => list
            .split(',')
            .map(Identifier::new)
            .collect::<Result<Vec<_>, _>>()
            .ok()?,
    };
    if parts.next().is_some() {
        return None;
    }
    Some(ModelListEntry {
        model_version,
        round,
        created_at,
        contributors,
        digest,
    })
}

fn read_manifest(dir: &Path) -> Result<Vec<ModelListEntry>, StoreError> {
    let path = dir.join(MANIFEST);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut entries: Vec<ModelListEntry> = Vec::new();
    let complete = text.rfind('\n').map_or("", |i| &text[..i]);
    for (i, line) in complete.lines().enumerate() {
        let entry = parse_line(line).ok_or_else(|| StoreError::CorruptManifest {
            path: path.clone(),
            line: i + 1,
        })?;
        if entries
            .last()
            .is_some_and(|prev| prev.model_version + 1 != entry.model_version)
            || entries.is_empty() && entry.model_version != 1
        {
            return Err(StoreError::CorruptManifest {
                path: path.clone(),
                line: i + 1,
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::logistic::initial_parameters;

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn body(v: f64) -> Vec<u8> {
        initial_parameters(2).with_values(vec![v, -v, 0.5]).unwrap().encode()
    }

    #[test]
    fn versions_start_at_one_and_increase() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let (f, c) = (id("f"), id("c"));
        assert!(store.list_models(&f, &c).unwrap().is_empty());
        let r1 = store.store_model(&f, &c, 1, &[id("a")], &body(1.0)).unwrap();
        let r2 = store.store_model(&f, &c, 2, &[id("a"), id("b")], &body(2.0)).unwrap();
        assert_eq!((r1.model_version, r2.model_version), (1, 2));
        let list = store.list_models(&f, &c).unwrap();
        assert_eq!(list.iter().map(|e| e.model_version).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(list[1].contributors, vec![id("a"), id("b")]);
        assert_eq!(store.latest_version(&f, &c).unwrap(), 2);
        assert_eq!(store.fetch_model(&f, &c, 2).unwrap(), body(2.0));
        assert_eq!(list[1], r2.entry());
    }

    #[test]
    fn unknown_version_and_pair_scoping() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        for r in 1..=3 {
            store.store_model(&id("f"), &id("c"), r, &[], &body(r as f64)).unwrap();
        }
        assert!(matches!(
            store.fetch_model(&id("f"), &id("c"), 99),
            Err(StoreError::UnknownVersion { version: 99, .. })
        ));
        assert!(store.list_models(&id("f"), &id("other")).unwrap().is_empty());
        assert!(store.list_models(&id("g"), &id("c")).unwrap().is_empty());
    }

    #[test]
    fn rejects_bodies_that_do_not_decode() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        assert!(matches!(
            store.store_model(&id("f"), &id("c"), 1, &[], b"garbage"),
            Err(StoreError::CorruptBody(_))
        ));
    }

    #[test]
    fn bit_flip_is_integrity_failure() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        store.store_model(&id("f"), &id("c"), 1, &[], &body(1.0)).unwrap();
        let path = ModelStore::model_path(&store.dir(&id("f"), &id("c")), 1);
        let mut raw = fs::read(&path).unwrap();
        raw[5] ^= 0x10;
        fs::write(&path, raw).unwrap();
        assert!(matches!(
            store.fetch_model(&id("f"), &id("c"), 1),
            Err(StoreError::IntegrityFailure { version: 1, .. })
        ));
    }

    #[test]
    fn crash_before_rename_keeps_previous_versions() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let (f, c) = (id("f"), id("c"));
        store.store_model(&f, &c, 1, &[], &body(1.0)).unwrap();
        store.store_model(&f, &c, 2, &[], &body(2.0)).unwrap();
        // interrupted third write: temp file exists, no rename, no manifest line
        write_temp(&store.dir(&f, &c), 3, &body(3.0)).unwrap();
        let reopened = ModelStore::open(dir.path()).unwrap();
        assert_eq!(reopened.latest_version(&f, &c).unwrap(), 2);
        let r = reopened.store_model(&f, &c, 3, &[], &body(3.5)).unwrap();
        assert_eq!(r.model_version, 3);
        assert_eq!(reopened.fetch_model(&f, &c, 3).unwrap(), body(3.5));
    }

    #[test]
    fn crash_after_rename_or_mid_append_recovers() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let (f, c) = (id("f"), id("c"));
        store.store_model(&f, &c, 1, &[], &body(1.0)).unwrap();
        let d = store.dir(&f, &c);
        // orphaned model file plus a torn manifest line for version 2
        let tmp = write_temp(&d, 2, &body(2.0)).unwrap();
        fs::rename(tmp, ModelStore::model_path(&d, 2)).unwrap();
        let mut m = OpenOptions::new().append(true).open(d.join(MANIFEST)).unwrap();
        m.write_all(b"1 2 2 170000").unwrap();
        drop(m);
        assert_eq!(store.latest_version(&f, &c).unwrap(), 1);
        let r = store.store_model(&f, &c, 2, &[id("z")], &body(9.0)).unwrap();
        assert_eq!(r.model_version, 2);
        let list = store.list_models(&f, &c).unwrap();
        assert_eq!(list.len(), 2);
        assert_eq!(store.fetch_model(&f, &c, 2).unwrap(), body(9.0));
    }

    #[test]
    fn describe_lists_versions() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        store
            .store_model_at(&id("f"), &id("c"), 4, &[id("a")], &body(1.0), 42)
            .unwrap();
        let text = store.describe(&id("f"), &id("c")).unwrap();
        assert!(text.contains("1 4 42 "), "{text}");
        assert!(text.trim_end().ends_with(" a"));
    }
}
