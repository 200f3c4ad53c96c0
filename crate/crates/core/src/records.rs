//! Sealed record files and the archives managers receive after the ballot.
//!
//! Every record is a [`SealedEnvelope`] stored as `<64-hex>.sealed`, created
//! with create-exclusive semantics so that a name can be claimed only once.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoError, Digest, SealedEnvelope};
use crate::protocol::Timestamp;

pub const SEALED_EXT: &str = "sealed";

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("record {0} already exists")]
    AlreadyExists(String),
    #[error("record {name}: {source}")]
    Malformed {
        name: String,
        #[source]
        source: CryptoError,
    },
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] io::Error),
}

/// Usage record for a redeemed VoteToken, sealed to the AuthMgr.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsageRecord {
    pub token_digest: Digest,
    pub used_at: Timestamp,
    pub username: String,
}

/// Plain mode only: one per VoteAuthorization the AuthSrv created.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedAuthorizationRecord {
    pub prn_digest: Digest,
    pub ballot_id: String,
}

/// Written by the VoteSrv when a VoteAuthorization is consumed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsedAuthorizationRecord {
    pub prn_digest: Digest,
    pub ballot_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFile {
    pub name: String,
    pub body: SealedEnvelope,
}

impl RecordFile {
    /// The filename parsed as a digest.
    pub fn digest(&self) -> Result<Digest, CryptoError> {
        Digest::from_hex(&self.name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Archive {
    pub files: Vec<RecordFile>,
}

impl Archive {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<(), RecordError> {
        let store = RecordDir::open(dir)?;
        for f in &self.files {
            store.create_named(&f.name, &f.body)?;
        }
        Ok(())
    }

    /// Reads every `*.sealed` file. Filenames are kept verbatim.
    pub fn read_dir(dir: &Path) -> Result<Self, RecordError> {
        let mut files = Vec::new();
        let entries = fs::read_dir(dir).map_err(|e| RecordError::Io(dir.to_owned(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| RecordError::Io(dir.to_owned(), e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some(SEALED_EXT) {
                continue;
            }
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_owned();
            let bytes = fs::read(&path).map_err(|e| RecordError::Io(path.clone(), e))?;
            let body = SealedEnvelope::from_bytes(&bytes)
                .map_err(|source| RecordError::Malformed { name: name.clone(), source })?;
            files.push(RecordFile { name, body });
        }
        files.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Self { files })
    }
}

/// A directory of sealed records.
#[derive(Clone, Debug)]
pub struct RecordDir {
    path: PathBuf,
}

impl RecordDir {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, RecordError> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(|e| RecordError::Io(path.clone(), e))?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn file_path(&self, name: &str) -> PathBuf {
        self.path.join(format!("{name}.{SEALED_EXT}"))
    }

    pub fn create(&self, name: &Digest, body: &SealedEnvelope) -> Result<(), RecordError> {
        self.create_named(&name.to_hex(), body)
    }

    fn create_named(&self, name: &str, body: &SealedEnvelope) -> Result<(), RecordError> {
        let path = self.file_path(name);
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(RecordError::AlreadyExists(name.to_owned()))
            }
            Err(e) => return Err(RecordError::Io(path, e)),
        };
        file.write_all(&body.to_bytes())
            .and_then(|_| file.sync_data())
            .map_err(|e| RecordError::Io(path, e))
    }

    pub fn contains(&self, name: &Digest) -> bool {
        self.file_path(&name.to_hex()).exists()
    }

    /// Digests of all well-named records.
    pub fn names(&self) -> Result<Vec<Digest>, RecordError> {
        Ok(self
            .load()?
            .files
            .iter()
            .filter_map(|f| f.digest().ok())
            .collect())
    }

    pub fn load(&self) -> Result<Archive, RecordError> {
        Archive::read_dir(&self.path)
    }
}
