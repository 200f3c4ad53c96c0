//! Append-only, SHA-256 hash-chained audit log.
//!
//! One JSON object per line. Each entry's `hash` covers the previous entry's
//! hash and the entry's own fields, so removing, reordering or editing a line
//! breaks the chain. Dropping entries from the tail is caught by checking the
//! head against an anchor held by the AuthMgr.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{digest, Digest};
use crate::protocol::{to_canonical_json, Timestamp};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit log {0}: {1}")]
    Io(PathBuf, #[source] io::Error),
    #[error("audit log is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub at: Timestamp,
    pub actor: String,
    pub action: String,
    pub allowed: bool,
    /// Seal state when the attempt was made.
    pub sealed: bool,
    pub prev: Digest,
    pub hash: Digest,
}

#[derive(Serialize)]
struct HashedFields<'a> {
    seq: u64,
    at: &'a Timestamp,
    actor: &'a str,
    action: &'a str,
    allowed: bool,
    sealed: bool,
}

pub fn genesis() -> Digest {
    Digest::from_bytes([0; 32])
}

impl AuditEntry {
    fn compute_hash(&self) -> Digest {
        let fields = HashedFields {
            seq: self.seq,
            at: &self.at,
            actor: &self.actor,
            action: &self.action,
            allowed: self.allowed,
            sealed: self.sealed,
        };
        let mut data = self.prev.to_hex().into_bytes();
        data.push(b'\n');
        data.extend(to_canonical_json(&fields));
        digest(&data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainVerification {
    pub valid: bool,
    pub entries: usize,
    pub head: Digest,
    pub problem: Option<String>,
}

/// Recomputes the chain over the log text. With `anchor`, the final head must
/// also equal it.
pub fn verify_chain(text: &str, anchor: Option<&Digest>) -> ChainVerification {
    let fail = |entries, head, problem: String| ChainVerification {
        valid: false,
        entries,
        head,
        problem: Some(problem),
    };
    let mut head = genesis();
    let mut count = 0usize;
    if !text.is_empty() && !text.ends_with('\n') {
        return fail(0, head, "final line is truncated".into());
    }
    for (i, line) in text.lines().enumerate() {
        let entry: AuditEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => return fail(count, head, format!("line {}: {e}", i + 1)),
        };
        if entry.seq != i as u64 {
            return fail(count, head, format!("line {}: sequence {} out of order", i + 1, entry.seq));
        }
        if entry.prev != head {
            return fail(count, head, format!("line {}: broken link", i + 1));
        }
        if entry.compute_hash() != entry.hash {
            return fail(count, head, format!("line {}: hash mismatch", i + 1));
        }
        head = entry.hash;
        count += 1;
    }
    if let Some(anchor) = anchor {
        if &head != anchor {
            return fail(count, head, "head does not match anchor (entries missing at the end)".into());
        }
    }
    ChainVerification {
        valid: true,
        entries: count,
        head,
        problem: None,
    }
}

pub fn parse_entries(text: &str) -> Result<Vec<AuditEntry>, AuditError> {
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| AuditError::Corrupt(e.to_string())))
        .collect()
}

/// Attempts recorded while the server was sealed, other than the unseal itself.
pub fn accesses_while_sealed(entries: &[AuditEntry]) -> Vec<AuditEntry> {
    entries
        .iter()
        .filter(|e| e.sealed && e.action != "unseal")
        .cloned()
        .collect()
}

#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    head: Digest,
    next_seq: u64,
}

impl AuditLog {
    /// Opens or creates the log, refusing a log whose chain does not verify.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, AuditError> {
        let path = path.into();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(AuditError::Io(path, e)),
        };
        let check = verify_chain(&text, None);
        if !check.valid {
            return Err(AuditError::Corrupt(check.problem.unwrap_or_default()));
        }
        Ok(Self {
            path,
            head: check.head,
            next_seq: check.entries as u64,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn head(&self) -> Digest {
        self.head
    }

    pub fn append(
        &mut self,
        at: Timestamp,
        actor: &str,
        action: &str,
        allowed: bool,
        sealed: bool,
    ) -> Result<AuditEntry, AuditError> {
        let mut entry = AuditEntry {
            seq: self.next_seq,
            at,
            actor: actor.to_owned(),
            action: action.to_owned(),
            allowed,
            sealed,
            prev: self.head,
            hash: genesis(),
        };
        entry.hash = entry.compute_hash();
        let mut line = to_canonical_json(&entry);
        line.push(b'\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| AuditError::Io(self.path.clone(), e))?;
        file.write_all(&line)
            .and_then(|_| file.sync_data())
            .map_err(|e| AuditError::Io(self.path.clone(), e))?;
        self.head = entry.hash;
        self.next_seq += 1;
        Ok(entry)
    }

    pub fn read(&self) -> Result<String, AuditError> {
        match fs::read_to_string(&self.path) {
            Ok(t) => Ok(t),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(String::new()),
            Err(e) => Err(AuditError::Io(self.path.clone(), e)),
        }
    }
}
