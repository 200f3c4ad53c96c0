//! Switches that turn an honest service into a cheating one.
//!
//! A cheating system manager is modelled as a modified server. None of these
//! flags can be enabled without an [`AdversaryPermit`], which ordinary
//! deployments never have: it comes either from the simulation harness or
//! from the `BALLOT_SIM_ADVERSARIES=1` environment variable.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::protocol::to_canonical_json;

pub const ADVERSARY_ENV: &str = "BALLOT_SIM_ADVERSARIES";

/// Directory, inside a service's state dir, where cheating services keep the
/// extra information they were not supposed to record.
pub const CHEAT_DIR: &str = "cheat";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdversaryPermit(());

impl AdversaryPermit {
    pub fn from_env() -> Option<Self> {
        (std::env::var(ADVERSARY_ENV).as_deref() == Ok("1")).then_some(Self(()))
    }

    pub(crate) fn simulation() -> Self {
        Self(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuthCheats {
    /// Number of extra VoteAuthorizations to mint alongside genuine ones.
    pub double_issue: usize,
    /// Record (username, token, authorization) links.
    pub log_links: bool,
    /// Serve system-manager reads even while sealed (the login is still logged).
    pub bypass_seal: bool,
}

impl AuthCheats {
    pub fn is_honest(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoteCheats {
    /// Forged votes to add to the ballot box.
    pub fabricate: usize,
    /// Number of genuine votes to alter before storing them.
    pub modify: usize,
    /// Try to hand later voters an earlier voter's VerificationCode.
    pub code_reuse: bool,
    /// Record (authorization, vote, arrival time) links.
    pub log_links: bool,
}

impl VoteCheats {
    pub fn is_honest(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnonCheats {
    /// Record (client address, forward time) for every relayed request.
    pub log_clients: bool,
    /// Flip the first answer of every vote passing through.
    pub tamper_votes: bool,
}

impl AnonCheats {
    pub fn is_honest(&self) -> bool {
        *self == Self::default()
    }
}

pub(crate) fn append_jsonl<T: Serialize>(state_dir: &Path, file: &str, value: &T) -> std::io::Result<()> {
    let dir = state_dir.join(CHEAT_DIR);
    fs::create_dir_all(&dir)?;
    let mut line = to_canonical_json(value);
    line.push(b'\n');
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(file))?
        .write_all(&line)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(state_dir: &Path, file: &str) -> Vec<T> {
    fs::read_to_string(state_dir.join(CHEAT_DIR).join(file))
        .unwrap_or_default()
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}
