//! Publication files: newline-delimited, one item per line, lines sorted.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CanonicalVote, Timestamp};
use crate::crypto::Digest;

pub const CODES_FILE: &str = "verification-codes.txt";
pub const VOTES_FILE: &str = "verification-codes-and-votes.txt";
pub const USED_TOKENS_FILE: &str = "used-tokens.txt";
pub const UNUSED_TOKENS_FILE: &str = "unused-tokens.txt";

#[derive(Debug, Error)]
pub enum PublicationError {
    #[error("{file}:{line}: {reason}")]
    Malformed {
        file: &'static str,
        line: usize,
        reason: String,
    },
    #[error("reading {0}: {1}")]
    Io(String, #[source] io::Error),
}

/// Sorts and joins lines, each terminated by `\n`.
pub fn render_lines(mut lines: Vec<String>) -> String {
    lines.sort();
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

fn parse_lines<T>(
    file: &'static str,
    text: &str,
    mut parse: impl FnMut(&str) -> Result<T, String>,
) -> Result<Vec<T>, PublicationError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            parse(l).map_err(|reason| PublicationError::Malformed {
                file,
                line: i + 1,
                reason,
            })
        })
        .collect()
}

pub fn render_codes(codes: &[Digest]) -> String {
    render_lines(codes.iter().map(Digest::to_hex).collect())
}

pub fn parse_codes(text: &str) -> Result<Vec<Digest>, PublicationError> {
    parse_lines(CODES_FILE, text, |l| Digest::from_hex(l).map_err(|e| e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsedTokenEntry {
    pub token_digest: Digest,
    pub used_at: Timestamp,
}

/// `token-digest <TAB> timestamp` per line.
pub fn render_used_tokens(entries: &[UsedTokenEntry]) -> String {
    render_lines(
        entries
            .iter()
            .map(|e| format!("{}\t{}", e.token_digest, e.used_at))
            .collect(),
    )
}

pub fn parse_used_tokens(text: &str) -> Result<Vec<UsedTokenEntry>, PublicationError> {
    parse_lines(USED_TOKENS_FILE, text, |l| {
        let (d, t) = l.split_once('\t').ok_or("missing tab")?;
        Ok(UsedTokenEntry {
            token_digest: Digest::from_hex(d).map_err(|e| e.to_string())?,
            used_at: Timestamp::parse(t).map_err(|e| e.to_string())?,
        })
    })
}

pub fn render_unused_tokens(digests: &[Digest]) -> String {
    render_codes(digests)
}

pub fn parse_unused_tokens(text: &str) -> Result<Vec<Digest>, PublicationError> {
    parse_lines(UNUSED_TOKENS_FILE, text, |l| Digest::from_hex(l).map_err(|e| e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedVote {
    pub verification_code: Digest,
    pub vote: CanonicalVote,
}

/// `verification-code <TAB> published-vote` per line.
pub fn render_votes(votes: &[PublishedVote]) -> String {
    render_lines(
        votes
            .iter()
            .map(|v| format!("{}\t{}", v.verification_code, v.vote.to_published()))
            .collect(),
    )
}

pub fn parse_votes(text: &str) -> Result<Vec<PublishedVote>, PublicationError> {
    parse_lines(VOTES_FILE, text, |l| {
        let (c, v) = l.split_once('\t').ok_or("missing tab")?;
        Ok(PublishedVote {
            verification_code: Digest::from_hex(c).map_err(|e| e.to_string())?,
            vote: CanonicalVote::parse_published(v).map_err(|e| e.to_string())?,
        })
    })
}

/// Everything the managers have published so far. Missing files are empty.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Publication {
    pub codes: Vec<Digest>,
    pub votes: Vec<PublishedVote>,
    pub used_tokens: Vec<UsedTokenEntry>,
    pub unused_tokens: Vec<Digest>,
}

impl Publication {
    pub fn load(dir: &Path) -> Result<Self, PublicationError> {
        let read = |name: &str| -> Result<String, PublicationError> {
            match fs::read_to_string(dir.join(name)) {
                Ok(s) => Ok(s),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(String::new()),
                Err(e) => Err(PublicationError::Io(name.to_owned(), e)),
            }
        };
        Ok(Self {
            codes: parse_codes(&read(CODES_FILE)?)?,
            votes: parse_votes(&read(VOTES_FILE)?)?,
            used_tokens: parse_used_tokens(&read(USED_TOKENS_FILE)?)?,
            unused_tokens: parse_unused_tokens(&read(UNUSED_TOKENS_FILE)?)?,
        })
    }
}
