//! Wire types shared by the servers, the voter client and the tally tools,
//! together with their byte-exact encodings.

pub mod publication;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, SubsecRound, Utc};
use data_encoding::BASE32_NOPAD;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::crypto::{self, digest, Digest, KeyPair, PublicKey};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("invalid vote: {0}")]
    InvalidVote(String),
    #[error("invalid ballot spec: {0}")]
    InvalidBallotSpec(String),
    #[error("malformed timestamp: {0:?}")]
    MalformedTimestamp(String),
    #[error("malformed vote token")]
    MalformedToken,
    #[error("malformed PIN")]
    MalformedPin,
    #[error("malformed field {field}: {reason}")]
    Malformed { field: &'static str, reason: String },
}

/// JSON with lexicographically sorted object keys and no insignificant
/// whitespace.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let value = serde_json::to_value(value).expect("wire types always serialize");
    let mut out = Vec::new();
    write_sorted(&value, &mut out);
    out
}

fn write_sorted(value: &serde_json::Value, out: &mut Vec<u8>) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            out.push(b'{');
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                out.extend(serde_json::to_vec(k).unwrap());
                out.push(b':');
                write_sorted(&map[k], out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_sorted(item, out);
            }
            out.push(b']');
        }
        scalar => out.extend(serde_json::to_vec(scalar).unwrap()),
    }
}

/// Plain or blind-signature authorization flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Plain,
    Blind,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::Blind => "blind",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Mode::Plain),
            "blind" => Ok(Mode::Blind),
            other => Err(format!("unknown mode {other:?}, expected plain or blind")),
        }
    }
}

/// UTC instant rendered as RFC 3339 with exactly six fractional digits and a
/// `Z` suffix, e.g. `2006-12-22T12:00:00.000000Z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.6fZ";

impl Timestamp {
    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Self(dt.trunc_subsecs(6))
    }

    pub fn now() -> Self {
        Self::from_datetime(Utc::now())
    }

    pub fn datetime(&self) -> DateTime<Utc> {
        self.0
    }

    pub fn parse(s: &str) -> Result<Self, ProtocolError> {
        let err = || ProtocolError::MalformedTimestamp(s.to_owned());
        if s.len() != 27 || !s.is_ascii() || s.as_bytes()[19] != b'.' || !s.ends_with('Z') {
            return Err(err());
        }
        let naive = NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).map_err(|_| err())?;
        let ts = Self(naive.and_utc());
        if ts.to_string() != s {
            return Err(err());
        }
        Ok(ts)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format(TIMESTAMP_FORMAT))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

macro_rules! hex_bytes_newtype {
    ($(#[$meta:meta])* $name:ident, $len:expr, $field:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn random() -> Self {
                Self(crypto::random_array())
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, ProtocolError> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out).map_err(|e| ProtocolError::Malformed {
                    field: $field,
                    reason: e.to_string(),
                })?;
                if s.bytes().any(|b| b.is_ascii_uppercase()) {
                    return Err(ProtocolError::Malformed { field: $field, reason: "uppercase hex".into() });
                }
                Ok(Self(out))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_bytes_newtype!(
    /// The pseudorandom number at the heart of a VoteAuthorization.
    Prn, 32, "prn"
);
hex_bytes_newtype!(
    /// 128-bit random string mixed into every VerificationCode.
    RandomString, 16, "random_string"
);

impl Prn {
    pub fn digest(&self) -> Digest {
        digest(&self.0)
    }
}

/// Single-use voter credential. Rendered as 26 characters of unpadded base32.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct VoteToken([u8; 16]);

impl VoteToken {
    pub fn random() -> Self {
        Self(crypto::random_array())
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// What servers and publications hold instead of the token itself.
    pub fn digest(&self) -> Digest {
        digest(&self.0)
    }

    pub fn encode(&self) -> String {
        BASE32_NOPAD.encode(&self.0)
    }

    pub fn parse(s: &str) -> Result<Self, ProtocolError> {
        if s.len() != 26 {
            return Err(ProtocolError::MalformedToken);
        }
        let bytes = BASE32_NOPAD
            .decode(s.as_bytes())
            .map_err(|_| ProtocolError::MalformedToken)?;
        let bytes: [u8; 16] = bytes.try_into().map_err(|_| ProtocolError::MalformedToken)?;
        Ok(Self(bytes))
    }
}

impl fmt::Debug for VoteToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("VoteToken(..)")
    }
}

impl Serialize for VoteToken {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.encode())
    }
}

impl<'de> Deserialize<'de> for VoteToken {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Six decimal digits.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pin(String);

impl Pin {
    pub fn random() -> Self {
        use rand::Rng;
        Self(format!("{:06}", rand::rngs::OsRng.gen_range(0..1_000_000u32)))
    }

    pub fn parse(s: &str) -> Result<Self, ProtocolError> {
        if s.len() == 6 && s.bytes().all(|b| b.is_ascii_digit()) {
            Ok(Self(s.to_owned()))
        } else {
            Err(ProtocolError::MalformedPin)
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn ct_eq(&self, other: &str) -> bool {
        self.0.as_bytes().ct_eq(other.as_bytes()).into()
    }
}

impl fmt::Debug for Pin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Pin(******)")
    }
}

impl TryFrom<String> for Pin {
    type Error = ProtocolError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<Pin> for String {
    fn from(p: Pin) -> String {
        p.0
    }
}

/// Issued by the authentication server, signed and sealed to the vote server.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteAuthorization {
    pub prn: Prn,
    pub ballot_id: String,
    pub pin: Option<Pin>,
    pub issued_at: Timestamp,
}

/// Client-generated authorization in blind mode: a PRN together with the
/// unblinded raw-RSA signature of the authentication server over its digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindAuthorization {
    pub prn: Prn,
    pub ballot_id: String,
    /// Lowercase hex, no leading zeros.
    pub signature: String,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    pub choices: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotSpec {
    pub ballot_id: String,
    pub questions: Vec<Question>,
    pub open_at: Timestamp,
    pub close_at: Timestamp,
}

impl BallotSpec {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidBallotSpec(m));
        if !valid_id(&self.ballot_id) {
            return bad(format!("ballot id {:?} must match [A-Za-z0-9_.-]+", self.ballot_id));
        }
        if self.questions.is_empty() {
            return bad("ballot has no questions".into());
        }
        let mut seen = HashSet::new();
        for q in &self.questions {
            if !valid_id(&q.id) {
                return bad(format!("question id {:?} must match [A-Za-z0-9_.-]+", q.id));
            }
            if !seen.insert(q.id.as_str()) {
                return bad(format!("duplicate question id {:?}", q.id));
            }
            if q.choices.len() < 2 {
                return bad(format!("question {:?} needs at least two choices", q.id));
            }
        }
        if self.open_at >= self.close_at {
            return bad("open_at must precede close_at".into());
        }
        Ok(())
    }

    pub fn is_open_at(&self, now: &Timestamp) -> bool {
        &self.open_at <= now && now < &self.close_at
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// Validates a vote against this spec and orders its answers by question.
    pub fn canonicalize(&self, vote: &Vote) -> Result<CanonicalVote, ProtocolError> {
        let invalid = |m: String| Err(ProtocolError::InvalidVote(m));
        if vote.ballot_id != self.ballot_id {
            return invalid(format!("vote is for ballot {:?}", vote.ballot_id));
        }
        let mut answers = Vec::with_capacity(self.questions.len());
        for answer in &vote.answers {
            if self.question(&answer.question_id).is_none() {
                return invalid(format!("unknown question {:?}", answer.question_id));
            }
        }
        for q in &self.questions {
            let mut matching = vote.answers.iter().filter(|a| a.question_id == q.id);
            let Some(answer) = matching.next() else {
                return invalid(format!("question {:?} not answered", q.id));
            };
            if matching.next().is_some() {
                return invalid(format!("question {:?} answered twice", q.id));
            }
            if answer.choice >= q.choices.len() {
                return invalid(format!("choice {} out of range for {:?}", answer.choice, q.id));
            }
            answers.push((q.id.clone(), answer.choice));
        }
        Ok(CanonicalVote {
            ballot_id: self.ballot_id.clone(),
            answers,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub question_id: String,
    pub choice: usize,
}

/// One voter's choices as submitted; see [`BallotSpec::canonicalize`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub ballot_id: String,
    pub answers: Vec<Answer>,
}

impl Vote {
    pub fn new(ballot_id: &str, answers: &[(&str, usize)]) -> Self {
        Self {
            ballot_id: ballot_id.to_owned(),
            answers: answers
                .iter()
                .map(|(q, c)| Answer {
                    question_id: (*q).to_owned(),
                    choice: *c,
                })
                .collect(),
        }
    }
}

/// A vote validated against its spec, answers in spec order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalVote {
    ballot_id: String,
    answers: Vec<(String, usize)>,
}

impl CanonicalVote {
    pub fn ballot_id(&self) -> &str {
        &self.ballot_id
    }

    pub fn answers(&self) -> &[(String, usize)] {
        &self.answers
    }

    pub fn choice(&self, question_id: &str) -> Option<usize> {
        self.answers
            .iter()
            .find(|(q, _)| q == question_id)
            .map(|(_, c)| *c)
    }

    pub fn to_vote(&self) -> Vote {
        Vote {
            ballot_id: self.ballot_id.clone(),
            answers: self
                .answers
                .iter()
                .map(|(q, c)| Answer {
                    question_id: q.clone(),
                    choice: *c,
                })
                .collect(),
        }
    }

    fn join(&self, sep: char) -> String {
        let mut out = self.ballot_id.clone();
        for (q, c) in &self.answers {
            out.push(sep);
            out.push_str(&format!("{q}={c}"));
        }
        out
    }

    /// `ballot-id`, then `question-id=choice-index` per question, joined by `\n`.
    pub fn encode(&self) -> Vec<u8> {
        self.join('\n').into_bytes()
    }

    /// Single-line form used in publication files: fields joined by `;`.
    pub fn to_published(&self) -> String {
        self.join(';')
    }

    pub fn parse_published(s: &str) -> Result<Self, ProtocolError> {
        let malformed = |reason: &str| ProtocolError::Malformed {
            field: "published vote",
            reason: format!("{reason}: {s:?}"),
        };
        let mut parts = s.split(';');
        let ballot_id = parts.next().filter(|b| valid_id(b)).ok_or_else(|| malformed("ballot id"))?;
        let mut answers = Vec::new();
        for part in parts {
            let (q, c) = part.split_once('=').ok_or_else(|| malformed("answer"))?;
            if !valid_id(q) || c.is_empty() || !c.bytes().all(|b| b.is_ascii_digit()) || (c.len() > 1 && c.starts_with('0')) {
                return Err(malformed("answer"));
            }
            answers.push((q.to_owned(), c.parse().map_err(|_| malformed("choice"))?));
        }
        Ok(Self {
            ballot_id: ballot_id.to_owned(),
            answers,
        })
    }
}

impl Serialize for CanonicalVote {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_published())
    }
}

impl<'de> Deserialize<'de> for CanonicalVote {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::parse_published(&s).map_err(serde::de::Error::custom)
    }
}

pub fn canonical_encode_vote(vote: &Vote, spec: &BallotSpec) -> Result<Vec<u8>, ProtocolError> {
    Ok(spec.canonicalize(vote)?.encode())
}

/// SHA-256 over `vote || 0x0A || timestamp || 0x0A || random-string`.
pub fn compute_verification_code(
    vote: &CanonicalVote,
    timestamp: &str,
    random: &RandomString,
) -> Result<Digest, ProtocolError> {
    Timestamp::parse(timestamp)?;
    let mut data = vote.encode();
    data.push(b'\n');
    data.extend_from_slice(timestamp.as_bytes());
    data.push(b'\n');
    data.extend_from_slice(&random.0);
    Ok(digest(&data))
}

/// Returned to the voter after a successful cast.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteReceipt {
    pub verification_code: Digest,
    pub timestamp: String,
    pub random_string: RandomString,
    #[serde(with = "hex")]
    pub signature: Vec<u8>,
}

impl VoteReceipt {
    /// Signs the raw 32 code bytes.
    pub fn issue(code: Digest, timestamp: &Timestamp, random: RandomString, key: &KeyPair) -> Self {
        Self {
            verification_code: code,
            timestamp: timestamp.to_string(),
            random_string: random,
            signature: crypto::sign(code.as_bytes(), key),
        }
    }

    pub fn signature_valid(&self, votesrv: &PublicKey) -> bool {
        crypto::verify(self.verification_code.as_bytes(), &self.signature, votesrv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReceiptCheck {
    Valid,
    CodeMismatch,
    SignatureInvalid,
    MalformedTimestamp,
}

impl ReceiptCheck {
    pub fn is_valid(self) -> bool {
        self == ReceiptCheck::Valid
    }
}

pub fn verify_receipt(receipt: &VoteReceipt, vote: &CanonicalVote, votesrv: &PublicKey) -> ReceiptCheck {
    match compute_verification_code(vote, &receipt.timestamp, &receipt.random_string) {
        Err(_) => ReceiptCheck::MalformedTimestamp,
        Ok(code) if code != receipt.verification_code => ReceiptCheck::CodeMismatch,
        Ok(_) if !receipt.signature_valid(votesrv) => ReceiptCheck::SignatureInvalid,
        Ok(_) => ReceiptCheck::Valid,
    }
}

/// Vote file contents, sealed to the VoteMgr and signed by the VoteSrv.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredVote {
    pub vote: CanonicalVote,
    pub verification_code: Digest,
    pub timestamp: String,
    pub random_string: RandomString,
}

/// JSON error body returned by every service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}
