//! Vote server: accepts one vote per VoteAuthorization, stores it sealed to
//! the VoteMgr under its VerificationCode and hands back a signed receipt.
//!
//! State directory layout:
//!
//! ```text
//! ballot.json
//! authz/used/<digest-of-prn>.sealed     sealed to the AuthMgr
//! votes/<verification-code>.sealed      sealed to the VoteMgr
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::Response;
use axum::routing::{get, post};
use axum::{middleware, Json, Router};
use bytes::Bytes;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{self, AdversaryPermit, VoteCheats};
use crate::clock::{BallotClock, MonotonicStamper};
use crate::crypto::blind::{bigint_from_hex, verify_blind_signature};
use crate::crypto::{self, open, open_anonymous, seal, Digest, KeyPair, PublicKey, SealedEnvelope};
use crate::net::{AdminCredential, ApiError, ErrorTally, KEY_ID_HEADER};
use crate::protocol::{
    compute_verification_code, to_canonical_json, BallotSpec, BlindAuthorization, CanonicalVote, Mode, Prn,
    RandomString, StoredVote, Timestamp, Vote, VoteAuthorization, VoteReceipt,
};
use crate::records::{Archive, RecordDir, RecordError, UsedAuthorizationRecord};

/// Wrong PINs tolerated before an authorization is locked for good.
pub const MAX_PIN_FAILURES: u32 = 3;

#[derive(Debug, Error)]
pub enum VoteError {
    #[error("ballot is not open yet")]
    BallotNotOpen,
    #[error("ballot is closed")]
    BallotClosed,
    #[error("authorization invalid: {0}")]
    AuthorizationInvalid(String),
    #[error("authorization already used")]
    AuthorizationAlreadyUsed,
    #[error("authorization locked after repeated PIN failures")]
    AuthorizationLocked,
    #[error("PIN does not match the authorization")]
    PinMismatch,
    #[error("vote invalid: {0}")]
    VoteInvalid(String),
    #[error("ballot is still open")]
    BallotStillOpen,
    #[error("administrative credential rejected")]
    WrongCredential,
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("adversary flags require an adversary permit")]
    CheatRefused,
    #[error("storage: {0}")]
    Storage(String),
}

impl VoteError {
    pub fn kind(&self) -> &'static str {
        match self {
            VoteError::BallotNotOpen => "ballot-not-open",
            VoteError::BallotClosed => "ballot-closed",
            VoteError::AuthorizationInvalid(_) => "authorization-invalid",
            VoteError::AuthorizationAlreadyUsed => "authorization-already-used",
            VoteError::AuthorizationLocked => "authorization-locked",
            VoteError::PinMismatch => "pin-mismatch",
            VoteError::VoteInvalid(_) => "vote-invalid",
            VoteError::BallotStillOpen => "ballot-still-open",
            VoteError::WrongCredential => "wrong-credential",
            VoteError::Malformed(_) => "malformed-request",
            VoteError::CheatRefused => "cheat-refused",
            VoteError::Storage(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            VoteError::BallotNotOpen | VoteError::BallotClosed => StatusCode::FORBIDDEN,
            VoteError::AuthorizationInvalid(_) | VoteError::PinMismatch | VoteError::WrongCredential => {
                StatusCode::UNAUTHORIZED
            }
            VoteError::AuthorizationAlreadyUsed | VoteError::AuthorizationLocked | VoteError::BallotStillOpen => {
                StatusCode::CONFLICT
            }
            VoteError::VoteInvalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            VoteError::Malformed(_) => StatusCode::BAD_REQUEST,
            VoteError::CheatRefused | VoteError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<RecordError> for VoteError {
    fn from(e: RecordError) -> Self {
        VoteError::Storage(e.to_string())
    }
}

impl From<VoteError> for ApiError {
    fn from(e: VoteError) -> Self {
        ApiError {
            status: e.status(),
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VoteKeys {
    pub server: KeyPair,
    pub auth_srv: PublicKey,
    pub auth_mgr: PublicKey,
    pub vote_mgr: PublicKey,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VoteConfig {
    pub mode: Mode,
    /// Refuse plain-mode authorizations that carry no PIN.
    #[serde(default)]
    pub pin: bool,
    #[serde(default)]
    pub cheats: VoteCheats,
    #[serde(skip)]
    pub permit: Option<AdversaryPermit>,
}

impl VoteConfig {
    pub fn new(mode: Mode, pin: bool) -> Self {
        Self {
            mode,
            pin,
            cheats: VoteCheats::default(),
            permit: None,
        }
    }
}

/// Cheat log: what a vote server could link if it kept notes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteLinkRecord {
    pub prn_digest: Digest,
    pub verification_code: Digest,
    pub vote: CanonicalVote,
    pub received_at: Timestamp,
}

/// Cheat log: one entry per cast while trying to hand out a duplicate code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeReuseAttempt {
    pub candidates_tried: usize,
    pub replay_candidates: usize,
    pub duplicate_issued: bool,
}

/// Cheat log: a genuine vote that was stored altered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifiedVote {
    pub receipt_code: Digest,
    pub stored_code: Digest,
}

pub const LINKS_FILE: &str = "vote-links.jsonl";
pub const CODE_REUSE_FILE: &str = "code-reuse.jsonl";
pub const MODIFIED_FILE: &str = "modified-votes.jsonl";

/// Random strings a code-reuse cheater tries per cast before giving up.
pub const CODE_REUSE_SEARCH: usize = 4096;

#[derive(Default)]
struct CheatState {
    fabricated: bool,
    modified: usize,
    /// (vote, timestamp, random, code) of receipts already handed out.
    issued: Vec<(CanonicalVote, Timestamp, RandomString, Digest)>,
}

#[derive(Default)]
struct AuthzState {
    used: HashSet<Digest>,
    pin_failures: HashMap<Digest, u32>,
}

pub struct VoteService {
    dir: PathBuf,
    ballot: BallotSpec,
    config: VoteConfig,
    keys: VoteKeys,
    clock: BallotClock,
    stamper: MonotonicStamper,
    authz: Mutex<AuthzState>,
    used_records: RecordDir,
    votes: RecordDir,
    cheat: Mutex<CheatState>,
    errors: ErrorTally,
}

impl std::fmt::Debug for VoteService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VoteService")
            .field("dir", &self.dir)
            .field("mode", &self.config.mode)
            .finish_non_exhaustive()
    }
}

/// Authorization contents after the envelope and signature checks.
struct CheckedAuthorization {
    prn: Prn,
    pin: Option<crate::protocol::Pin>,
}

impl VoteService {
    pub fn install(dir: &Path, ballot: &BallotSpec) -> Result<(), VoteError> {
        ballot.validate().map_err(|e| VoteError::Malformed(e.to_string()))?;
        fs::create_dir_all(dir).map_err(|e| VoteError::Storage(e.to_string()))?;
        fs::write(dir.join("ballot.json"), to_canonical_json(ballot)).map_err(|e| VoteError::Storage(e.to_string()))
    }

    pub fn open(dir: &Path, config: VoteConfig, keys: VoteKeys, clock: BallotClock) -> Result<Self, VoteError> {
        if !config.cheats.is_honest() && config.permit.is_none() && AdversaryPermit::from_env().is_none() {
            return Err(VoteError::CheatRefused);
        }
        let text = fs::read(dir.join("ballot.json")).map_err(|e| VoteError::Storage(e.to_string()))?;
        let ballot: BallotSpec = serde_json::from_slice(&text).map_err(|e| VoteError::Storage(e.to_string()))?;
        let used_records = RecordDir::open(dir.join("authz").join("used"))?;
        let votes = RecordDir::open(dir.join("votes"))?;
        let used = used_records.names()?.into_iter().collect();
        Ok(Self {
            dir: dir.to_owned(),
            ballot,
            config,
            keys,
            clock,
            stamper: MonotonicStamper::default(),
            authz: Mutex::new(AuthzState {
                used,
                pin_failures: HashMap::new(),
            }),
            used_records,
            votes,
            cheat: Mutex::new(CheatState::default()),
            errors: ErrorTally::default(),
        })
    }

    pub fn state_dir(&self) -> &Path {
        &self.dir
    }

    pub fn public_key(&self) -> &PublicKey {
        self.keys.server.public()
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn errors(&self) -> &ErrorTally {
        &self.errors
    }

    fn track<T>(&self, r: Result<T, VoteError>) -> Result<T, VoteError> {
        if let Err(e) = &r {
            self.errors.record(e.kind());
        }
        r
    }

    fn check_open(&self) -> Result<Timestamp, VoteError> {
        let now = self.clock.now();
        if now < self.ballot.open_at {
            Err(VoteError::BallotNotOpen)
        } else if now >= self.ballot.close_at {
            Err(VoteError::BallotClosed)
        } else {
            Ok(now)
        }
    }

    pub fn ballot_form(&self) -> Result<BallotSpec, VoteError> {
        self.track(self.check_open().map(|_| self.ballot.clone()))
    }

    fn check_authorization(&self, envelope: &SealedEnvelope) -> Result<CheckedAuthorization, VoteError> {
        let invalid = |e: &dyn std::fmt::Display| VoteError::AuthorizationInvalid(e.to_string());
        let (prn, ballot_id, pin) = match self.config.mode {
            Mode::Plain => {
                let payload = open(envelope, &self.keys.server, &self.keys.auth_srv).map_err(|e| invalid(&e))?;
                let auth: VoteAuthorization = serde_json::from_slice(&payload).map_err(|e| invalid(&e))?;
                if self.config.pin && auth.pin.is_none() {
                    return Err(VoteError::AuthorizationInvalid("authorization carries no PIN".into()));
                }
                (auth.prn, auth.ballot_id, auth.pin)
            }
            Mode::Blind => {
                let payload = open_anonymous(envelope, &self.keys.server).map_err(|e| invalid(&e))?;
                let auth: BlindAuthorization = serde_json::from_slice(&payload).map_err(|e| invalid(&e))?;
                let sig = bigint_from_hex(&auth.signature).map_err(|e| invalid(&e))?;
                if !verify_blind_signature(&auth.prn.digest(), &sig, &self.keys.auth_srv) {
                    return Err(VoteError::AuthorizationInvalid("blind signature does not verify".into()));
                }
                (auth.prn, auth.ballot_id, None)
            }
        };
        if ballot_id != self.ballot.ballot_id {
            return Err(VoteError::AuthorizationInvalid(format!("issued for ballot {ballot_id}")));
        }
        Ok(CheckedAuthorization { prn, pin })
    }

    /// Validates the authorization, consumes it and records the vote.
    pub fn cast(&self, vote: &Vote, authorization: &SealedEnvelope, pin: Option<&str>) -> Result<VoteReceipt, VoteError> {
        self.track(self.cast_inner(vote, authorization, pin))
    }

    fn cast_inner(&self, vote: &Vote, envelope: &SealedEnvelope, pin: Option<&str>) -> Result<VoteReceipt, VoteError> {
        let received_at = self.check_open()?;
        let auth = self.check_authorization(envelope)?;
        let canonical = self
            .ballot
            .canonicalize(vote)
            .map_err(|e| VoteError::VoteInvalid(e.to_string()))?;
        let prn_digest = auth.prn.digest();

        {
            let mut state = self.authz.lock().unwrap();
            if state.used.contains(&prn_digest) {
                return Err(VoteError::AuthorizationAlreadyUsed);
            }
            if let Some(expected) = &auth.pin {
                let failures = state.pin_failures.get(&prn_digest).copied().unwrap_or(0);
                if failures >= MAX_PIN_FAILURES {
                    return Err(VoteError::AuthorizationLocked);
                }
                if !pin.is_some_and(|p| expected.ct_eq(p)) {
                    state.pin_failures.insert(prn_digest, failures + 1);
                    return Err(VoteError::PinMismatch);
                }
            }
            state.used.insert(prn_digest);
        }

        let record = UsedAuthorizationRecord {
            prn_digest,
            ballot_id: self.ballot.ballot_id.clone(),
        };
        match self.used_records.create(
            &prn_digest,
            &seal(&to_canonical_json(&record), &self.keys.server, &self.keys.auth_mgr),
        ) {
            Ok(()) => {}
            Err(RecordError::AlreadyExists(_)) => return Err(VoteError::AuthorizationAlreadyUsed),
            Err(e) => {
                self.authz.lock().unwrap().used.remove(&prn_digest);
                return Err(e.into());
            }
        }

        let receipt = if self.config.cheats.is_honest() {
            self.store_vote(&canonical)?.1
        } else {
            self.store_vote_cheating(&canonical, received_at)?
        };
        if self.config.cheats.log_links {
            let _ = adversary::append_jsonl(
                &self.dir,
                LINKS_FILE,
                &VoteLinkRecord {
                    prn_digest,
                    verification_code: receipt.verification_code,
                    vote: canonical,
                    received_at,
                },
            );
        }
        Ok(receipt)
    }

    /// Stamps, seals and writes one vote; returns the stored record and its receipt.
    fn store_vote(&self, vote: &CanonicalVote) -> Result<(StoredVote, VoteReceipt), VoteError> {
        loop {
            let ts = self.stamper.stamp(&self.clock);
            let random = RandomString::random();
            match self.write_vote(vote, ts, random) {
                Err(VoteError::Storage(msg)) if msg == "duplicate" => continue,
                other => return other,
            }
        }
    }

    fn write_vote(
        &self,
        vote: &CanonicalVote,
        ts: Timestamp,
        random: RandomString,
    ) -> Result<(StoredVote, VoteReceipt), VoteError> {
        let ts_text = ts.to_string();
        let code =
            compute_verification_code(vote, &ts_text, &random).map_err(|e| VoteError::Storage(e.to_string()))?;
        let stored = StoredVote {
            vote: vote.clone(),
            verification_code: code,
            timestamp: ts_text,
            random_string: random,
        };
        let envelope = seal(&to_canonical_json(&stored), &self.keys.server, &self.keys.vote_mgr);
        match self.votes.create(&code, &envelope) {
            Ok(()) => {}
            Err(RecordError::AlreadyExists(_)) => return Err(VoteError::Storage("duplicate".into())),
            Err(e) => return Err(e.into()),
        }
        let receipt = VoteReceipt::issue(code, &ts, random, &self.keys.server);
        Ok((stored, receipt))
    }

    fn store_vote_cheating(&self, vote: &CanonicalVote, received_at: Timestamp) -> Result<VoteReceipt, VoteError> {
        let cheats = self.config.cheats.clone();

        if cheats.code_reuse {
            if let Some(receipt) = self.try_code_reuse(vote, received_at) {
                return Ok(receipt);
            }
        }

        let modify = {
            let mut state = self.cheat.lock().unwrap();
            let go = state.modified < cheats.modify;
            if go {
                state.modified += 1;
            }
            go
        };
        if modify {
            let altered = alter_vote(vote, &self.ballot);
            let (stored, _) = self.store_vote(&altered)?;
            // Receipt for what the voter sent; the ballot box holds something else.
            let ts = Timestamp::parse(&stored.timestamp).map_err(|e| VoteError::Storage(e.to_string()))?;
            let code = compute_verification_code(vote, &stored.timestamp, &stored.random_string)
                .map_err(|e| VoteError::Storage(e.to_string()))?;
            let receipt = VoteReceipt::issue(code, &ts, stored.random_string, &self.keys.server);
            let _ = adversary::append_jsonl(
                &self.dir,
                MODIFIED_FILE,
                &ModifiedVote {
                    receipt_code: code,
                    stored_code: stored.verification_code,
                },
            );
            return Ok(receipt);
        }

        let (stored, receipt) = self.store_vote(vote)?;
        if cheats.code_reuse {
            let ts = Timestamp::parse(&stored.timestamp).map_err(|e| VoteError::Storage(e.to_string()))?;
            self.cheat
                .lock()
                .unwrap()
                .issued
                .push((vote.clone(), ts, stored.random_string, stored.verification_code));
        }
        Ok(receipt)
    }

    /// The careful code-reuse cheater: it only hands out an earlier code if the
    /// resulting receipt would still verify for this voter and carry a
    /// timestamp the voter could accept (not before the request arrived).
    fn try_code_reuse(&self, vote: &CanonicalVote, received_at: Timestamp) -> Option<VoteReceipt> {
        let issued = self.cheat.lock().unwrap().issued.clone();
        let mut attempt = CodeReuseAttempt {
            candidates_tried: 0,
            replay_candidates: 0,
            duplicate_issued: false,
        };
        let mut result = None;
        if !issued.is_empty() {
            // Fresh randomness: success would need a SHA-256 collision.
            let targets: HashSet<Digest> = issued.iter().map(|(_, _, _, c)| *c).collect();
            let ts = self.clock.now().to_string();
            for _ in 0..CODE_REUSE_SEARCH {
                attempt.candidates_tried += 1;
                let rs = RandomString::random();
                if let Ok(code) = compute_verification_code(vote, &ts, &rs) {
                    if targets.contains(&code) {
                        result = Timestamp::parse(&ts)
                            .ok()
                            .map(|t| VoteReceipt::issue(code, &t, rs, &self.keys.server));
                        break;
                    }
                }
            }
            // Replay of an earlier (timestamp, random) pair for an identical vote.
            if result.is_none() {
                for (prev_vote, prev_ts, prev_rs, prev_code) in &issued {
                    if prev_vote == vote {
                        attempt.replay_candidates += 1;
                        if *prev_ts >= received_at {
                            result = Some(VoteReceipt::issue(*prev_code, prev_ts, *prev_rs, &self.keys.server));
                            break;
                        }
                    }
                }
            }
        }
        attempt.duplicate_issued = result.is_some();
        let _ = adversary::append_jsonl(&self.dir, CODE_REUSE_FILE, &attempt);
        result
    }

    /// Forged ballots, each with a matching forged used-authorization record
    /// so the two VoteSrv exports agree with each other.
    fn inject_fabricated(&self) -> Result<(), VoteError> {
        let n = self.config.cheats.fabricate;
        if n == 0 {
            return Ok(());
        }
        {
            let mut state = self.cheat.lock().unwrap();
            if state.fabricated {
                return Ok(());
            }
            state.fabricated = true;
        }
        let mut rng = rand::thread_rng();
        for _ in 0..n {
            let answers: Vec<(&str, usize)> = self
                .ballot
                .questions
                .iter()
                .map(|q| (q.id.as_str(), rng.gen_range(0..q.choices.len())))
                .collect();
            let vote = self
                .ballot
                .canonicalize(&Vote::new(&self.ballot.ballot_id, &answers))
                .map_err(|e| VoteError::Storage(e.to_string()))?;
            let prn = Prn::random();
            let record = UsedAuthorizationRecord {
                prn_digest: prn.digest(),
                ballot_id: self.ballot.ballot_id.clone(),
            };
            self.used_records.create(
                &prn.digest(),
                &seal(&to_canonical_json(&record), &self.keys.server, &self.keys.auth_mgr),
            )?;
            self.store_vote(&vote)?;
        }
        Ok(())
    }

    fn export(&self, credential: &AdminCredential, key: &PublicKey, action: &str, dir: &RecordDir) -> Result<Archive, VoteError> {
        let now = self.clock.now();
        if !credential.verify(key, action, &now) {
            return Err(VoteError::WrongCredential);
        }
        if now < self.ballot.close_at {
            return Err(VoteError::BallotStillOpen);
        }
        self.inject_fabricated()?;
        Ok(dir.load()?)
    }

    pub fn export_used_authorizations(&self, credential: &AdminCredential) -> Result<Archive, VoteError> {
        self.track(self.export(credential, &self.keys.auth_mgr, "export-authz", &self.used_records))
    }

    pub fn export_votes(&self, credential: &AdminCredential) -> Result<Archive, VoteError> {
        self.track(self.export(credential, &self.keys.vote_mgr, "export-votes", &self.votes))
    }
}

/// Moves the first answer to the next choice.
pub fn alter_vote(vote: &CanonicalVote, ballot: &BallotSpec) -> CanonicalVote {
    let mut plain = vote.to_vote();
    if let Some(first) = plain.answers.first_mut() {
        let n = ballot.question(&first.question_id).map_or(2, |q| q.choices.len());
        first.choice = (first.choice + 1) % n;
    }
    ballot.canonicalize(&plain).expect("altered vote stays within the ballot")
}

// ---- HTTP surface -------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CastRequest {
    pub vote: Vote,
    pub authorization: SealedEnvelope,
    pub pin: Option<String>,
}

type Svc = State<Arc<VoteService>>;

fn body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, VoteError> {
    serde_json::from_slice(bytes).map_err(|e| VoteError::Malformed(e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, VoteError> + Send + 'static,
) -> Result<Json<T>, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError::from),
        Err(e) => Err(VoteError::Storage(e.to_string()).into()),
    }
}

async fn form(State(svc): Svc) -> Result<Json<BallotSpec>, ApiError> {
    svc.ballot_form().map(Json).map_err(ApiError::from)
}

async fn cast(State(svc): Svc, bytes: Bytes) -> Result<Json<VoteReceipt>, ApiError> {
    blocking(move || {
        let req: CastRequest = svc.track(body(&bytes))?;
        svc.cast(&req.vote, &req.authorization, req.pin.as_deref())
    })
    .await
}

fn credential(svc: &VoteService, headers: &HeaderMap) -> Result<AdminCredential, ApiError> {
    AdminCredential::from_headers(headers).ok_or_else(|| {
        svc.errors.record(VoteError::WrongCredential.kind());
        VoteError::WrongCredential.into()
    })
}

async fn export_authz(State(svc): Svc, headers: HeaderMap) -> Result<Json<Archive>, ApiError> {
    let cred = credential(&svc, &headers)?;
    blocking(move || svc.export_used_authorizations(&cred)).await
}

async fn export_votes(State(svc): Svc, headers: HeaderMap) -> Result<Json<Archive>, ApiError> {
    let cred = credential(&svc, &headers)?;
    blocking(move || svc.export_votes(&cred)).await
}

pub fn router(svc: Arc<VoteService>) -> Router {
    let key_id = HeaderValue::from_str(svc.public_key().key_id()).expect("key ids are hex");
    Router::new()
        .route("/vote/form", get(form))
        .route("/vote/cast", post(cast))
        .route("/admin/export-authz", get(export_authz))
        .route("/admin/export-votes", get(export_votes))
        .layer(middleware::map_response(move |mut resp: Response| {
            let key_id = key_id.clone();
            async move {
                resp.headers_mut().insert(KEY_ID_HEADER, key_id);
                resp
            }
        }))
        .with_state(svc)
}

/// On-disk configuration for a standalone VoteSrv.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VoteServerFileConfig {
    pub listen: SocketAddr,
    pub state_dir: PathBuf,
    pub server_key: PathBuf,
    pub auth_srv_public_key: PathBuf,
    pub auth_mgr_public_key: PathBuf,
    pub vote_mgr_public_key: PathBuf,
    #[serde(flatten)]
    pub service: VoteConfig,
}

impl VoteServerFileConfig {
    pub fn load_keys(&self) -> Result<VoteKeys, VoteError> {
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| VoteError::Storage(format!("{}: {e}", p.display())));
        let bad = |e: crypto::CryptoError| VoteError::Storage(e.to_string());
        Ok(VoteKeys {
            server: KeyPair::from_pem("vote-srv", &read(&self.server_key)?).map_err(bad)?,
            auth_srv: PublicKey::from_pem(&read(&self.auth_srv_public_key)?).map_err(bad)?,
            auth_mgr: PublicKey::from_pem(&read(&self.auth_mgr_public_key)?).map_err(bad)?,
            vote_mgr: PublicKey::from_pem(&read(&self.vote_mgr_public_key)?).map_err(bad)?,
        })
    }
}
