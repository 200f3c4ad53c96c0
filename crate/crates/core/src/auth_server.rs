//! Authentication server: logs voters in, redeems single-use VoteTokens into
//! VoteAuthorizations (plain or blind) and keeps sealed usage records for the
//! AuthMgr.
//!
//! State directory layout:
//!
//! ```text
//! ballot.json              ballot spec (window and questions)
//! credentials.json         username -> salted PBKDF2 verifier
//! tokens/valid/<digest>    one empty file per provisioned token digest
//! tokens/used/<digest>.sealed
//! authz/issued/<digest-of-prn>.sealed   (plain mode only)
//! audit.log                hash-chained administrative access log
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::Response;
use axum::routing::{get, post};
use axum::{middleware, Json, Router};
use chrono::Duration;
use bytes::Bytes;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::adversary::{self, AdversaryPermit, AuthCheats};
use crate::audit::{self, AuditEntry, AuditLog};
use crate::clock::BallotClock;
use crate::crypto::blind::{bigint_from_hex, bigint_to_hex};
use crate::crypto::{self, blind_sign, seal, Digest, KeyPair, PublicKey, SealedEnvelope};
use crate::net::{AdminCredential, ApiError, ErrorTally, KEY_ID_HEADER};
use crate::protocol::{to_canonical_json, BallotSpec, Mode, Pin, Prn, Timestamp, VoteAuthorization, VoteToken};
use crate::records::{Archive, IssuedAuthorizationRecord, RecordDir, RecordError, TokenUsageRecord};

const PBKDF2_ROUNDS: u32 = 10_000;
pub const DEFAULT_SESSION_TTL_SECS: i64 = 15 * 60;

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("bad credentials")]
    BadCredentials,
    #[error("ballot is not open yet")]
    BallotNotOpen,
    #[error("ballot is closed")]
    BallotClosed,
    #[error("session missing or expired")]
    SessionInvalid,
    #[error("unknown vote token")]
    UnknownToken,
    #[error("vote token already used")]
    TokenAlreadyUsed,
    #[error("operation not available in {0} mode")]
    WrongMode(Mode),
    #[error("ballot is still open")]
    BallotStillOpen,
    #[error("administrative credential rejected")]
    WrongCredential,
    #[error("server is sealed")]
    Sealed,
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("adversary flags require an adversary permit")]
    CheatRefused,
    #[error("storage: {0}")]
    Storage(String),
}

impl AuthError {
    pub fn kind(&self) -> &'static str {
        match self {
            AuthError::BadCredentials => "bad-credentials",
            AuthError::BallotNotOpen => "ballot-not-open",
            AuthError::BallotClosed => "ballot-closed",
            AuthError::SessionInvalid => "session-invalid",
            AuthError::UnknownToken => "unknown-token",
            AuthError::TokenAlreadyUsed => "token-already-used",
            AuthError::WrongMode(_) => "wrong-mode",
            AuthError::BallotStillOpen => "ballot-still-open",
            AuthError::WrongCredential => "wrong-credential",
            AuthError::Sealed => "sealed",
            AuthError::Malformed(_) => "malformed-request",
            AuthError::CheatRefused => "cheat-refused",
            AuthError::Storage(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            AuthError::BadCredentials | AuthError::SessionInvalid | AuthError::WrongCredential => {
                StatusCode::UNAUTHORIZED
            }
            AuthError::UnknownToken => StatusCode::NOT_FOUND,
            AuthError::TokenAlreadyUsed | AuthError::BallotStillOpen | AuthError::WrongMode(_) => {
                StatusCode::CONFLICT
            }
            AuthError::BallotClosed | AuthError::BallotNotOpen | AuthError::Sealed => StatusCode::FORBIDDEN,
            AuthError::Malformed(_) => StatusCode::BAD_REQUEST,
            AuthError::CheatRefused | AuthError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<RecordError> for AuthError {
    fn from(e: RecordError) -> Self {
        AuthError::Storage(e.to_string())
    }
}

impl From<audit::AuditError> for AuthError {
    fn from(e: audit::AuditError) -> Self {
        AuthError::Storage(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AuthError + '_ {
    move |e| AuthError::Storage(format!("{}: {e}", path.display()))
}

/// Salted PBKDF2-HMAC-SHA256 password verifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasswordVerifier {
    #[serde(with = "hex")]
    salt: [u8; 16],
    #[serde(with = "hex")]
    hash: [u8; 32],
}

impl PasswordVerifier {
    pub fn new(password: &str) -> Self {
        let salt = crypto::random_array();
        Self {
            salt,
            hash: Self::derive(password, &salt),
        }
    }

    fn derive(password: &str, salt: &[u8; 16]) -> [u8; 32] {
        let mut out = [0u8; 32];
        pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, PBKDF2_ROUNDS, &mut out);
        out
    }

    pub fn check(&self, password: &str) -> bool {
        Self::derive(password, &self.salt).ct_eq(&self.hash).into()
    }
}

/// What the AuthMgr hands the AuthSysMgr at provisioning time: verifiers and
/// token digests, never raw tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuthBundle {
    pub ballot: BallotSpec,
    pub credentials: BTreeMap<String, PasswordVerifier>,
    pub token_digests: Vec<Digest>,
}

#[derive(Clone, Debug)]
pub struct AuthKeys {
    pub server: KeyPair,
    pub vote_srv: PublicKey,
    pub auth_mgr: PublicKey,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuthConfig {
    pub mode: Mode,
    /// Issue a PIN with every plain-mode authorization.
    #[serde(default)]
    pub pin: bool,
    #[serde(default = "default_ttl")]
    pub session_ttl_secs: i64,
    #[serde(default)]
    pub cheats: AuthCheats,
    #[serde(skip)]
    pub permit: Option<AdversaryPermit>,
}

fn default_ttl() -> i64 {
    DEFAULT_SESSION_TTL_SECS
}

impl AuthConfig {
    pub fn new(mode: Mode, pin: bool) -> Self {
        Self {
            mode,
            pin,
            session_ttl_secs: DEFAULT_SESSION_TTL_SECS,
            cheats: AuthCheats::default(),
            permit: None,
        }
    }
}

/// A redeemed authorization as the voter receives it.
#[derive(Clone, Debug)]
pub struct Redemption {
    pub authorization: SealedEnvelope,
    pub pin: Option<Pin>,
}

/// Everything the AuthMgr collects from the AuthSrv after the ballot.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthExport {
    pub usage: Archive,
    pub issued: Archive,
    pub audit_log: String,
}

/// System-manager actions on the server machine itself (not web requests).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SysMgrAction {
    ReadUnusedTokens,
}

impl SysMgrAction {
    fn name(self) -> &'static str {
        match self {
            SysMgrAction::ReadUnusedTokens => "read-unused-tokens",
        }
    }
}

/// Cheat log line linking a voter to what the AuthSrv handed out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthLinkRecord {
    pub username: String,
    pub token_digest: Digest,
    pub prn_digest: Option<Digest>,
    pub blinded_message: Option<String>,
    pub blinded_signature: Option<String>,
}

/// An authorization minted by a double-issuing AuthSrv for its own use.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtraAuthorization {
    pub authorization: SealedEnvelope,
    pub pin: Option<Pin>,
}

pub const LINKS_FILE: &str = "auth-links.jsonl";
pub const EXTRA_AUTHZ_FILE: &str = "extra-authorizations.jsonl";

struct Session {
    username: String,
    expires: Timestamp,
}

struct SealState {
    log: AuditLog,
    sealed: bool,
}

pub struct AuthService {
    dir: PathBuf,
    ballot: BallotSpec,
    config: AuthConfig,
    keys: AuthKeys,
    clock: BallotClock,
    credentials: BTreeMap<String, PasswordVerifier>,
    dummy_verifier: PasswordVerifier,
    valid: HashSet<Digest>,
    used: Mutex<HashSet<Digest>>,
    usage_records: RecordDir,
    issued_records: RecordDir,
    sessions: Mutex<HashMap<String, Session>>,
    seal: Mutex<SealState>,
    extra_issued: Mutex<usize>,
    redeemers: Mutex<HashSet<String>>,
    errors: ErrorTally,
}

impl std::fmt::Debug for AuthService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthService")
            .field("dir", &self.dir)
            .field("mode", &self.config.mode)
            .finish_non_exhaustive()
    }
}

impl AuthService {
    /// Writes a provisioning bundle into an empty state directory.
    pub fn install(dir: &Path, bundle: &AuthBundle) -> Result<(), AuthError> {
        bundle.ballot.validate().map_err(|e| AuthError::Malformed(e.to_string()))?;
        let valid = dir.join("tokens").join("valid");
        fs::create_dir_all(&valid).map_err(io_err(&valid))?;
        for d in &bundle.token_digests {
            let p = valid.join(d.to_hex());
            fs::write(&p, b"").map_err(io_err(&p))?;
        }
        let p = dir.join("ballot.json");
        fs::write(&p, to_canonical_json(&bundle.ballot)).map_err(io_err(&p))?;
        let p = dir.join("credentials.json");
        fs::write(&p, to_canonical_json(&bundle.credentials)).map_err(io_err(&p))?;
        Ok(())
    }

    pub fn open(dir: &Path, config: AuthConfig, keys: AuthKeys, clock: BallotClock) -> Result<Self, AuthError> {
        if !config.cheats.is_honest() && config.permit.is_none() && AdversaryPermit::from_env().is_none() {
            return Err(AuthError::CheatRefused);
        }
        let read = |name: &str| -> Result<Vec<u8>, AuthError> {
            let p = dir.join(name);
            fs::read(&p).map_err(io_err(&p))
        };
        let ballot: BallotSpec =
            serde_json::from_slice(&read("ballot.json")?).map_err(|e| AuthError::Storage(e.to_string()))?;
        let credentials: BTreeMap<String, PasswordVerifier> =
            serde_json::from_slice(&read("credentials.json")?).map_err(|e| AuthError::Storage(e.to_string()))?;

        let valid_dir = dir.join("tokens").join("valid");
        let mut valid = HashSet::new();
        for entry in fs::read_dir(&valid_dir).map_err(io_err(&valid_dir))? {
            let entry = entry.map_err(io_err(&valid_dir))?;
            if let Some(d) = entry.file_name().to_str().and_then(|n| Digest::from_hex(n).ok()) {
                valid.insert(d);
            }
        }
        let usage_records = RecordDir::open(dir.join("tokens").join("used"))?;
        let issued_records = RecordDir::open(dir.join("authz").join("issued"))?;
        let used: HashSet<Digest> = usage_records.names()?.into_iter().collect();

        let log = AuditLog::open(dir.join("audit.log"))?;
        let entries = audit::parse_entries(&log.read()?)?;
        let sealed = entries
            .iter()
            .rev()
            .find(|e| e.allowed && (e.action == "seal" || e.action == "unseal"))
            .is_some_and(|e| e.action == "seal");

        Ok(Self {
            dir: dir.to_owned(),
            ballot,
            config,
            keys,
            clock,
            credentials,
            dummy_verifier: PasswordVerifier::new("dummy"),
            valid,
            used: Mutex::new(used),
            usage_records,
            issued_records,
            sessions: Mutex::new(HashMap::new()),
            seal: Mutex::new(SealState { log, sealed }),
            extra_issued: Mutex::new(0),
            redeemers: Mutex::new(HashSet::new()),
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

    pub fn ballot(&self) -> &BallotSpec {
        &self.ballot
    }

    pub fn errors(&self) -> &ErrorTally {
        &self.errors
    }

    pub fn is_sealed(&self) -> bool {
        self.seal.lock().unwrap().sealed
    }

    pub fn audit_head(&self) -> Digest {
        self.seal.lock().unwrap().log.head()
    }

    fn track<T>(&self, r: Result<T, AuthError>) -> Result<T, AuthError> {
        if let Err(e) = &r {
            self.errors.record(e.kind());
        }
        r
    }

    fn check_open(&self) -> Result<Timestamp, AuthError> {
        let now = self.clock.now();
        if now < self.ballot.open_at {
            return Err(AuthError::BallotNotOpen);
        }
        if now >= self.ballot.close_at {
            return Err(AuthError::BallotClosed);
        }
        Ok(now)
    }

    pub fn authenticate(&self, username: &str, password: &str) -> Result<String, AuthError> {
        self.track(self.authenticate_inner(username, password))
    }

    fn authenticate_inner(&self, username: &str, password: &str) -> Result<String, AuthError> {
        let now = self.check_open()?;
        let ok = match self.credentials.get(username) {
            Some(v) => v.check(password),
            None => {
                self.dummy_verifier.check(password);
                false
            }
        };
        if !ok {
            return Err(AuthError::BadCredentials);
        }
        let session = hex::encode(crypto::random_array::<16>());
        let expires = Timestamp::from_datetime(now.datetime() + Duration::seconds(self.config.session_ttl_secs));
        self.sessions.lock().unwrap().insert(
            session.clone(),
            Session {
                username: username.to_owned(),
                expires,
            },
        );
        Ok(session)
    }

    fn session_user(&self, session: &str, now: &Timestamp) -> Result<String, AuthError> {
        let mut sessions = self.sessions.lock().unwrap();
        match sessions.get(session) {
            Some(s) if &s.expires > now => Ok(s.username.clone()),
            Some(_) => {
                sessions.remove(session);
                Err(AuthError::SessionInvalid)
            }
            None => Err(AuthError::SessionInvalid),
        }
    }

    fn known_token(&self, vote_token: &str) -> Result<Digest, AuthError> {
        let token = VoteToken::parse(vote_token).map_err(|_| AuthError::UnknownToken)?;
        let d = token.digest();
        if !self.valid.contains(&d) {
            return Err(AuthError::UnknownToken);
        }
        Ok(d)
    }

    /// Marks the token used and writes its usage record. Linearizable per token.
    fn consume_token(&self, token_digest: Digest, username: &str, now: Timestamp) -> Result<(), AuthError> {
        if !self.used.lock().unwrap().insert(token_digest) {
            return Err(AuthError::TokenAlreadyUsed);
        }
        self.redeemers.lock().unwrap().insert(username.to_owned());
        let record = TokenUsageRecord {
            token_digest,
            used_at: now,
            username: username.to_owned(),
        };
        let env = seal(&to_canonical_json(&record), &self.keys.server, &self.keys.auth_mgr);
        match self.usage_records.create(&token_digest, &env) {
            Ok(()) => Ok(()),
            Err(RecordError::AlreadyExists(_)) => Err(AuthError::TokenAlreadyUsed),
            Err(e) => {
                self.used.lock().unwrap().remove(&token_digest);
                Err(e.into())
            }
        }
    }

    fn mint_authorization(&self, now: Timestamp) -> Result<(Prn, Redemption), AuthError> {
        let prn = Prn::random();
        let pin = self.config.pin.then(Pin::random);
        let issued = IssuedAuthorizationRecord {
            prn_digest: prn.digest(),
            ballot_id: self.ballot.ballot_id.clone(),
        };
        self.issued_records.create(
            &prn.digest(),
            &seal(&to_canonical_json(&issued), &self.keys.server, &self.keys.auth_mgr),
        )?;
        let authorization = VoteAuthorization {
            prn,
            ballot_id: self.ballot.ballot_id.clone(),
            pin: pin.clone(),
            issued_at: now,
        };
        let envelope = seal(&to_canonical_json(&authorization), &self.keys.server, &self.keys.vote_srv);
        Ok((
            prn,
            Redemption {
                authorization: envelope,
                pin,
            },
        ))
    }

    pub fn redeem(&self, session: &str, vote_token: &str) -> Result<Redemption, AuthError> {
        self.track(self.redeem_inner(session, vote_token))
    }

    fn redeem_inner(&self, session: &str, vote_token: &str) -> Result<Redemption, AuthError> {
        if self.config.mode != Mode::Plain {
            return Err(AuthError::WrongMode(self.config.mode));
        }
        let now = self.check_open()?;
        let username = self.session_user(session, &now)?;
        let token_digest = self.known_token(vote_token)?;
        self.consume_token(token_digest, &username, now)?;
        let (prn, redemption) = self.mint_authorization(now)?;

        let cheats = &self.config.cheats;
        if cheats.log_links {
            let _ = adversary::append_jsonl(
                &self.dir,
                LINKS_FILE,
                &AuthLinkRecord {
                    username: username.clone(),
                    token_digest,
                    prn_digest: Some(prn.digest()),
                    blinded_message: None,
                    blinded_signature: None,
                },
            );
        }
        if cheats.double_issue > 0 {
            let mut extra = self.extra_issued.lock().unwrap();
            if *extra < cheats.double_issue {
                *extra += 1;
                let (_, stolen) = self.mint_authorization(now)?;
                let _ = adversary::append_jsonl(
                    &self.dir,
                    EXTRA_AUTHZ_FILE,
                    &ExtraAuthorization {
                        authorization: stolen.authorization,
                        pin: stolen.pin,
                    },
                );
            }
        }
        Ok(redemption)
    }

    /// Blind variant: signs the client's blinded digest. No authorization
    /// record exists because the server never sees the authorization.
    pub fn blind_redeem(&self, session: &str, vote_token: &str, blinded_message: &str) -> Result<String, AuthError> {
        self.track(self.blind_redeem_inner(session, vote_token, blinded_message))
    }

    fn blind_redeem_inner(&self, session: &str, vote_token: &str, blinded_message: &str) -> Result<String, AuthError> {
        if self.config.mode != Mode::Blind {
            return Err(AuthError::WrongMode(self.config.mode));
        }
        let now = self.check_open()?;
        let username = self.session_user(session, &now)?;
        let token_digest = self.known_token(vote_token)?;
        let blinded = bigint_from_hex(blinded_message).map_err(|e| AuthError::Malformed(e.to_string()))?;
        let signature = blind_sign(&blinded, &self.keys.server).map_err(|e| AuthError::Malformed(e.to_string()))?;
        self.consume_token(token_digest, &username, now)?;
        let signature = bigint_to_hex(&signature);
        if self.config.cheats.log_links {
            let _ = adversary::append_jsonl(
                &self.dir,
                LINKS_FILE,
                &AuthLinkRecord {
                    username,
                    token_digest,
                    prn_digest: None,
                    blinded_message: Some(blinded_message.to_owned()),
                    blinded_signature: Some(signature.clone()),
                },
            );
        }
        Ok(signature)
    }

    fn admin(&self, credential: &AdminCredential, action: &str) -> Result<AuditEntry, AuthError> {
        let now = self.clock.now();
        let mut state = self.seal.lock().unwrap();
        let ok = credential.verify(&self.keys.auth_mgr, action, &now);
        let was_sealed = state.sealed;
        let entry = state.log.append(now, &credential.key_id, action, ok, was_sealed)?;
        if !ok {
            return Err(AuthError::WrongCredential);
        }
        match action {
            "seal" => state.sealed = true,
            "unseal" => state.sealed = false,
            _ => {}
        }
        Ok(entry)
    }

    /// AuthMgr seals the machine for the duration of the ballot.
    pub fn seal_server(&self, credential: &AdminCredential) -> Result<AuditEntry, AuthError> {
        self.track(self.admin(credential, "seal"))
    }

    pub fn unseal_server(&self, credential: &AdminCredential) -> Result<AuditEntry, AuthError> {
        self.track(self.admin(credential, "unseal"))
    }

    /// A system-manager login on the machine. Always recorded; refused while
    /// sealed unless the server has been tampered with.
    pub fn sysmgr_access(&self, actor: &str, action: SysMgrAction) -> Result<Vec<Digest>, AuthError> {
        self.track(self.sysmgr_access_inner(actor, action))
    }

    fn sysmgr_access_inner(&self, actor: &str, action: SysMgrAction) -> Result<Vec<Digest>, AuthError> {
        let now = self.clock.now();
        let sealed = {
            let mut state = self.seal.lock().unwrap();
            let sealed = state.sealed;
            state.log.append(now, actor, action.name(), !sealed, sealed)?;
            sealed
        };
        if sealed && !self.config.cheats.bypass_seal {
            return Err(AuthError::Sealed);
        }
        match action {
            SysMgrAction::ReadUnusedTokens => {
                let used = self.used.lock().unwrap();
                let mut unused: Vec<Digest> = self.valid.difference(&used).copied().collect();
                unused.sort();
                Ok(unused)
            }
        }
    }

    /// A cheating AuthSysMgr logs in while sealed, reads the unused token
    /// digests and redeems one under the name of a voter who has not (yet)
    /// redeemed, so every count still matches.
    pub fn sysmgr_ghost_redeem(&self, actor: &str) -> Result<Redemption, AuthError> {
        if !self.config.cheats.bypass_seal || self.config.mode != Mode::Plain {
            return Err(AuthError::Sealed);
        }
        let unused = self.sysmgr_access(actor, SysMgrAction::ReadUnusedTokens)?;
        let token_digest = *unused.first().ok_or(AuthError::UnknownToken)?;
        let username = {
            let redeemers = self.redeemers.lock().unwrap();
            self.credentials
                .keys()
                .rev()
                .find(|u| !redeemers.contains(*u))
                .cloned()
                .ok_or(AuthError::UnknownToken)?
        };
        let now = self.clock.now();
        self.consume_token(token_digest, &username, now)?;
        Ok(self.mint_authorization(now)?.1)
    }

    pub fn export(&self, credential: &AdminCredential) -> Result<AuthExport, AuthError> {
        self.track(self.export_inner(credential))
    }

    fn export_inner(&self, credential: &AdminCredential) -> Result<AuthExport, AuthError> {
        let now = self.clock.now();
        {
            let mut state = self.seal.lock().unwrap();
            let ok = credential.verify(&self.keys.auth_mgr, "export", &now);
            let sealed = state.sealed;
            state.log.append(now, &credential.key_id, "export", ok, sealed)?;
            if !ok {
                return Err(AuthError::WrongCredential);
            }
        }
        if now < self.ballot.close_at {
            return Err(AuthError::BallotStillOpen);
        }
        let audit_log = self.seal.lock().unwrap().log.read()?;
        Ok(AuthExport {
            usage: self.usage_records.load()?,
            issued: self.issued_records.load()?,
            audit_log,
        })
    }
}

// ---- HTTP surface -------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoginRequest {
    pub username: String,
    pub password: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoginResponse {
    pub session: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RedeemRequest {
    pub session: String,
    pub vote_token: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RedeemResponse {
    pub authorization: SealedEnvelope,
    pub pin: Option<Pin>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlindRedeemRequest {
    pub session: String,
    pub vote_token: String,
    pub blinded_message: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlindRedeemResponse {
    pub blinded_signature: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdminRequest {
    pub credential: AdminCredential,
}

/// Public key announcement, checked against the key-id pinned in the client
/// configuration before any credential is sent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyInfo {
    pub key_id: String,
    pub public_key: String,
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        ApiError {
            status: e.status(),
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

type Svc = State<Arc<AuthService>>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, AuthError> + Send + 'static,
) -> Result<Json<T>, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError::from),
        Err(e) => Err(AuthError::Storage(e.to_string()).into()),
    }
}

fn body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, AuthError> {
    serde_json::from_slice(bytes).map_err(|e| AuthError::Malformed(e.to_string()))
}

async fn login(State(svc): Svc, bytes: Bytes) -> Result<Json<LoginResponse>, ApiError> {
    blocking(move || {
        let req: LoginRequest = svc.track(body(&bytes))?;
        svc.authenticate(&req.username, &req.password)
            .map(|session| LoginResponse { session })
    })
    .await
}

async fn redeem(State(svc): Svc, bytes: Bytes) -> Result<Json<RedeemResponse>, ApiError> {
    blocking(move || {
        let req: RedeemRequest = svc.track(body(&bytes))?;
        svc.redeem(&req.session, &req.vote_token).map(|r| RedeemResponse {
            authorization: r.authorization,
            pin: r.pin,
        })
    })
    .await
}

async fn blind_redeem(State(svc): Svc, bytes: Bytes) -> Result<Json<BlindRedeemResponse>, ApiError> {
    blocking(move || {
        let req: BlindRedeemRequest = svc.track(body(&bytes))?;
        svc.blind_redeem(&req.session, &req.vote_token, &req.blinded_message)
            .map(|blinded_signature| BlindRedeemResponse { blinded_signature })
    })
    .await
}

async fn seal_handler(State(svc): Svc, bytes: Bytes) -> Result<Json<AuditEntry>, ApiError> {
    blocking(move || {
        let req: AdminRequest = svc.track(body(&bytes))?;
        svc.seal_server(&req.credential)
    })
    .await
}

async fn unseal_handler(State(svc): Svc, bytes: Bytes) -> Result<Json<AuditEntry>, ApiError> {
    blocking(move || {
        let req: AdminRequest = svc.track(body(&bytes))?;
        svc.unseal_server(&req.credential)
    })
    .await
}

async fn export(State(svc): Svc, headers: HeaderMap) -> Result<Json<AuthExport>, ApiError> {
    let Some(credential) = AdminCredential::from_headers(&headers) else {
        svc.errors.record(AuthError::WrongCredential.kind());
        return Err(AuthError::WrongCredential.into());
    };
    blocking(move || svc.export(&credential)).await
}

async fn key(State(svc): Svc) -> Json<KeyInfo> {
    Json(KeyInfo {
        key_id: svc.public_key().key_id().to_owned(),
        public_key: svc.public_key().to_pem(),
    })
}

pub fn router(svc: Arc<AuthService>) -> Router {
    let key_id = HeaderValue::from_str(svc.public_key().key_id()).expect("key ids are hex");
    Router::new()
        .route("/auth/key", get(key))
        .route("/auth/login", post(login))
        .route("/auth/redeem", post(redeem))
        .route("/auth/blind-redeem", post(blind_redeem))
        .route("/admin/seal", post(seal_handler))
        .route("/admin/unseal", post(unseal_handler))
        .route("/admin/export", get(export))
        .layer(middleware::map_response(move |mut resp: Response| {
            let key_id = key_id.clone();
            async move {
                resp.headers_mut().insert(KEY_ID_HEADER, key_id);
                resp
            }
        }))
        .with_state(svc)
}

/// On-disk configuration for a standalone AuthSrv.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuthServerFileConfig {
    pub listen: SocketAddr,
    pub state_dir: PathBuf,
    pub server_key: PathBuf,
    pub vote_srv_public_key: PathBuf,
    pub auth_mgr_public_key: PathBuf,
    #[serde(flatten)]
    pub service: AuthConfig,
}

impl AuthServerFileConfig {
    pub fn load_keys(&self) -> Result<AuthKeys, AuthError> {
        let read = |p: &Path| fs::read_to_string(p).map_err(io_err(p));
        let bad = |e: crypto::CryptoError| AuthError::Storage(e.to_string());
        Ok(AuthKeys {
            server: KeyPair::from_pem("auth-srv", &read(&self.server_key)?).map_err(bad)?,
            vote_srv: PublicKey::from_pem(&read(&self.vote_srv_public_key)?).map_err(bad)?,
            auth_mgr: PublicKey::from_pem(&read(&self.auth_mgr_public_key)?).map_err(bad)?,
        })
    }
}
