//! Voter-side agent: credential redemption (plain or blind), casting through
//! the anonymizer, receipt verification and post-publication checks.
//!
//! Everything the voter keeps lives in a credential store directory. The PIN
//! is returned to the caller for display and never written there.

use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::State;
use axum::http::{HeaderMap, Request};
use axum::response::Response;
use axum::Router;
use chrono::Duration;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth_server::{
    BlindRedeemRequest, BlindRedeemResponse, KeyInfo, LoginRequest, LoginResponse, RedeemRequest, RedeemResponse,
};
use crate::clock::BallotClock;
use crate::crypto::blind::{bigint_from_hex, bigint_to_hex};
use crate::crypto::{blind, seal_anonymous, unblind, verify_blind_signature, Digest, PublicKey, SealedEnvelope};
use crate::net::{serve, HttpClient, HttpResponse, NetError, OutgoingRequest, ServerHandle};
use crate::protocol::publication::Publication;
use crate::protocol::{
    compute_verification_code, to_canonical_json, verify_receipt, BallotSpec, BlindAuthorization, CanonicalVote,
    Mode, Pin, Prn, ReceiptCheck, Timestamp, Vote, VoteReceipt, VoteToken,
};
use crate::vote_server::CastRequest;

/// Request headers that identify the voter's machine or browser.
pub const IDENTIFYING_HEADERS: &[&str] = &[
    "user-agent",
    "cookie",
    "referer",
    "origin",
    "accept-language",
    "accept-encoding",
    "accept",
    "dnt",
    "from",
    "forwarded",
    "via",
    "x-forwarded-for",
    "x-real-ip",
    "x-requested-with",
    "sec-ch-ua",
    "sec-ch-ua-mobile",
    "sec-ch-ua-platform",
    "sec-fetch-site",
    "sec-fetch-mode",
    "sec-fetch-dest",
    "sec-fetch-user",
    "upgrade-insecure-requests",
    "if-none-match",
    "if-modified-since",
    "connection",
    "host",
    "content-length",
];

const CREDENTIALS_FILE: &str = "credentials.json";
const AUTHORIZATION_FILE: &str = "authorization.sealed";
const REDEMPTION_FILE: &str = "redemption.json";
const BALLOT_FILE: &str = "ballot.json";
const VOTE_FILE: &str = "vote.json";
const RECEIPT_FILE: &str = "receipt.json";
const REJECTED_RECEIPT_FILE: &str = "receipt-rejected.json";

#[derive(Debug, Error)]
pub enum VoterError {
    #[error("{server} presented key-id {presented:?}, expected {expected}")]
    KeyMismatch {
        server: &'static str,
        expected: String,
        presented: Option<String>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("credential store {0}: {1}")]
    Store(PathBuf, String),
    #[error("blind signature from the AuthSrv does not verify")]
    BlindSignatureInvalid,
    #[error("receipt rejected: {0:?}")]
    ReceiptInvalid(ReceiptCheck),
    #[error("receipt timestamp {timestamp} outside the request window")]
    ReceiptImplausible { timestamp: String },
    #[error("no authorization in the credential store; redeem first")]
    NoAuthorization,
    #[error("no receipt in the credential store; cast first")]
    NoReceipt,
    #[error("{0}")]
    Protocol(String),
}

impl VoterError {
    /// 2 for protocol or transport errors, 3 for evidence of misbehaviour.
    pub fn exit_code(&self) -> i32 {
        match self {
            VoterError::KeyMismatch { .. }
            | VoterError::BlindSignatureInvalid
            | VoterError::ReceiptInvalid(_)
            | VoterError::ReceiptImplausible { .. } => 3,
            _ => 2,
        }
    }

    /// Error kind reported by a server, if that is what this is.
    pub fn service_kind(&self) -> Option<&str> {
        match self {
            VoterError::Net(e) => e.kind(),
            _ => None,
        }
    }
}

/// Per-voter credential file handed out at provisioning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoterCredentials {
    pub username: String,
    pub password: String,
    pub vote_token: VoteToken,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientConfig {
    pub auth_server: SocketAddr,
    pub anonymizer: SocketAddr,
    pub auth_key_id: String,
    pub vote_key_id: String,
    pub vote_srv_public_key: String,
    pub ballot_id: String,
    pub mode: Mode,
    pub store: PathBuf,
    /// Local address to connect from.
    #[serde(default)]
    pub bind_ip: Option<IpAddr>,
    /// Allowed clock difference when judging server timestamps.
    #[serde(default = "default_tolerance")]
    pub timestamp_tolerance_ms: i64,
}

fn default_tolerance() -> i64 {
    2_000
}

/// When this voter's token was redeemed, by the voter's own clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedemptionWindow {
    pub sent_at: Timestamp,
    pub received_at: Timestamp,
}

/// What a voter presents when their code is missing from the published list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complaint {
    pub verification_code: Digest,
    #[serde(with = "hex")]
    pub signature: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub code_present: bool,
    pub vote_matches: bool,
    pub token_usage_time_plausible: bool,
    pub token_listed_unused: bool,
    pub complaint: Option<Complaint>,
}

impl CheckReport {
    /// Every check a voter who cast a vote expects to pass.
    pub fn all_green(&self) -> bool {
        self.code_present && self.vote_matches && self.token_usage_time_plausible && !self.token_listed_unused
    }
}

/// The credential store directory.
#[derive(Clone, Debug)]
pub struct CredentialStore {
    dir: PathBuf,
}

impl CredentialStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, VoterError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| VoterError::Store(dir.clone(), e.to_string()))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let _ = fs::set_permissions(&dir, fs::Permissions::from_mode(0o700));
        }
        Ok(Self { dir })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), VoterError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| VoterError::Store(path, e.to_string()))
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>, VoterError> {
        let path = self.dir.join(name);
        match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|e| VoterError::Store(path, e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(VoterError::Store(path, e.to_string())),
        }
    }

    pub fn save_credentials(&self, creds: &VoterCredentials) -> Result<(), VoterError> {
        self.write(CREDENTIALS_FILE, &to_canonical_json(creds))
    }

    pub fn credentials(&self) -> Result<VoterCredentials, VoterError> {
        self.read_json(CREDENTIALS_FILE)?
            .ok_or_else(|| VoterError::Store(self.dir.join(CREDENTIALS_FILE), "missing".into()))
    }

    pub fn authorization(&self) -> Result<Option<SealedEnvelope>, VoterError> {
        let path = self.dir.join(AUTHORIZATION_FILE);
        match fs::read(&path) {
            Ok(b) => SealedEnvelope::from_bytes(&b)
                .map(Some)
                .map_err(|e| VoterError::Store(path, e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(VoterError::Store(path, e.to_string())),
        }
    }

    pub fn redemption(&self) -> Result<Option<RedemptionWindow>, VoterError> {
        self.read_json(REDEMPTION_FILE)
    }

    pub fn ballot(&self) -> Result<Option<BallotSpec>, VoterError> {
        self.read_json(BALLOT_FILE)
    }

    pub fn vote(&self) -> Result<Option<CanonicalVote>, VoterError> {
        self.read_json(VOTE_FILE)
    }

    pub fn receipt(&self) -> Result<Option<VoteReceipt>, VoterError> {
        self.read_json(RECEIPT_FILE)
    }

    pub fn rejected_receipt(&self) -> Result<Option<VoteReceipt>, VoterError> {
        self.read_json(REJECTED_RECEIPT_FILE)
    }
}

/// One voter's client.
#[derive(Clone, Debug)]
pub struct Voter {
    config: ClientConfig,
    vote_srv: PublicKey,
    store: CredentialStore,
    client: HttpClient,
    clock: BallotClock,
}

impl Voter {
    pub fn new(config: ClientConfig, clock: BallotClock) -> Result<Self, VoterError> {
        let vote_srv = PublicKey::from_pem(&config.vote_srv_public_key)
            .map_err(|e| VoterError::Protocol(format!("VoteSrv public key: {e}")))?;
        if vote_srv.key_id() != config.vote_key_id {
            return Err(VoterError::KeyMismatch {
                server: "VoteSrv",
                expected: config.vote_key_id.clone(),
                presented: Some(vote_srv.key_id().to_owned()),
            });
        }
        let store = CredentialStore::open(&config.store)?;
        let client = HttpClient::new().with_bind(config.bind_ip);
        Ok(Self {
            config,
            vote_srv,
            store,
            client,
            clock,
        })
    }

    /// Routes all traffic through a capturing client (for transcript tests).
    pub fn with_client(mut self, client: HttpClient) -> Self {
        self.client = client.with_bind(self.config.bind_ip);
        self
    }

    pub fn store(&self) -> &CredentialStore {
        &self.store
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn pinned(&self, resp: &HttpResponse, server: &'static str, expected: &str) -> Result<(), VoterError> {
        if resp.key_id() != Some(expected) {
            return Err(VoterError::KeyMismatch {
                server,
                expected: expected.to_owned(),
                presented: resp.key_id().map(str::to_owned),
            });
        }
        Ok(())
    }

    /// Fetches the AuthSrv key and checks it against the pinned key-id
    /// before any credential leaves this machine.
    async fn auth_key(&self) -> Result<PublicKey, VoterError> {
        let resp = self
            .client
            .send(self.config.auth_server, OutgoingRequest::get("/auth/key"))
            .await?;
        self.pinned(&resp, "AuthSrv", &self.config.auth_key_id)?;
        let info: KeyInfo = resp.json()?;
        let key = PublicKey::from_pem(&info.public_key).map_err(|e| VoterError::Protocol(e.to_string()))?;
        if key.key_id() != self.config.auth_key_id {
            return Err(VoterError::KeyMismatch {
                server: "AuthSrv",
                expected: self.config.auth_key_id.clone(),
                presented: Some(key.key_id().to_owned()),
            });
        }
        Ok(key)
    }

    async fn auth_post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, VoterError> {
        let resp = self
            .client
            .send(self.config.auth_server, OutgoingRequest::post_json(path, body))
            .await?;
        self.pinned(&resp, "AuthSrv", &self.config.auth_key_id)?;
        Ok(resp.json()?)
    }

    async fn login(&self, creds: &VoterCredentials) -> Result<String, VoterError> {
        let resp: LoginResponse = self
            .auth_post(
                "/auth/login",
                &LoginRequest {
                    username: creds.username.clone(),
                    password: creds.password.clone(),
                },
            )
            .await?;
        Ok(resp.session)
    }

    /// Plain-mode redemption. Returns the PIN for display; it is not kept.
    pub async fn fetch_authorization(&self) -> Result<Option<Pin>, VoterError> {
        if self.config.mode != Mode::Plain {
            return Err(VoterError::Protocol("client is configured for blind mode".into()));
        }
        let creds = self.store.credentials()?;
        self.auth_key().await?;
        let session = self.login(&creds).await?;
        let sent_at = self.clock.now();
        let resp: RedeemResponse = self
            .auth_post(
                "/auth/redeem",
                &RedeemRequest {
                    session,
                    vote_token: creds.vote_token.encode(),
                },
            )
            .await?;
        self.record_redemption(sent_at, &resp.authorization)?;
        Ok(resp.pin)
    }

    /// Blind-mode redemption: the AuthSrv signs a blinded digest of a PRN it
    /// never sees; the client seals the result to the VoteSrv itself.
    pub async fn fetch_authorization_blind(&self) -> Result<(), VoterError> {
        if self.config.mode != Mode::Blind {
            return Err(VoterError::Protocol("client is configured for plain mode".into()));
        }
        let creds = self.store.credentials()?;
        let auth_key = self.auth_key().await?;
        let prn = Prn::random();
        let ctx = blind(&prn.digest(), &auth_key);
        let session = self.login(&creds).await?;
        let sent_at = self.clock.now();
        let resp: BlindRedeemResponse = self
            .auth_post(
                "/auth/blind-redeem",
                &BlindRedeemRequest {
                    session,
                    vote_token: creds.vote_token.encode(),
                    blinded_message: bigint_to_hex(ctx.blinded_message()),
                },
            )
            .await?;
        let blinded_sig = bigint_from_hex(&resp.blinded_signature).map_err(|_| VoterError::BlindSignatureInvalid)?;
        let sig = unblind(&blinded_sig, &ctx).map_err(|_| VoterError::BlindSignatureInvalid)?;
        if !verify_blind_signature(&prn.digest(), &sig, &auth_key) {
            return Err(VoterError::BlindSignatureInvalid);
        }
        let authorization = BlindAuthorization {
            prn,
            ballot_id: self.config.ballot_id.clone(),
            signature: bigint_to_hex(&sig),
        };
        let envelope = seal_anonymous(&to_canonical_json(&authorization), &self.vote_srv);
        self.record_redemption(sent_at, &envelope)
    }

    /// Redeems in whichever mode the client is configured for.
    pub async fn redeem(&self) -> Result<Option<Pin>, VoterError> {
        match self.config.mode {
            Mode::Plain => self.fetch_authorization().await,
            Mode::Blind => self.fetch_authorization_blind().await.map(|_| None),
        }
    }

    fn record_redemption(&self, sent_at: Timestamp, envelope: &SealedEnvelope) -> Result<(), VoterError> {
        let window = RedemptionWindow {
            sent_at,
            received_at: self.clock.now(),
        };
        self.store.write(AUTHORIZATION_FILE, &envelope.to_bytes())?;
        self.store.write(REDEMPTION_FILE, &to_canonical_json(&window))
    }

    /// Fetches the ballot form through the anonymizer.
    pub async fn fetch_form(&self) -> Result<BallotSpec, VoterError> {
        let resp = self
            .client
            .send(self.config.anonymizer, OutgoingRequest::get("/vote/form"))
            .await?;
        self.pinned(&resp, "VoteSrv", &self.config.vote_key_id)?;
        let spec: BallotSpec = resp.json()?;
        self.store.write(BALLOT_FILE, &to_canonical_json(&spec))?;
        Ok(spec)
    }

    /// Casts through the anonymizer and verifies the receipt before keeping it.
    pub async fn cast(&self, vote: &Vote, pin: Option<&str>) -> Result<VoteReceipt, VoterError> {
        let authorization = self.store.authorization()?.ok_or(VoterError::NoAuthorization)?;
        let spec = match self.store.ballot()? {
            Some(s) => s,
            None => self.fetch_form().await?,
        };
        let canonical = spec
            .canonicalize(vote)
            .map_err(|e| VoterError::Protocol(format!("vote does not fit the ballot: {e}")))?;
        let request = OutgoingRequest::post_json(
            "/vote/cast",
            &CastRequest {
                vote: vote.clone(),
                authorization,
                pin: pin.map(str::to_owned),
            },
        );
        let sent_at = self.clock.now();
        let resp = self.client.send(self.config.anonymizer, request).await?;
        let received_at = self.clock.now();
        self.pinned(&resp, "VoteSrv", &self.config.vote_key_id)?;
        let receipt: VoteReceipt = resp.json()?;

        let check = verify_receipt(&receipt, &canonical, &self.vote_srv);
        if !check.is_valid() {
            self.store.write(REJECTED_RECEIPT_FILE, &to_canonical_json(&receipt))?;
            return Err(VoterError::ReceiptInvalid(check));
        }
        let tolerance = Duration::milliseconds(self.config.timestamp_tolerance_ms);
        let plausible = Timestamp::parse(&receipt.timestamp).is_ok_and(|ts| {
            ts.datetime() >= sent_at.datetime() - tolerance && ts.datetime() <= received_at.datetime() + tolerance
        });
        if !plausible {
            self.store.write(REJECTED_RECEIPT_FILE, &to_canonical_json(&receipt))?;
            return Err(VoterError::ReceiptImplausible {
                timestamp: receipt.timestamp,
            });
        }
        self.store.write(VOTE_FILE, &to_canonical_json(&canonical))?;
        self.store.write(RECEIPT_FILE, &to_canonical_json(&receipt))?;
        Ok(receipt)
    }

    /// Re-verifies the stored receipt against the stored vote.
    pub fn verify_stored_receipt(&self) -> Result<ReceiptCheck, VoterError> {
        let receipt = self.store.receipt()?.ok_or(VoterError::NoReceipt)?;
        let vote = self.store.vote()?.ok_or(VoterError::NoReceipt)?;
        Ok(verify_receipt(&receipt, &vote, &self.vote_srv))
    }

    pub fn check_publication(&self, publication: &Publication) -> Result<CheckReport, VoterError> {
        check_publication(
            &self.store,
            publication,
            Duration::milliseconds(self.config.timestamp_tolerance_ms),
        )
    }
}

/// Compares what the voter holds with what was published.
pub fn check_publication(
    store: &CredentialStore,
    publication: &Publication,
    tolerance: Duration,
) -> Result<CheckReport, VoterError> {
    let creds = store.credentials()?;
    let token_digest = creds.vote_token.digest();
    let receipt = store.receipt()?;

    let code_present = receipt
        .as_ref()
        .is_some_and(|r| publication.codes.contains(&r.verification_code));
    let vote_matches = receipt.as_ref().is_some_and(|r| {
        publication
            .votes
            .iter()
            .filter(|p| p.verification_code == r.verification_code)
            .any(|p| {
                compute_verification_code(&p.vote, &r.timestamp, &r.random_string)
                    .is_ok_and(|code| code == r.verification_code)
            })
    });
    let window = store.redemption()?;
    let token_usage_time_plausible = match window {
        Some(w) => publication.used_tokens.iter().any(|u| {
            u.token_digest == token_digest
                && u.used_at.datetime() >= w.sent_at.datetime() - tolerance
                && u.used_at.datetime() <= w.received_at.datetime() + tolerance
        }),
        None => false,
    };
    let token_listed_unused = publication.unused_tokens.contains(&token_digest);
    let complaint = match &receipt {
        Some(r) if !code_present => Some(Complaint {
            verification_code: r.verification_code,
            signature: r.signature.clone(),
        }),
        _ => None,
    };
    Ok(CheckReport {
        code_present,
        vote_matches,
        token_usage_time_plausible,
        token_listed_unused,
        complaint,
    })
}

/// Local proxy a browser can point at: forwards every request to `upstream`
/// with identifying headers removed.
#[derive(Debug)]
pub struct ClientProxy {
    pub server: ServerHandle,
}

struct ProxyState {
    upstream: SocketAddr,
    client: HttpClient,
}

pub fn scrub_identifying_headers(headers: &HeaderMap) -> HeaderMap {
    let mut out = headers.clone();
    for name in IDENTIFYING_HEADERS {
        out.remove(*name);
    }
    out
}

impl ClientProxy {
    pub async fn start(listen: SocketAddr, upstream: SocketAddr) -> std::io::Result<Self> {
        let state = Arc::new(ProxyState {
            upstream,
            client: HttpClient::new(),
        });
        let router = Router::new().fallback(client_proxy).with_state(state);
        Ok(Self {
            server: serve(router, listen).await?,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.server.addr
    }
}

async fn client_proxy(State(state): State<Arc<ProxyState>>, request: Request<Body>) -> Response {
    let (parts, body) = request.into_parts();
    let body = body.collect().await.map(|b| b.to_bytes()).unwrap_or_default();
    let outgoing = OutgoingRequest {
        method: parts.method,
        path: parts.uri.path_and_query().map_or("/", |p| p.as_str()).to_owned(),
        headers: scrub_identifying_headers(&parts.headers),
        body,
    };
    match state.client.send(state.upstream, outgoing).await {
        Ok(resp) => {
            let mut out = Response::new(Body::from(resp.body));
            *out.status_mut() = resp.status;
            let mut headers = resp.headers;
            for name in ["connection", "transfer-encoding", "content-length", "set-cookie"] {
                headers.remove(name);
            }
            *out.headers_mut() = headers;
            out
        }
        Err(e) => {
            let mut out = Response::new(Body::from(e.to_string()));
            *out.status_mut() = http::StatusCode::BAD_GATEWAY;
            out
        }
    }
}
