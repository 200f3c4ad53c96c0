//! Whole-ballot simulation: provisions keys and voters, runs the three
//! services on localhost, drives every voter, closes the ballot, runs the
//! managers' offline steps and the voters' checks, and classifies what the
//! configured adversaries achieved.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use chrono::Duration;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{self, AdversaryPermit, AnonCheats, AuthCheats, VoteCheats};
use crate::anonymizer::{AnonMode, Anonymizer, ClientLogRecord, MixConfig, CLIENT_LOG_FILE};
use crate::auth_server::{
    self, AdminRequest, AuthConfig, AuthExport, AuthKeys, AuthLinkRecord, AuthService, ExtraAuthorization,
    LoginRequest, RedeemRequest, EXTRA_AUTHZ_FILE,
};
use crate::audit::AuditEntry;
use crate::clock::BallotClock;
use crate::crypto::{seal, Digest, SealedEnvelope};
use crate::net::{serve, AdminCredential, HttpClient, OutgoingRequest, ServerHandle, ADMIN_HEADER};
use crate::protocol::publication::Publication;
use crate::protocol::{
    to_canonical_json, BallotSpec, CanonicalVote, Mode, Pin, Prn, Question, Timestamp, Vote, VoteAuthorization,
    VoteReceipt, VoteToken,
};
use crate::records::Archive;
use crate::tally::{
    self, audit_seal, authmgr_publish, authmgr_reconcile, handle_complaint, votemgr_count, votemgr_publish_codes,
    ComplaintVerdict, KeyRing, ReconcileInputs, ReconciliationReport, SealAudit, TallyResult,
};
use crate::vote_server::{
    self, CastRequest, CodeReuseAttempt, VoteConfig, VoteKeys, VoteLinkRecord, VoteService,
};
use crate::voter::{CheckReport, ClientConfig, Voter, VoterError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adversary {
    AuthSysmgrDoubleIssue,
    AuthSysmgrGhostVote,
    VoteSysmgrFabricate,
    VoteSysmgrModify,
    VoteSysmgrCodeReuse,
    AnonSysmgrLog,
    ColludeAuthVote,
    ColludeAnonVote,
    MitmNetwork,
    VoterDoubleCast,
}

impl Adversary {
    pub const ALL: [Adversary; 10] = [
        Adversary::AuthSysmgrDoubleIssue,
        Adversary::AuthSysmgrGhostVote,
        Adversary::VoteSysmgrFabricate,
        Adversary::VoteSysmgrModify,
        Adversary::VoteSysmgrCodeReuse,
        Adversary::AnonSysmgrLog,
        Adversary::ColludeAuthVote,
        Adversary::ColludeAnonVote,
        Adversary::MitmNetwork,
        Adversary::VoterDoubleCast,
    ];

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    /// Nothing happened that any check could or needed to catch.
    Clean,
    Detected,
    Prevented,
    PrivacyBroken,
}

/// Which check produced evidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    CountCrossCheck,
    SealAudit,
    ReceiptVerification,
    VoterCheck,
    Complaint,
    TallyAnnex,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub voters: usize,
    /// Provisioned voters who never vote.
    #[serde(default)]
    pub abstain: usize,
    #[serde(default = "plain")]
    pub mode: Mode,
    #[serde(default = "yes")]
    pub pin: bool,
    #[serde(default = "mix")]
    pub anonymizer: AnonMode,
    #[serde(default = "four")]
    pub batch_size: usize,
    #[serde(default = "hold")]
    pub max_hold_ms: u64,
    /// Voters act one after another instead of all at once.
    #[serde(default)]
    pub sequential: bool,
    /// Per-voter choices, one index per question. Missing entries are drawn
    /// from `seed`.
    #[serde(default)]
    pub votes: Vec<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adversaries: Vec<Adversary>,
    /// Exercise every service error path along the way.
    #[serde(default)]
    pub probe_errors: bool,
    #[serde(default)]
    pub expected: Option<Outcome>,
}

fn plain() -> Mode {
    Mode::Plain
}
fn yes() -> bool {
    true
}
fn mix() -> AnonMode {
    AnonMode::Mix
}
fn four() -> usize {
    4
}
fn hold() -> u64 {
    150
}

impl Scenario {
    pub fn honest(name: &str, voters: usize) -> Self {
        Self {
            name: name.to_owned(),
            voters,
            abstain: 0,
            mode: Mode::Plain,
            pin: true,
            anonymizer: AnonMode::Mix,
            batch_size: 4,
            max_hold_ms: hold(),
            sequential: false,
            votes: Vec::new(),
            seed: 1,
            adversaries: Vec::new(),
            probe_errors: false,
            expected: Some(Outcome::Clean),
        }
    }

    fn has(&self, a: Adversary) -> bool {
        self.adversaries.contains(&a)
    }
}

/// The ballot every simulation uses.
pub fn sample_ballot(clock: &BallotClock) -> BallotSpec {
    let now = clock.now().datetime();
    BallotSpec {
        ballot_id: "b1".into(),
        questions: vec![
            Question {
                id: "q1".into(),
                prompt: "Approve the budget?".into(),
                choices: vec!["Yes".into(), "No".into()],
            },
            Question {
                id: "q2".into(),
                prompt: "Board candidate".into(),
                choices: vec!["A".into(), "B".into(), "C".into()],
            },
        ],
        open_at: Timestamp::from_datetime(now - Duration::minutes(1)),
        close_at: Timestamp::from_datetime(now + Duration::hours(1)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedVote {
    pub voter: String,
    pub vote: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linkage {
    pub pairs: Vec<LinkedVote>,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scenario: String,
    pub expected: Option<Outcome>,
    pub observed: Outcome,
    pub checks_fired: Vec<Check>,
    pub evidence: Vec<String>,
    pub prevented: Vec<String>,
    /// Linkage the colluding logs allow, if any logs were kept.
    pub linkage: Option<Linkage>,
    /// Linkage from each cheat log on its own.
    pub single_log_linkage: BTreeMap<String, usize>,
    pub notes: Vec<String>,
}

impl DetectionReport {
    pub fn passed(&self) -> bool {
        self.expected.is_none_or(|e| e == self.observed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VoterResult {
    pub username: String,
    pub intended: String,
    pub cast_error: Option<String>,
    pub receipt: Option<VoteReceipt>,
    pub check: Option<CheckReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BallotRun {
    pub report: DetectionReport,
    pub tally: TallyResult,
    pub ground_truth: BTreeMap<String, BTreeMap<String, usize>>,
    pub tally_matches_truth: bool,
    pub reconciliation: ReconciliationReport,
    pub seal_audit: SealAudit,
    pub voters: Vec<VoterResult>,
    pub abstainer_checks: Vec<(String, CheckReport)>,
    pub complaints: Vec<ComplaintVerdict>,
    /// Error kinds each service returned, by service.
    pub errors: BTreeMap<String, BTreeMap<String, usize>>,
    pub workdir: PathBuf,
    pub elapsed_ms: u128,
}

impl BallotRun {
    pub fn all_voter_checks_green(&self) -> bool {
        self.voters
            .iter()
            .all(|v| v.check.as_ref().is_some_and(CheckReport::all_green))
    }

    pub fn auth_state_dir(&self) -> PathBuf {
        self.workdir.join("auth")
    }

    pub fn vote_state_dir(&self) -> PathBuf {
        self.workdir.join("vote")
    }

    pub fn publication_dir(&self) -> PathBuf {
        self.workdir.join("publication")
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("infrastructure: {0}")]
    Infrastructure(String),
}

fn infra<E: std::fmt::Display>(e: E) -> SimError {
    SimError::Infrastructure(e.to_string())
}

/// HTTP error kinds the two servers can return; the attack suite has to
/// provoke each at least once.
pub const AUTH_ERROR_KINDS: &[&str] = &[
    "bad-credentials",
    "ballot-not-open",
    "ballot-closed",
    "session-invalid",
    "unknown-token",
    "token-already-used",
    "wrong-mode",
    "ballot-still-open",
    "wrong-credential",
    "malformed-request",
];

pub const VOTE_ERROR_KINDS: &[&str] = &[
    "ballot-not-open",
    "ballot-closed",
    "authorization-invalid",
    "authorization-already-used",
    "authorization-locked",
    "pin-mismatch",
    "vote-invalid",
    "ballot-still-open",
    "wrong-credential",
    "malformed-request",
];

struct Services {
    clock: BallotClock,
    auth: Arc<AuthService>,
    vote: Arc<VoteService>,
    auth_http: ServerHandle,
    vote_http: ServerHandle,
    anon: Anonymizer,
    ballot: BallotSpec,
}

impl Services {
    async fn admin_post(&self, path: &str, cred: &AdminCredential) -> Result<AuditEntry, SimError> {
        let resp = HttpClient::new()
            .send(
                self.auth_http.addr,
                OutgoingRequest::post_json(path, &AdminRequest {
                    credential: cred.clone(),
                }),
            )
            .await
            .map_err(infra)?;
        resp.json().map_err(infra)
    }

    async fn admin_get<T: serde::de::DeserializeOwned>(
        &self,
        addr: SocketAddr,
        path: &str,
        cred: &AdminCredential,
    ) -> Result<T, crate::net::NetError> {
        HttpClient::new()
            .send(addr, OutgoingRequest::get(path).with_header(ADMIN_HEADER, &cred.to_header()))
            .await?
            .json()
    }
}

fn voter_ip(index: usize) -> Option<IpAddr> {
    // 127.0.0.10 .. 127.0.0.250; larger rosters share 127.0.0.1.
    (index < 240).then(|| IpAddr::V4(Ipv4Addr::new(127, 0, 0, 10 + index as u8)))
}

fn scripted_votes(scenario: &Scenario, ballot: &BallotSpec) -> Vec<Vote> {
    let mut rng = StdRng::seed_from_u64(scenario.seed);
    (0..scenario.voters)
        .map(|i| {
            let choices: Vec<usize> = ballot
                .questions
                .iter()
                .enumerate()
                .map(|(qi, q)| {
                    let drawn = rng.gen_range(0..q.choices.len());
                    scenario.votes.get(i).and_then(|v| v.get(qi)).copied().unwrap_or(drawn)
                })
                .collect();
            let answers: Vec<(&str, usize)> = ballot
                .questions
                .iter()
                .zip(&choices)
                .map(|(q, c)| (q.id.as_str(), *c))
                .collect();
            Vote::new(&ballot.ballot_id, &answers)
        })
        .collect()
}

fn empty_counts(ballot: &BallotSpec) -> BTreeMap<String, BTreeMap<String, usize>> {
    ballot
        .questions
        .iter()
        .map(|q| (q.id.clone(), q.choices.iter().map(|c| (c.clone(), 0)).collect()))
        .collect()
}

/// Joins the AuthSrv's (voter, authorization) log with the VoteSrv's
/// (authorization, vote) log on the authorization digest.
pub fn link_auth_vote(auth: &[AuthLinkRecord], votes: &[VoteLinkRecord]) -> Vec<LinkedVote> {
    let by_prn: HashMap<Digest, &VoteLinkRecord> = votes.iter().map(|v| (v.prn_digest, v)).collect();
    auth.iter()
        .filter_map(|a| {
            let v = by_prn.get(&a.prn_digest?)?;
            Some(LinkedVote {
                voter: a.username.clone(),
                vote: v.vote.to_published(),
            })
        })
        .collect()
}

/// Joins the anonymizer's (client address, time) log for cast requests with
/// the VoteSrv's (time, vote) log by order of arrival.
pub fn link_anon_vote(
    anon: &[ClientLogRecord],
    votes: &[VoteLinkRecord],
    owners: &HashMap<IpAddr, String>,
) -> Vec<LinkedVote> {
    let mut casts: Vec<&ClientLogRecord> = anon.iter().filter(|r| r.path == "/vote/cast").collect();
    casts.sort_by_key(|r| r.forwarded_at);
    let mut received: Vec<&VoteLinkRecord> = votes.iter().collect();
    received.sort_by_key(|r| r.received_at);
    casts
        .iter()
        .zip(received)
        .filter_map(|(c, v)| {
            Some(LinkedVote {
                voter: owners.get(&c.client.ip())?.clone(),
                vote: v.vote.to_published(),
            })
        })
        .collect()
}

fn score(pairs: Vec<LinkedVote>, truth: &HashMap<String, String>) -> Linkage {
    let correct = pairs
        .iter()
        .filter(|p| truth.get(&p.voter) == Some(&p.vote))
        .count();
    Linkage { pairs, correct }
}

/// Whether a linkage breaks privacy: most voters correctly tied to their vote.
fn privacy_broken(linkage: &Linkage, voters: usize) -> bool {
    voters >= 2 && linkage.correct * 2 > voters
}

/// Runs one ballot. `keys` may be shared between runs to save key generation.
pub async fn run_ballot(scenario: &Scenario, keys: &KeyRing, workdir: &Path) -> Result<BallotRun, SimError> {
    let started = Instant::now();
    if scenario.abstain > scenario.voters {
        return Err(SimError::Scenario("more abstainers than voters".into()));
    }
    if scenario.has(Adversary::AuthSysmgrGhostVote) && scenario.abstain == 0 {
        return Err(SimError::Scenario("a ghost vote needs at least one abstainer".into()));
    }
    let permit = Some(AdversaryPermit::simulation());
    let clock = BallotClock::new();
    let ballot = sample_ballot(&clock);
    let manifest = tally::provision(scenario.voters, &ballot, keys);
    manifest.write_dir(&workdir.join("provision")).map_err(infra)?;

    // Services.
    let auth_dir = workdir.join("auth");
    let vote_dir = workdir.join("vote");
    let anon_dir = workdir.join("anon");
    AuthService::install(&auth_dir, &manifest.auth_bundle).map_err(infra)?;
    VoteService::install(&vote_dir, &ballot).map_err(infra)?;

    let mut auth_config = AuthConfig::new(scenario.mode, scenario.pin);
    auth_config.permit = permit;
    auth_config.cheats = AuthCheats {
        double_issue: usize::from(scenario.has(Adversary::AuthSysmgrDoubleIssue)),
        log_links: scenario.has(Adversary::ColludeAuthVote),
        bypass_seal: scenario.has(Adversary::AuthSysmgrGhostVote),
    };
    let mut vote_config = VoteConfig::new(scenario.mode, scenario.pin);
    vote_config.permit = permit;
    vote_config.cheats = VoteCheats {
        fabricate: if scenario.has(Adversary::VoteSysmgrFabricate) { 2 } else { 0 },
        modify: usize::from(scenario.has(Adversary::VoteSysmgrModify)),
        code_reuse: scenario.has(Adversary::VoteSysmgrCodeReuse),
        log_links: scenario.has(Adversary::ColludeAuthVote) || scenario.has(Adversary::ColludeAnonVote),
    };
    let auth = Arc::new(
        AuthService::open(
            &auth_dir,
            auth_config,
            AuthKeys {
                server: keys.auth_srv.clone(),
                vote_srv: keys.vote_srv.public().clone(),
                auth_mgr: keys.auth_mgr.public().clone(),
            },
            clock.clone(),
        )
        .map_err(infra)?,
    );
    let vote = Arc::new(
        VoteService::open(
            &vote_dir,
            vote_config,
            VoteKeys {
                server: keys.vote_srv.clone(),
                auth_srv: keys.auth_srv.public().clone(),
                auth_mgr: keys.auth_mgr.public().clone(),
                vote_mgr: keys.vote_mgr.public().clone(),
            },
            clock.clone(),
        )
        .map_err(infra)?,
    );
    let localhost: SocketAddr = "127.0.0.1:0".parse().expect("literal");
    let auth_http = serve(auth_server::router(auth.clone()), localhost).await.map_err(infra)?;
    let vote_http = serve(vote_server::router(vote.clone()), localhost).await.map_err(infra)?;
    let mut mix_config = match scenario.anonymizer {
        AnonMode::Nat => MixConfig::nat(localhost, vote_http.addr),
        AnonMode::Mix => MixConfig::mix(localhost, vote_http.addr, scenario.batch_size, scenario.max_hold_ms),
    };
    mix_config.egress_ip = Some(IpAddr::V4(Ipv4Addr::LOCALHOST));
    mix_config.permit = permit;
    mix_config.cheats = AnonCheats {
        log_clients: scenario.has(Adversary::AnonSysmgrLog) || scenario.has(Adversary::ColludeAnonVote),
        tamper_votes: scenario.has(Adversary::MitmNetwork),
    };
    if !mix_config.cheats.is_honest() {
        mix_config.state_dir = Some(anon_dir.clone());
    }
    let anon = Anonymizer::start(mix_config, clock.clone()).await.map_err(infra)?;
    let svc = Services {
        clock: clock.clone(),
        auth,
        vote,
        auth_http,
        vote_http,
        anon,
        ballot: ballot.clone(),
    };

    if scenario.probe_errors {
        probe_auth_admin(&svc, keys).await;
    }
    // The AuthMgr seals the AuthSrv before the ballot opens to voters.
    svc.admin_post("/admin/seal", &AdminCredential::issue(&keys.auth_mgr, "seal", clock.now()))
        .await?;

    // Voters.
    let intended = scripted_votes(scenario, &ballot);
    let casting = scenario.voters - scenario.abstain;
    let mut voters = Vec::with_capacity(scenario.voters);
    let mut owners = HashMap::new();
    for (i, creds) in manifest.roster.iter().enumerate() {
        let config = ClientConfig {
            auth_server: svc.auth_http.addr,
            anonymizer: svc.anon.addr(),
            auth_key_id: keys.auth_srv.key_id().to_owned(),
            vote_key_id: keys.vote_srv.key_id().to_owned(),
            vote_srv_public_key: keys.vote_srv.public().to_pem(),
            ballot_id: ballot.ballot_id.clone(),
            mode: scenario.mode,
            store: workdir.join("voters").join(&creds.username),
            bind_ip: voter_ip(i),
            timestamp_tolerance_ms: 2_000,
        };
        if let Some(ip) = config.bind_ip {
            owners.insert(ip, creds.username.clone());
        }
        let voter = Voter::new(config, clock.clone()).map_err(infra)?;
        voter.store().save_credentials(creds).map_err(infra)?;
        voters.push(voter);
    }

    // Redemption phase, then casting in a shuffled order: authorizations are
    // normally fetched well before voting.
    let pins = run_phase(&voters[..casting], scenario.sequential, |v| async move { v.redeem().await }).await;
    let mut pin_of: Vec<Option<Pin>> = Vec::with_capacity(casting);
    for (i, p) in pins.into_iter().enumerate() {
        match p {
            Ok(pin) => pin_of.push(pin),
            Err(e) => {
                return Err(SimError::Infrastructure(format!(
                    "{} could not redeem: {e}",
                    manifest.roster[i].username
                )))
            }
        }
    }
    let mut order: Vec<usize> = (0..casting).collect();
    order.shuffle(&mut StdRng::seed_from_u64(scenario.seed ^ 0x5eed));
    let jobs: Vec<(Voter, Vote, Option<Pin>)> = order
        .iter()
        .map(|&i| (voters[i].clone(), intended[i].clone(), pin_of[i].clone()))
        .collect();
    let cast_results = run_phase(&jobs, scenario.sequential, |(v, vote, pin)| async move {
        v.cast(&vote, pin.as_ref().map(Pin::as_str)).await
    })
    .await;
    let mut cast_by_voter: HashMap<usize, Result<VoteReceipt, VoterError>> = HashMap::new();
    for (&i, r) in order.iter().zip(cast_results) {
        cast_by_voter.insert(i, r);
    }

    let mut prevented = Vec::new();
    let mut notes = Vec::new();

    if scenario.has(Adversary::VoterDoubleCast) {
        let v = &voters[0];
        let second = Vote::new(&ballot.ballot_id, &[("q1", 1), ("q2", 2)]);
        match v.cast(&second, pin_of[0].as_ref().map(Pin::as_str)).await {
            Err(e) if e.service_kind() == Some("authorization-already-used") => {
                prevented.push("second cast with the same authorization rejected: authorization-already-used".into())
            }
            other => notes.push(format!("second cast was not rejected as expected: {other:?}")),
        }
        match v.redeem().await {
            Err(e) if e.service_kind() == Some("token-already-used") => {
                prevented.push("second redemption of the same token rejected: token-already-used".into())
            }
            other => notes.push(format!("second redemption was not rejected as expected: {other:?}")),
        }
    }

    if scenario.has(Adversary::AuthSysmgrDoubleIssue) {
        let extra: Vec<ExtraAuthorization> = adversary::read_jsonl(&auth_dir, EXTRA_AUTHZ_FILE);
        for e in extra {
            let v = Vote::new(&ballot.ballot_id, &[("q1", 0), ("q2", 0)]);
            let r = cast_direct(&svc, &v, e.authorization, e.pin).await;
            notes.push(format!("AuthSysMgr cast an unbacked authorization: {}", describe(&r)));
        }
    }

    if scenario.has(Adversary::AuthSysmgrGhostVote) {
        match svc.auth.sysmgr_ghost_redeem("auth-sysmgr") {
            Ok(red) => {
                let v = Vote::new(&ballot.ballot_id, &[("q1", 1), ("q2", 1)]);
                let r = cast_direct(&svc, &v, red.authorization, red.pin).await;
                notes.push(format!("AuthSysMgr cast a vote with an unused token: {}", describe(&r)));
            }
            Err(e) => notes.push(format!("ghost redemption failed: {e}")),
        }
    }

    if scenario.probe_errors {
        probe_errors(&svc, keys, &voters[0], &manifest.roster[0].vote_token).await?;
    }

    // Close: unseal, move past the close time, export.
    let unseal = svc
        .admin_post("/admin/unseal", &AdminCredential::issue(&keys.auth_mgr, "unseal", clock.now()))
        .await?;
    let anchor = unseal.hash;
    let now = clock.now().datetime();
    clock.advance(ballot.close_at.datetime() - now + Duration::seconds(1));

    if scenario.probe_errors {
        probe_after_close(&svc, &voters[0]).await;
    }

    let auth_export: AuthExport = svc
        .admin_get(svc.auth_http.addr, "/admin/export", &AdminCredential::issue(&keys.auth_mgr, "export", clock.now()))
        .await
        .map_err(infra)?;
    let used_authz: Archive = svc
        .admin_get(
            svc.vote_http.addr,
            "/admin/export-authz",
            &AdminCredential::issue(&keys.auth_mgr, "export-authz", clock.now()),
        )
        .await
        .map_err(infra)?;
    let votes_archive: Archive = svc
        .admin_get(
            svc.vote_http.addr,
            "/admin/export-votes",
            &AdminCredential::issue(&keys.vote_mgr, "export-votes", clock.now()),
        )
        .await
        .map_err(infra)?;

    // Offline steps.
    let pub_dir = workdir.join("publication");
    let votemgr_dir = workdir.join("votemgr");
    let codes = votemgr_publish_codes(&votes_archive, &pub_dir, &votemgr_dir).map_err(infra)?;
    let reconciliation = authmgr_reconcile(
        &ReconcileInputs {
            mode: scenario.mode,
            usage: &auth_export.usage,
            issued: &auth_export.issued,
            used_authorizations: &used_authz,
            votes: codes.len(),
        },
        &keys.auth_mgr,
        keys.auth_srv.public(),
        keys.vote_srv.public(),
    )
    .map_err(infra)?;
    let seal_audit = audit_seal(&auth_export.audit_log, &anchor);
    let justification = (!reconciliation.consistent)
        .then_some("published so voters can run their own checks while the anomalies are investigated");
    authmgr_publish(&reconciliation, &manifest.token_digests(), &pub_dir, justification).map_err(infra)?;

    // Complaint window: voters look for their codes before anything is decrypted.
    let partial = Publication::load(&pub_dir).map_err(infra)?;
    let mut complaints = Vec::new();
    for v in &voters[..casting] {
        let report = v.check_publication(&partial).map_err(infra)?;
        if let Some(c) = report.complaint {
            complaints.push(handle_complaint(&c, &codes, keys.vote_srv.public()));
        }
    }
    let tally = votemgr_count(
        &votes_archive,
        &ballot,
        &keys.vote_mgr,
        keys.vote_srv.public(),
        true,
        &votemgr_dir,
        &pub_dir,
    )
    .map_err(infra)?;

    // Final checks against the complete publication.
    let publication = Publication::load(&pub_dir).map_err(infra)?;
    let mut voter_results = Vec::new();
    let canonical: Vec<CanonicalVote> = intended
        .iter()
        .map(|v| ballot.canonicalize(v).expect("scripted votes fit the ballot"))
        .collect();
    for (i, v) in voters[..casting].iter().enumerate() {
        let cast = cast_by_voter.remove(&i).expect("every casting voter has a result");
        voter_results.push(VoterResult {
            username: manifest.roster[i].username.clone(),
            intended: canonical[i].to_published(),
            cast_error: cast.as_ref().err().map(|e| e.to_string()),
            receipt: cast.ok(),
            check: Some(v.check_publication(&publication).map_err(infra)?),
        });
    }
    let mut abstainer_checks = Vec::new();
    for (i, v) in voters.iter().enumerate().skip(casting) {
        let report = v.check_publication(&publication).map_err(infra)?;
        if !report.token_listed_unused {
            notes.push(format!(
                "{} did not vote but their token is not listed unused (cannot be settled mechanically)",
                manifest.roster[i].username
            ));
        }
        abstainer_checks.push((manifest.roster[i].username.clone(), report));
    }

    let mut ground_truth = empty_counts(&ballot);
    for cv in &canonical[..casting] {
        for (qid, choice) in cv.answers() {
            let label = &ballot.question(qid).expect("scripted").choices[*choice];
            *ground_truth.get_mut(qid).and_then(|m| m.get_mut(label)).expect("scripted") += 1;
        }
    }
    let tally_matches_truth = tally.counts == ground_truth;

    // What the checks found.
    let mut fired = BTreeSet::new();
    let mut evidence = Vec::new();
    if !reconciliation.consistent {
        fired.insert(Check::CountCrossCheck);
        evidence.extend(reconciliation.anomalies.iter().map(|a| format!("count-cross-check: {a}")));
    }
    if !seal_audit.clean() {
        fired.insert(Check::SealAudit);
        if !seal_audit.chain_valid || !seal_audit.anchor_found {
            evidence.push(format!("seal-audit: audit log tampered ({:?})", seal_audit.problem));
        }
        for e in &seal_audit.accesses_while_sealed {
            evidence.push(format!("seal-audit: {} attempted {} while sealed at {}", e.actor, e.action, e.at));
        }
    }
    let receipt_failures: Vec<&VoterResult> = voter_results
        .iter()
        .filter(|v| v.cast_error.as_deref().is_some_and(|e| e.starts_with("receipt")))
        .collect();
    if !receipt_failures.is_empty() {
        fired.insert(Check::ReceiptVerification);
        evidence.push(format!(
            "receipt-verification: {} voters rejected their receipt ({})",
            receipt_failures.len(),
            receipt_failures[0].cast_error.as_deref().unwrap_or_default()
        ));
    }
    let failed_checks = voter_results
        .iter()
        .filter(|v| v.receipt.is_some() && !v.check.as_ref().is_some_and(CheckReport::all_green))
        .count();
    if failed_checks > 0 {
        fired.insert(Check::VoterCheck);
        evidence.push(format!("voter-check: {failed_checks} voters found their vote missing or altered"));
    }
    let valid_complaints = complaints
        .iter()
        .filter(|c| matches!(c, ComplaintVerdict::ValidComplaint { .. }))
        .count();
    if valid_complaints > 0 {
        fired.insert(Check::Complaint);
        evidence.push(format!(
            "complaint: {valid_complaints} signed codes missing from the list; cancellation recommended"
        ));
    }
    if !tally.excluded.is_empty() {
        fired.insert(Check::TallyAnnex);
        evidence.extend(tally.excluded.iter().map(|x| format!("tally-annex: {} {}", x.file, x.reason)));
    }

    if scenario.has(Adversary::VoteSysmgrCodeReuse) {
        let attempts: Vec<CodeReuseAttempt> = adversary::read_jsonl(&vote_dir, vote_server::CODE_REUSE_FILE);
        let dupes = attempts.iter().filter(|a| a.duplicate_issued).count();
        let tried: usize = attempts.iter().map(|a| a.candidates_tried).sum();
        let replays: usize = attempts.iter().map(|a| a.replay_candidates).sum();
        let receipt_codes: BTreeSet<Digest> = voter_results
            .iter()
            .filter_map(|v| v.receipt.as_ref().map(|r| r.verification_code))
            .collect();
        if dupes == 0 && receipt_codes.len() == casting {
            prevented.push(format!(
                "no duplicate VerificationCode could be issued: {tried} random strings tried, \
                 {replays} replay candidates with identical votes, all timestamps already in the past"
            ));
        } else {
            evidence.push(format!("code-reuse: {dupes} duplicate codes handed out"));
        }
    }

    // Linkage from whatever cheat logs exist.
    let auth_links: Vec<AuthLinkRecord> = adversary::read_jsonl(&auth_dir, auth_server::LINKS_FILE);
    let vote_links: Vec<VoteLinkRecord> = adversary::read_jsonl(&vote_dir, vote_server::LINKS_FILE);
    let anon_links: Vec<ClientLogRecord> = adversary::read_jsonl(&anon_dir, CLIENT_LOG_FILE);
    let truth: HashMap<String, String> = voter_results
        .iter()
        .map(|v| (v.username.clone(), v.intended.clone()))
        .collect();
    let mut single = BTreeMap::new();
    if !auth_links.is_empty() {
        single.insert("auth-log".to_owned(), score(link_auth_vote(&auth_links, &[]), &truth).correct);
    }
    if !vote_links.is_empty() {
        single.insert("vote-log".to_owned(), score(link_auth_vote(&[], &vote_links), &truth).correct);
    }
    if !anon_links.is_empty() {
        single.insert(
            "anon-log".to_owned(),
            score(link_anon_vote(&anon_links, &[], &owners), &truth).correct,
        );
    }
    let linkage = if !auth_links.is_empty() && !vote_links.is_empty() {
        Some(score(link_auth_vote(&auth_links, &vote_links), &truth))
    } else if !anon_links.is_empty() && !vote_links.is_empty() {
        Some(score(link_anon_vote(&anon_links, &vote_links, &owners), &truth))
    } else {
        None
    };
    let broken = linkage.as_ref().is_some_and(|l| privacy_broken(l, casting))
        || single.values().any(|&c| privacy_broken(&Linkage { pairs: vec![], correct: c }, casting));
    if let Some(l) = &linkage {
        evidence.push(format!("linkage: {} of {casting} voters tied to their vote", l.correct));
    }

    let observed = if broken {
        Outcome::PrivacyBroken
    } else if !fired.is_empty() {
        Outcome::Detected
    } else if !prevented.is_empty() {
        Outcome::Prevented
    } else {
        Outcome::Clean
    };

    let errors = BTreeMap::from([
        ("auth".to_owned(), svc.auth.errors().snapshot().into_iter().collect()),
        ("vote".to_owned(), svc.vote.errors().snapshot().into_iter().collect()),
    ]);
    svc.anon.shutdown().await;
    svc.vote_http.shutdown().await;
    svc.auth_http.shutdown().await;

    Ok(BallotRun {
        report: DetectionReport {
            scenario: scenario.name.clone(),
            expected: scenario.expected,
            observed,
            checks_fired: fired.into_iter().collect(),
            evidence,
            prevented,
            linkage,
            single_log_linkage: single,
            notes,
        },
        tally,
        ground_truth,
        tally_matches_truth,
        reconciliation,
        seal_audit,
        voters: voter_results,
        abstainer_checks,
        complaints,
        errors,
        workdir: workdir.to_owned(),
        elapsed_ms: started.elapsed().as_millis(),
    })
}

async fn run_phase<T, F, Fut, R>(items: &[T], sequential: bool, f: F) -> Vec<R>
where
    T: Clone + Send + 'static,
    F: Fn(T) -> Fut + Clone + Send + 'static,
    Fut: std::future::Future<Output = R> + Send + 'static,
    R: Send + 'static,
{
    let mut out = Vec::with_capacity(items.len());
    if sequential {
        for item in items {
            out.push(f(item.clone()).await);
        }
    } else {
        let handles: Vec<_> = items
            .iter()
            .map(|item| tokio::spawn((f.clone())(item.clone())))
            .collect();
        for h in handles {
            out.push(h.await.expect("voter task panicked"));
        }
    }
    out
}

fn describe(r: &Result<VoteReceipt, crate::net::NetError>) -> String {
    match r {
        Ok(receipt) => format!("accepted, code {}", receipt.verification_code),
        Err(e) => format!("rejected: {e}"),
    }
}

async fn cast_direct(
    svc: &Services,
    vote: &Vote,
    authorization: SealedEnvelope,
    pin: Option<Pin>,
) -> Result<VoteReceipt, crate::net::NetError> {
    HttpClient::new()
        .send(
            svc.anon.addr(),
            OutgoingRequest::post_json(
                "/vote/cast",
                &CastRequest {
                    vote: vote.clone(),
                    authorization,
                    pin: pin.map(|p| p.as_str().to_owned()),
                },
            ),
        )
        .await?
        .json()
}

/// Sends a request whose only purpose is the error it provokes.
async fn probe(addr: SocketAddr, req: OutgoingRequest) {
    let _ = HttpClient::new().send(addr, req).await;
}

/// Provokes every error the two servers can return while the ballot is open,
/// without leaving any record that would disturb reconciliation.
async fn probe_errors(svc: &Services, keys: &KeyRing, voter: &Voter, token: &VoteToken) -> Result<(), SimError> {
    let auth = svc.auth_http.addr;
    let vote = svc.vote_http.addr;
    let creds = voter.store().credentials().map_err(infra)?;

    // AuthSrv.
    probe(auth, OutgoingRequest::post_json("/auth/login", &LoginRequest {
        username: creds.username.clone(),
        password: "wrong".into(),
    }))
    .await;
    let session: auth_server::LoginResponse = HttpClient::new()
        .send(auth, OutgoingRequest::post_json("/auth/login", &LoginRequest {
            username: creds.username.clone(),
            password: creds.password.clone(),
        }))
        .await
        .map_err(infra)?
        .json()
        .map_err(infra)?;
    let redeem = |session: &str, token: String| {
        OutgoingRequest::post_json("/auth/redeem", &RedeemRequest {
            session: session.to_owned(),
            vote_token: token,
        })
    };
    probe(auth, redeem(&session.session, VoteToken::random().encode())).await;
    probe(auth, redeem(&session.session, token.encode())).await;
    probe(auth, redeem("no-such-session", token.encode())).await;
    let wrong_mode = if svc.auth.mode() == Mode::Plain { "/auth/blind-redeem" } else { "/auth/redeem" };
    probe(
        auth,
        OutgoingRequest::post_json(wrong_mode, &auth_server::BlindRedeemRequest {
            session: session.session.clone(),
            vote_token: token.encode(),
            blinded_message: "1".into(),
        }),
    )
    .await;
    let mut garbage = OutgoingRequest::post_json("/auth/login", &"x");
    garbage.body = bytes::Bytes::from_static(b"{not json");
    probe(auth, garbage.clone()).await;
    let wrong = AdminCredential::issue(&keys.vote_mgr, "export", svc.clock.now());

    // VoteSrv: an authorization the harness mints itself is never recorded
    // anywhere unless it is accepted, and it never is.
    let probe_pin = Pin::random();
    let probe_auth = seal(
        &to_canonical_json(&VoteAuthorization {
            prn: Prn::random(),
            ballot_id: svc.ballot.ballot_id.clone(),
            pin: Some(probe_pin.clone()),
            issued_at: svc.clock.now(),
        }),
        &keys.auth_srv,
        keys.vote_srv.public(),
    );
    let good_vote = Vote::new(&svc.ballot.ballot_id, &[("q1", 0), ("q2", 0)]);
    let cast = |authorization: SealedEnvelope, vote: Vote, pin: Option<&str>| {
        OutgoingRequest::post_json("/vote/cast", &CastRequest {
            vote,
            authorization,
            pin: pin.map(str::to_owned),
        })
    };
    let wrong_pin = if probe_pin.as_str() == "000000" { "999999" } else { "000000" };
    if svc.vote.mode() == Mode::Plain {
        probe(vote, cast(probe_auth.clone(), Vote::new("b1", &[("q1", 9), ("q2", 0)]), None)).await;
        for _ in 0..vote_server::MAX_PIN_FAILURES {
            probe(vote, cast(probe_auth.clone(), good_vote.clone(), Some(wrong_pin))).await;
        }
        probe(vote, cast(probe_auth.clone(), good_vote.clone(), Some(probe_pin.as_str()))).await;
    }
    let forged = seal(b"{}", &keys.vote_mgr, keys.vote_srv.public());
    probe(vote, cast(forged, good_vote.clone(), None)).await;
    if let Some(used) = voter.store().authorization().map_err(infra)? {
        probe(vote, cast(used, good_vote.clone(), None)).await;
    }
    let mut garbage_cast = cast(probe_auth, good_vote, None);
    garbage_cast.body = bytes::Bytes::from_static(b"[]");
    probe(vote, garbage_cast).await;
    let early = AdminCredential::issue(&keys.vote_mgr, "export-votes", svc.clock.now());
    probe(vote, OutgoingRequest::get("/admin/export-votes").with_header(ADMIN_HEADER, &early.to_header())).await;
    probe(vote, OutgoingRequest::get("/admin/export-votes").with_header(ADMIN_HEADER, &wrong.to_header())).await;

    // Before the opening time.
    svc.clock.advance(Duration::minutes(-5));
    probe(auth, OutgoingRequest::post_json("/auth/login", &LoginRequest {
        username: creds.username.clone(),
        password: creds.password.clone(),
    }))
    .await;
    probe(vote, OutgoingRequest::get("/vote/form")).await;
    svc.clock.advance(Duration::minutes(5));
    Ok(())
}

/// Export attempts reach the audit log, so these run before the seal.
async fn probe_auth_admin(svc: &Services, keys: &KeyRing) {
    let early = AdminCredential::issue(&keys.auth_mgr, "export", svc.clock.now());
    let wrong = AdminCredential::issue(&keys.vote_mgr, "export", svc.clock.now());
    for cred in [early, wrong] {
        probe(
            svc.auth_http.addr,
            OutgoingRequest::get("/admin/export").with_header(ADMIN_HEADER, &cred.to_header()),
        )
        .await;
    }
}

async fn probe_after_close(svc: &Services, voter: &Voter) {
    if let Ok(creds) = voter.store().credentials() {
        probe(svc.auth_http.addr, OutgoingRequest::post_json("/auth/login", &LoginRequest {
            username: creds.username,
            password: creds.password,
        }))
        .await;
    }
    probe(svc.vote_http.addr, OutgoingRequest::get("/vote/form")).await;
}

/// The fixed battery with the outcome each run has to produce.
pub fn attack_battery(voters: usize) -> Vec<Scenario> {
    let base = |name: &str, adversaries: Vec<Adversary>, expected: Outcome| Scenario {
        name: name.to_owned(),
        adversaries,
        expected: Some(expected),
        seed: 7,
        ..Scenario::honest(name, voters)
    };
    let mut honest = base("honest", vec![], Outcome::Clean);
    honest.probe_errors = true;
    let mut ghost = base("auth-sysmgr-ghost-vote", vec![Adversary::AuthSysmgrGhostVote], Outcome::Detected);
    ghost.voters += 1;
    ghost.abstain = 1;
    let mut code_reuse = base("vote-sysmgr-code-reuse", vec![Adversary::VoteSysmgrCodeReuse], Outcome::Prevented);
    // Identical votes give the cheater its best chance at a replay.
    code_reuse.votes = vec![vec![0, 0]; voters];
    code_reuse.sequential = true;
    let mut anon_log = base("anon-sysmgr-log", vec![Adversary::AnonSysmgrLog], Outcome::Clean);
    anon_log.anonymizer = AnonMode::Nat;
    anon_log.sequential = true;
    let mut blind = base("collude-auth-vote-blind", vec![Adversary::ColludeAuthVote], Outcome::Clean);
    blind.mode = Mode::Blind;
    blind.pin = false;
    let mut anon_vote = base("collude-anon-vote", vec![Adversary::ColludeAnonVote], Outcome::PrivacyBroken);
    anon_vote.anonymizer = AnonMode::Nat;
    anon_vote.sequential = true;
    vec![
        honest,
        base("voter-double-cast", vec![Adversary::VoterDoubleCast], Outcome::Prevented),
        base("auth-sysmgr-double-issue", vec![Adversary::AuthSysmgrDoubleIssue], Outcome::Detected),
        ghost,
        base("vote-sysmgr-fabricate", vec![Adversary::VoteSysmgrFabricate], Outcome::Detected),
        base("vote-sysmgr-modify", vec![Adversary::VoteSysmgrModify], Outcome::Detected),
        code_reuse,
        anon_log,
        base("collude-auth-vote-plain", vec![Adversary::ColludeAuthVote], Outcome::PrivacyBroken),
        blind,
        anon_vote,
        base("mitm-network", vec![Adversary::MitmNetwork], Outcome::Detected),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteResult {
    pub reports: Vec<DetectionReport>,
    /// Error kinds never returned by any run.
    pub uncovered_errors: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(DetectionReport::passed) && self.uncovered_errors.is_empty()
    }
}

/// Runs the attack battery with one shared key ring.
pub async fn run_attack_suite(keys: &KeyRing, voters: usize, workdir: &Path) -> Result<(SuiteResult, Vec<BallotRun>), SimError> {
    let mut runs = Vec::new();
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for scenario in attack_battery(voters) {
        let dir = workdir.join(&scenario.name);
        let run = run_ballot(&scenario, keys, &dir).await?;
        for (service, kinds) in &run.errors {
            seen.entry(service.clone()).or_default().extend(kinds.keys().cloned());
        }
        runs.push(run);
    }
    let mut uncovered = Vec::new();
    for (service, kinds) in [("auth", AUTH_ERROR_KINDS), ("vote", VOTE_ERROR_KINDS)] {
        for k in kinds {
            if !seen.get(service).is_some_and(|s| s.contains(*k)) {
                uncovered.push(format!("{service}:{k}"));
            }
        }
    }
    Ok((
        SuiteResult {
            reports: runs.iter().map(|r| r.report.clone()).collect(),
            uncovered_errors: uncovered,
        },
        runs,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivacyScan {
    pub findings: Vec<String>,
}

impl PrivacyScan {
    pub fn clean(&self) -> bool {
        self.findings.is_empty()
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(entries) = std::fs::read_dir(dir) else { return out };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            if p.file_name().and_then(|n| n.to_str()) != Some(adversary::CHEAT_DIR) {
                out.extend(files_under(&p));
            }
        } else {
            out.push(p);
        }
    }
    out
}

/// Searches the VoteSrv state for identities, the AuthSrv state for raw
/// tokens, and the publication for either. Cheat logs are not scanned.
pub fn privacy_scan(run: &BallotRun, roster: &[crate::voter::VoterCredentials]) -> PrivacyScan {
    let mut scan = PrivacyScan::default();
    let mut look = |dir: &Path, what: &str, needles: &[Vec<u8>]| {
        for path in files_under(dir) {
            let mut hay = std::fs::read(&path).unwrap_or_default();
            hay.extend_from_slice(path.to_string_lossy().as_bytes());
            for n in needles {
                if !n.is_empty() && hay.windows(n.len()).any(|w| w == n.as_slice()) {
                    scan.findings.push(format!("{what} found in {}", path.display()));
                }
            }
        }
    };
    let names: Vec<Vec<u8>> = roster.iter().map(|v| v.username.clone().into_bytes()).collect();
    let tokens: Vec<Vec<u8>> = roster
        .iter()
        .flat_map(|v| [v.vote_token.encode().into_bytes(), v.vote_token.as_bytes().to_vec()])
        .collect();
    let addresses: Vec<Vec<u8>> = (0..roster.len())
        .filter_map(voter_ip)
        .map(|ip| ip.to_string().into_bytes())
        .chain(std::iter::once(b"127.0.0.1".to_vec()))
        .collect();
    let vote_dir = run.vote_state_dir();
    look(&vote_dir, "username", &names);
    look(&vote_dir, "raw token", &tokens);
    look(&vote_dir, "client address", &addresses);
    look(&run.auth_state_dir(), "raw token", &tokens);
    look(&run.publication_dir(), "username", &names);
    look(&run.publication_dir(), "raw token", &tokens);
    scan
}

/// Reads the roster written at provisioning.
pub fn load_roster(run: &BallotRun) -> Vec<crate::voter::VoterCredentials> {
    let dir = run.workdir.join("provision").join("voters");
    let mut out: Vec<crate::voter::VoterCredentials> = files_under(&dir)
        .iter()
        .filter_map(|p| tally::read_json(p).ok())
        .collect();
    out.sort_by(|a, b| a.username.cmp(&b.username));
    out
}
