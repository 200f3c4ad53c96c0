//! Offline manager tools: provisioning, the AuthMgr reconciliation and token
//! publication, and the VoteMgr code publication, counting and complaints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{self, AuditEntry};
use crate::auth_server::{AuthBundle, PasswordVerifier};
use crate::crypto::{self, digest, open, CryptoError, Digest, KeyPair, PublicKey};
use crate::protocol::publication::{
    render_codes, render_unused_tokens, render_used_tokens, render_votes, PublishedVote, UsedTokenEntry, CODES_FILE,
    UNUSED_TOKENS_FILE, USED_TOKENS_FILE, VOTES_FILE,
};
use crate::protocol::{
    compute_verification_code, to_canonical_json, BallotSpec, Mode, StoredVote, VoteToken,
};
use crate::records::{Archive, IssuedAuthorizationRecord, RecordFile, TokenUsageRecord, UsedAuthorizationRecord};
use crate::voter::{Complaint, VoterCredentials};

pub const TALLY_FILE: &str = "tally.json";
pub const OVERRIDE_FILE: &str = "reconciliation-override.txt";
const CODES_MARKER: &str = "codes-published.json";

#[derive(Debug, Error)]
pub enum TallyError {
    #[error("record {file} cannot be decrypted with this manager's key")]
    Undecryptable { file: String },
    #[error("reconciliation is inconsistent; publishing needs an override justification")]
    Inconsistent,
    #[error("verification codes must be published before counting")]
    CodesNotPublished,
    #[error("the complaint window is still open")]
    ComplaintWindowOpen,
    #[error("archive file {0:?} is not named by a digest")]
    MalformedFilename(String),
    #[error("{0}: {1}")]
    Io(PathBuf, String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> TallyError + '_ {
    move |e| TallyError::Io(path.to_owned(), e.to_string())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), TallyError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, bytes).map_err(io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, TallyError> {
    let bytes = fs::read(path).map_err(io(path))?;
    serde_json::from_slice(&bytes).map_err(|e| TallyError::Io(path.to_owned(), e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TallyError> {
    write(path, to_canonical_json(value))
}

/// The six role keys.
#[derive(Clone, Debug)]
pub struct KeyRing {
    pub auth_srv: KeyPair,
    pub vote_srv: KeyPair,
    pub auth_mgr: KeyPair,
    pub vote_mgr: KeyPair,
    pub auth_sysmgr: KeyPair,
    pub vote_sysmgr: KeyPair,
}

pub const ROLES: [&str; 6] = ["auth-srv", "vote-srv", "auth-mgr", "vote-mgr", "auth-sysmgr", "vote-sysmgr"];

impl KeyRing {
    pub fn generate(bits: usize) -> Result<Self, CryptoError> {
        Ok(Self {
            auth_srv: crypto::generate_keypair(ROLES[0], bits)?,
            vote_srv: crypto::generate_keypair(ROLES[1], bits)?,
            auth_mgr: crypto::generate_keypair(ROLES[2], bits)?,
            vote_mgr: crypto::generate_keypair(ROLES[3], bits)?,
            auth_sysmgr: crypto::generate_keypair(ROLES[4], bits)?,
            vote_sysmgr: crypto::generate_keypair(ROLES[5], bits)?,
        })
    }

    pub fn all(&self) -> [&KeyPair; 6] {
        [
            &self.auth_srv,
            &self.vote_srv,
            &self.auth_mgr,
            &self.vote_mgr,
            &self.auth_sysmgr,
            &self.vote_sysmgr,
        ]
    }

    pub fn key_ids(&self) -> BTreeMap<String, String> {
        self.all()
            .iter()
            .map(|k| (k.role().to_owned(), k.key_id().to_owned()))
            .collect()
    }

    pub fn private_path(dir: &Path, role: &str) -> PathBuf {
        dir.join(format!("{role}.key.pem"))
    }

    pub fn public_path(dir: &Path, role: &str) -> PathBuf {
        dir.join(format!("{role}.pub.pem"))
    }

    /// Writes `<role>.key.pem` and `<role>.pub.pem` for every role.
    pub fn write_dir(&self, dir: &Path) -> Result<(), TallyError> {
        for k in self.all() {
            write(&Self::private_path(dir, k.role()), k.to_pem())?;
            write(&Self::public_path(dir, k.role()), k.public().to_pem())?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, TallyError> {
        let load = |role: &str| -> Result<KeyPair, TallyError> {
            let path = Self::private_path(dir, role);
            let pem = fs::read_to_string(&path).map_err(io(&path))?;
            Ok(KeyPair::from_pem(role, &pem)?)
        };
        Ok(Self {
            auth_srv: load(ROLES[0])?,
            vote_srv: load(ROLES[1])?,
            auth_mgr: load(ROLES[2])?,
            vote_mgr: load(ROLES[3])?,
            auth_sysmgr: load(ROLES[4])?,
            vote_sysmgr: load(ROLES[5])?,
        })
    }
}

pub fn load_public_key(path: &Path) -> Result<PublicKey, TallyError> {
    let pem = fs::read_to_string(path).map_err(io(path))?;
    Ok(PublicKey::from_pem(&pem)?)
}

pub fn load_keypair(path: &Path, role: &str) -> Result<KeyPair, TallyError> {
    let pem = fs::read_to_string(path).map_err(io(path))?;
    Ok(KeyPair::from_pem(role, &pem)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProvisionManifest {
    pub ballot_id: String,
    pub ballot: BallotSpec,
    pub roster: Vec<VoterCredentials>,
    pub auth_bundle: AuthBundle,
    pub key_ids: BTreeMap<String, String>,
}

impl ProvisionManifest {
    pub fn token_digests(&self) -> Vec<Digest> {
        self.auth_bundle.token_digests.clone()
    }

    /// Lays out everything the managers hand to the other parties:
    ///
    /// ```text
    /// auth-bundle.json      for the AuthSysMgr (verifiers and token digests)
    /// ballot.json           for the VoteSysMgr and the voters
    /// token-digests.txt     kept by the AuthMgr for publication
    /// key-ids.json
    /// voters/<username>.json  one credential file per voter
    /// ```
    pub fn write_dir(&self, dir: &Path) -> Result<(), TallyError> {
        write_json(&dir.join("auth-bundle.json"), &self.auth_bundle)?;
        write_json(&dir.join("ballot.json"), &self.ballot)?;
        write(&dir.join("token-digests.txt"), render_unused_tokens(&self.token_digests()))?;
        write_json(&dir.join("key-ids.json"), &self.key_ids)?;
        for v in &self.roster {
            write_json(&dir.join("voters").join(format!("{}.json", v.username)), v)?;
        }
        Ok(())
    }
}

fn random_password() -> String {
    data_encoding::BASE32_NOPAD
        .encode(&crypto::random_array::<10>())
        .to_lowercase()
}

/// Generates N voters with distinct 128-bit tokens. The AuthSrv bundle holds
/// only password verifiers and token digests.
pub fn provision(roster_size: usize, ballot: &BallotSpec, keys: &KeyRing) -> ProvisionManifest {
    let mut seen = BTreeSet::new();
    let mut roster = Vec::with_capacity(roster_size);
    while roster.len() < roster_size {
        let token = VoteToken::random();
        if !seen.insert(token.digest()) {
            continue;
        }
        roster.push(VoterCredentials {
            username: format!("voter{:03}", roster.len() + 1),
            password: random_password(),
            vote_token: token,
        });
    }
    let auth_bundle = AuthBundle {
        ballot: ballot.clone(),
        credentials: roster
            .iter()
            .map(|v| (v.username.clone(), PasswordVerifier::new(&v.password)))
            .collect(),
        token_digests: roster.iter().map(|v| v.vote_token.digest()).collect(),
    };
    ProvisionManifest {
        ballot_id: ballot.ballot_id.clone(),
        ballot: ballot.clone(),
        roster,
        auth_bundle,
        key_ids: keys.key_ids(),
    }
}

/// Opens one record; a decryption failure is fatal, a bad signature or body
/// becomes an anomaly.
fn open_record<T: DeserializeOwned>(
    file: &RecordFile,
    recipient: &KeyPair,
    signer: &PublicKey,
    label: &str,
    anomalies: &mut Vec<String>,
) -> Result<Option<T>, TallyError> {
    match open(&file.body, recipient, signer) {
        Ok(payload) => match serde_json::from_slice(&payload) {
            Ok(v) => Ok(Some(v)),
            Err(e) => {
                anomalies.push(format!("{label} {}: unreadable body: {e}", file.name));
                Ok(None)
            }
        },
        Err(CryptoError::SignatureInvalid) => {
            anomalies.push(format!("{label} {}: signature invalid", file.name));
            Ok(None)
        }
        Err(_) => Err(TallyError::Undecryptable {
            file: format!("{label}/{}", file.name),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconciliationReport {
    pub mode: Mode,
    pub used_tokens: usize,
    /// Absent in blind mode, where the AuthSrv never sees authorizations.
    pub issued_authorizations: Option<usize>,
    pub used_authorizations: usize,
    pub votes: usize,
    pub counts_consistent: bool,
    pub sets_consistent: bool,
    pub consistent: bool,
    pub anomalies: Vec<String>,
    /// What gets published: token digest and time of use.
    pub token_usage: Vec<UsedTokenEntry>,
    /// Who authenticated. Kept by the AuthMgr, never published.
    pub participants: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ReconcileInputs<'a> {
    pub mode: Mode,
    pub usage: &'a Archive,
    pub issued: &'a Archive,
    pub used_authorizations: &'a Archive,
    /// Number of published VerificationCodes.
    pub votes: usize,
}

/// The AuthMgr's cross-check of used tokens, issued and used authorizations,
/// and votes.
pub fn authmgr_reconcile(
    inputs: &ReconcileInputs<'_>,
    auth_mgr: &KeyPair,
    auth_srv: &PublicKey,
    vote_srv: &PublicKey,
) -> Result<ReconciliationReport, TallyError> {
    let mut anomalies = Vec::new();

    let mut token_usage = Vec::new();
    let mut participants = Vec::new();
    for f in &inputs.usage.files {
        if let Some(r) = open_record::<TokenUsageRecord>(f, auth_mgr, auth_srv, "tokens", &mut anomalies)? {
            if f.digest().ok() != Some(r.token_digest) {
                anomalies.push(format!("tokens {}: filename does not match record", f.name));
                continue;
            }
            token_usage.push(UsedTokenEntry {
                token_digest: r.token_digest,
                used_at: r.used_at,
            });
            participants.push(r.username);
        }
    }
    participants.sort();
    let mut dup_users: Vec<&String> = participants.windows(2).filter(|w| w[0] == w[1]).map(|w| &w[0]).collect();
    dup_users.dedup();
    for u in dup_users {
        anomalies.push(format!("username {u} redeemed more than one token"));
    }

    let mut issued = BTreeSet::new();
    if inputs.mode == Mode::Plain {
        for f in &inputs.issued.files {
            if let Some(r) =
                open_record::<IssuedAuthorizationRecord>(f, auth_mgr, auth_srv, "issued", &mut anomalies)?
            {
                if f.digest().ok() != Some(r.prn_digest) {
                    anomalies.push(format!("issued {}: filename does not match record", f.name));
                    continue;
                }
                issued.insert(r.prn_digest);
            }
        }
    } else if !inputs.issued.is_empty() {
        anomalies.push(format!(
            "{} issued-authorization records exist in blind mode",
            inputs.issued.len()
        ));
    }

    let mut used = BTreeSet::new();
    for f in &inputs.used_authorizations.files {
        if let Some(r) =
            open_record::<UsedAuthorizationRecord>(f, auth_mgr, vote_srv, "used-authz", &mut anomalies)?
        {
            if f.digest().ok() != Some(r.prn_digest) {
                anomalies.push(format!("used-authz {}: filename does not match record", f.name));
                continue;
            }
            used.insert(r.prn_digest);
        }
    }

    let used_tokens = token_usage.len();
    let (issued_count, counts_consistent, sets_consistent) = match inputs.mode {
        Mode::Plain => {
            let counts = used_tokens == issued.len() && issued.len() == used.len() && used.len() == inputs.votes;
            let never_issued = used.difference(&issued).count();
            let never_used = issued.difference(&used).count();
            if never_issued > 0 {
                anomalies.push(format!("{never_issued} used authorizations were never issued"));
            }
            if never_used > 0 {
                anomalies.push(format!("{never_used} issued authorizations were never used"));
            }
            (Some(issued.len()), counts, never_issued == 0 && never_used == 0)
        }
        Mode::Blind => (None, used_tokens == used.len() && used.len() == inputs.votes, true),
    };
    if !counts_consistent {
        anomalies.push(format!(
            "count mismatch: used tokens {used_tokens}, issued {}, used authorizations {}, votes {}",
            issued_count.map_or("n/a".to_owned(), |n| n.to_string()),
            used.len(),
            inputs.votes
        ));
    }
    token_usage.sort_by(|a, b| a.token_digest.cmp(&b.token_digest));
    Ok(ReconciliationReport {
        mode: inputs.mode,
        used_tokens,
        issued_authorizations: issued_count,
        used_authorizations: used.len(),
        votes: inputs.votes,
        counts_consistent,
        sets_consistent,
        consistent: anomalies.is_empty(),
        anomalies,
        token_usage,
        participants,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealAudit {
    pub chain_valid: bool,
    pub anchor_found: bool,
    pub problem: Option<String>,
    pub accesses_while_sealed: Vec<AuditEntry>,
}

impl SealAudit {
    pub fn clean(&self) -> bool {
        self.chain_valid && self.anchor_found && self.accesses_while_sealed.is_empty()
    }
}

/// Checks the AuthSrv audit log. `anchor` is the hash of the unseal entry as
/// returned to the AuthMgr; if the log was cut or rewritten it is missing.
pub fn audit_seal(log_text: &str, anchor: &Digest) -> SealAudit {
    let check = audit::verify_chain(log_text, None);
    let entries = audit::parse_entries(log_text).unwrap_or_default();
    let anchor_found = check.valid && entries.iter().any(|e| &e.hash == anchor);
    SealAudit {
        chain_valid: check.valid,
        anchor_found,
        problem: check.problem,
        accesses_while_sealed: audit::accesses_while_sealed(&entries),
    }
}

/// Writes the used and unused token lists.
pub fn authmgr_publish(
    report: &ReconciliationReport,
    all_tokens: &[Digest],
    out_dir: &Path,
    override_justification: Option<&str>,
) -> Result<(), TallyError> {
    if !report.consistent {
        let Some(why) = override_justification else {
            return Err(TallyError::Inconsistent);
        };
        let mut text = format!("override: {why}\n");
        for a in &report.anomalies {
            text.push_str(&format!("anomaly: {a}\n"));
        }
        write(&out_dir.join(OVERRIDE_FILE), text)?;
    }
    let used: BTreeSet<Digest> = report.token_usage.iter().map(|u| u.token_digest).collect();
    let unused: Vec<Digest> = all_tokens.iter().filter(|d| !used.contains(d)).copied().collect();
    write(&out_dir.join(USED_TOKENS_FILE), render_used_tokens(&report.token_usage))?;
    write(&out_dir.join(UNUSED_TOKENS_FILE), render_unused_tokens(&unused))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct CodesMarker {
    codes: usize,
    archive_digest: Digest,
}

fn archive_digest(archive: &Archive) -> Digest {
    digest(&to_canonical_json(archive))
}

/// Publishes the VerificationCodes, which are the vote file names. No vote is
/// decrypted.
pub fn votemgr_publish_codes(archive: &Archive, out_dir: &Path, workdir: &Path) -> Result<Vec<Digest>, TallyError> {
    let mut codes = Vec::with_capacity(archive.len());
    for f in &archive.files {
        codes.push(f.digest().map_err(|_| TallyError::MalformedFilename(f.name.clone()))?);
    }
    write(&out_dir.join(CODES_FILE), render_codes(&codes))?;
    write_json(
        &workdir.join(CODES_MARKER),
        &CodesMarker {
            codes: codes.len(),
            archive_digest: archive_digest(archive),
        },
    )?;
    codes.sort();
    Ok(codes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedVote {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyResult {
    pub ballot_id: String,
    /// question id -> choice label -> count.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub total: usize,
    pub excluded: Vec<ExcludedVote>,
}

/// Decrypts, checks and counts the votes, then publishes each code with its
/// vote and the result. Refuses to run before the codes were published and
/// the complaint window has closed.
pub fn votemgr_count(
    archive: &Archive,
    ballot: &BallotSpec,
    vote_mgr: &KeyPair,
    vote_srv: &PublicKey,
    complaint_window_closed: bool,
    workdir: &Path,
    out_dir: &Path,
) -> Result<TallyResult, TallyError> {
    let marker = workdir.join(CODES_MARKER);
    if !marker.exists() {
        return Err(TallyError::CodesNotPublished);
    }
    if !complaint_window_closed {
        return Err(TallyError::ComplaintWindowOpen);
    }
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = ballot
        .questions
        .iter()
        .map(|q| (q.id.clone(), q.choices.iter().map(|c| (c.clone(), 0)).collect()))
        .collect();
    let mut excluded = Vec::new();
    let mut published = Vec::new();
    for f in &archive.files {
        let mut exclude = |reason: String| {
            excluded.push(ExcludedVote {
                file: f.name.clone(),
                reason,
            })
        };
        let stored: StoredVote = match open(&f.body, vote_mgr, vote_srv) {
            Ok(p) => match serde_json::from_slice(&p) {
                Ok(s) => s,
                Err(e) => {
                    exclude(format!("unreadable vote: {e}"));
                    continue;
                }
            },
            Err(CryptoError::SignatureInvalid) => {
                exclude("VoteSrv signature invalid".into());
                continue;
            }
            Err(e) => {
                exclude(format!("cannot open: {e}"));
                continue;
            }
        };
        let recomputed = compute_verification_code(&stored.vote, &stored.timestamp, &stored.random_string);
        if recomputed.as_ref().ok() != Some(&stored.verification_code) {
            exclude("verification code does not match the vote".into());
            continue;
        }
        if f.digest().ok() != Some(stored.verification_code) {
            exclude("file name does not match the verification code".into());
            continue;
        }
        if let Err(e) = ballot.canonicalize(&stored.vote.to_vote()) {
            exclude(format!("vote does not fit the ballot: {e}"));
            continue;
        }
        for (qid, choice) in stored.vote.answers() {
            let label = &ballot.question(qid).expect("validated above").choices[*choice];
            *counts.get_mut(qid).and_then(|m| m.get_mut(label)).expect("validated above") += 1;
        }
        published.push(PublishedVote {
            verification_code: stored.verification_code,
            vote: stored.vote,
        });
    }
    let result = TallyResult {
        ballot_id: ballot.ballot_id.clone(),
        counts,
        total: published.len(),
        excluded,
    };
    write(&out_dir.join(VOTES_FILE), render_votes(&published))?;
    write_json(&out_dir.join(TALLY_FILE), &result)?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum ComplaintVerdict {
    /// The VoteSrv signed this code and it is not in the list: cancel the
    /// ballot before counting.
    ValidComplaint { recommendation: String },
    Rejected { reason: String },
}

pub fn handle_complaint(complaint: &Complaint, codes: &[Digest], vote_srv: &PublicKey) -> ComplaintVerdict {
    if !crypto::verify(complaint.verification_code.as_bytes(), &complaint.signature, vote_srv) {
        return ComplaintVerdict::Rejected {
            reason: "signature does not verify under the VoteSrv key".into(),
        };
    }
    if codes.contains(&complaint.verification_code) {
        return ComplaintVerdict::Rejected {
            reason: "verification code is in the published list".into(),
        };
    }
    ComplaintVerdict::ValidComplaint {
        recommendation: "cancel the ballot before the votes are decrypted".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seal;
    use crate::crypto::test_keys::key;
    use crate::protocol::publication::Publication;
    use crate::protocol::{Prn, Question, RandomString, Timestamp, Vote};

    // key(0) AuthSrv, key(1) VoteSrv, key(2) AuthMgr, key(3) VoteMgr.
    fn ballot() -> BallotSpec {
        let now = Timestamp::now().datetime();
        BallotSpec {
            ballot_id: "b1".into(),
            questions: vec![Question {
                id: "q1".into(),
                prompt: "?".into(),
                choices: vec!["Yes".into(), "No".into()],
            }],
            open_at: Timestamp::from_datetime(now - chrono::Duration::hours(2)),
            close_at: Timestamp::from_datetime(now - chrono::Duration::hours(1)),
        }
    }

    fn rec<T: Serialize>(name: Digest, v: &T, signer: &KeyPair, to: &KeyPair) -> RecordFile {
        RecordFile {
            name: name.to_hex(),
            body: seal(&to_canonical_json(v), signer, to.public()),
        }
    }

    struct Honest {
        usage: Archive,
        issued: Archive,
        used: Archive,
    }

    fn honest(n: usize) -> Honest {
        let mut h = Honest {
            usage: Archive::default(),
            issued: Archive::default(),
            used: Archive::default(),
        };
        for i in 0..n {
            let t = VoteToken::random();
            let prn = Prn::random();
            h.usage.files.push(rec(
                t.digest(),
                &TokenUsageRecord {
                    token_digest: t.digest(),
                    used_at: Timestamp::now(),
                    username: format!("voter{i}"),
                },
                &key(0),
                &key(2),
            ));
            let issued = IssuedAuthorizationRecord {
                prn_digest: prn.digest(),
                ballot_id: "b1".into(),
            };
            h.issued.files.push(rec(prn.digest(), &issued, &key(0), &key(2)));
            let used = UsedAuthorizationRecord {
                prn_digest: prn.digest(),
                ballot_id: "b1".into(),
            };
            h.used.files.push(rec(prn.digest(), &used, &key(1), &key(2)));
        }
        h
    }

    fn reconcile(h: &Honest, votes: usize, mode: Mode) -> Result<ReconciliationReport, TallyError> {
        authmgr_reconcile(
            &ReconcileInputs {
                mode,
                usage: &h.usage,
                issued: &h.issued,
                used_authorizations: &h.used,
                votes,
            },
            &key(2),
            key(0).public(),
            key(1).public(),
        )
    }

    #[test]
    fn honest_reconciliation_is_consistent() {
        let h = honest(5);
        let r = reconcile(&h, 5, Mode::Plain).unwrap();
        assert!(r.consistent, "{:?}", r.anomalies);
        assert_eq!((r.used_tokens, r.issued_authorizations, r.used_authorizations), (5, Some(5), 5));
    }

    #[test]
    fn extra_issued_authorization_is_an_anomaly() {
        let mut h = honest(5);
        let prn = Prn::random();
        h.issued.files.push(rec(
            prn.digest(),
            &IssuedAuthorizationRecord {
                prn_digest: prn.digest(),
                ballot_id: "b1".into(),
            },
            &key(0),
            &key(2),
        ));
        let r = reconcile(&h, 5, Mode::Plain).unwrap();
        assert!(!r.consistent);
        assert!(!r.counts_consistent);
        assert!(r.anomalies.iter().any(|a| a.contains("never used")));
    }

    #[test]
    fn blind_mode_ignores_issued_comparison() {
        let mut h = honest(3);
        h.issued = Archive::default();
        assert!(reconcile(&h, 3, Mode::Blind).unwrap().consistent);
        assert!(!reconcile(&h, 4, Mode::Blind).unwrap().consistent);
    }

    #[test]
    fn record_for_the_wrong_key_is_a_hard_error() {
        let mut h = honest(2);
        let t = VoteToken::random();
        h.usage.files.push(rec(
            t.digest(),
            &TokenUsageRecord {
                token_digest: t.digest(),
                used_at: Timestamp::now(),
                username: "x".into(),
            },
            &key(0),
            &key(3),
        ));
        match reconcile(&h, 2, Mode::Plain) {
            Err(TallyError::Undecryptable { file }) => assert!(file.contains(&t.digest().to_hex())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn forged_signature_is_an_anomaly() {
        let mut h = honest(2);
        let prn = Prn::random();
        h.used.files.push(rec(
            prn.digest(),
            &UsedAuthorizationRecord {
                prn_digest: prn.digest(),
                ballot_id: "b1".into(),
            },
            &key(3),
            &key(2),
        ));
        let r = reconcile(&h, 2, Mode::Plain).unwrap();
        assert!(r.anomalies.iter().any(|a| a.contains("signature invalid")));
    }

    #[test]
    fn publish_tokens_lists_and_refuses_inconsistent() {
        let h = honest(3);
        let r = reconcile(&h, 3, Mode::Plain).unwrap();
        let mut all: Vec<Digest> = r.token_usage.iter().map(|u| u.token_digest).collect();
        all.push(VoteToken::random().digest());
        all.push(VoteToken::random().digest());
        let out = tempfile::tempdir().unwrap();
        authmgr_publish(&r, &all, out.path(), None).unwrap();
        let p = Publication::load(out.path()).unwrap();
        assert_eq!((p.used_tokens.len(), p.unused_tokens.len()), (3, 2));
        for f in [USED_TOKENS_FILE, UNUSED_TOKENS_FILE] {
            assert!(!fs::read_to_string(out.path().join(f)).unwrap().contains("voter"));
        }

        let bad = reconcile(&h, 4, Mode::Plain).unwrap();
        let out2 = tempfile::tempdir().unwrap();
        assert!(matches!(
            authmgr_publish(&bad, &all, out2.path(), None),
            Err(TallyError::Inconsistent)
        ));
        authmgr_publish(&bad, &all, out2.path(), Some("one voter lost power mid-cast")).unwrap();
        assert!(fs::read_to_string(out2.path().join(OVERRIDE_FILE))
            .unwrap()
            .contains("lost power"));
    }

    fn stored(choice: usize) -> RecordFile {
        let spec = ballot();
        let vote = spec.canonicalize(&Vote::new("b1", &[("q1", choice)])).unwrap();
        let ts = Timestamp::now().to_string();
        let rs = RandomString::random();
        let code = compute_verification_code(&vote, &ts, &rs).unwrap();
        rec(
            code,
            &StoredVote {
                vote,
                verification_code: code,
                timestamp: ts,
                random_string: rs,
            },
            &key(1),
            &key(3),
        )
    }

    #[test]
    fn count_requires_codes_then_window() {
        let archive = Archive {
            files: vec![stored(0), stored(0), stored(1)],
        };
        let work = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let spec = ballot();
        let run = |closed| votemgr_count(&archive, &spec, &key(3), key(1).public(), closed, work.path(), out.path());
        assert!(matches!(run(true), Err(TallyError::CodesNotPublished)));
        let before = to_canonical_json(&archive);
        let codes = votemgr_publish_codes(&archive, out.path(), work.path()).unwrap();
        assert_eq!(codes.len(), 3);
        assert_eq!(before, to_canonical_json(&archive));
        assert!(matches!(run(false), Err(TallyError::ComplaintWindowOpen)));
        let t = run(true).unwrap();
        assert_eq!(t.counts["q1"]["Yes"], 2);
        assert_eq!(t.counts["q1"]["No"], 1);
        assert_eq!(t.total, 3);
        let p = Publication::load(out.path()).unwrap();
        assert_eq!(p.votes.len(), 3);
    }

    #[test]
    fn tampered_votes_are_excluded_and_flagged() {
        let mut forged = stored(0);
        // Same contents, signed by a key that is not the VoteSrv.
        let good = stored(1);
        forged.body = seal(
            &open(&forged.body, &key(3), key(1).public()).unwrap(),
            &key(2),
            key(3).public(),
        );
        let mut renamed = stored(0);
        renamed.name = Digest::from_bytes([7; 32]).to_hex();
        let archive = Archive {
            files: vec![forged, good, renamed],
        };
        let work = tempfile::tempdir().unwrap();
        votemgr_publish_codes(&archive, work.path(), work.path()).unwrap();
        let t = votemgr_count(&archive, &ballot(), &key(3), key(1).public(), true, work.path(), work.path()).unwrap();
        assert_eq!(t.total, 1);
        assert_eq!(t.excluded.len(), 2);
    }

    #[test]
    fn malformed_filename_refuses_code_publication() {
        let mut f = stored(0);
        f.name = "not-a-digest".into();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            votemgr_publish_codes(&Archive { files: vec![f] }, dir.path(), dir.path()),
            Err(TallyError::MalformedFilename(_))
        ));
    }

    #[test]
    fn empty_archive_counts_zero() {
        let dir = tempfile::tempdir().unwrap();
        votemgr_publish_codes(&Archive::default(), dir.path(), dir.path()).unwrap();
        let t = votemgr_count(&Archive::default(), &ballot(), &key(3), key(1).public(), true, dir.path(), dir.path())
            .unwrap();
        assert_eq!(t.total, 0);
    }

    #[test]
    fn complaints() {
        let code = Digest::from_bytes([9; 32]);
        let genuine = Complaint {
            verification_code: code,
            signature: crypto::sign(code.as_bytes(), &key(1)),
        };
        assert!(matches!(
            handle_complaint(&genuine, &[], key(1).public()),
            ComplaintVerdict::ValidComplaint { .. }
        ));
        assert!(matches!(
            handle_complaint(&genuine, &[code], key(1).public()),
            ComplaintVerdict::Rejected { .. }
        ));
        let unsigned = Complaint {
            verification_code: code,
            signature: vec![0; 256],
        };
        assert!(matches!(
            handle_complaint(&unsigned, &[], key(1).public()),
            ComplaintVerdict::Rejected { .. }
        ));
    }

    #[test]
    fn provisioning_hands_out_only_digests() {
        let keys = KeyRing {
            auth_srv: key(0),
            vote_srv: key(1),
            auth_mgr: key(2),
            vote_mgr: key(3),
            auth_sysmgr: key(0),
            vote_sysmgr: key(1),
        };
        let m = provision(10, &ballot(), &keys);
        let digests: BTreeSet<Digest> = m.auth_bundle.token_digests.iter().copied().collect();
        assert_eq!(digests.len(), 10);
        assert!(m.roster.iter().all(|v| digests.contains(&v.vote_token.digest())));
        let bundle = to_canonical_json(&m.auth_bundle);
        for v in &m.roster {
            let enc = v.vote_token.encode();
            assert!(!bundle.windows(enc.len()).any(|w| w == enc.as_bytes()));
            assert!(!bundle.windows(v.password.len()).any(|w| w == v.password.as_bytes()));
        }
        let empty = provision(0, &ballot(), &keys);
        assert!(empty.roster.is_empty() && empty.auth_bundle.token_digests.is_empty());
    }

    #[test]
    fn seal_audit_catches_sealed_access_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = audit::AuditLog::open(dir.path().join("a.log")).unwrap();
        log.append(Timestamp::now(), "m", "seal", true, false).unwrap();
        let clean_unseal = log.append(Timestamp::now(), "m", "unseal", true, true).unwrap();
        let text = log.read().unwrap();
        assert!(audit_seal(&text, &clean_unseal.hash).clean());

        let dir = tempfile::tempdir().unwrap();
        let mut log = audit::AuditLog::open(dir.path().join("a.log")).unwrap();
        log.append(Timestamp::now(), "m", "seal", true, false).unwrap();
        log.append(Timestamp::now(), "s", "read-unused-tokens", false, true).unwrap();
        let unseal = log.append(Timestamp::now(), "m", "unseal", true, true).unwrap();
        let text = log.read().unwrap();
        let a = audit_seal(&text, &unseal.hash);
        assert!(!a.clean() && a.chain_valid && a.anchor_found);
        // Dropping the evidence breaks the chain or loses the anchor.
        let first = text.lines().next().unwrap();
        assert!(!audit_seal(&format!("{first}\n"), &unseal.hash).clean());
    }
}
