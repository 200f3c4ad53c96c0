use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use webballot::adversary::AdversaryPermit;
use webballot::anonymizer::{Anonymizer, MixConfig};
use webballot::auth_server::{self, AdminRequest, AuthBundle, AuthExport, AuthServerFileConfig, AuthService};
use webballot::clock::BallotClock;
use webballot::crypto::Digest;
use webballot::net::{serve, AdminCredential, HttpClient, OutgoingRequest, ADMIN_HEADER};
use webballot::protocol::publication::{parse_codes, parse_unused_tokens, Publication, CODES_FILE};
use webballot::protocol::{BallotSpec, Mode, Vote};
use webballot::records::Archive;
use webballot::sim::{self, Scenario};
use webballot::tally::{self, KeyRing, ReconcileInputs, ReconciliationReport};
use webballot::vote_server::{self, VoteServerFileConfig, VoteService};
use webballot::voter::{ClientConfig, Complaint, Voter, VoterCredentials, VoterError};

#[derive(Parser)]
#[command(name = "ballot-sim", about = "Web ballot services, voter client, tally tools and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and print its detection report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        key_bits: usize,
    },
    /// Run the whole attack battery.
    Suite {
        #[arg(long, default_value_t = 8)]
        voters: usize,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        key_bits: usize,
    },
    /// Serve the authentication server.
    AuthServer {
        #[arg(long)]
        config: PathBuf,
        /// auth-bundle.json to install into an empty state dir first.
        #[arg(long)]
        install: Option<PathBuf>,
    },
    /// Serve the vote server.
    VoteServer {
        #[arg(long)]
        config: PathBuf,
        /// ballot.json to install into an empty state dir first.
        #[arg(long)]
        install: Option<PathBuf>,
    },
    /// Serve the anonymizer in front of a vote server.
    Anonymizer {
        #[arg(long)]
        config: PathBuf,
    },
    /// Manager requests to a running server.
    Admin {
        #[command(subcommand)]
        action: AdminAction,
    },
    /// Voter client actions.
    Voter {
        #[command(subcommand)]
        action: VoterAction,
    },
    /// Offline manager tools: keys, reconciliation, publication and counting.
    Tally {
        #[command(subcommand)]
        action: TallyAction,
    },
}

#[derive(Subcommand)]
enum AdminAction {
    /// Seal the AuthSrv once voting is open.
    Seal {
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        key: PathBuf,
    },
    /// Unseal the AuthSrv and print the audit anchor hash.
    Unseal {
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        key: PathBuf,
    },
    /// AuthMgr: token usage, issued authorizations and the audit log.
    ExportAuth {
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AuthMgr: used-authorization records from the VoteSrv.
    ExportAuthz {
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// VoteMgr: the sealed votes.
    ExportVotes {
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct VoterArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum VoterAction {
    /// Log in, redeem the vote token and print the PIN.
    LoginRedeem {
        #[command(flatten)]
        args: VoterArgs,
        /// Credential file to import into the store first.
        #[arg(long)]
        credentials: Option<PathBuf>,
    },
    /// Cast a vote through the anonymizer and store the receipt.
    Cast {
        #[command(flatten)]
        args: VoterArgs,
        /// Answers as `q1=Yes,q2=0` (choice label or index).
        #[arg(long)]
        vote: String,
        #[arg(long)]
        pin: Option<String>,
    },
    /// Check the stored receipt signature and code.
    VerifyReceipt {
        #[command(flatten)]
        args: VoterArgs,
    },
    /// Look for the stored code and vote in a publication.
    CheckPublication {
        #[command(flatten)]
        args: VoterArgs,
        #[arg(long)]
        publication: PathBuf,
    },
}

#[derive(Subcommand)]
enum TallyAction {
    /// Generate key pairs for both servers, managers and system managers.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        bits: usize,
    },
    /// Create the voter roster, tokens and AuthSrv bundle.
    Provision {
        #[arg(long)]
        voters: usize,
        #[arg(long)]
        ballot: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-check AuthSrv and VoteSrv records.
    Reconcile {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        mode: Mode,
        /// Directory written by `admin export-auth`.
        #[arg(long)]
        auth_export: PathBuf,
        /// Directory written by `admin export-authz`.
        #[arg(long)]
        used_authz: PathBuf,
        /// Publication directory holding the VerificationCodes.
        #[arg(long)]
        publication: PathBuf,
        /// Audit entry hash taken at unseal.
        #[arg(long)]
        anchor: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Publish token digests after a reconciliation report.
    PublishTokens {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override")]
        justification: Option<String>,
    },
    /// Open the sealed votes and publish their VerificationCodes.
    PublishCodes {
        #[arg(long)]
        votes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workdir: PathBuf,
    },
    /// Count the votes once the complaint window has closed.
    Count {
        #[arg(long)]
        votes: PathBuf,
        #[arg(long)]
        ballot: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        complaint_window_closed: bool,
    },
    /// Judge a voter complaint against the publication.
    Complaint {
        #[arg(long)]
        complaint: PathBuf,
        #[arg(long)]
        publication: PathBuf,
        #[arg(long)]
        keys: PathBuf,
    },
}

type Failure = (u8, String);

fn fail<E: std::fmt::Display>(e: E) -> Failure {
    (1, e.to_string())
}

fn voter_fail(e: VoterError) -> Failure {
    (e.exit_code() as u8, e.to_string())
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    tally::read_json(path).map_err(fail)
}

fn workdir(given: Option<PathBuf>) -> Result<(PathBuf, Option<tempfile::TempDir>), Failure> {
    match given {
        Some(p) => Ok((p, None)),
        None => {
            let t = tempfile::tempdir().map_err(fail)?;
            Ok((t.path().to_owned(), Some(t)))
        }
    }
}

async fn until_ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse().command).await {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

async fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { scenario, workdir: dir, key_bits } => {
            let scenario: Scenario = read_json(&scenario)?;
            let keys = KeyRing::generate(key_bits).map_err(fail)?;
            let (dir, _keep) = workdir(dir)?;
            let run = sim::run_ballot(&scenario, &keys, &dir).await.map_err(fail)?;
            print_json(&run.report);
            if !run.report.passed() {
                return Err((1, format!("expected {:?}, observed {:?}", run.report.expected, run.report.observed)));
            }
        }
        Command::Suite { voters, workdir: dir, key_bits } => {
            let keys = KeyRing::generate(key_bits).map_err(fail)?;
            let (dir, _keep) = workdir(dir)?;
            let (suite, _) = sim::run_attack_suite(&keys, voters, &dir).await.map_err(fail)?;
            for r in &suite.reports {
                println!(
                    "{} {:<28} expected {:<15} observed {:<15} {}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.scenario,
                    r.expected.map(|o| format!("{o:?}")).unwrap_or_default(),
                    format!("{:?}", r.observed),
                    r.evidence.first().or(r.prevented.first()).map(String::as_str).unwrap_or("")
                );
            }
            if !suite.uncovered_errors.is_empty() {
                println!("uncovered error kinds: {}", suite.uncovered_errors.join(", "));
            }
            if !suite.passed() {
                return Err((1, "attack suite failed".into()));
            }
        }
        Command::AuthServer { config, install } => {
            let mut config: AuthServerFileConfig = read_json(&config)?;
            if let Some(bundle) = install {
                let bundle: AuthBundle = read_json(&bundle)?;
                AuthService::install(&config.state_dir, &bundle).map_err(fail)?;
            }
            config.service.permit = AdversaryPermit::from_env();
            let keys = config.load_keys().map_err(fail)?;
            let svc = AuthService::open(&config.state_dir, config.service.clone(), keys, BallotClock::new())
                .map_err(fail)?;
            let handle = serve(auth_server::router(Arc::new(svc)), config.listen).await.map_err(fail)?;
            println!("auth server listening on {}", handle.addr);
            until_ctrl_c().await;
            handle.shutdown().await;
        }
        Command::VoteServer { config, install } => {
            let mut config: VoteServerFileConfig = read_json(&config)?;
            if let Some(ballot) = install {
                let ballot: BallotSpec = read_json(&ballot)?;
                VoteService::install(&config.state_dir, &ballot).map_err(fail)?;
            }
            config.service.permit = AdversaryPermit::from_env();
            let keys = config.load_keys().map_err(fail)?;
            let svc = VoteService::open(&config.state_dir, config.service.clone(), keys, BallotClock::new())
                .map_err(fail)?;
            let handle = serve(vote_server::router(Arc::new(svc)), config.listen).await.map_err(fail)?;
            println!("vote server listening on {}", handle.addr);
            until_ctrl_c().await;
            handle.shutdown().await;
        }
        Command::Anonymizer { config } => {
            let mut config: MixConfig = read_json(&config)?;
            config.permit = AdversaryPermit::from_env();
            let anon = Anonymizer::start(config, BallotClock::new()).await.map_err(fail)?;
            println!("anonymizer listening on {}", anon.addr());
            until_ctrl_c().await;
            anon.shutdown().await;
        }
        Command::Admin { action } => admin(action).await?,
        Command::Voter { action } => voter(action).await?,
        Command::Tally { action } => tally_cmd(action)?,
    }
    Ok(())
}

fn manager_key(path: &Path) -> Result<webballot::crypto::KeyPair, Failure> {
    tally::load_keypair(path, "manager").map_err(fail)
}

async fn admin_get<T: serde::de::DeserializeOwned>(
    server: SocketAddr,
    path: &str,
    key: &Path,
    action: &str,
) -> Result<T, Failure> {
    let cred = AdminCredential::issue(&manager_key(key)?, action, webballot::protocol::Timestamp::now());
    HttpClient::new()
        .send(server, OutgoingRequest::get(path).with_header(ADMIN_HEADER, &cred.to_header()))
        .await
        .map_err(fail)?
        .json()
        .map_err(fail)
}

async fn admin(action: AdminAction) -> Result<(), Failure> {
    match action {
        AdminAction::Seal { server, key } => seal_request(server, &key, "seal").await,
        AdminAction::Unseal { server, key } => seal_request(server, &key, "unseal").await,
        AdminAction::ExportAuth { server, key, out } => {
            let export: AuthExport = admin_get(server, "/admin/export", &key, "export").await?;
            export.usage.write_to_dir(&out.join("usage")).map_err(fail)?;
            export.issued.write_to_dir(&out.join("issued")).map_err(fail)?;
            fs::write(out.join("audit.log"), &export.audit_log).map_err(fail)?;
            println!("{} usage records, {} issued authorizations", export.usage.len(), export.issued.len());
            Ok(())
        }
        AdminAction::ExportAuthz { server, key, out } => {
            let archive: Archive = admin_get(server, "/admin/export-authz", &key, "export-authz").await?;
            archive.write_to_dir(&out).map_err(fail)?;
            println!("{} used authorizations", archive.len());
            Ok(())
        }
        AdminAction::ExportVotes { server, key, out } => {
            let archive: Archive = admin_get(server, "/admin/export-votes", &key, "export-votes").await?;
            archive.write_to_dir(&out).map_err(fail)?;
            println!("{} votes", archive.len());
            Ok(())
        }
    }
}

async fn seal_request(server: SocketAddr, key: &Path, action: &str) -> Result<(), Failure> {
    let credential = AdminCredential::issue(&manager_key(key)?, action, webballot::protocol::Timestamp::now());
    let entry: webballot::audit::AuditEntry = HttpClient::new()
        .send(server, OutgoingRequest::post_json(&format!("/admin/{action}"), &AdminRequest { credential }))
        .await
        .map_err(fail)?
        .json()
        .map_err(fail)?;
    // The hash is the anchor for the later seal audit.
    println!("{}", entry.hash);
    Ok(())
}

async fn voter(action: VoterAction) -> Result<(), Failure> {
    let load = |args: &VoterArgs| -> Result<Voter, Failure> {
        let mut config: ClientConfig = read_json(&args.config)?;
        if let Some(mode) = args.mode {
            config.mode = mode;
        }
        Voter::new(config, BallotClock::new()).map_err(voter_fail)
    };
    match action {
        VoterAction::LoginRedeem { args, credentials } => {
            let voter = load(&args)?;
            if let Some(path) = credentials {
                let creds: VoterCredentials = read_json(&path)?;
                voter.store().save_credentials(&creds).map_err(voter_fail)?;
            }
            match voter.redeem().await.map_err(voter_fail)? {
                Some(pin) => println!("authorization stored; PIN {}", pin.as_str()),
                None => println!("authorization stored"),
            }
        }
        VoterAction::Cast { args, vote, pin } => {
            let voter = load(&args)?;
            let form = voter.fetch_form().await.map_err(voter_fail)?;
            let vote = parse_vote(&vote, &form)?;
            let receipt = voter.cast(&vote, pin.as_deref()).await.map_err(voter_fail)?;
            println!("verification code {}", receipt.verification_code);
            println!("timestamp {}", receipt.timestamp);
        }
        VoterAction::VerifyReceipt { args } => {
            let voter = load(&args)?;
            let check = voter.verify_stored_receipt().map_err(voter_fail)?;
            println!("{check:?}");
            if !check.is_valid() {
                return Err((3, "receipt does not match the stored vote".into()));
            }
        }
        VoterAction::CheckPublication { args, publication } => {
            let voter = load(&args)?;
            let publication = Publication::load(&publication).map_err(fail)?;
            let report = voter.check_publication(&publication).map_err(voter_fail)?;
            print_json(&report);
            if !report.all_green() {
                return Err((3, "publication check failed".into()));
            }
        }
    }
    Ok(())
}

fn parse_vote(text: &str, form: &BallotSpec) -> Result<Vote, Failure> {
    let mut answers = Vec::new();
    for part in text.split(',').filter(|p| !p.is_empty()) {
        let (qid, choice) = part
            .split_once('=')
            .ok_or_else(|| (2, format!("expected question=choice, got {part}")))?;
        let question = form
            .question(qid.trim())
            .ok_or_else(|| (2, format!("no question {qid}")))?;
        let choice = choice.trim();
        let index = choice
            .parse()
            .ok()
            .or_else(|| question.choices.iter().position(|c| c == choice))
            .ok_or_else(|| (2, format!("no choice {choice} for {qid}")))?;
        answers.push((question.id.as_str(), index));
    }
    Ok(Vote::new(&form.ballot_id, &answers))
}

fn tally_cmd(action: TallyAction) -> Result<(), Failure> {
    match action {
        TallyAction::Keygen { out, bits } => {
            let keys = KeyRing::generate(bits).map_err(fail)?;
            keys.write_dir(&out).map_err(fail)?;
            print_json(&keys.key_ids());
        }
        TallyAction::Provision { voters, ballot, keys, out } => {
            let ballot: BallotSpec = read_json(&ballot)?;
            let keys = KeyRing::load_dir(&keys).map_err(fail)?;
            let manifest = tally::provision(voters, &ballot, &keys);
            manifest.write_dir(&out).map_err(fail)?;
            println!("provisioned {voters} voters into {}", out.display());
        }
        TallyAction::Reconcile { keys, mode, auth_export, used_authz, publication, anchor, out } => {
            let keys = KeyRing::load_dir(&keys).map_err(fail)?;
            let usage = Archive::read_dir(&auth_export.join("usage")).map_err(fail)?;
            let issued = Archive::read_dir(&auth_export.join("issued")).map_err(fail)?;
            let used = Archive::read_dir(&used_authz).map_err(fail)?;
            let codes = parse_codes(&fs::read_to_string(publication.join(CODES_FILE)).map_err(fail)?).map_err(fail)?;
            let report = tally::authmgr_reconcile(
                &ReconcileInputs {
                    mode,
                    usage: &usage,
                    issued: &issued,
                    used_authorizations: &used,
                    votes: codes.len(),
                },
                &keys.auth_mgr,
                keys.auth_srv.public(),
                keys.vote_srv.public(),
            )
            .map_err(fail)?;
            tally::write_json(&out, &report).map_err(fail)?;
            print_json(&report);
            let mut clean = report.consistent;
            if let Some(anchor) = anchor {
                let anchor = Digest::from_hex(&anchor).map_err(fail)?;
                let log = fs::read_to_string(auth_export.join("audit.log")).map_err(fail)?;
                let audit = tally::audit_seal(&log, &anchor);
                print_json(&audit);
                clean &= audit.clean();
            }
            if !clean {
                return Err((1, "reconciliation found anomalies".into()));
            }
        }
        TallyAction::PublishTokens { report, tokens, out, justification } => {
            let report: ReconciliationReport = read_json(&report)?;
            let tokens = parse_unused_tokens(&fs::read_to_string(&tokens).map_err(fail)?).map_err(fail)?;
            tally::authmgr_publish(&report, &tokens, &out, justification.as_deref()).map_err(fail)?;
            println!("published {} used tokens", report.used_tokens);
        }
        TallyAction::PublishCodes { votes, out, workdir } => {
            let archive = Archive::read_dir(&votes).map_err(fail)?;
            let codes = tally::votemgr_publish_codes(&archive, &out, &workdir).map_err(fail)?;
            println!("published {} verification codes", codes.len());
        }
        TallyAction::Count { votes, ballot, keys, workdir, out, complaint_window_closed } => {
            let archive = Archive::read_dir(&votes).map_err(fail)?;
            let ballot: BallotSpec = read_json(&ballot)?;
            let keys = KeyRing::load_dir(&keys).map_err(fail)?;
            let result = tally::votemgr_count(
                &archive,
                &ballot,
                &keys.vote_mgr,
                keys.vote_srv.public(),
                complaint_window_closed,
                &workdir,
                &out,
            )
            .map_err(fail)?;
            print_json(&result);
        }
        TallyAction::Complaint { complaint, publication, keys } => {
            let complaint: Complaint = read_json(&complaint)?;
            let codes = parse_codes(&fs::read_to_string(publication.join(CODES_FILE)).map_err(fail)?).map_err(fail)?;
            let keys = KeyRing::load_dir(&keys).map_err(fail)?;
            print_json(&tally::handle_complaint(&complaint, &codes, keys.vote_srv.public()));
        }
    }
    Ok(())
}
