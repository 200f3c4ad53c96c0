//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::routing::post;
use axum::Router;
use num_bigint::BigUint;

use webballot::anonymizer::{Anonymizer, MixConfig};
use webballot::auth_server::{LoginRequest, LoginResponse, RedeemRequest, RedeemResponse};
use webballot::clock::BallotClock;
use webballot::crypto::{blind, blind_sign, unblind, verify_blind_signature, Digest};
use webballot::net::{serve, HttpClient, OutgoingRequest};
use webballot::protocol::{compute_verification_code, BallotSpec, Mode, Prn, Question, RandomString, Timestamp, Vote};
use webballot::sim::{self, privacy_scan, run_attack_suite, run_ballot, Check, Outcome, Scenario};
use webballot::vote_server::CastRequest;

use common::{hex, keys, reference_sha256, Services};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("honest ballot, 20 voters", Box::new(|| rt.block_on(honest_ballot()))),
        ("token and authorization unreusable under 32-way concurrency", Box::new(|| rt.block_on(unreusability()))),
        ("attack battery", Box::new(|| rt.block_on(attack_battery()))),
        ("blind-signature algebra and transcript independence", Box::new(blind_algebra)),
        ("verification code regression vector and uniqueness", Box::new(|| rt.block_on(verification_codes()))),
        ("privacy at rest", Box::new(|| rt.block_on(privacy_at_rest()))),
        ("mix permutation uniformity", Box::new(|| rt.block_on(mix_permutations()))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let v = check();
        println!(
            "{} {name} ({:.1}s): {}",
            if v.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

async fn honest_ballot() -> Verdict {
    let started = Instant::now();
    let keys = keys();
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::honest("honest-20", 20);
    let run = run_ballot(&scenario, keys, dir.path()).await.unwrap();
    let elapsed = started.elapsed();
    let green = run.voters.iter().filter(|v| v.check.as_ref().is_some_and(|c| c.all_green())).count();
    verdict(
        run.tally_matches_truth
            && run.reconciliation.consistent
            && run.voters.len() == 20
            && green == 20
            && elapsed < Duration::from_secs(60),
        format!(
            "tally matches scripted votes: {}, reconciliation consistent: {}, green checks {green}/20, {:.1}s with key generation",
            run.tally_matches_truth,
            run.reconciliation.consistent,
            elapsed.as_secs_f64()
        ),
    )
}

async fn unreusability() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let svc = Services::start(dir.path(), 1, Mode::Plain, true).await;
    let creds = svc.manifest.roster[0].clone();
    let client = HttpClient::new();

    let mut sessions = Vec::new();
    for _ in 0..32 {
        let r: LoginResponse = client
            .send(svc.auth_addr, OutgoingRequest::post_json("/auth/login", &LoginRequest {
                username: creds.username.clone(),
                password: creds.password.clone(),
            }))
            .await
            .unwrap()
            .json()
            .unwrap();
        sessions.push(r.session);
    }
    let redeems: Vec<_> = sessions
        .into_iter()
        .map(|session| {
            let token = creds.vote_token.encode();
            let addr = svc.auth_addr;
            tokio::spawn(async move {
                HttpClient::new()
                    .send(addr, OutgoingRequest::post_json("/auth/redeem", &RedeemRequest { session, vote_token: token }))
                    .await
                    .unwrap()
                    .json::<RedeemResponse>()
            })
        })
        .collect();
    let mut granted = Vec::new();
    let mut refused = BTreeMap::<String, usize>::new();
    for h in redeems {
        match h.await.unwrap() {
            Ok(r) => granted.push(r),
            Err(e) => *refused.entry(e.kind().unwrap_or("?").to_owned()).or_default() += 1,
        }
    }
    let Some(redemption) = granted.first().cloned() else {
        return verdict(false, "no redemption succeeded");
    };

    let casts: Vec<_> = (0..32)
        .map(|i| {
            let req = CastRequest {
                vote: Vote::new(&svc.ballot.ballot_id, &[("q1", i % 2), ("q2", i % 3)]),
                authorization: redemption.authorization.clone(),
                pin: redemption.pin.as_ref().map(|p| p.as_str().to_owned()),
            };
            let addr = svc.vote_addr;
            tokio::spawn(async move {
                HttpClient::new()
                    .send(addr, OutgoingRequest::post_json("/vote/cast", &req))
                    .await
                    .unwrap()
                    .json::<webballot::protocol::VoteReceipt>()
            })
        })
        .collect();
    let mut receipts = 0;
    for h in casts {
        receipts += usize::from(h.await.unwrap().is_ok());
    }
    let vote_files = std::fs::read_dir(dir.path().join("vote").join("votes")).unwrap().count();
    let token_files = std::fs::read_dir(dir.path().join("auth").join("tokens").join("used")).unwrap().count();
    svc.stop().await;
    verdict(
        granted.len() == 1 && receipts == 1 && vote_files == 1 && token_files == 1,
        format!(
            "redemptions granted {}/32 (refused {refused:?}), receipts {receipts}/32, vote files {vote_files}, used-token records {token_files}",
            granted.len()
        ),
    )
}

async fn attack_battery() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let voters = 8;
    let (suite, runs) = run_attack_suite(keys(), voters, dir.path()).await.unwrap();
    let get = |name: &str| runs.iter().find(|r| r.report.scenario == name).expect("scenario present");
    let fired = |name: &str, c: Check| get(name).report.checks_fired.contains(&c);
    let mut problems = Vec::new();
    for r in &suite.reports {
        if !r.passed() {
            problems.push(format!("{}: expected {:?}, observed {:?}", r.scenario, r.expected, r.observed));
        }
    }
    if !fired("vote-sysmgr-fabricate", Check::CountCrossCheck) {
        problems.push("fabricate not caught by the count cross-check".into());
    }
    if !fired("vote-sysmgr-modify", Check::VoterCheck) {
        problems.push("modify not caught by voter checks".into());
    }
    let ghost = get("auth-sysmgr-ghost-vote");
    if ghost.report.checks_fired != vec![Check::SealAudit] {
        problems.push(format!("ghost vote checks {:?}", ghost.report.checks_fired));
    }
    for r in &runs {
        if r.report.single_log_linkage.values().any(|&c| c > 0) {
            problems.push(format!("{}: a single cheat log linked voters", r.report.scenario));
        }
    }
    let plain = get("collude-auth-vote-plain");
    let full = plain.report.linkage.as_ref().is_some_and(|l| l.correct == voters && l.pairs.len() == voters);
    if !full {
        problems.push("plain collusion did not recover the full linkage table".into());
    }
    if !suite.uncovered_errors.is_empty() {
        problems.push(format!("error kinds never exercised: {:?}", suite.uncovered_errors));
    }
    let summary: Vec<String> = suite
        .reports
        .iter()
        .map(|r| format!("{}={}", r.scenario, outcome_name(r.observed)))
        .collect();
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{}; every service error kind exercised", summary.join(", "))
        } else {
            problems.join("; ")
        },
    )
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Clean => "clean",
        Outcome::Detected => "detected",
        Outcome::Prevented => "prevented",
        Outcome::PrivacyBroken => "privacy-broken",
    }
}

fn bits(v: &BigUint, n: usize) -> Vec<bool> {
    (0..n as u64).map(|i| v.bit(i)).collect()
}

fn digest_bits(d: &Digest, n: usize) -> Vec<bool> {
    (0..n).map(|i| d.as_bytes()[31 - i / 8] >> (i % 8) & 1 == 1).collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn blind_algebra() -> Verdict {
    let signer = &keys().auth_srv;
    let mut round_trips = 0;
    let mut leaks = 0;
    let mut agree = 0usize;
    let mut compared = 0usize;
    for _ in 0..100 {
        let m = Prn::random().digest();
        let ctx = blind(&m, signer.public());
        let blinded_sig = blind_sign(ctx.blinded_message(), signer).unwrap();
        let sig = unblind(&blinded_sig, &ctx).unwrap();
        round_trips += usize::from(verify_blind_signature(&m, &sig, signer.public()));
        for t in [ctx.blinded_message(), &blinded_sig] {
            let bytes = t.to_bytes_be();
            let text = t.to_str_radix(16);
            if contains(&bytes, m.as_bytes()) || text.contains(&m.to_hex()) {
                leaks += 1;
            }
        }
        // Low-order bits of the blinded message against the same bits of H(m).
        for (x, y) in bits(ctx.blinded_message(), 64).into_iter().zip(digest_bits(&m, 64)) {
            agree += usize::from(x == y);
            compared += 1;
        }
    }
    let agreement = agree as f64 / compared as f64;

    // Repeated blinding of one message: the transcript is fresh every time and
    // each low bit is balanced.
    let fixed = Prn::random().digest();
    let runs = 1000;
    let mut seen = HashSet::new();
    let mut ones = [0usize; 64];
    for _ in 0..runs {
        let ctx = blind(&fixed, signer.public());
        for (i, b) in bits(ctx.blinded_message(), 64).into_iter().enumerate() {
            ones[i] += usize::from(b);
        }
        seen.insert(ctx.blinded_message().clone());
    }
    let worst = ones
        .iter()
        .map(|&c| (c as f64 / runs as f64 - 0.5).abs())
        .fold(0.0, f64::max);
    // 0.5 +/- 0.07 is about 4.4 standard deviations at 1000 runs; the
    // agreement rate over 6400 comparisons gets +/- 0.03 (4.8 sigma).
    verdict(
        round_trips == 100 && leaks == 0 && seen.len() == runs && worst < 0.07 && (agreement - 0.5).abs() < 0.03,
        format!(
            "{round_trips}/100 signatures verify, {leaks} transcripts contain the message, {}/{runs} distinct blindings of one message, \
             worst low-bit bias {worst:.3}, bit agreement with H(m) {agreement:.3}",
            seen.len()
        ),
    )
}

async fn verification_codes() -> Verdict {
    const FROZEN: &str = "ba4bfed807e014a27ffb92717040a1e23a1482e4dc935461ac48a626718dd789";
    let ts = "2006-12-22T12:00:00.000000Z";
    let ballot = BallotSpec {
        ballot_id: "b1".into(),
        questions: vec![Question {
            id: "q1".into(),
            prompt: "?".into(),
            choices: vec!["Yes".into(), "No".into()],
        }],
        open_at: Timestamp::parse(ts).unwrap(),
        close_at: Timestamp::parse(ts).unwrap(),
    };
    let vote = ballot.canonicalize(&Vote::new("b1", &[("q1", 0)])).unwrap();
    let ours = compute_verification_code(&vote, ts, &RandomString([0; 16])).unwrap().to_hex();
    let mut preimage = b"b1\nq1=0\n".to_vec();
    preimage.extend_from_slice(ts.as_bytes());
    preimage.push(b'\n');
    preimage.extend_from_slice(&[0; 16]);
    let oracle = hex(&reference_sha256(&preimage));
    let empty_ok = hex(&reference_sha256(b"")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

    let dir = tempfile::tempdir().unwrap();
    let mut big = Scenario::honest("codes-1000", 1000);
    big.anonymizer = webballot::anonymizer::AnonMode::Nat;
    let run = run_ballot(&big, keys(), dir.path()).await.unwrap();
    let codes: HashSet<Digest> = run
        .voters
        .iter()
        .filter_map(|v| v.receipt.as_ref().map(|r| r.verification_code))
        .collect();
    verdict(
        ours == oracle && oracle == FROZEN && empty_ok && codes.len() == 1000 && run.tally.total == 1000,
        format!(
            "library {}.., reference {}.., frozen {}.., {} distinct codes over {} counted votes",
            &ours[..12],
            &oracle[..12],
            &FROZEN[..12],
            codes.len(),
            run.tally.total
        ),
    )
}

async fn privacy_at_rest() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::honest("privacy", 10);
    let run = run_ballot(&scenario, keys(), dir.path()).await.unwrap();
    let roster = sim::load_roster(&run);
    let scan = privacy_scan(&run, &roster);

    // The scanner must find planted identity data.
    let planted = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(planted.path().join("vote")).unwrap();
    std::fs::write(planted.path().join("vote").join("note.txt"), &roster[3].username).unwrap();
    std::fs::create_dir_all(planted.path().join("auth")).unwrap();
    std::fs::write(planted.path().join("auth").join("t.txt"), roster[4].vote_token.encode()).unwrap();
    let mut control = run.clone();
    control.workdir = planted.path().to_owned();
    let found = privacy_scan(&control, &roster).findings.len();

    verdict(
        scan.clean() && roster.len() == 10 && found == 2,
        format!(
            "VoteSrv state, AuthSrv state and publication clean: {} ({:?}); planted control found {found}/2",
            scan.clean(),
            scan.findings
        ),
    )
}

async fn mix_permutations() -> Verdict {
    let trials = 1000;
    let order: Arc<Mutex<Vec<u8>>> = Arc::default();
    let sink = order.clone();
    let upstream = Router::new().route(
        "/vote/cast",
        post(move |body: String| {
            let sink = sink.clone();
            async move {
                sink.lock().unwrap().push(body.trim_matches('"').parse().unwrap());
                "ok"
            }
        }),
    );
    let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let upstream = serve(upstream, any).await.unwrap();
    let mix = Anonymizer::start(MixConfig::mix(any, upstream.addr, 4, 10_000), BallotClock::new())
        .await
        .unwrap();

    let mut counts: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    for _ in 0..trials {
        order.lock().unwrap().clear();
        let mut tasks = Vec::new();
        for i in 0..4u8 {
            let addr = mix.addr();
            let ip: IpAddr = format!("127.0.0.{}", 30 + i).parse().unwrap();
            tasks.push(tokio::spawn(async move {
                HttpClient::bound_to(ip)
                    .send(addr, OutgoingRequest::post_json("/vote/cast", &i.to_string()))
                    .await
                    .unwrap()
            }));
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
        for t in tasks {
            t.await.unwrap();
        }
        *counts.entry(order.lock().unwrap().clone()).or_default() += 1;
    }
    mix.shutdown().await;
    upstream.shutdown().await;

    let expected = trials as f64 / 24.0;
    let freqs: Vec<f64> = counts.values().map(|&c| c as f64 / trials as f64).collect();
    let max_abs = freqs.iter().map(|f| (f - 1.0 / 24.0).abs()).fold(0.0, f64::max);
    let max_rel = counts.values().map(|&c| (c as f64 - expected).abs() / expected).fold(0.0, f64::max);
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum::<f64>()
        + (24 - counts.len()) as f64 * expected;
    // 49.73 is the 0.999 quantile of chi-square with 23 degrees of freedom.
    verdict(
        counts.len() == 24 && counts.keys().all(|k| k.len() == 4) && max_abs <= 0.05 && chi2 < 49.73,
        format!(
            "{} of 24 orders seen over {trials} batches, largest deviation from 1/24 is {:.2} percentage points \
             ({:.0}% relative), chi-square {chi2:.1} on 23 df",
            counts.len(),
            max_abs * 100.0,
            max_rel * 100.0
        ),
    )
}
