//! How a VerificationCode and its receipt are formed and checked.
//!
//! ```bash
//! cargo run --example verification_code
//! ```

use webballot::crypto::generate_keypair;
use webballot::protocol::{
    compute_verification_code, verify_receipt, BallotSpec, Question, RandomString, Timestamp, Vote, VoteReceipt,
};

fn main() {
    let vote_srv = generate_keypair("vote-srv", 2048).expect("keygen");
    let now = Timestamp::now();
    let ballot = BallotSpec {
        ballot_id: "b1".into(),
        questions: vec![Question {
            id: "q1".into(),
            prompt: "Approve?".into(),
            choices: vec!["Yes".into(), "No".into()],
        }],
        open_at: now.clone(),
        close_at: now.clone(),
    };
    let vote = ballot.canonicalize(&Vote::new("b1", &[("q1", 0)])).expect("valid vote");
    println!("canonical vote  {}", String::from_utf8_lossy(&vote.encode()));

    let random = RandomString::random();
    let code = compute_verification_code(&vote, &now.to_string(), &random).expect("code");
    println!("timestamp       {now}");
    println!("random string   {}", random.to_hex());
    println!("code            {code}");

    let receipt = VoteReceipt::issue(code, &now, random, &vote_srv);
    println!("receipt check   {:?}", verify_receipt(&receipt, &vote, vote_srv.public()));

    // Same vote, same second, new random string: a different code.
    let again = compute_verification_code(&vote, &now.to_string(), &RandomString::random()).expect("code");
    assert_ne!(code, again);

    let other = ballot.canonicalize(&Vote::new("b1", &[("q1", 1)])).expect("valid vote");
    println!("against 'No'    {:?}", verify_receipt(&receipt, &other, vote_srv.public()));
}
