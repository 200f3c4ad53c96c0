//! A complete honest ballot: 20 voters, PINs, a batching mix, the offline
//! reconciliation and count, and every voter's own checks.
//!
//! ```bash
//! cargo run --example honest_ballot
//! ```

use webballot::sim::{load_roster, privacy_scan, run_ballot, Scenario};
use webballot::tally::KeyRing;

#[tokio::main]
async fn main() {
    let keys = KeyRing::generate(2048).expect("keygen");
    let dir = tempfile::tempdir().expect("tempdir");
    let scenario = Scenario::honest("honest", 20);
    let run = run_ballot(&scenario, &keys, dir.path()).await.expect("ballot");

    println!("finished in {} ms", run.elapsed_ms);
    println!(
        "reconciliation: {} used tokens, {:?} issued, {} used authorizations, {} votes, consistent {}",
        run.reconciliation.used_tokens,
        run.reconciliation.issued_authorizations,
        run.reconciliation.used_authorizations,
        run.reconciliation.votes,
        run.reconciliation.consistent
    );
    for (q, counts) in &run.tally.counts {
        println!("{q}: {counts:?}");
    }
    println!("tally matches what voters cast: {}", run.tally_matches_truth);
    println!("all voter checks green: {}", run.all_voter_checks_green());
    let scan = privacy_scan(&run, &load_roster(&run));
    println!("privacy scan clean: {}", scan.clean());
    println!("outcome: {:?}", run.report.observed);
}
