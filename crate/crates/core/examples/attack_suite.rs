//! Runs every adversary against a small ballot and shows which check caught
//! it, or why it failed.
//!
//! ```bash
//! cargo run --example attack_suite
//! ```

use webballot::sim::run_attack_suite;
use webballot::tally::KeyRing;

#[tokio::main]
async fn main() {
    let keys = KeyRing::generate(2048).expect("keygen");
    let dir = tempfile::tempdir().expect("tempdir");
    let (suite, _) = run_attack_suite(&keys, 8, dir.path()).await.expect("suite");
    for r in &suite.reports {
        println!("{:<26} {:?} (expected {:?})", r.scenario, r.observed, r.expected.unwrap());
        for line in r.evidence.iter().chain(&r.prevented) {
            println!("    {line}");
        }
    }
    println!("uncovered error kinds: {:?}", suite.uncovered_errors);
}
