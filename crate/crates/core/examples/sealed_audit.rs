//! The hash-chained audit log and the seal audit the AuthMgr runs on it.
//!
//! ```bash
//! cargo run --example sealed_audit
//! ```

use webballot::audit::{verify_chain, AuditLog};
use webballot::protocol::Timestamp;
use webballot::tally::audit_seal;

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut log = AuditLog::open(dir.path().join("audit.log")).expect("log");
    log.append(Timestamp::now(), "auth-mgr", "seal", true, false).unwrap();
    log.append(Timestamp::now(), "auth-sysmgr", "read-unused-tokens", false, true).unwrap();
    let unseal = log.append(Timestamp::now(), "auth-mgr", "unseal", true, true).unwrap();
    let text = log.read().unwrap();

    let check = verify_chain(&text, Some(&unseal.hash));
    println!("chain valid {} over {} entries", check.valid, check.entries);

    // The anchor is the unseal hash the AuthMgr wrote down.
    let audit = audit_seal(&text, &unseal.hash);
    for e in &audit.accesses_while_sealed {
        println!("while sealed: {} tried {} (allowed: {})", e.actor, e.action, e.allowed);
    }
    println!("seal audit clean: {}", audit.clean());

    // Dropping the incriminating line breaks the chain.
    let scrubbed: String = text
        .lines()
        .filter(|l| !l.contains("read-unused-tokens"))
        .map(|l| format!("{l}\n"))
        .collect();
    let audit = audit_seal(&scrubbed, &unseal.hash);
    println!("after scrubbing: chain valid {}, problem {:?}", audit.chain_valid, audit.problem);
}
