//! Blind-mode redemption: the AuthSrv signs an authorization it never sees,
//! so its records cannot be joined with the VoteSrv's.
//!
//! ```bash
//! cargo run --example blind_authorization
//! ```

use webballot::crypto::blind::{bigint_to_hex, blind, blind_sign, unblind, verify_blind_signature};
use webballot::crypto::generate_keypair;
use webballot::protocol::Prn;

fn main() {
    let auth_srv = generate_keypair("auth-srv", 2048).expect("keygen");

    // Voter side.
    let prn = Prn::random();
    let ctx = blind(&prn.digest(), auth_srv.public());
    println!("PRN digest        {}", prn.digest());
    println!("blinded message   {}...", &bigint_to_hex(ctx.blinded_message())[..32]);

    // AuthSrv side: all it sees is the blinded message.
    let blinded_sig = blind_sign(ctx.blinded_message(), &auth_srv).expect("sign");
    println!("blinded signature {}...", &bigint_to_hex(&blinded_sig)[..32]);

    // Voter side again.
    let signature = unblind(&blinded_sig, &ctx).expect("unblind");
    assert!(verify_blind_signature(&prn.digest(), &signature, auth_srv.public()));
    println!("unblinded signature verifies: true");

    // The signature does not carry over to another PRN.
    let other = Prn::random();
    assert!(!verify_blind_signature(&other.digest(), &signature, auth_srv.public()));
    println!("signature on another PRN: false");
}
