//! Role keys, signatures and sealed envelopes.
//!
//! ```bash
//! cargo run --example keys_and_envelopes
//! ```

use webballot::crypto::{generate_keypair, open, open_anonymous, seal, seal_anonymous, sign, verify};

fn main() {
    let auth_srv = generate_keypair("auth-srv", 2048).expect("keygen");
    let vote_srv = generate_keypair("vote-srv", 2048).expect("keygen");
    println!("auth-srv key id {}", auth_srv.key_id());
    println!("vote-srv key id {}", vote_srv.key_id());

    let sig = sign(b"hello", &auth_srv);
    assert!(verify(b"hello", &sig, auth_srv.public()));
    assert!(!verify(b"hellO", &sig, auth_srv.public()));

    // Signed by the AuthSrv, readable only by the VoteSrv.
    let envelope = seal(br#"{"prn":"..."}"#, &auth_srv, vote_srv.public());
    println!(
        "sealed {} bytes for {} from {}",
        envelope.ciphertext.len(),
        envelope.recipient,
        envelope.sender
    );
    let payload = open(&envelope, &vote_srv, auth_srv.public()).expect("open");
    println!("opened: {}", String::from_utf8_lossy(&payload));

    // The wrong recipient cannot open it; a forged sender is rejected.
    assert!(open(&envelope, &auth_srv, auth_srv.public()).is_err());
    let forger = generate_keypair("forger", 2048).expect("keygen");
    let forged = seal(b"{}", &forger, vote_srv.public());
    assert!(open(&forged, &vote_srv, auth_srv.public()).is_err());

    // Anonymous envelopes carry no sender.
    let anon = seal_anonymous(b"blind authorization", vote_srv.public());
    assert!(anon.is_anonymous());
    println!("anonymous: {}", String::from_utf8_lossy(&open_anonymous(&anon, &vote_srv).expect("open")));
}
