#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use webballot::auth_server::{self, AuthConfig, AuthKeys, AuthService};
use webballot::clock::BallotClock;
use webballot::net::{serve, ServerHandle};
use webballot::protocol::{BallotSpec, Mode};
use webballot::sim::sample_ballot;
use webballot::tally::{provision, KeyRing, ProvisionManifest};
use webballot::vote_server::{self, VoteConfig, VoteKeys, VoteService};

pub fn keys() -> &'static KeyRing {
    static KEYS: OnceLock<KeyRing> = OnceLock::new();
    KEYS.get_or_init(|| KeyRing::generate(2048).expect("keygen"))
}

/// AuthSrv and VoteSrv for one ballot, served on localhost.
pub struct Services {
    pub clock: BallotClock,
    pub ballot: BallotSpec,
    pub manifest: ProvisionManifest,
    pub auth: Arc<AuthService>,
    pub vote: Arc<VoteService>,
    pub auth_addr: SocketAddr,
    pub vote_addr: SocketAddr,
    handles: Vec<ServerHandle>,
}

impl Services {
    pub async fn start(dir: &Path, voters: usize, mode: Mode, pin: bool) -> Self {
        let keys = keys();
        let clock = BallotClock::new();
        let ballot = sample_ballot(&clock);
        let manifest = provision(voters, &ballot, keys);
        AuthService::install(&dir.join("auth"), &manifest.auth_bundle).unwrap();
        VoteService::install(&dir.join("vote"), &ballot).unwrap();
        let auth = Arc::new(
            AuthService::open(
                &dir.join("auth"),
                AuthConfig::new(mode, pin),
                AuthKeys {
                    server: keys.auth_srv.clone(),
                    vote_srv: keys.vote_srv.public().clone(),
                    auth_mgr: keys.auth_mgr.public().clone(),
                },
                clock.clone(),
            )
            .unwrap(),
        );
        let vote = Arc::new(
            VoteService::open(
                &dir.join("vote"),
                VoteConfig::new(mode, pin),
                VoteKeys {
                    server: keys.vote_srv.clone(),
                    auth_srv: keys.auth_srv.public().clone(),
                    auth_mgr: keys.auth_mgr.public().clone(),
                    vote_mgr: keys.vote_mgr.public().clone(),
                },
                clock.clone(),
            )
            .unwrap(),
        );
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let a = serve(auth_server::router(auth.clone()), any).await.unwrap();
        let v = serve(vote_server::router(vote.clone()), any).await.unwrap();
        Self {
            clock,
            ballot,
            manifest,
            auth,
            vote,
            auth_addr: a.addr,
            vote_addr: v.addr,
            handles: vec![a, v],
        }
    }

    pub async fn stop(self) {
        for h in self.handles {
            h.shutdown().await;
        }
    }
}

/// Straight-line SHA-256, kept apart from the library's hashing so it can
/// serve as a reference.
pub fn reference_sha256(data: &[u8]) -> [u8; 32] {
    const K: [u32; 64] = [
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
        0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
        0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
        0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
        0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
        0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
        0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2,
    ];
    let mut h: [u32; 8] = [
        0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19,
    ];
    let mut msg = data.to_vec();
    msg.push(0x80);
    while msg.len() % 64 != 56 {
        msg.push(0);
    }
    msg.extend_from_slice(&((data.len() as u64) * 8).to_be_bytes());
    for chunk in msg.chunks(64) {
        let mut w = [0u32; 64];
        for i in 0..16 {
            w[i] = u32::from_be_bytes([chunk[4 * i], chunk[4 * i + 1], chunk[4 * i + 2], chunk[4 * i + 3]]);
        }
        for i in 16..64 {
            let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
            let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16].wrapping_add(s0).wrapping_add(w[i - 7]).wrapping_add(s1);
        }
        let [mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut hh] = h;
        for i in 0..64 {
            let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
            let ch = (e & f) ^ (!e & g);
            let t1 = hh.wrapping_add(s1).wrapping_add(ch).wrapping_add(K[i]).wrapping_add(w[i]);
            let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
            let maj = (a & b) ^ (a & c) ^ (b & c);
            let t2 = s0.wrapping_add(maj);
            hh = g;
            g = f;
            f = e;
            e = d.wrapping_add(t1);
            d = c;
            c = b;
            b = a;
            a = t1.wrapping_add(t2);
        }
        for (x, y) in h.iter_mut().zip([a, b, c, d, e, f, g, hh]) {
            *x = x.wrapping_add(y);
        }
    }
    let mut out = [0u8; 32];
    for (i, word) in h.iter().enumerate() {
        out[4 * i..4 * i + 4].copy_from_slice(&word.to_be_bytes());
    }
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
