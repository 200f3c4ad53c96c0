mod common;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use webballot::anonymizer::{Anonymizer, MixConfig};
use webballot::auth_server::{
    BlindRedeemRequest, KeyInfo, LoginRequest, LoginResponse, RedeemRequest, RedeemResponse,
};
use webballot::crypto::{open, open_anonymous};
use webballot::net::{HttpClient, HttpResponse, OutgoingRequest, KEY_ID_HEADER};
use webballot::protocol::{
    verify_receipt, BallotSpec, BlindAuthorization, ErrorBody, Mode, ReceiptCheck, Vote, VoteAuthorization,
    VoteReceipt,
};
use webballot::vote_server::CastRequest;
use webballot::voter::{ClientConfig, Voter};

use common::{keys, Services};

async fn post<T: serde::Serialize>(addr: SocketAddr, path: &str, body: &T) -> HttpResponse {
    HttpClient::new().send(addr, OutgoingRequest::post_json(path, body)).await.unwrap()
}

fn error_kind(resp: &HttpResponse) -> String {
    serde_json::from_slice::<ErrorBody>(&resp.body).unwrap().error
}

async fn login(svc: &Services, i: usize) -> String {
    let c = &svc.manifest.roster[i];
    post(svc.auth_addr, "/auth/login", &LoginRequest {
        username: c.username.clone(),
        password: c.password.clone(),
    })
    .await
    .json::<LoginResponse>()
    .unwrap()
    .session
}

#[tokio::test(flavor = "multi_thread")]
async fn auth_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Services::start(dir.path(), 2, Mode::Plain, true).await;

    let key = HttpClient::new().send(svc.auth_addr, OutgoingRequest::get("/auth/key")).await.unwrap();
    let info: KeyInfo = key.json().unwrap();
    assert_eq!(info.key_id, keys().auth_srv.key_id());
    assert_eq!(key.key_id(), Some(keys().auth_srv.key_id()));

    let bad = post(svc.auth_addr, "/auth/login", &LoginRequest {
        username: svc.manifest.roster[0].username.clone(),
        password: "nope".into(),
    })
    .await;
    assert_eq!(bad.status, 401);
    assert_eq!(error_kind(&bad), "bad-credentials");
    assert!(bad.headers.contains_key(KEY_ID_HEADER));

    let session = login(&svc, 0).await;
    let token = svc.manifest.roster[0].vote_token.encode();
    let redeemed: RedeemResponse = post(svc.auth_addr, "/auth/redeem", &RedeemRequest {
        session: session.clone(),
        vote_token: token.clone(),
    })
    .await
    .json()
    .unwrap();
    let pin = redeemed.pin.expect("PIN issued");
    assert_eq!(pin.as_str().len(), 6);
    let payload = open(&redeemed.authorization, &keys().vote_srv, keys().auth_srv.public()).unwrap();
    let authz: VoteAuthorization = serde_json::from_slice(&payload).unwrap();
    assert_eq!(authz.pin.as_ref(), Some(&pin));
    assert_eq!(authz.prn.0.len(), 32);

    let again = post(svc.auth_addr, "/auth/redeem", &RedeemRequest {
        session: session.clone(),
        vote_token: token.clone(),
    })
    .await;
    assert_eq!((again.status.as_u16(), error_kind(&again).as_str()), (409, "token-already-used"));

    let unknown = post(svc.auth_addr, "/auth/redeem", &RedeemRequest {
        session: session.clone(),
        vote_token: "abcdefghijklmnopqrstuvwxyz".into(),
    })
    .await;
    assert!(matches!(error_kind(&unknown).as_str(), "unknown-token" | "malformed-request"));

    let blind = post(svc.auth_addr, "/auth/blind-redeem", &BlindRedeemRequest {
        session,
        vote_token: svc.manifest.roster[1].vote_token.encode(),
        blinded_message: "05".into(),
    })
    .await;
    assert_eq!(error_kind(&blind), "wrong-mode");

    let mut garbage = OutgoingRequest::post_json("/auth/login", &());
    garbage.body = bytes::Bytes::from_static(b"{");
    let garbage = HttpClient::new().send(svc.auth_addr, garbage).await.unwrap();
    assert_eq!((garbage.status.as_u16(), error_kind(&garbage).as_str()), (400, "malformed-request"));

    let early = HttpClient::new().send(svc.auth_addr, OutgoingRequest::get("/admin/export")).await.unwrap();
    assert!(early.status.is_client_error());
    svc.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn vote_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Services::start(dir.path(), 1, Mode::Plain, true).await;
    let session = login(&svc, 0).await;
    let redeemed: RedeemResponse = post(svc.auth_addr, "/auth/redeem", &RedeemRequest {
        session,
        vote_token: svc.manifest.roster[0].vote_token.encode(),
    })
    .await
    .json()
    .unwrap();
    let pin = redeemed.pin.unwrap();

    let form = HttpClient::new().send(svc.vote_addr, OutgoingRequest::get("/vote/form")).await.unwrap();
    assert_eq!(form.key_id(), Some(keys().vote_srv.key_id()));
    let ballot: BallotSpec = form.json().unwrap();
    assert_eq!(ballot, svc.ballot);

    let vote = Vote::new("b1", &[("q1", 1), ("q2", 2)]);
    let cast = |pin: &str| CastRequest {
        vote: vote.clone(),
        authorization: redeemed.authorization.clone(),
        pin: Some(pin.to_owned()),
    };
    let wrong = if pin.as_str() == "123456" { "654321" } else { "123456" };
    let miss = post(svc.vote_addr, "/vote/cast", &cast(wrong)).await;
    assert_eq!(error_kind(&miss), "pin-mismatch");

    let invalid = post(svc.vote_addr, "/vote/cast", &CastRequest {
        vote: Vote::new("b1", &[("q1", 7)]),
        ..cast(pin.as_str())
    })
    .await;
    assert_eq!(error_kind(&invalid), "vote-invalid");

    let receipt: VoteReceipt = post(svc.vote_addr, "/vote/cast", &cast(pin.as_str())).await.json().unwrap();
    let canonical = svc.ballot.canonicalize(&vote).unwrap();
    assert_eq!(verify_receipt(&receipt, &canonical, keys().vote_srv.public()), ReceiptCheck::Valid);
    let stored = dir.path().join("vote/votes").join(format!("{}.sealed", receipt.verification_code));
    assert!(stored.exists());

    let replay = post(svc.vote_addr, "/vote/cast", &cast(pin.as_str())).await;
    assert_eq!(error_kind(&replay), "authorization-already-used");
    svc.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn blind_flow_keeps_prn_from_auth_server() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Services::start(dir.path(), 1, Mode::Blind, false).await;
    let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let anon = Anonymizer::start(MixConfig::nat(any, svc.vote_addr), svc.clock.clone()).await.unwrap();

    let sent = Arc::new(Mutex::new(Vec::new()));
    let voter = Voter::new(
        ClientConfig {
            auth_server: svc.auth_addr,
            anonymizer: anon.addr(),
            auth_key_id: keys().auth_srv.key_id().into(),
            vote_key_id: keys().vote_srv.key_id().into(),
            vote_srv_public_key: keys().vote_srv.public().to_pem(),
            ballot_id: "b1".into(),
            mode: Mode::Blind,
            store: dir.path().join("voter"),
            bind_ip: None,
            timestamp_tolerance_ms: 2_000,
        },
        svc.clock.clone(),
    )
    .unwrap()
    .with_client(HttpClient::new().capture(sent.clone()));
    voter.store().save_credentials(&svc.manifest.roster[0]).unwrap();
    assert!(voter.redeem().await.unwrap().is_none());

    let envelope = voter.store().authorization().unwrap().unwrap();
    assert!(envelope.is_anonymous());
    let authz: BlindAuthorization =
        serde_json::from_slice(&open_anonymous(&envelope, &keys().vote_srv).unwrap()).unwrap();
    let prn_hex = authz.prn.to_hex();
    let digest_hex = authz.prn.digest().to_hex();
    for body in sent.lock().unwrap().iter() {
        let text = String::from_utf8_lossy(body);
        assert!(!text.contains(&prn_hex) && !text.contains(&digest_hex));
    }
    assert_eq!(std::fs::read_dir(dir.path().join("auth/authz/issued")).unwrap().count(), 0);

    let receipt = voter.cast(&Vote::new("b1", &[("q1", 0), ("q2", 1)]), None).await.unwrap();
    assert_eq!(voter.verify_stored_receipt().unwrap(), ReceiptCheck::Valid);
    assert!(dir.path().join("vote/votes").join(format!("{}.sealed", receipt.verification_code)).exists());
    anon.shutdown().await;
    svc.stop().await;
}
