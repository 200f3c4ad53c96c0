//! The anonymizing relay in mix mode: requests are held until a batch fills,
//! shuffled, stripped of identifying headers and sent from one address.
//!
//! ```bash
//! cargo run --example mix_anonymizer
//! ```

use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};

use axum::extract::ConnectInfo;
use axum::http::HeaderMap;
use axum::routing::post;
use axum::Router;

use webballot::anonymizer::{Anonymizer, MixConfig};
use webballot::clock::BallotClock;
use webballot::net::{serve, HttpClient, OutgoingRequest};

#[tokio::main]
async fn main() {
    let seen: Arc<Mutex<Vec<(String, SocketAddr, Vec<String>)>>> = Arc::default();
    let log = seen.clone();
    let upstream = Router::new().route(
        "/vote/cast",
        post(move |ConnectInfo(peer): ConnectInfo<SocketAddr>, headers: HeaderMap, body: String| {
            let log = log.clone();
            async move {
                let names = headers.keys().map(|k| k.to_string()).collect();
                log.lock().unwrap().push((body, peer, names));
                "ok"
            }
        }),
    );
    let upstream = serve(upstream, "127.0.0.1:0".parse().unwrap()).await.unwrap();

    let mut config = MixConfig::mix("127.0.0.1:0".parse().unwrap(), upstream.addr, 4, 2_000);
    config.egress_ip = Some("127.0.0.1".parse().unwrap());
    let mix = Anonymizer::start(config, BallotClock::new()).await.unwrap();

    let mut tasks = Vec::new();
    for i in 0..4u8 {
        let addr = mix.addr();
        tasks.push(tokio::spawn(async move {
            let ip: IpAddr = format!("127.0.0.{}", 20 + i).parse().unwrap();
            let req = OutgoingRequest::post_json("/vote/cast", &format!("voter {i}"))
                .with_header("x-forwarded-for", "10.1.2.3")
                .with_header("user-agent", "ballot-client");
            HttpClient::bound_to(ip).send(addr, req).await.unwrap()
        }));
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    for t in tasks {
        t.await.unwrap();
    }

    println!("sent in order voter 0..3 from 127.0.0.20..23; upstream saw:");
    for (body, peer, headers) in seen.lock().unwrap().iter() {
        println!("  {body:<10} from {} headers {headers:?}", peer.ip());
    }
    mix.shutdown().await;
    upstream.shutdown().await;
}
