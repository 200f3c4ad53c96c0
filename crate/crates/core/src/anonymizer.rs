//! Forwarding proxy between voters and the VoteSrv.
//!
//! In `nat` mode each request is relayed at once from the proxy's own
//! address. In `mix` mode requests are held until `batch_size` of them have
//! arrived or `max_hold_ms` has passed, then forwarded one by one in a
//! uniformly shuffled order.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{ConnectInfo, State};
use axum::http::{HeaderMap, Request, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use bytes::Bytes;
use http_body_util::BodyExt;
use rand::rngs::OsRng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

use crate::adversary::{self, AdversaryPermit, AnonCheats};
use crate::clock::BallotClock;
use crate::net::{serve, ApiError, HttpClient, HttpResponse, OutgoingRequest, ServerHandle};
use crate::protocol::{to_canonical_json, Timestamp};

/// Request headers never passed upstream: hop-by-hop headers and anything a
/// proxy in front of us may have added about the client.
pub const STRIPPED_REQUEST_HEADERS: &[&str] = &[
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
    "host",
    "content-length",
    "forwarded",
    "via",
    "x-forwarded-for",
    "x-forwarded-host",
    "x-forwarded-proto",
    "x-forwarded-port",
    "x-real-ip",
    "client-ip",
    "true-client-ip",
];

const STRIPPED_RESPONSE_HEADERS: &[&str] = &[
    "connection",
    "keep-alive",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
    "content-length",
];

pub const CLIENT_LOG_FILE: &str = "anon-clients.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnonMode {
    Nat,
    Mix,
}

impl std::str::FromStr for AnonMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nat" => Ok(AnonMode::Nat),
            "mix" => Ok(AnonMode::Mix),
            other => Err(format!("unknown anonymizer mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixConfig {
    pub mode: AnonMode,
    pub listen: SocketAddr,
    pub upstream: SocketAddr,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_hold")]
    pub max_hold_ms: u64,
    /// Local address upstream connections are made from.
    #[serde(default)]
    pub egress_ip: Option<IpAddr>,
    /// Only used by a cheating proxy; an honest one writes nothing.
    #[serde(default)]
    pub state_dir: Option<PathBuf>,
    #[serde(default)]
    pub cheats: AnonCheats,
    #[serde(skip)]
    pub permit: Option<AdversaryPermit>,
}

fn default_batch() -> usize {
    4
}

fn default_hold() -> u64 {
    500
}

impl MixConfig {
    pub fn nat(listen: SocketAddr, upstream: SocketAddr) -> Self {
        Self {
            mode: AnonMode::Nat,
            listen,
            upstream,
            batch_size: default_batch(),
            max_hold_ms: default_hold(),
            egress_ip: None,
            state_dir: None,
            cheats: AnonCheats::default(),
            permit: None,
        }
    }

    pub fn mix(listen: SocketAddr, upstream: SocketAddr, batch_size: usize, max_hold_ms: u64) -> Self {
        Self {
            mode: AnonMode::Mix,
            batch_size,
            max_hold_ms,
            ..Self::nat(listen, upstream)
        }
    }
}

#[derive(Debug, Error)]
pub enum AnonError {
    #[error("mix mode needs a batch size of at least 2")]
    BatchTooSmall,
    #[error("adversary flags require an adversary permit")]
    CheatRefused,
    #[error("a cheating proxy needs a state directory")]
    NoStateDir,
    #[error("binding listener: {0}")]
    Io(#[from] std::io::Error),
}

/// One logged relay, as a cheating AnonSysMgr would keep it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientLogRecord {
    pub client: SocketAddr,
    pub path: String,
    pub forwarded_at: Timestamp,
}

/// Shuffles a batch with the OS RNG.
pub fn shuffle_batch<T>(batch: &mut [T]) {
    batch.shuffle(&mut OsRng);
}

struct Pending {
    request: OutgoingRequest,
    reply: oneshot::Sender<Response>,
}

struct Proxy {
    config: MixConfig,
    client: HttpClient,
    clock: BallotClock,
    queue: Option<mpsc::UnboundedSender<Pending>>,
}

/// A running anonymizer.
#[derive(Debug)]
pub struct Anonymizer {
    pub server: ServerHandle,
}

impl Anonymizer {
    pub fn addr(&self) -> SocketAddr {
        self.server.addr
    }

    pub async fn start(config: MixConfig, clock: BallotClock) -> Result<Self, AnonError> {
        if config.mode == AnonMode::Mix && config.batch_size < 2 {
            return Err(AnonError::BatchTooSmall);
        }
        if !config.cheats.is_honest() {
            if config.permit.is_none() && AdversaryPermit::from_env().is_none() {
                return Err(AnonError::CheatRefused);
            }
            if config.state_dir.is_none() {
                return Err(AnonError::NoStateDir);
            }
        }
        let client = HttpClient::new().with_bind(config.egress_ip);
        let (queue, rx) = match config.mode {
            AnonMode::Nat => (None, None),
            AnonMode::Mix => {
                let (tx, rx) = mpsc::unbounded_channel();
                (Some(tx), Some(rx))
            }
        };
        let listen = config.listen;
        let proxy = Arc::new(Proxy {
            config,
            client,
            clock,
            queue,
        });
        if let Some(rx) = rx {
            tokio::spawn(batcher(proxy.clone(), rx));
        }
        let router = Router::new().fallback(relay).with_state(proxy);
        Ok(Self {
            server: serve(router, listen).await?,
        })
    }

    pub async fn shutdown(self) {
        self.server.shutdown().await
    }
}

fn scrub_request(headers: &HeaderMap) -> HeaderMap {
    let mut out = headers.clone();
    for name in STRIPPED_REQUEST_HEADERS {
        out.remove(*name);
    }
    out
}

async fn relay(
    State(proxy): State<Arc<Proxy>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    request: Request<Body>,
) -> Response {
    let (parts, body) = request.into_parts();
    let body = match body.collect().await {
        Ok(b) => b.to_bytes(),
        Err(e) => return gateway_error(StatusCode::BAD_REQUEST, "malformed-request", e.to_string()),
    };
    let path = parts.uri.path_and_query().map_or("/", |p| p.as_str()).to_owned();
    let body = if proxy.config.cheats.tamper_votes && path == "/vote/cast" {
        tamper_vote(&body).unwrap_or(body)
    } else {
        body
    };
    let outgoing = OutgoingRequest {
        method: parts.method,
        path,
        headers: scrub_request(&parts.headers),
        body,
    };
    if proxy.config.cheats.log_clients {
        if let Some(dir) = &proxy.config.state_dir {
            let _ = adversary::append_jsonl(
                dir,
                CLIENT_LOG_FILE,
                &ClientLogRecord {
                    client: peer,
                    path: outgoing.path.clone(),
                    forwarded_at: proxy.clock.now(),
                },
            );
        }
    }
    match &proxy.queue {
        None => forward(&proxy, outgoing).await,
        Some(queue) => {
            let (tx, rx) = oneshot::channel();
            if queue.send(Pending { request: outgoing, reply: tx }).is_err() {
                return gateway_error(StatusCode::SERVICE_UNAVAILABLE, "proxy-stopped", "mix queue closed".into());
            }
            rx.await.unwrap_or_else(|_| {
                gateway_error(StatusCode::SERVICE_UNAVAILABLE, "proxy-stopped", "mix queue closed".into())
            })
        }
    }
}

async fn forward(proxy: &Proxy, request: OutgoingRequest) -> Response {
    match proxy.client.send(proxy.config.upstream, request).await {
        Ok(resp) => into_response(resp),
        Err(e) => gateway_error(StatusCode::BAD_GATEWAY, "upstream-unreachable", e.to_string()),
    }
}

fn into_response(resp: HttpResponse) -> Response {
    let mut out = Response::new(Body::from(resp.body));
    *out.status_mut() = resp.status;
    let mut headers = resp.headers;
    for name in STRIPPED_RESPONSE_HEADERS {
        headers.remove(*name);
    }
    *out.headers_mut() = headers;
    out
}

fn gateway_error(status: StatusCode, kind: &'static str, message: String) -> Response {
    ApiError { status, kind, message }.into_response()
}

async fn batcher(proxy: Arc<Proxy>, mut rx: mpsc::UnboundedReceiver<Pending>) {
    let hold = Duration::from_millis(proxy.config.max_hold_ms);
    while let Some(first) = rx.recv().await {
        let mut batch = vec![first];
        let deadline = tokio::time::Instant::now() + hold;
        while batch.len() < proxy.config.batch_size {
            match tokio::time::timeout_at(deadline, rx.recv()).await {
                Ok(Some(p)) => batch.push(p),
                Ok(None) | Err(_) => break,
            }
        }
        shuffle_batch(&mut batch);
        for pending in batch {
            let response = forward(&proxy, pending.request).await;
            let _ = pending.reply.send(response);
        }
    }
}

/// Moves the first answer of a cast request to the other choice.
fn tamper_vote(body: &Bytes) -> Option<Bytes> {
    let mut value: serde_json::Value = serde_json::from_slice(body).ok()?;
    let choice = value.pointer_mut("/vote/answers/0/choice")?;
    let flipped = if choice.as_u64()? == 0 { 1 } else { 0 };
    *choice = flipped.into();
    Some(Bytes::from(to_canonical_json(&value)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::sync::Mutex;

    use axum::routing::post;
    use http::Method;

    #[derive(Clone, Default)]
    struct Seen(Arc<Mutex<Vec<(SocketAddr, HeaderMap, Bytes)>>>);

    async fn probe(
        State(seen): State<Seen>,
        ConnectInfo(peer): ConnectInfo<SocketAddr>,
        headers: HeaderMap,
        body: Bytes,
    ) -> Bytes {
        seen.0.lock().unwrap().push((peer, headers, body.clone()));
        body
    }

    async fn upstream() -> (ServerHandle, Seen) {
        let seen = Seen::default();
        let router = Router::new().route("/echo", post(probe)).with_state(seen.clone());
        (serve(router, "127.0.0.1:0".parse().unwrap()).await.unwrap(), seen)
    }

    fn any_port() -> SocketAddr {
        "127.0.0.1:0".parse().unwrap()
    }

    fn echo(body: &str) -> OutgoingRequest {
        OutgoingRequest {
            method: Method::POST,
            path: "/echo".into(),
            headers: HeaderMap::new(),
            body: Bytes::from(body.to_owned()),
        }
    }

    #[tokio::test]
    async fn nat_mode_hides_client_addresses() {
        let (up, seen) = upstream().await;
        let anon = Anonymizer::start(MixConfig::nat(any_port(), up.addr), BallotClock::new())
            .await
            .unwrap();
        for ip in ["127.0.0.2", "127.0.0.3"] {
            let client = HttpClient::bound_to(ip.parse().unwrap());
            let resp = client.send(anon.addr(), echo(ip)).await.unwrap();
            assert_eq!(resp.body, ip.as_bytes());
        }
        let seen = seen.0.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0].0.ip(), seen[1].0.ip());
        assert_eq!(seen[0].0.ip(), "127.0.0.1".parse::<IpAddr>().unwrap());
    }

    #[tokio::test]
    async fn only_transport_and_hop_headers_change() {
        let (up, seen) = upstream().await;
        let anon = Anonymizer::start(MixConfig::nat(any_port(), up.addr), BallotClock::new())
            .await
            .unwrap();
        let req = echo("{\"a\":1}")
            .with_header("content-type", "application/json")
            .with_header("x-custom", "kept")
            .with_header("x-forwarded-for", "10.1.2.3")
            .with_header("via", "1.1 somewhere")
            .with_header("connection", "keep-alive");
        HttpClient::new().send(anon.addr(), req.clone()).await.unwrap();
        let seen = seen.0.lock().unwrap();
        let (_, headers, body) = &seen[0];
        assert_eq!(body, &req.body);
        assert_eq!(headers.get("x-custom").unwrap(), "kept");
        assert_eq!(headers.get("content-type").unwrap(), "application/json");
        for gone in ["x-forwarded-for", "via"] {
            assert!(headers.get(gone).is_none(), "{gone} leaked");
        }
        let names: Vec<&str> = headers.keys().map(|k| k.as_str()).collect();
        for name in names {
            assert!(
                ["x-custom", "content-type", "host", "content-length"].contains(&name),
                "unexpected upstream header {name}"
            );
        }
    }

    #[tokio::test]
    async fn mix_flushes_a_lone_request_after_max_hold() {
        let (up, _seen) = upstream().await;
        let anon = Anonymizer::start(MixConfig::mix(any_port(), up.addr, 4, 200), BallotClock::new())
            .await
            .unwrap();
        let start = std::time::Instant::now();
        let resp = HttpClient::new().send(anon.addr(), echo("alone")).await.unwrap();
        let took = start.elapsed();
        assert_eq!(resp.body, "alone");
        assert!(took >= Duration::from_millis(200), "{took:?}");
        assert!(took < Duration::from_millis(400), "{took:?}");
    }

    #[tokio::test]
    async fn mix_batches_are_shuffled() {
        let (up, seen) = upstream().await;
        let anon = Anonymizer::start(MixConfig::mix(any_port(), up.addr, 4, 5_000), BallotClock::new())
            .await
            .unwrap();
        let mut orders: HashMap<String, usize> = HashMap::new();
        for _ in 0..60 {
            seen.0.lock().unwrap().clear();
            let sends = ["A", "B", "C", "D"].map(|l| {
                let addr = anon.addr();
                tokio::spawn(async move { HttpClient::new().send(addr, echo(l)).await.unwrap() })
            });
            for s in sends {
                s.await.unwrap();
            }
            let order: String = seen
                .0
                .lock()
                .unwrap()
                .iter()
                .map(|(_, _, b)| String::from_utf8_lossy(b).into_owned())
                .collect();
            assert_eq!(order.len(), 4);
            *orders.entry(order).or_default() += 1;
        }
        assert!(orders.len() > 6, "only {} distinct orders", orders.len());
    }

    #[tokio::test]
    async fn unreachable_upstream_is_a_gateway_error() {
        let dead = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let anon = Anonymizer::start(MixConfig::nat(any_port(), dead), BallotClock::new())
            .await
            .unwrap();
        let resp = HttpClient::new().send(anon.addr(), echo("x")).await.unwrap();
        assert_eq!(resp.status, StatusCode::BAD_GATEWAY);
        assert_eq!(resp.json::<()>().unwrap_err().kind(), Some("upstream-unreachable"));
    }

    #[tokio::test]
    async fn cheating_needs_permit_and_logs_clients() {
        let dir = tempfile::tempdir().unwrap();
        let (up, _seen) = upstream().await;
        let mut config = MixConfig::nat(any_port(), up.addr);
        config.state_dir = Some(dir.path().to_owned());
        config.cheats.log_clients = true;
        if AdversaryPermit::from_env().is_none() {
            assert!(matches!(
                Anonymizer::start(config.clone(), BallotClock::new()).await,
                Err(AnonError::CheatRefused)
            ));
        }
        config.permit = Some(AdversaryPermit::simulation());
        let anon = Anonymizer::start(config, BallotClock::new()).await.unwrap();
        for _ in 0..3 {
            HttpClient::bound_to("127.0.0.9".parse().unwrap())
                .send(anon.addr(), echo("x"))
                .await
                .unwrap();
        }
        let log: Vec<ClientLogRecord> = adversary::read_jsonl(dir.path(), CLIENT_LOG_FILE);
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|r| r.client.ip() == "127.0.0.9".parse::<IpAddr>().unwrap()));
    }

    #[tokio::test]
    async fn honest_proxy_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let (up, _seen) = upstream().await;
        let mut config = MixConfig::nat(any_port(), up.addr);
        config.state_dir = Some(dir.path().to_owned());
        let anon = Anonymizer::start(config, BallotClock::new()).await.unwrap();
        HttpClient::new().send(anon.addr(), echo("x")).await.unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn tamper_flips_first_answer() {
        let body = Bytes::from_static(br#"{"vote":{"answers":[{"choice":0,"question_id":"q1"}],"ballot_id":"b1"}}"#);
        let out = tamper_vote(&body).unwrap();
        assert!(String::from_utf8_lossy(&out).contains("\"choice\":1"));
    }
}
