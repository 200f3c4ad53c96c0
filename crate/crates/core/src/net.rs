//! HTTP plumbing shared by the services and the clients.
//!
//! The client side is a bare HTTP/1.1 connection per request, so the exact
//! header set on the wire is what the caller put there and the source address
//! can be pinned to a specific local IP.

use std::collections::BTreeMap;
use std::future::IntoFuture;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};

use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use bytes::Bytes;
use chrono::Duration;
use http::header::{CONTENT_TYPE, HOST};
use http::{HeaderMap, HeaderValue, Method, Request, StatusCode};
use http_body_util::{BodyExt, Full};
use hyper_util::rt::TokioIo;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::{TcpListener, TcpSocket};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::crypto::{self, KeyPair, PublicKey};
use crate::protocol::{to_canonical_json, ErrorBody, Timestamp};

/// Response header carrying the key-id of the answering server's signing key.
pub const KEY_ID_HEADER: &str = "x-key-id";
/// Request header carrying a hex-encoded [`AdminCredential`].
pub const ADMIN_HEADER: &str = "x-admin-credential";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("connecting to {0}: {1}")]
    Connect(SocketAddr, #[source] std::io::Error),
    #[error("http: {0}")]
    Http(String),
    #[error("{status}: {kind}: {message}")]
    Service {
        status: StatusCode,
        kind: String,
        message: String,
    },
    #[error("decoding response: {0}")]
    Decode(String),
}

impl NetError {
    /// Service error kind, e.g. `token-already-used`.
    pub fn kind(&self) -> Option<&str> {
        match self {
            NetError::Service { kind, .. } => Some(kind),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HttpResponse {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl HttpResponse {
    /// Decodes a 2xx JSON body, or turns an error body into [`NetError::Service`].
    pub fn json<T: DeserializeOwned>(&self) -> Result<T, NetError> {
        if !self.status.is_success() {
            let (kind, message) = match serde_json::from_slice::<ErrorBody>(&self.body) {
                Ok(b) => (b.error, b.message),
                Err(_) => (
                    "http-error".to_owned(),
                    String::from_utf8_lossy(&self.body).into_owned(),
                ),
            };
            return Err(NetError::Service {
                status: self.status,
                kind,
                message,
            });
        }
        serde_json::from_slice(&self.body).map_err(|e| NetError::Decode(e.to_string()))
    }

    pub fn key_id(&self) -> Option<&str> {
        self.headers.get(KEY_ID_HEADER).and_then(|v| v.to_str().ok())
    }
}

/// Outgoing request as it will appear on the wire (minus `host` and
/// `content-length`, which the transport adds).
#[derive(Clone, Debug)]
pub struct OutgoingRequest {
    pub method: Method,
    pub path: String,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl OutgoingRequest {
    pub fn get(path: &str) -> Self {
        Self {
            method: Method::GET,
            path: path.to_owned(),
            headers: HeaderMap::new(),
            body: Bytes::new(),
        }
    }

    pub fn post_json<T: Serialize>(path: &str, body: &T) -> Self {
        let mut headers = HeaderMap::new();
        headers.insert(CONTENT_TYPE, HeaderValue::from_static("application/json"));
        Self {
            method: Method::POST,
            path: path.to_owned(),
            headers,
            body: Bytes::from(to_canonical_json(body)),
        }
    }

    pub fn with_header(mut self, name: &'static str, value: &str) -> Self {
        self.headers.insert(name, HeaderValue::from_str(value).expect("header value is ASCII"));
        self
    }
}

/// Minimal HTTP/1.1 client: one connection per request, optional local bind
/// address, optional capture of every request body sent.
#[derive(Clone, Debug, Default)]
pub struct HttpClient {
    bind: Option<IpAddr>,
    capture: Option<Arc<Mutex<Vec<Bytes>>>>,
}

impl HttpClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bound_to(ip: IpAddr) -> Self {
        Self {
            bind: Some(ip),
            capture: None,
        }
    }

    pub fn with_bind(mut self, ip: Option<IpAddr>) -> Self {
        self.bind = ip;
        self
    }

    /// Records the body of every request sent from now on.
    pub fn capture(mut self, sink: Arc<Mutex<Vec<Bytes>>>) -> Self {
        self.capture = Some(sink);
        self
    }

    pub async fn send(&self, addr: SocketAddr, req: OutgoingRequest) -> Result<HttpResponse, NetError> {
        if let Some(sink) = &self.capture {
            sink.lock().unwrap().push(req.body.clone());
        }
        let socket = if addr.is_ipv4() { TcpSocket::new_v4() } else { TcpSocket::new_v6() }
            .map_err(|e| NetError::Connect(addr, e))?;
        if let Some(ip) = self.bind {
            socket
                .bind(SocketAddr::new(ip, 0))
                .map_err(|e| NetError::Connect(addr, e))?;
        }
        let stream = socket.connect(addr).await.map_err(|e| NetError::Connect(addr, e))?;
        let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
            .await
            .map_err(|e| NetError::Http(e.to_string()))?;
        let driver = tokio::spawn(conn);

        let mut builder = Request::builder().method(req.method).uri(&req.path);
        for (name, value) in &req.headers {
            builder = builder.header(name, value);
        }
        let request = builder
            .header(HOST, addr.to_string())
            .body(Full::new(req.body))
            .map_err(|e| NetError::Http(e.to_string()))?;
        let response = sender
            .send_request(request)
            .await
            .map_err(|e| NetError::Http(e.to_string()))?;
        let (parts, body) = response.into_parts();
        let body = body
            .collect()
            .await
            .map_err(|e| NetError::Http(e.to_string()))?
            .to_bytes();
        drop(sender);
        let _ = driver.await;
        Ok(HttpResponse {
            status: parts.status,
            headers: parts.headers,
            body,
        })
    }
}

/// A running axum service.
#[derive(Debug)]
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Waits until the server stops (it only stops on shutdown or error).
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

pub async fn serve(router: Router, listen: SocketAddr) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let server = axum::serve(
        listener,
        router.into_make_service_with_connect_info::<SocketAddr>(),
    )
    .with_graceful_shutdown(async move {
        let _ = rx.await;
    });
    let task = tokio::spawn(async move {
        let _ = server.into_future().await;
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        task: Some(task),
    })
}

/// Error response with a stable machine-readable kind.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: self.kind.to_owned(),
                message: self.message,
            }),
        )
            .into_response()
    }
}

/// Per-service counters of error kinds returned to callers.
#[derive(Clone, Debug, Default)]
pub struct ErrorTally(Arc<Mutex<BTreeMap<String, usize>>>);

impl ErrorTally {
    pub fn record(&self, kind: &str) {
        *self.0.lock().unwrap().entry(kind.to_owned()).or_default() += 1;
    }

    pub fn snapshot(&self) -> BTreeMap<String, usize> {
        self.0.lock().unwrap().clone()
    }
}

/// Manager authorization for an administrative endpoint: a signature by the
/// manager's key over the action name and a timestamp.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminCredential {
    pub key_id: String,
    pub action: String,
    pub at: Timestamp,
    #[serde(with = "hex")]
    pub signature: Vec<u8>,
}

/// How far an admin credential's timestamp may be from the server clock.
pub const ADMIN_CREDENTIAL_WINDOW_MINUTES: i64 = 10;

impl AdminCredential {
    fn signed_bytes(key_id: &str, action: &str, at: &Timestamp) -> Vec<u8> {
        format!("admin\n{key_id}\n{action}\n{at}").into_bytes()
    }

    pub fn issue(key: &KeyPair, action: &str, at: Timestamp) -> Self {
        Self {
            key_id: key.key_id().to_owned(),
            action: action.to_owned(),
            at,
            signature: crypto::sign(&Self::signed_bytes(key.key_id(), action, &at), key),
        }
    }

    pub fn verify(&self, expected: &PublicKey, action: &str, now: &Timestamp) -> bool {
        let skew = (now.datetime() - self.at.datetime()).abs();
        self.key_id == expected.key_id()
            && self.action == action
            && skew <= Duration::minutes(ADMIN_CREDENTIAL_WINDOW_MINUTES)
            && crypto::verify(&Self::signed_bytes(&self.key_id, action, &self.at), &self.signature, expected)
    }

    pub fn to_header(&self) -> String {
        hex::encode(to_canonical_json(self))
    }

    pub fn from_header(value: &str) -> Option<Self> {
        serde_json::from_slice(&hex::decode(value).ok()?).ok()
    }

    pub fn from_headers(headers: &HeaderMap) -> Option<Self> {
        Self::from_header(headers.get(ADMIN_HEADER)?.to_str().ok()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::test_keys::key;

    #[test]
    fn admin_credentials_bind_key_action_and_time() {
        let now = Timestamp::now();
        let cred = AdminCredential::issue(&key(0), "export", now);
        assert!(cred.verify(key(0).public(), "export", &now));
        assert!(!cred.verify(key(1).public(), "export", &now));
        assert!(!cred.verify(key(0).public(), "seal", &now));
        let later = Timestamp::from_datetime(now.datetime() + Duration::hours(1));
        assert!(!cred.verify(key(0).public(), "export", &later));
        let round = AdminCredential::from_header(&cred.to_header()).unwrap();
        assert_eq!(round, cred);
    }
}
