//! Service invocation over HTTP and zero-dependency stub services.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::json;

use super::{Protocol, RuntimeError, ServiceImplementationDescription};
use crate::expr::Value;

pub const DEFAULT_INVOKE_TIMEOUT: Duration = Duration::from_secs(30);

/// Result of a successful invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub output: BTreeMap<String, Value>,
    pub latency: Duration,
}

/// HTTP client for service implementations.
#[derive(Clone)]
pub struct ServiceClient {
    agent: ureq::Agent,
    /// Added before every call to a non-local implementation.
    pub injected_latency: Duration,
}

impl ServiceClient {
    pub fn new(injected_latency: Duration, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        ServiceClient { agent, injected_latency }
    }

    /// POSTs `input` as a flat JSON object and reads the flat JSON object
    /// returned as output variables.
    pub fn invoke(
        &self,
        imp: &ServiceImplementationDescription,
        input: &BTreeMap<String, Value>,
    ) -> Result<Invocation, RuntimeError> {
        if imp.protocol != Protocol::Http {
            return Err(RuntimeError::UnsupportedProtocol(format!("{:?}", imp.protocol)));
        }
        let started = Instant::now();
        if !imp.local && !self.injected_latency.is_zero() {
            thread::sleep(self.injected_latency);
        }
        let body = serde_json::Value::Object(input.iter().map(|(k, v)| (k.clone(), v.to_json())).collect());
        let request = self.agent.post(&imp.endpoint).set("Content-Type", "application/json");
        let response = match request.send_string(&body.to_string()) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                return Err(RuntimeError::ServiceError { status, body: r.into_string().unwrap_or_default() })
            }
            Err(ureq::Error::Transport(t)) => return Err(transport_error(&imp.endpoint, t)),
        };
        let status = response.status();
        let text = response.into_string().map_err(|e| transport_io(&imp.endpoint, e))?;
        let json: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| RuntimeError::ServiceError { status, body: format!("invalid JSON response: {e}") })?;
        let serde_json::Value::Object(obj) = json else {
            return Err(RuntimeError::ServiceError { status, body: "response is not a JSON object".into() });
        };
        let output = obj.iter().map(|(k, v)| (k.clone(), Value::from_json(v))).collect();
        Ok(Invocation { output, latency: started.elapsed() })
    }
}

impl Default for ServiceClient {
    fn default() -> Self {
        Self::new(Duration::ZERO, DEFAULT_INVOKE_TIMEOUT)
    }
}

fn transport_error(endpoint: &str, t: ureq::Transport) -> RuntimeError {
    match std::error::Error::source(&t).and_then(|s| s.downcast_ref::<io::Error>()) {
        Some(e) if is_timeout(e) => RuntimeError::Timeout(endpoint.to_string()),
        _ => RuntimeError::ServiceUnreachable { endpoint: endpoint.to_string(), cause: t.to_string() },
    }
}

fn transport_io(endpoint: &str, e: io::Error) -> RuntimeError {
    if is_timeout(&e) {
        RuntimeError::Timeout(endpoint.to_string())
    } else {
        RuntimeError::ServiceUnreachable { endpoint: endpoint.to_string(), cause: e.to_string() }
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock)
}

/// Shorthand for a one-off call with no injected latency.
pub fn invoke_service(
    imp: &ServiceImplementationDescription,
    input: &BTreeMap<String, Value>,
) -> Result<Invocation, RuntimeError> {
    ServiceClient::default().invoke(imp, input)
}

/// Stub gate, light and detect services with a fixed artificial delay.
pub struct StubServices {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<thread::JoinHandle<()>>,
}

const STUB_WORKERS: usize = 8;

impl StubServices {
    /// `services` limits the routes served (`gate`, `light`, `detect`).
    pub fn start(addr: &str, delay: Duration, services: &[&str]) -> io::Result<StubServices> {
        let server = tiny_http::Server::http(addr).map_err(io::Error::other)?;
        let addr = server.server_addr().to_ip().ok_or_else(|| io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let enabled: Arc<Vec<String>> = Arc::new(services.iter().map(|s| s.to_string()).collect());
        let workers = (0..STUB_WORKERS)
            .map(|_| {
                let server = server.clone();
                let enabled = enabled.clone();
                thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        serve_stub(req, delay, &enabled);
                    }
                })
            })
            .collect();
        Ok(StubServices { server, addr, workers })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, service: &str) -> String {
        format!("http://{}/{service}", self.addr)
    }

    pub fn shutdown(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for StubServices {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn respond(req: tiny_http::Request, status: u16, body: serde_json::Value) {
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = req.respond(tiny_http::Response::from_string(body.to_string()).with_status_code(status).with_header(header));
}

fn serve_stub(mut req: tiny_http::Request, delay: Duration, enabled: &[String]) {
    let route = req.url().trim_start_matches('/').to_string();
    if route == "healthz" {
        return respond(req, 200, json!({"ok": true}));
    }
    if *req.method() != tiny_http::Method::Post || !enabled.contains(&route) {
        let error = format!("no route {}", req.url());
        return respond(req, 404, json!({ "error": error }));
    }
    let mut text = String::new();
    if req.as_reader().read_to_string(&mut text).is_err() {
        return respond(req, 400, json!({"error": "unreadable body"}));
    }
    let input: serde_json::Map<String, serde_json::Value> = match serde_json::from_str(&text) {
        Ok(serde_json::Value::Object(o)) => o,
        _ => return respond(req, 400, json!({"error": "body must be a JSON object"})),
    };
    if !delay.is_zero() {
        thread::sleep(delay);
    }
    let out = match route.as_str() {
        "gate" => json!({"ok": true, "position": input.get("position").cloned().unwrap_or(json!("down"))}),
        "light" => json!({"ok": true, "on": input.get("on").cloned().unwrap_or(json!(true))}),
        _ => json!({"detected": input.get("expected").and_then(|v| v.as_bool()).unwrap_or(true)}),
    };
    respond(req, 200, out)
}
