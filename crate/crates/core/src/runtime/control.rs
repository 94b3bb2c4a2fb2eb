//! HTTP control endpoint of a runtime process.
//!
//! - `POST /events` with `{name, data?, target?}` injects a peripheral event
//!   (`target` absent or `"*"` means every hosted instance).
//! - `GET /instances` lists hosted instances.
//! - `GET /healthz` reports liveness.
//! - `POST /shutdown` asks the process to stop.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::Deserialize;
use serde_json::json;

use super::{Runtime, RuntimeError};
use crate::events::{EventInstance, Target, TransportError};
use crate::expr::Value;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InjectRequest {
    name: String,
    #[serde(default)]
    data: BTreeMap<String, Value>,
    #[serde(default)]
    target: Option<String>,
}

pub struct ControlServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    worker: Option<thread::JoinHandle<()>>,
    shutdown_rx: Receiver<()>,
}

impl ControlServer {
    pub fn start(addr: &str, runtime: Arc<Runtime>) -> io::Result<ControlServer> {
        let server = tiny_http::Server::http(addr).map_err(io::Error::other)?;
        let addr = server.server_addr().to_ip().ok_or_else(|| io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let (tx, shutdown_rx) = bounded(1);
        let worker = {
            let server = server.clone();
            thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    handle(req, &runtime, &tx);
                }
            })
        };
        Ok(ControlServer { server, addr, worker: Some(worker), shutdown_rx })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Waits for `POST /shutdown`, at most `timeout` if given.
    pub fn wait_for_shutdown(&self, timeout: Option<Duration>) -> bool {
        match timeout {
            Some(t) => self.shutdown_rx.recv_timeout(t).is_ok(),
            None => self.shutdown_rx.recv().is_ok(),
        }
    }

    pub fn stop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn respond(req: tiny_http::Request, status: u16, body: serde_json::Value) {
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = req.respond(tiny_http::Response::from_string(body.to_string()).with_status_code(status).with_header(header));
}

fn handle(mut req: tiny_http::Request, runtime: &Runtime, shutdown: &Sender<()>) {
    use tiny_http::Method::{Get, Post};
    let url = req.url().to_string();
    match (req.method().clone(), url.as_str()) {
        (Get, "/healthz") => respond(req, 200, json!({"ok": true, "node": runtime.id(), "hosted": runtime.hosted_count()})),
        (Get, "/instances") => {
            let list: Vec<serde_json::Value> = runtime
                .instance_ids()
                .into_iter()
                .map(|id| {
                    json!({
                        "id": id,
                        "status": format!("{:?}", runtime.status(&id)),
                        "state": runtime.active_state(&id),
                        "handled": runtime.handled(&id),
                        "queueDepth": runtime.queue_depth(&id),
                    })
                })
                .collect();
            respond(req, 200, json!(list))
        }
        (Post, "/events") => {
            let mut text = String::new();
            if req.as_reader().read_to_string(&mut text).is_err() {
                return respond(req, 400, json!({"error": "unreadable body"}));
            }
            let body: InjectRequest = match serde_json::from_str(&text) {
                Ok(b) => b,
                Err(e) => return respond(req, 400, json!({"error": e.to_string()})),
            };
            let target = match body.target.as_deref() {
                None | Some("*") => Target::All,
                Some(id) => Target::Instance(id.to_string()),
            };
            match runtime.inject(EventInstance::peripheral(body.name, body.data), target) {
                Ok(n) => respond(req, 200, json!({"delivered": n})),
                Err(RuntimeError::Transport(TransportError::UnknownTarget(id))) => {
                    respond(req, 404, json!({"error": format!("unknown target instance `{id}`")}))
                }
                Err(e) => respond(req, 503, json!({"error": e.to_string()})),
            }
        }
        (Post, "/shutdown") => {
            let _ = shutdown.try_send(());
            respond(req, 200, json!({"ok": true}))
        }
        _ => respond(req, 404, json!({"error": format!("no route {url}")})),
    }
}
