//! TCP key-value backend for persistent data.
//!
//! Requests are frames `{"cmd": "GET" | "PUT" | "DEL", "name": .., "value": ..}`;
//! replies are `{"ok": bool, "found": bool, "value": .., "error": ..}`.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{MemoryStore, PersistentStore, StoreError};
use crate::expr::Value;
use crate::wire::{read_frame, write_frame};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "cmd")]
enum StoreRequest {
    #[serde(rename = "GET")]
    Get { name: String },
    #[serde(rename = "PUT")]
    Put { name: String, value: Value },
    #[serde(rename = "DEL")]
    Delete { name: String },
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StoreReply {
    ok: bool,
    #[serde(default)]
    found: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Serves a [`MemoryStore`] over TCP, one thread per connection.
pub struct StoreServer {
    addr: SocketAddr,
    backend: Arc<MemoryStore>,
    stop: Arc<AtomicBool>,
    accept: Option<thread::JoinHandle<()>>,
}

impl StoreServer {
    pub fn start(addr: impl ToSocketAddrs) -> io::Result<StoreServer> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let backend = Arc::new(MemoryStore::new());
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let backend = backend.clone();
            let stop = stop.clone();
            thread::Builder::new().name("store-accept".into()).spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let backend = backend.clone();
                    thread::spawn(move || {
                        if let Err(e) = serve_connection(conn, &backend) {
                            log::debug!("store connection closed: {e}");
                        }
                    });
                }
            })?
        };
        Ok(StoreServer { addr, backend, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn backend(&self) -> &Arc<MemoryStore> {
        &self.backend
    }

    /// Blocks until the accept loop ends (it never does unless shut down).
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StoreServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(conn: TcpStream, backend: &MemoryStore) -> io::Result<()> {
    conn.set_nodelay(true)?;
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut writer = BufWriter::new(conn);
    while let Some(req) = read_frame::<_, StoreRequest>(&mut reader)? {
        let reply = match req {
            StoreRequest::Get { name } => match backend.get(&name) {
                Ok(v) => StoreReply { ok: true, found: v.is_some(), value: v, error: None },
                Err(e) => StoreReply { error: Some(e.to_string()), ..Default::default() },
            },
            StoreRequest::Put { name, value } => match backend.put(&name, value) {
                Ok(()) => StoreReply { ok: true, found: true, ..Default::default() },
                Err(e) => StoreReply { error: Some(e.to_string()), ..Default::default() },
            },
            StoreRequest::Delete { name } => match backend.delete(&name) {
                Ok(found) => StoreReply { ok: true, found, ..Default::default() },
                Err(e) => StoreReply { error: Some(e.to_string()), ..Default::default() },
            },
        };
        write_frame(&mut writer, &reply)?;
    }
    Ok(())
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Connection {
    fn open(addr: SocketAddr) -> io::Result<Connection> {
        let conn = TcpStream::connect(addr)?;
        conn.set_nodelay(true)?;
        Ok(Connection { reader: BufReader::new(conn.try_clone()?), writer: BufWriter::new(conn) })
    }

    fn call(&mut self, req: &StoreRequest) -> io::Result<StoreReply> {
        write_frame(&mut self.writer, req)?;
        read_frame(&mut self.reader)?.ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "store closed"))
    }
}

/// Client for a [`StoreServer`]. Every operation first waits `latency`,
/// emulating a network hop.
pub struct RemoteStore {
    addr: SocketAddr,
    latency: Duration,
    conn: Mutex<Option<Connection>>,
}

impl RemoteStore {
    pub fn connect(addr: impl ToSocketAddrs, latency: Duration) -> Result<RemoteStore, StoreError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| StoreError::Unavailable(e.to_string()))?
            .next()
            .ok_or_else(|| StoreError::Unavailable("no address".into()))?;
        let conn = Connection::open(addr).map_err(|e| StoreError::Unavailable(e.to_string()))?;
        Ok(RemoteStore { addr, latency, conn: Mutex::new(Some(conn)) })
    }

    pub fn latency(&self) -> Duration {
        self.latency
    }

    fn call(&self, req: StoreRequest) -> Result<StoreReply, StoreError> {
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        let mut guard = self.conn.lock();
        // One reconnect attempt if the previous connection broke.
        for attempt in 0..2 {
            if guard.is_none() {
                *guard = Some(Connection::open(self.addr).map_err(|e| StoreError::Unavailable(e.to_string()))?);
            }
            match guard.as_mut().map(|c| c.call(&req)) {
                Some(Ok(reply)) if reply.ok => return Ok(reply),
                Some(Ok(reply)) => return Err(StoreError::Protocol(reply.error.unwrap_or_default())),
                Some(Err(e)) => {
                    *guard = None;
                    if attempt == 1 {
                        return Err(StoreError::Unavailable(e.to_string()));
                    }
                }
                None => unreachable!(),
            }
        }
        Err(StoreError::Unavailable(self.addr.to_string()))
    }
}

impl PersistentStore for RemoteStore {
    fn get(&self, name: &str) -> Result<Option<Value>, StoreError> {
        let reply = self.call(StoreRequest::Get { name: name.to_string() })?;
        Ok(reply.found.then(|| reply.value.unwrap_or(Value::Null)))
    }

    fn put(&self, name: &str, value: Value) -> Result<(), StoreError> {
        self.call(StoreRequest::Put { name: name.to_string(), value }).map(|_| ())
    }

    fn delete(&self, name: &str) -> Result<bool, StoreError> {
        self.call(StoreRequest::Delete { name: name.to_string() }).map(|r| r.found)
    }

    fn is_remote(&self) -> bool {
        true
    }
}
