//! Job placement: propose a job to every runtime, collect bids, award it to
//! the least-loaded eligible runtime and wait until it has started.
//!
//! The same protocol runs in-process ([`LocalNode`]) or over TCP
//! ([`CoordinatorServer`], [`join_coordinator`], [`submit_remote`]) with
//! length-prefixed JSON frames.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{select_runtime, Bid, Job, Runtime, RuntimeError};
use crate::csml::MemoryMode;
use crate::expr::Value;
use crate::wire::{read_frame, write_frame};

const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

/// Where one job ended up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Receipt {
    pub machine: String,
    pub instance: String,
    pub node: String,
    /// The instance and its nested instances.
    pub instances: Vec<String>,
}

/// A runtime as seen by the coordinator.
pub trait Node: Send + Sync {
    fn id(&self) -> &str;
    fn bid(&self, job: &Job) -> Result<Bid, RuntimeError>;
    fn award(&self, job: &Job, instance: &str) -> Result<Vec<String>, RuntimeError>;
}

/// An in-process runtime.
pub struct LocalNode(pub Arc<Runtime>);

impl Node for LocalNode {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn bid(&self, job: &Job) -> Result<Bid, RuntimeError> {
        Ok(self.0.bid(job))
    }

    fn award(&self, job: &Job, instance: &str) -> Result<Vec<String>, RuntimeError> {
        self.0.instantiate(job, instance)
    }
}

#[derive(Default)]
pub struct Coordinator {
    nodes: Mutex<BTreeMap<String, Arc<dyn Node>>>,
    counters: Mutex<HashMap<String, u64>>,
    placing: Mutex<()>,
}

impl Coordinator {
    pub fn new() -> Arc<Coordinator> {
        Arc::new(Self::default())
    }

    pub fn add_node(&self, node: Arc<dyn Node>) {
        self.nodes.lock().insert(node.id().to_string(), node);
    }

    pub fn remove_node(&self, id: &str) {
        self.nodes.lock().remove(id);
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.lock().keys().cloned().collect()
    }

    /// Places a job set. Instance ids are `<machine>-<n>`, numbered per
    /// machine name. A binding naming a machine of another job in the set
    /// is replaced by that job's instance id. Jobs of a shared-mode
    /// description are co-located on one runtime; distributed-mode jobs are
    /// placed one by one.
    pub fn submit(&self, jobs: &[Job]) -> Result<Vec<Receipt>, RuntimeError> {
        let _serial = self.placing.lock();
        for job in jobs {
            let report = job.validate();
            if !report.is_ok() {
                return Err(RuntimeError::ValidationFailed(report.to_string()));
            }
        }
        let ids: Vec<String> = {
            let mut counters = self.counters.lock();
            jobs.iter()
                .map(|j| {
                    let n = counters.entry(j.state_machine_name.clone()).or_insert(0);
                    *n += 1;
                    format!("{}-{n}", j.state_machine_name)
                })
                .collect()
        };
        let by_machine: HashMap<&str, &str> =
            jobs.iter().zip(&ids).map(|(j, id)| (j.state_machine_name.as_str(), id.as_str())).collect();
        let jobs: Vec<Job> = jobs
            .iter()
            .map(|j| {
                let mut j = j.clone();
                for b in &mut j.bindings {
                    if let Some(id) = by_machine.get(b.as_str()) {
                        *b = id.to_string();
                    }
                }
                j
            })
            .collect();

        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut shared: HashMap<&str, usize> = HashMap::new();
        for (i, j) in jobs.iter().enumerate() {
            if j.description.memory_mode == MemoryMode::Shared {
                if let Some(&g) = shared.get(j.description.name.as_str()) {
                    groups[g].push(i);
                    continue;
                }
                shared.insert(&j.description.name, groups.len());
            }
            groups.push(vec![i]);
        }

        let nodes: Vec<Arc<dyn Node>> = self.nodes.lock().values().cloned().collect();
        let mut receipts = Vec::new();
        for group in groups {
            let mut candidates: Vec<(String, usize)> = Vec::new();
            for node in &nodes {
                let mut hosted = 0;
                let mut eligible = true;
                for &i in &group {
                    match node.bid(&jobs[i]) {
                        Ok(b) => {
                            hosted = b.hosted;
                            eligible &= b.eligible;
                        }
                        Err(e) => {
                            log::warn!("runtime {} did not bid: {e}", node.id());
                            eligible = false;
                        }
                    }
                }
                if eligible {
                    candidates.push((node.id().to_string(), hosted));
                }
            }
            let machines = || group.iter().map(|&i| jobs[i].state_machine_name.clone()).collect::<Vec<_>>().join(", ");
            let chosen = select_runtime(candidates.iter().map(|(id, n)| (id.as_str(), *n)))
                .ok_or_else(|| RuntimeError::NoEligibleRuntime(machines()))?
                .to_string();
            let node = nodes.iter().find(|n| n.id() == chosen).expect("chosen among nodes");
            for &i in &group {
                let instances = node.award(&jobs[i], &ids[i])?;
                receipts.push(Receipt {
                    machine: jobs[i].state_machine_name.clone(),
                    instance: ids[i].clone(),
                    node: chosen.clone(),
                    instances,
                });
            }
        }
        Ok(receipts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Frame {
    Hello { node: String, attributes: BTreeMap<String, Value> },
    Submit { jobs: Vec<Job> },
    Placed { receipts: Vec<Receipt> },
    Error { code: String, detail: String },
    Propose { proposal: u64, job: Box<Job> },
    Bid { proposal: u64, bid: Bid },
    Award { proposal: u64, job: Box<Job>, instance: String },
    Started { proposal: u64, instances: Vec<String> },
    Failed { proposal: u64, code: String, detail: String },
    Terminated { instance: String, status: String },
}

fn error_parts(e: &RuntimeError) -> (String, String) {
    match e {
        RuntimeError::NoEligibleRuntime(d) => ("NoEligibleRuntime".into(), d.clone()),
        RuntimeError::ValidationFailed(d) => ("ValidationFailed".into(), d.clone()),
        RuntimeError::DuplicateInstance(d) => ("DuplicateInstance".into(), d.clone()),
        other => ("Error".into(), other.to_string()),
    }
}

fn error_from(code: &str, detail: String) -> RuntimeError {
    match code {
        "NoEligibleRuntime" => RuntimeError::NoEligibleRuntime(detail),
        "ValidationFailed" => RuntimeError::ValidationFailed(detail),
        "DuplicateInstance" => RuntimeError::DuplicateInstance(detail),
        _ => RuntimeError::Coordinator(detail),
    }
}

fn io_err(e: io::Error) -> RuntimeError {
    RuntimeError::Coordinator(e.to_string())
}

/// A runtime connected over TCP.
struct RemoteNode {
    id: String,
    writer: Mutex<TcpStream>,
    pending: Mutex<HashMap<u64, Sender<Frame>>>,
    next: AtomicU64,
}

impl RemoteNode {
    fn request(&self, make: impl FnOnce(u64) -> Frame) -> Result<Frame, RuntimeError> {
        let proposal = self.next.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = bounded(1);
        self.pending.lock().insert(proposal, tx);
        let sent = write_frame(&mut *self.writer.lock(), &make(proposal));
        let reply = sent.map_err(io_err).and_then(|_| {
            rx.recv_timeout(REPLY_TIMEOUT)
                .map_err(|_| RuntimeError::Coordinator(format!("runtime {} did not answer", self.id)))
        });
        self.pending.lock().remove(&proposal);
        reply
    }
}

impl Node for RemoteNode {
    fn id(&self) -> &str {
        &self.id
    }

    fn bid(&self, job: &Job) -> Result<Bid, RuntimeError> {
        match self.request(|proposal| Frame::Propose { proposal, job: Box::new(job.clone()) })? {
            Frame::Bid { bid, .. } => Ok(bid),
            other => Err(RuntimeError::Coordinator(format!("unexpected reply {other:?}"))),
        }
    }

    fn award(&self, job: &Job, instance: &str) -> Result<Vec<String>, RuntimeError> {
        let frame = self.request(|proposal| Frame::Award {
            proposal,
            job: Box::new(job.clone()),
            instance: instance.to_string(),
        })?;
        match frame {
            Frame::Started { instances, .. } => Ok(instances),
            Frame::Failed { code, detail, .. } => Err(error_from(&code, detail)),
            other => Err(RuntimeError::Coordinator(format!("unexpected reply {other:?}"))),
        }
    }
}

/// TCP front of a [`Coordinator`]. Runtimes announce themselves with a hello
/// frame; any other connection may submit job sets.
pub struct CoordinatorServer {
    addr: SocketAddr,
    coordinator: Arc<Coordinator>,
    stop: Arc<AtomicBool>,
    accept: Option<thread::JoinHandle<()>>,
}

impl CoordinatorServer {
    pub fn start(addr: impl ToSocketAddrs) -> io::Result<CoordinatorServer> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let coordinator = Coordinator::new();
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let coordinator = Arc::downgrade(&coordinator);
            let stop = stop.clone();
            thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let _ = conn.set_nodelay(true);
                    let coordinator = coordinator.clone();
                    thread::spawn(move || serve_connection(conn, coordinator));
                }
            })
        };
        Ok(CoordinatorServer { addr, coordinator, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn coordinator(&self) -> &Arc<Coordinator> {
        &self.coordinator
    }

    /// Blocks until [`shutdown`](Self::shutdown) is called from elsewhere.
    pub fn join(mut self) {
        if let Some(j) = self.accept.take() {
            let _ = j.join();
        }
    }

    pub fn shutdown(&mut self) {
        if !self.stop.swap(true, Ordering::SeqCst) {
            let _ = TcpStream::connect(self.addr);
        }
        if let Some(j) = self.accept.take() {
            let _ = j.join();
        }
    }
}

impl Drop for CoordinatorServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(mut conn: TcpStream, coordinator: Weak<Coordinator>) {
    let Ok(Some(first)) = read_frame::<_, Frame>(&mut conn) else { return };
    match first {
        Frame::Hello { node, attributes } => {
            let Some(c) = coordinator.upgrade() else { return };
            let Ok(writer) = conn.try_clone() else { return };
            let remote = Arc::new(RemoteNode {
                id: node.clone(),
                writer: Mutex::new(writer),
                pending: Mutex::new(HashMap::new()),
                next: AtomicU64::new(1),
            });
            log::info!("runtime {node} joined with attributes {attributes:?}");
            c.add_node(remote.clone());
            drop(c);
            while let Ok(Some(frame)) = read_frame::<_, Frame>(&mut conn) {
                match &frame {
                    Frame::Bid { proposal, .. } | Frame::Started { proposal, .. } | Frame::Failed { proposal, .. } => {
                        if let Some(tx) = remote.pending.lock().remove(proposal) {
                            let _ = tx.send(frame);
                        }
                    }
                    Frame::Terminated { instance, status } => log::info!("{instance} on {node}: {status}"),
                    other => log::warn!("unexpected frame from runtime {node}: {other:?}"),
                }
            }
            log::info!("runtime {node} left");
            if let Some(c) = coordinator.upgrade() {
                c.remove_node(&node);
            }
        }
        mut frame => loop {
            let reply = match frame {
                Frame::Submit { jobs } => match coordinator.upgrade() {
                    Some(c) => match c.submit(&jobs) {
                        Ok(receipts) => Frame::Placed { receipts },
                        Err(e) => {
                            let (code, detail) = error_parts(&e);
                            Frame::Error { code, detail }
                        }
                    },
                    None => return,
                },
                other => Frame::Error { code: "Error".into(), detail: format!("unexpected frame {other:?}") },
            };
            if write_frame(&mut conn, &reply).is_err() {
                return;
            }
            match read_frame::<_, Frame>(&mut conn) {
                Ok(Some(next)) => frame = next,
                _ => return,
            }
        },
    }
}

/// A runtime's membership with a remote coordinator. Dropping it leaves.
pub struct CoordinatorLink {
    stream: TcpStream,
    reader: Option<thread::JoinHandle<()>>,
}

impl CoordinatorLink {
    pub fn leave(mut self) {
        self.close();
    }

    fn close(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(j) = self.reader.take() {
            let _ = j.join();
        }
    }
}

impl Drop for CoordinatorLink {
    fn drop(&mut self) {
        self.close();
    }
}

/// Registers `runtime` with the coordinator at `addr` and answers its
/// proposals and awards until the link is dropped.
pub fn join_coordinator(runtime: Arc<Runtime>, addr: impl ToSocketAddrs) -> Result<CoordinatorLink, RuntimeError> {
    let mut stream = TcpStream::connect(addr).map_err(io_err)?;
    let _ = stream.set_nodelay(true);
    write_frame(
        &mut stream,
        &Frame::Hello { node: runtime.id().to_string(), attributes: runtime.attributes().clone() },
    )
    .map_err(io_err)?;
    let mut reader = stream.try_clone().map_err(io_err)?;
    let writer = Arc::new(Mutex::new(stream.try_clone().map_err(io_err)?));
    {
        let writer = writer.clone();
        runtime.on_finished(move |instance, status| {
            let frame = Frame::Terminated { instance: instance.to_string(), status: format!("{status:?}") };
            let _ = write_frame(&mut *writer.lock(), &frame);
        });
    }
    let join = thread::spawn(move || {
        while let Ok(Some(frame)) = read_frame::<_, Frame>(&mut reader) {
            let reply = match frame {
                Frame::Propose { proposal, job } => Frame::Bid { proposal, bid: runtime.bid(&job) },
                Frame::Award { proposal, job, instance } => match runtime.instantiate(&job, &instance) {
                    Ok(instances) => Frame::Started { proposal, instances },
                    Err(e) => {
                        let (code, detail) = error_parts(&e);
                        Frame::Failed { proposal, code, detail }
                    }
                },
                other => {
                    log::warn!("unexpected frame from coordinator: {other:?}");
                    continue;
                }
            };
            if write_frame(&mut *writer.lock(), &reply).is_err() {
                break;
            }
        }
    });
    Ok(CoordinatorLink { stream, reader: Some(join) })
}

/// Submits a job set to the coordinator at `addr`.
pub fn submit_remote(addr: impl ToSocketAddrs, jobs: &[Job]) -> Result<Vec<Receipt>, RuntimeError> {
    let mut stream = TcpStream::connect(addr).map_err(io_err)?;
    write_frame(&mut stream, &Frame::Submit { jobs: jobs.to_vec() }).map_err(io_err)?;
    match read_frame::<_, Frame>(&mut stream).map_err(io_err)? {
        Some(Frame::Placed { receipts }) => Ok(receipts),
        Some(Frame::Error { code, detail }) => Err(error_from(&code, detail)),
        Some(other) => Err(RuntimeError::Coordinator(format!("unexpected reply {other:?}"))),
        None => Err(RuntimeError::Coordinator("coordinator closed the connection".into())),
    }
}
