//! TCP event broker and its client.
//!
//! Every runtime keeps one connection to the broker. Requests carry a `seq`
//! and are answered by an `ack` frame; routed events arrive as `deliver`
//! frames naming the local recipients.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::{EventInstance, Inbox, Routing, Subscription, Target, Transport, TransportError};
use crate::wire::{read_frame, write_frame};

const ACK_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Frame {
    Attach { seq: u64, instance: String },
    Detach { seq: u64, instance: String },
    Register { seq: u64, subscription: Subscription },
    Unregister { seq: u64, subscriber: String },
    Publish { seq: u64, event: EventInstance },
    Peripheral { seq: u64, event: EventInstance, target: Option<String> },
    Ack {
        seq: u64,
        delivered: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unknown_target: Option<String>,
    },
    Deliver { to: Vec<String>, event: EventInstance },
}

type ConnId = u64;

#[derive(Default)]
struct BrokerState {
    routing: Routing,
    owner: HashMap<String, ConnId>,
    conns: HashMap<ConnId, Sender<Frame>>,
}

struct Shared {
    state: Mutex<BrokerState>,
    delayed: Option<Sender<(Instant, ConnId, Frame)>>,
    latency: Duration,
}

impl Shared {
    /// Groups recipients by connection and forwards one frame per connection.
    fn route(&self, ids: Vec<String>, event: &EventInstance) -> usize {
        let state = self.state.lock();
        let mut by_conn: HashMap<ConnId, Vec<String>> = HashMap::new();
        let mut n = 0;
        for id in ids {
            if let Some(c) = state.owner.get(&id) {
                by_conn.entry(*c).or_default().push(id);
                n += 1;
            }
        }
        let mut conns: Vec<_> = by_conn.into_iter().collect();
        conns.sort_by_key(|(c, _)| *c);
        for (conn, to) in conns {
            let frame = Frame::Deliver { to, event: event.clone() };
            match &self.delayed {
                Some(tx) => {
                    let _ = tx.send((Instant::now() + self.latency, conn, frame));
                }
                None => {
                    if let Some(tx) = state.conns.get(&conn) {
                        let _ = tx.send(frame);
                    }
                }
            }
        }
        n
    }
}

/// The broker process: one routing table shared by every connected runtime.
/// With a nonzero latency each delivery is held back by that much.
pub struct BrokerServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<thread::JoinHandle<()>>,
}

impl BrokerServer {
    pub fn start(addr: impl ToSocketAddrs, latency: Duration) -> io::Result<BrokerServer> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let delayed = (!latency.is_zero()).then(|| {
            let (tx, rx) = unbounded::<(Instant, ConnId, Frame)>();
            (tx, rx)
        });
        let shared = Arc::new(Shared {
            state: Mutex::new(BrokerState::default()),
            delayed: delayed.as_ref().map(|(tx, _)| tx.clone()),
            latency,
        });
        if let Some((_, rx)) = delayed {
            let shared = Arc::downgrade(&shared);
            thread::Builder::new().name("broker-delay".into()).spawn(move || {
                // Constant latency keeps due times in arrival order.
                for (due, conn, frame) in rx {
                    let now = Instant::now();
                    if due > now {
                        thread::sleep(due - now);
                    }
                    let Some(shared) = shared.upgrade() else { break };
                    let tx = shared.state.lock().conns.get(&conn).cloned();
                    if let Some(tx) = tx {
                        let _ = tx.send(frame);
                    }
                }
            })?;
        }
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let stop = stop.clone();
            thread::Builder::new().name("broker-accept".into()).spawn(move || {
                let mut next_id: ConnId = 0;
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    next_id += 1;
                    let shared = shared.clone();
                    let id = next_id;
                    thread::spawn(move || {
                        if let Err(e) = serve(conn, id, &shared) {
                            log::debug!("broker connection {id} closed: {e}");
                        }
                        let mut s = shared.state.lock();
                        s.conns.remove(&id);
                        let gone: Vec<String> =
                            s.owner.iter().filter(|(_, c)| **c == id).map(|(i, _)| i.clone()).collect();
                        for i in gone {
                            s.owner.remove(&i);
                            s.routing.detach(&i);
                        }
                    });
                }
            })?
        };
        Ok(BrokerServer { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

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

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(conn: TcpStream, id: ConnId, shared: &Shared) -> io::Result<()> {
    conn.set_nodelay(true)?;
    let mut reader = BufReader::new(conn.try_clone()?);
    let (tx, rx) = unbounded::<Frame>();
    {
        let mut writer = BufWriter::new(conn);
        thread::spawn(move || {
            for frame in rx {
                if write_frame(&mut writer, &frame).is_err() {
                    break;
                }
            }
        });
    }
    shared.state.lock().conns.insert(id, tx.clone());
    let ack = |seq, delivered| Frame::Ack { seq, delivered, error: None, unknown_target: None };
    while let Some(frame) = read_frame::<_, Frame>(&mut reader)? {
        let reply = match frame {
            Frame::Attach { seq, instance } => {
                let mut s = shared.state.lock();
                s.routing.attach(&instance);
                s.owner.insert(instance, id);
                ack(seq, 0)
            }
            Frame::Detach { seq, instance } => {
                let mut s = shared.state.lock();
                s.routing.detach(&instance);
                s.owner.remove(&instance);
                ack(seq, 0)
            }
            Frame::Register { seq, subscription } => {
                shared.state.lock().routing.register(subscription);
                ack(seq, 0)
            }
            Frame::Unregister { seq, subscriber } => {
                shared.state.lock().routing.unregister(&subscriber);
                ack(seq, 0)
            }
            Frame::Publish { seq, event } => {
                let ids = shared.state.lock().routing.recipients(&event);
                match ids {
                    Ok(ids) => ack(seq, shared.route(ids, &event)),
                    Err(e) => Frame::Ack { seq, delivered: 0, error: Some(e.to_string()), unknown_target: None },
                }
            }
            Frame::Peripheral { seq, event, target } => {
                let target = target.map_or(Target::All, Target::Instance);
                let ids = shared.state.lock().routing.targets(&target);
                match ids {
                    Ok(ids) => ack(seq, shared.route(ids, &event)),
                    Err(TransportError::UnknownTarget(t)) => {
                        Frame::Ack { seq, delivered: 0, error: None, unknown_target: Some(t) }
                    }
                    Err(e) => Frame::Ack { seq, delivered: 0, error: Some(e.to_string()), unknown_target: None },
                }
            }
            Frame::Ack { .. } | Frame::Deliver { .. } => {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "unexpected frame from client"));
            }
        };
        if tx.send(reply).is_err() {
            break;
        }
    }
    Ok(())
}

struct ClientShared {
    inboxes: RwLock<HashMap<String, Inbox>>,
    pending: Mutex<HashMap<u64, Sender<Frame>>>,
    dropped: AtomicU64,
    closed: AtomicBool,
}

/// A runtime's connection to a [`BrokerServer`].
pub struct RemoteBus {
    socket: TcpStream,
    writer: Mutex<BufWriter<TcpStream>>,
    seq: AtomicU64,
    shared: Arc<ClientShared>,
}

impl RemoteBus {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<RemoteBus, TransportError> {
        let unavailable = |e: io::Error| TransportError::Unavailable(e.to_string());
        let conn = TcpStream::connect(addr).map_err(unavailable)?;
        conn.set_nodelay(true).map_err(unavailable)?;
        let mut reader = BufReader::new(conn.try_clone().map_err(unavailable)?);
        let shared = Arc::new(ClientShared {
            inboxes: RwLock::default(),
            pending: Mutex::default(),
            dropped: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        });
        {
            let shared = shared.clone();
            thread::Builder::new()
                .name("bus-reader".into())
                .spawn(move || {
                    while let Ok(Some(frame)) = read_frame::<_, Frame>(&mut reader) {
                        match frame {
                            Frame::Ack { seq, .. } => {
                                if let Some(tx) = shared.pending.lock().remove(&seq) {
                                    let _ = tx.send(frame);
                                }
                            }
                            Frame::Deliver { to, event } => {
                                let inboxes = shared.inboxes.read();
                                for id in to {
                                    let ok = inboxes.get(&id).is_some_and(|inbox| inbox(event.clone()));
                                    if !ok {
                                        shared.dropped.fetch_add(1, Ordering::Relaxed);
                                    }
                                }
                            }
                            _ => log::warn!("broker sent an unexpected frame"),
                        }
                    }
                    shared.closed.store(true, Ordering::SeqCst);
                    shared.pending.lock().clear();
                })
                .map_err(unavailable)?;
        }
        let socket = conn.try_clone().map_err(unavailable)?;
        Ok(RemoteBus { socket, writer: Mutex::new(BufWriter::new(conn)), seq: AtomicU64::new(1), shared })
    }

    fn request(&self, make: impl FnOnce(u64) -> Frame) -> Result<usize, TransportError> {
        if self.shared.closed.load(Ordering::SeqCst) {
            return Err(TransportError::Unavailable("broker connection closed".into()));
        }
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let (tx, rx): (Sender<Frame>, Receiver<Frame>) = bounded(1);
        self.shared.pending.lock().insert(seq, tx);
        let sent = write_frame(&mut *self.writer.lock(), &make(seq));
        if let Err(e) = sent {
            self.shared.pending.lock().remove(&seq);
            return Err(TransportError::Unavailable(e.to_string()));
        }
        match rx.recv_timeout(ACK_TIMEOUT) {
            Ok(Frame::Ack { unknown_target: Some(t), .. }) => Err(TransportError::UnknownTarget(t)),
            Ok(Frame::Ack { error: Some(e), .. }) => Err(TransportError::Unavailable(e)),
            Ok(Frame::Ack { delivered, .. }) => Ok(delivered),
            Ok(_) => Err(TransportError::Unavailable("malformed ack".into())),
            Err(_) => {
                self.shared.pending.lock().remove(&seq);
                Err(TransportError::Unavailable("no ack from broker".into()))
            }
        }
    }
}

impl Drop for RemoteBus {
    fn drop(&mut self) {
        let _ = self.socket.shutdown(std::net::Shutdown::Both);
    }
}

impl Transport for RemoteBus {
    fn attach(&self, instance: &str, inbox: Inbox) -> Result<(), TransportError> {
        self.shared.inboxes.write().insert(instance.to_string(), inbox);
        self.request(|seq| Frame::Attach { seq, instance: instance.to_string() }).map(|_| ())
    }

    fn detach(&self, instance: &str) -> Result<(), TransportError> {
        self.shared.inboxes.write().remove(instance);
        self.request(|seq| Frame::Detach { seq, instance: instance.to_string() }).map(|_| ())
    }

    fn register(&self, sub: Subscription) -> Result<(), TransportError> {
        self.request(|seq| Frame::Register { seq, subscription: sub }).map(|_| ())
    }

    fn unregister(&self, subscriber: &str) -> Result<(), TransportError> {
        self.request(|seq| Frame::Unregister { seq, subscriber: subscriber.to_string() }).map(|_| ())
    }

    fn publish(&self, event: EventInstance) -> Result<usize, TransportError> {
        if event.channel == super::Channel::Peripheral {
            return Err(TransportError::PeripheralPublish);
        }
        self.request(|seq| Frame::Publish { seq, event })
    }

    fn inject_peripheral(&self, event: EventInstance, target: Target) -> Result<usize, TransportError> {
        // Locally hosted targets skip the broker hop.
        if let Target::Instance(id) = &target {
            if let Some(inbox) = self.shared.inboxes.read().get(id) {
                return Ok(usize::from(inbox(event)));
            }
        }
        let target = match target {
            Target::All => None,
            Target::Instance(id) => Some(id),
        };
        self.request(|seq| Frame::Peripheral { seq, event, target })
    }

    fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }
}
