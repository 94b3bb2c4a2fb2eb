//! Runs an [`Instance`] on its own thread, fed by a channel inbox.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

use super::{Effects, Instance, InstanceStatus};
use crate::data::DataContext;
use crate::expr::Value;
use crate::events::{EventInstance, Inbox};

#[derive(Debug, Clone)]
pub enum InboxMessage {
    Event(EventInstance),
    Timer { name: String, generation: u64 },
    Stop,
}

/// Repeating timers that post [`InboxMessage::Timer`] into an inbox.
pub struct TimerSet {
    tx: Sender<InboxMessage>,
    running: HashMap<(String, u64), Arc<AtomicBool>>,
}

impl TimerSet {
    pub fn new(tx: Sender<InboxMessage>) -> Self {
        TimerSet { tx, running: HashMap::new() }
    }

    pub fn start(&mut self, name: &str, generation: u64, period: Duration) {
        let cancelled = Arc::new(AtomicBool::new(false));
        self.running.insert((name.to_string(), generation), cancelled.clone());
        let tx = self.tx.clone();
        let name = name.to_string();
        thread::spawn(move || {
            let mut due = Instant::now() + period;
            loop {
                let now = Instant::now();
                if due > now {
                    thread::sleep(due - now);
                }
                if cancelled.load(Ordering::SeqCst) {
                    break;
                }
                if tx.send(InboxMessage::Timer { name: name.clone(), generation }).is_err() {
                    break;
                }
                due += period;
            }
        });
    }

    pub fn cancel(&mut self, name: &str, generation: u64) {
        if let Some(flag) = self.running.remove(&(name.to_string(), generation)) {
            flag.store(true, Ordering::SeqCst);
        }
    }

    pub fn cancel_all(&mut self) {
        for (_, flag) in self.running.drain() {
            flag.store(true, Ordering::SeqCst);
        }
    }
}

impl Drop for TimerSet {
    fn drop(&mut self) {
        self.cancel_all();
    }
}

#[derive(Debug, Clone)]
struct Snapshot {
    status: InstanceStatus,
    active: Option<String>,
}

/// Control side of a running instance.
pub struct InstanceHandle {
    id: String,
    tx: Sender<InboxMessage>,
    depth: Arc<AtomicUsize>,
    handled: Arc<AtomicU64>,
    snapshot: Arc<Mutex<Snapshot>>,
    context: DataContext,
    join: Option<thread::JoinHandle<()>>,
}

impl InstanceHandle {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn sender(&self) -> Sender<InboxMessage> {
        self.tx.clone()
    }

    /// Bus-facing inbox; refuses events once the instance thread is gone.
    pub fn inbox(&self) -> Inbox {
        let tx = self.tx.clone();
        Arc::new(move |e| tx.send(InboxMessage::Event(e)).is_ok())
    }

    pub fn send(&self, event: EventInstance) -> bool {
        self.tx.send(InboxMessage::Event(event)).is_ok()
    }

    /// Events waiting in the inbox plus those still in E.
    pub fn queue_depth(&self) -> usize {
        self.tx.len() + self.depth.load(Ordering::Relaxed)
    }

    pub fn handled(&self) -> u64 {
        self.handled.load(Ordering::Relaxed)
    }

    pub fn status(&self) -> InstanceStatus {
        self.snapshot.lock().status.clone()
    }

    pub fn active_state(&self) -> Option<String> {
        self.snapshot.lock().active.clone()
    }

    /// Live view of the machine's local context.
    pub fn variables(&self) -> BTreeMap<String, Value> {
        self.context.snapshot()
    }

    pub fn is_finished(&self) -> bool {
        self.join.as_ref().map_or(true, |j| j.is_finished())
    }

    pub fn stop(&self) {
        let _ = self.tx.send(InboxMessage::Stop);
    }

    /// Polls until `pred` holds for the active state or `timeout` passes.
    pub fn wait_for_state(&self, pred: impl Fn(Option<&str>) -> bool, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if pred(self.active_state().as_deref()) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    pub fn join(mut self) {
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// Starts `instance` on a new thread. `make_effects` receives the inbox
/// sender so timers can post back into it. `on_exit` runs on the instance
/// thread after the instance stops for any reason.
pub fn spawn<F, X>(instance: Instance, make_effects: F, on_exit: X) -> InstanceHandle
where
    F: FnOnce(Sender<InboxMessage>) -> Box<dyn Effects + Send>,
    X: FnOnce(&Instance, &mut dyn Effects) + Send + 'static,
{
    let (tx, rx) = unbounded();
    spawn_on(instance, tx, rx, make_effects, on_exit)
}

/// As [`spawn`], reading from an inbox created beforehand so that it can be
/// attached to a transport before the instance starts.
pub fn spawn_on<F, X>(
    mut instance: Instance,
    tx: Sender<InboxMessage>,
    rx: Receiver<InboxMessage>,
    make_effects: F,
    on_exit: X,
) -> InstanceHandle
where
    F: FnOnce(Sender<InboxMessage>) -> Box<dyn Effects + Send>,
    X: FnOnce(&Instance, &mut dyn Effects) + Send + 'static,
{
    let depth = Arc::new(AtomicUsize::new(0));
    instance.set_depth_gauge(depth.clone());
    let handled = Arc::new(AtomicU64::new(0));
    let snapshot = Arc::new(Mutex::new(Snapshot { status: instance.status().clone(), active: None }));
    let mut fx = make_effects(tx.clone());
    let id = instance.id().to_string();
    let context = instance.machine_context().clone();
    let join = {
        let handled = handled.clone();
        let snapshot = snapshot.clone();
        thread::Builder::new()
            .name(format!("instance-{id}"))
            .spawn(move || {
                run(&mut instance, fx.as_mut(), &rx, &handled, &snapshot);
                on_exit(&instance, fx.as_mut());
            })
            .expect("spawn instance thread")
    };
    InstanceHandle { id, tx, depth, handled, snapshot, context, join: Some(join) }
}

fn run(
    instance: &mut Instance,
    fx: &mut dyn Effects,
    rx: &Receiver<InboxMessage>,
    handled: &AtomicU64,
    snapshot: &Mutex<Snapshot>,
) {
    let publish = |i: &Instance| {
        *snapshot.lock() = Snapshot { status: i.status().clone(), active: i.active_state().map(str::to_string) };
    };
    if let Err(e) = instance.start(fx) {
        log::error!("instance {} failed to start: {e}", instance.id());
    }
    publish(instance);
    while instance.is_alive() {
        let Ok(first) = rx.recv() else { break };
        let mut stop = false;
        for msg in std::iter::once(first).chain(rx.try_iter()) {
            match msg {
                InboxMessage::Event(e) => instance.enqueue(e),
                InboxMessage::Timer { name, generation } => {
                    if let Err(e) = instance.on_timer(&name, generation, fx) {
                        log::error!("instance {} failed in timer `{name}`: {e}", instance.id());
                    }
                }
                InboxMessage::Stop => stop = true,
            }
        }
        if stop {
            instance.stop(fx);
            break;
        }
        match instance.execute_step(fx) {
            Ok(n) => {
                handled.fetch_add(n as u64, Ordering::Relaxed);
            }
            Err(e) => log::error!("instance {} halted: {e}", instance.id()),
        }
        publish(instance);
    }
    publish(instance);
}
