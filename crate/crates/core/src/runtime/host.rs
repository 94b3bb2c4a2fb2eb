//! A runtime process: hosts instances and connects them to the transport,
//! the persistent store, service implementations and the metrics stream.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

use super::service::ServiceClient;
use super::{evaluate_eligibility, select_implementation, Job, RuntimeError, ServiceImplementationDescription};
use crate::csml::MemoryMode;
use crate::data::{chain_for_component, DataContext, PersistentStore};
use crate::events::{EventInstance, Subscription, Target, Transport};
use crate::exec::{
    spawn_on, Effects, ExecError, InboxMessage, Instance, InstanceHandle, InstanceStatus, InvokeRequest, MachineClass,
    TimerSet, TraceRecord,
};
use crate::expr::Value;
use crate::metrics::{now_micros, MetricKind, MetricsRecord, MetricsSink};

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub node_id: String,
    pub attributes: BTreeMap<String, Value>,
    /// Network latency added to every call to a non-local service.
    pub injected_latency: Duration,
    pub invoke_timeout: Duration,
    /// Period of queue-depth and throughput samples; `None` disables them.
    pub sample_period: Option<Duration>,
}

impl RuntimeConfig {
    pub fn new(node_id: &str) -> Self {
        RuntimeConfig {
            node_id: node_id.to_string(),
            attributes: BTreeMap::new(),
            injected_latency: Duration::ZERO,
            invoke_timeout: super::service::DEFAULT_INVOKE_TIMEOUT,
            sample_period: None,
        }
    }

    pub fn attribute(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.attributes.insert(name.to_string(), value.into());
        self
    }
}

/// A runtime's answer to a placement proposal.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Bid {
    pub node: String,
    pub eligible: bool,
    pub hosted: usize,
}

struct Hosted {
    handle: InstanceHandle,
    /// Handled count at the previous throughput sample.
    sampled: u64,
}

pub struct Runtime {
    config: RuntimeConfig,
    transport: Arc<dyn Transport>,
    store: Arc<dyn PersistentStore>,
    metrics: Arc<dyn MetricsSink>,
    client: ServiceClient,
    hosted: Mutex<BTreeMap<String, Hosted>>,
    roots: Mutex<HashMap<String, Vec<DataContext>>>,
    sampling: Arc<AtomicBool>,
    sampler: Mutex<Option<thread::JoinHandle<()>>>,
    finished: Arc<Mutex<Vec<FinishedHook>>>,
}

type FinishedHook = Arc<dyn Fn(&str, &InstanceStatus) + Send + Sync>;

impl Runtime {
    pub fn new(
        config: RuntimeConfig,
        transport: Arc<dyn Transport>,
        store: Arc<dyn PersistentStore>,
        metrics: Arc<dyn MetricsSink>,
    ) -> Arc<Runtime> {
        let client = ServiceClient::new(config.injected_latency, config.invoke_timeout);
        let rt = Arc::new(Runtime {
            config,
            transport,
            store,
            metrics,
            client,
            hosted: Mutex::new(BTreeMap::new()),
            roots: Mutex::new(HashMap::new()),
            sampling: Arc::new(AtomicBool::new(true)),
            sampler: Mutex::new(None),
            finished: Arc::new(Mutex::new(Vec::new())),
        });
        if let Some(period) = rt.config.sample_period {
            let weak = Arc::downgrade(&rt);
            let running = rt.sampling.clone();
            let join = thread::spawn(move || {
                let mut due = Instant::now() + period;
                while running.load(Ordering::SeqCst) {
                    let now = Instant::now();
                    if due > now {
                        thread::sleep((due - now).min(Duration::from_millis(50)));
                        continue;
                    }
                    due += period;
                    match weak.upgrade() {
                        Some(rt) => rt.sample(period),
                        None => break,
                    }
                }
            });
            *rt.sampler.lock() = Some(join);
        }
        rt
    }

    pub fn id(&self) -> &str {
        &self.config.node_id
    }

    pub fn attributes(&self) -> &BTreeMap<String, Value> {
        &self.config.attributes
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn store(&self) -> &Arc<dyn PersistentStore> {
        &self.store
    }

    /// Instances, nested ones included, that have not finished.
    pub fn hosted_count(&self) -> usize {
        self.hosted.lock().values().filter(|h| !h.handle.is_finished()).count()
    }

    pub fn instance_ids(&self) -> Vec<String> {
        self.hosted.lock().keys().cloned().collect()
    }

    pub fn bid(&self, job: &Job) -> Bid {
        Bid {
            node: self.id().to_string(),
            eligible: evaluate_eligibility(job, self.id(), self.attributes()),
            hosted: self.hosted_count(),
        }
    }

    pub fn status(&self, id: &str) -> Option<InstanceStatus> {
        self.hosted.lock().get(id).map(|h| h.handle.status())
    }

    pub fn active_state(&self, id: &str) -> Option<String> {
        self.hosted.lock().get(id).and_then(|h| h.handle.active_state())
    }

    pub fn variables(&self, id: &str) -> Option<BTreeMap<String, Value>> {
        self.hosted.lock().get(id).map(|h| h.handle.variables())
    }

    pub fn is_finished(&self, id: &str) -> Option<bool> {
        self.hosted.lock().get(id).map(|h| h.handle.is_finished())
    }

    pub fn handled(&self, id: &str) -> Option<u64> {
        self.hosted.lock().get(id).map(|h| h.handle.handled())
    }

    pub fn queue_depth(&self, id: &str) -> Option<usize> {
        self.hosted.lock().get(id).map(|h| h.handle.queue_depth())
    }

    /// Polls until the active state of `id` satisfies `pred`.
    pub fn wait_for_state(&self, id: &str, pred: impl Fn(Option<&str>) -> bool, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if pred(self.active_state(id).as_deref()) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    /// Delivers a peripheral event through the transport.
    pub fn inject(&self, event: EventInstance, target: Target) -> Result<usize, RuntimeError> {
        Ok(self.transport.inject_peripheral(event, target)?)
    }

    /// Creates and starts the job's machine as instance `id`, together with
    /// its nested machines (`id/nested`). Returns every instance id started.
    pub fn instantiate(self: &Arc<Self>, job: &Job, id: &str) -> Result<Vec<String>, RuntimeError> {
        let report = job.validate();
        if !report.is_ok() {
            return Err(RuntimeError::ValidationFailed(report.to_string()));
        }
        if self.hosted.lock().contains_key(id) {
            return Err(RuntimeError::DuplicateInstance(id.to_string()));
        }
        let class = MachineClass::compile(&job.description, &job.state_machine_name)?;
        let outer = self.root_contexts(job)?;
        let catalog = Arc::new(job.service_implementations.clone());

        // Build the whole tree first so every inbox is attached before any
        // instance starts raising events.
        let mut pending = Vec::new();
        let root = Instance::new(id, class.clone(), outer, self.store.clone(), job.instance_data.clone());
        self.build_tree(root, None, &job.bindings, &mut pending);

        let ids: Vec<String> = pending.iter().map(|p: &Pending| p.instance.id().to_string()).collect();
        for p in &pending {
            let tx = p.tx.clone();
            self.transport.attach(p.instance.id(), Arc::new(move |e| tx.send(InboxMessage::Event(e)).is_ok()))?;
            if !p.sources.is_empty() {
                self.transport.register(Subscription::to_sources(p.instance.id(), p.sources.clone()))?;
            }
        }
        let mut hosted = self.hosted.lock();
        for p in pending.into_iter().rev() {
            let handle = self.launch(p, catalog.clone());
            hosted.insert(handle.id().to_string(), Hosted { handle, sampled: 0 });
        }
        log::info!("runtime {} started {}", self.id(), ids.join(", "));
        Ok(ids)
    }

    fn root_contexts(&self, job: &Job) -> Result<Vec<DataContext>, RuntimeError> {
        let desc = &job.description;
        let mut roots = self.roots.lock();
        if let Some(r) = roots.get(&desc.name) {
            return Ok(r.clone());
        }
        // Declares the root's persistent data and, in shared mode, builds the
        // root local context every machine of the description shares.
        let chain = chain_for_component(desc, &[], self.store.clone()).map_err(ExecError::from)?;
        let frames = match desc.memory_mode {
            MemoryMode::Shared => chain.frames().to_vec(),
            MemoryMode::Distributed => Vec::new(),
        };
        roots.insert(desc.name.clone(), frames.clone());
        Ok(frames)
    }

    fn build_tree(&self, instance: Instance, parent: Option<&str>, bindings: &[String], out: &mut Vec<Pending>) {
        let (tx, rx) = unbounded();
        let id = instance.id().to_string();
        let nested = instance.class().nested.clone();
        let children: Vec<String> = nested.iter().map(|n| format!("{id}/{}", n.name)).collect();
        let mut sources: Vec<String> = bindings.to_vec();
        sources.extend(parent.map(str::to_string));
        sources.extend(children.iter().cloned());
        let outer = instance.context_for_nested();
        let index = out.len();
        out.push(Pending { instance, tx, rx, sources, child_tx: Vec::new() });
        for (class, child_id) in nested.into_iter().zip(children) {
            let child = Instance::new(child_id, class, outer.clone(), self.store.clone(), BTreeMap::new());
            let tx = self.build_tree_returning_tx(child, &id, out);
            out[index].child_tx.push(tx);
        }
    }

    fn build_tree_returning_tx(&self, child: Instance, parent: &str, out: &mut Vec<Pending>) -> Sender<InboxMessage> {
        let at = out.len();
        self.build_tree(child, Some(parent), &[], out);
        out[at].tx.clone()
    }

    fn launch(self: &Arc<Self>, p: Pending, catalog: Arc<Vec<ServiceImplementationDescription>>) -> InstanceHandle {
        let id = p.instance.id().to_string();
        let transport = self.transport.clone();
        let metrics = self.metrics.clone();
        let client = self.client.clone();
        let children = p.child_tx;
        let exit_transport = self.transport.clone();
        let hooks = self.finished.clone();
        spawn_on(
            p.instance,
            p.tx,
            p.rx,
            move |tx| {
                Box::new(RuntimeEffects { id, transport, metrics, client, catalog, timers: TimerSet::new(tx) })
                    as Box<dyn Effects + Send>
            },
            move |instance, _fx| {
                for tx in &children {
                    let _ = tx.send(InboxMessage::Stop);
                }
                let _ = exit_transport.unregister(instance.id());
                let _ = exit_transport.detach(instance.id());
                log::info!("instance {} finished: {:?}", instance.id(), instance.status());
                let hooks: Vec<FinishedHook> = hooks.lock().clone();
                for hook in hooks {
                    hook(instance.id(), instance.status());
                }
            },
        )
    }

    /// Emits one queue-depth and one throughput-window record per instance.
    pub fn sample(&self, window: Duration) {
        let mut hosted = self.hosted.lock();
        for (id, h) in hosted.iter_mut() {
            let handled = h.handle.handled();
            let delta = handled - h.sampled;
            h.sampled = handled;
            let window_ms = window.as_millis();
            self.metrics.record(MetricsRecord::new(MetricKind::QueueDepth, id, h.handle.queue_depth() as f64, "events"));
            self.metrics.record(
                MetricsRecord::new(MetricKind::ThroughputWindow, id, delta as f64, "events").label("windowMs", window_ms),
            );
        }
    }

    /// Called on the instance thread whenever an instance finishes.
    pub fn on_finished(&self, hook: impl Fn(&str, &InstanceStatus) + Send + Sync + 'static) {
        self.finished.lock().push(Arc::new(hook));
    }

    pub fn stop_instance(&self, id: &str) -> bool {
        match self.hosted.lock().get(id) {
            Some(h) => {
                h.handle.stop();
                true
            }
            None => false,
        }
    }

    /// Stops every instance, waits for their threads and flushes metrics.
    pub fn shutdown(&self) {
        self.shutdown_within(None);
    }

    /// As [`shutdown`](Self::shutdown), waiting at most `timeout` for
    /// instances busy with long steps. Returns whether all of them finished.
    pub fn shutdown_within(&self, timeout: Option<Duration>) -> bool {
        self.sampling.store(false, Ordering::SeqCst);
        if let Some(j) = self.sampler.lock().take() {
            let _ = j.join();
        }
        let hosted = std::mem::take(&mut *self.hosted.lock());
        for h in hosted.values() {
            h.handle.stop();
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut all = true;
        for (_, h) in hosted {
            match deadline {
                None => h.handle.join(),
                Some(d) => {
                    while !h.handle.is_finished() && Instant::now() < d {
                        thread::sleep(Duration::from_millis(5));
                    }
                    if h.handle.is_finished() {
                        h.handle.join();
                    } else {
                        all = false;
                    }
                }
            }
        }
        self.metrics.flush();
        all
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.sampling.store(false, Ordering::SeqCst);
    }
}

struct Pending {
    instance: Instance,
    tx: Sender<InboxMessage>,
    rx: Receiver<InboxMessage>,
    sources: Vec<String>,
    child_tx: Vec<Sender<InboxMessage>>,
}

struct RuntimeEffects {
    id: String,
    transport: Arc<dyn Transport>,
    metrics: Arc<dyn MetricsSink>,
    client: ServiceClient,
    catalog: Arc<Vec<ServiceImplementationDescription>>,
    timers: TimerSet,
}

impl Effects for RuntimeEffects {
    fn publish(&mut self, event: EventInstance) -> Result<(), ExecError> {
        self.transport.publish(event)?;
        Ok(())
    }

    fn invoke(&mut self, request: InvokeRequest) -> Result<BTreeMap<String, Value>, ExecError> {
        let service = |e: RuntimeError| ExecError::Service(e.to_string());
        let imp = select_implementation(&request.service_type, request.local, &request.properties, &self.catalog)
            .map_err(service)?;
        let done = self.client.invoke(imp, &request.input).map_err(service)?;
        self.metrics.record(
            MetricsRecord::new(MetricKind::InvokeLatency, &self.id, done.latency.as_secs_f64() * 1e6, "us")
                .label("local", imp.local)
                .label("serviceType", &request.service_type),
        );
        Ok(done.output)
    }

    fn start_timer(&mut self, name: &str, generation: u64, period: Duration) {
        self.timers.start(name, generation, period);
    }

    fn cancel_timer(&mut self, name: &str, generation: u64) {
        self.timers.cancel(name, generation);
    }

    fn trace(&mut self, record: TraceRecord) {
        if log::log_enabled!(log::Level::Trace) {
            log::trace!("{}", serde_json::to_string(&record).unwrap_or_default());
        }
    }

    fn metric(&mut self, record: MetricsRecord) {
        self.metrics.record(record);
    }

    fn now(&self) -> u64 {
        now_micros()
    }
}
