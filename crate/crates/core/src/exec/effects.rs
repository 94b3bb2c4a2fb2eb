use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ExecError;
use crate::events::{Channel, EventInstance};
use crate::expr::Value;
use crate::metrics::MetricsRecord;

/// A service call requested by an invoke action.
#[derive(Debug, Clone, PartialEq)]
pub struct InvokeRequest {
    pub instance: String,
    pub service_type: String,
    pub local: Option<bool>,
    pub properties: BTreeMap<String, Value>,
    pub input: BTreeMap<String, Value>,
}

/// Everything an instance does to the outside world goes through here. The
/// runtime supplies a real implementation; tests script one.
pub trait Effects {
    /// External and global raises.
    fn publish(&mut self, event: EventInstance) -> Result<(), ExecError>;
    fn invoke(&mut self, request: InvokeRequest) -> Result<BTreeMap<String, Value>, ExecError>;
    /// Arms a repeating timer; each expiry must come back as
    /// [`Instance::on_timer`](super::Instance::on_timer) with the same
    /// name and generation.
    fn start_timer(&mut self, name: &str, generation: u64, period: Duration);
    fn cancel_timer(&mut self, name: &str, generation: u64);
    fn trace(&mut self, record: TraceRecord);
    fn metric(&mut self, _record: MetricsRecord) {}
    /// Clock for trace records and raised events, in microseconds.
    fn now(&self) -> u64;
}

/// Observable execution record, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceRecord {
    Step { instance: String, at: u64, events: usize },
    EventHandled { instance: String, at: u64, event: String, channel: Channel, matched: bool },
    Transition {
        instance: String,
        at: u64,
        from: String,
        /// Absent for internal transitions.
        #[serde(skip_serializing_if = "Option::is_none")]
        to: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        event: Option<String>,
    },
    Action {
        instance: String,
        action: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        state: String,
        begin: u64,
        end: u64,
    },
    Raised { instance: String, at: u64, event: String, channel: Channel, data: BTreeMap<String, Value> },
    Terminated { instance: String, at: u64, state: String },
    Failed { instance: String, at: u64, error: String },
}

impl TraceRecord {
    pub fn instance(&self) -> &str {
        match self {
            TraceRecord::Step { instance, .. }
            | TraceRecord::EventHandled { instance, .. }
            | TraceRecord::Transition { instance, .. }
            | TraceRecord::Action { instance, .. }
            | TraceRecord::Raised { instance, .. }
            | TraceRecord::Terminated { instance, .. }
            | TraceRecord::Failed { instance, .. } => instance,
        }
    }
}

type ServiceFn = Box<dyn FnMut(&InvokeRequest) -> Result<BTreeMap<String, Value>, ExecError> + Send>;

/// In-memory effects with a manual clock: records everything and answers
/// invokes from registered closures.
#[derive(Default)]
pub struct ScriptedEffects {
    pub published: Vec<EventInstance>,
    pub invoked: Vec<InvokeRequest>,
    pub traces: Vec<TraceRecord>,
    pub metrics: Vec<MetricsRecord>,
    /// Armed timers: name → (generation, period).
    pub timers: BTreeMap<String, (u64, Duration)>,
    pub clock: u64,
    /// Clock advance per call to `now`; lets action intervals have width.
    pub tick: u64,
    services: BTreeMap<String, ServiceFn>,
    now_cell: std::cell::Cell<u64>,
    wall: Option<std::time::Instant>,
}

impl ScriptedEffects {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_service(
        mut self,
        service_type: &str,
        f: impl FnMut(&InvokeRequest) -> Result<BTreeMap<String, Value>, ExecError> + Send + 'static,
    ) -> Self {
        self.services.insert(service_type.to_string(), Box::new(f));
        self
    }

    /// Uses elapsed wall-clock time instead of the manual clock.
    pub fn with_wall_clock(mut self) -> Self {
        self.wall = Some(std::time::Instant::now());
        self
    }

    pub fn set_clock(&mut self, micros: u64) {
        self.clock = micros;
        self.now_cell.set(0);
    }

    /// Trace as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        self.traces.iter().map(|t| serde_json::to_string(t).expect("trace serializes") + "\n").collect()
    }

    pub fn transitions(&self) -> Vec<(String, Option<String>)> {
        self.traces
            .iter()
            .filter_map(|t| match t {
                TraceRecord::Transition { from, to, .. } => Some((from.clone(), to.clone())),
                _ => None,
            })
            .collect()
    }
}

impl Effects for ScriptedEffects {
    fn publish(&mut self, event: EventInstance) -> Result<(), ExecError> {
        self.published.push(event);
        Ok(())
    }

    fn invoke(&mut self, request: InvokeRequest) -> Result<BTreeMap<String, Value>, ExecError> {
        self.invoked.push(request.clone());
        match self.services.get_mut(&request.service_type) {
            Some(f) => f(&request),
            None => Err(ExecError::Service(format!("no implementation for `{}`", request.service_type))),
        }
    }

    fn start_timer(&mut self, name: &str, generation: u64, period: Duration) {
        self.timers.insert(name.to_string(), (generation, period));
    }

    fn cancel_timer(&mut self, name: &str, generation: u64) {
        if self.timers.get(name).is_some_and(|(g, _)| *g == generation) {
            self.timers.remove(name);
        }
    }

    fn trace(&mut self, record: TraceRecord) {
        self.traces.push(record);
    }

    fn metric(&mut self, record: MetricsRecord) {
        self.metrics.push(record);
    }

    fn now(&self) -> u64 {
        if let Some(start) = self.wall {
            return start.elapsed().as_micros() as u64;
        }
        let offset = self.now_cell.get();
        self.now_cell.set(offset + self.tick);
        self.clock + offset
    }
}
