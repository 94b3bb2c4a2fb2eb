use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::csml::{ActionDef, ActionKind, ActionRef, EventDef, GuardRef, TransitionDef, VariableDecl};
use crate::data::{ComponentData, ContextKind, DataContext, PersistentStore, ScopeChain, WriteTarget};
use crate::events::{Channel, EventInstance};
use crate::expr::{evaluate_guards, Value};
use crate::metrics::{MetricKind, MetricsRecord};

use super::{Effects, ExecError, InvokeRequest, MachineClass, TraceRecord};

/// Longest chain of always-transitions taken after one event.
pub const MAX_ALWAYS_CHAIN: usize = 1000;

const EVENT_FRAME: &str = "#event";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstanceStatus {
    Created,
    Running,
    /// Reached a terminal state.
    Terminated,
    /// Stopped from outside, e.g. because the parent terminated.
    Stopped,
    Failed(String),
}

#[derive(Debug, Clone)]
struct Timer {
    generation: u64,
    actions: Vec<ActionRef>,
}

/// One running state machine: its scope chain, input queue E and active
/// state. All side effects go through the [`Effects`] passed to each call, so
/// an instance is a plain synchronous value.
pub struct Instance {
    id: String,
    class: Arc<MachineClass>,
    chain: ScopeChain,
    machine_ctx: DataContext,
    outer: Vec<DataContext>,
    queue: VecDeque<EventInstance>,
    active: Option<String>,
    statics: HashMap<String, DataContext>,
    timers: BTreeMap<String, Timer>,
    next_generation: u64,
    status: InstanceStatus,
    depth: Option<Arc<AtomicUsize>>,
}

/// Stable seed for an instance's `rand()`.
pub fn seed_for(id: &str) -> u64 {
    // FNV-1a
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Instance {
    /// `outer` lists the enclosing contexts innermost first: the parent
    /// machine's local context for a nested machine, then further ancestors,
    /// then the root context in shared mode. `instance_data` pre-populates the
    /// machine's local context.
    pub fn new(
        id: impl Into<String>,
        class: Arc<MachineClass>,
        outer: Vec<DataContext>,
        store: Arc<dyn PersistentStore>,
        instance_data: BTreeMap<String, Value>,
    ) -> Instance {
        let id = id.into();
        let mut chain = ScopeChain::new(store).with_seed(seed_for(&id));
        for ctx in outer.iter().rev() {
            chain.push(ctx.clone());
        }
        let machine_ctx = DataContext::with_entries(ContextKind::Local, class.path.clone(), instance_data);
        Instance {
            id,
            class,
            chain,
            machine_ctx,
            outer,
            queue: VecDeque::new(),
            active: None,
            statics: HashMap::new(),
            timers: BTreeMap::new(),
            next_generation: 1,
            status: InstanceStatus::Created,
            depth: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn class(&self) -> &Arc<MachineClass> {
        &self.class
    }

    pub fn status(&self) -> &InstanceStatus {
        &self.status
    }

    pub fn is_alive(&self) -> bool {
        matches!(self.status, InstanceStatus::Running)
    }

    /// Θ as a list; it holds exactly one state once started.
    pub fn active_configuration(&self) -> Vec<String> {
        self.active.iter().cloned().collect()
    }

    pub fn active_state(&self) -> Option<&str> {
        self.active.as_deref()
    }

    pub fn chain(&self) -> &ScopeChain {
        &self.chain
    }

    /// The machine's own local context, shared with nested machines.
    pub fn machine_context(&self) -> &DataContext {
        &self.machine_ctx
    }

    /// Contexts a nested machine of this instance sees, innermost first.
    pub fn context_for_nested(&self) -> Vec<DataContext> {
        std::iter::once(self.machine_ctx.clone()).chain(self.outer.iter().cloned()).collect()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn pending_events(&self) -> impl Iterator<Item = &EventInstance> {
        self.queue.iter()
    }

    pub fn armed_timers(&self) -> Vec<String> {
        self.timers.keys().cloned().collect()
    }

    /// Shares the length of E through `gauge`.
    pub fn set_depth_gauge(&mut self, gauge: Arc<AtomicUsize>) {
        gauge.store(self.queue.len(), Ordering::Relaxed);
        self.depth = Some(gauge);
    }

    /// Appends to E; takes effect at the next step.
    pub fn enqueue(&mut self, event: EventInstance) {
        self.queue.push_back(event);
        if let Some(g) = &self.depth {
            g.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn dequeue(&mut self) -> Option<EventInstance> {
        let e = self.queue.pop_front();
        if let (Some(_), Some(g)) = (&e, &self.depth) {
            g.fetch_sub(1, Ordering::Relaxed);
        }
        e
    }

    fn guard<T>(&mut self, fx: &mut dyn Effects, r: Result<T, ExecError>) -> Result<T, ExecError> {
        if let Err(e) = &r {
            if !matches!(self.status, InstanceStatus::Failed(_)) {
                self.cancel_all_timers(fx);
                self.status = InstanceStatus::Failed(e.to_string());
                fx.trace(TraceRecord::Failed { instance: self.id.clone(), at: fx.now(), error: e.to_string() });
            }
        }
        r
    }

    /// Declares the machine's data, enters the initial state and follows
    /// always-transitions.
    pub fn start(&mut self, fx: &mut dyn Effects) -> Result<(), ExecError> {
        if self.status != InstanceStatus::Created {
            return Err(ExecError::NotAlive);
        }
        self.status = InstanceStatus::Running;
        let r = self.start_inner(fx);
        self.guard(fx, r)
    }

    fn start_inner(&mut self, fx: &mut dyn Effects) -> Result<(), ExecError> {
        let class = self.class.clone();
        self.chain.enter_with_locals(&class.path, ComponentData::of_machine(&class.def), None, self.machine_ctx.clone())?;
        let initial = class.initial_state().name.clone();
        self.enter_state(&initial, fx)?;
        self.always_chain(fx)
    }

    /// Stops from outside: timers are cancelled and no further actions run.
    pub fn stop(&mut self, fx: &mut dyn Effects) {
        if self.is_alive() || self.status == InstanceStatus::Created {
            self.cancel_all_timers(fx);
            self.status = InstanceStatus::Stopped;
        }
    }

    /// Drains E in FIFO order, handling each event. Events raised
    /// internally while draining are handled in the same step.
    pub fn execute_step(&mut self, fx: &mut dyn Effects) -> Result<usize, ExecError> {
        if !self.is_alive() {
            while self.dequeue().is_some() {}
            return Ok(0);
        }
        fx.trace(TraceRecord::Step { instance: self.id.clone(), at: fx.now(), events: self.queue.len() });
        let mut handled = 0;
        while self.is_alive() {
            let Some(event) = self.dequeue() else { break };
            let r = self.handle_event(event, fx);
            if let Err(e) = self.guard(fx, r) {
                while self.dequeue().is_some() {}
                return Err(e);
            }
            handled += 1;
        }
        if !self.is_alive() {
            while self.dequeue().is_some() {}
        }
        Ok(handled)
    }

    /// Handles one event: selects at most one on-transition, takes it, then
    /// follows always-transitions.
    pub fn handle_event(&mut self, event: EventInstance, fx: &mut dyn Effects) -> Result<(), ExecError> {
        if !self.is_alive() {
            return Err(ExecError::NotAlive);
        }
        let started = Instant::now();
        self.chain.push(DataContext::with_entries(ContextKind::Transient, EVENT_FRAME, event.data.clone()));
        let result = self.handle_bound(&event, fx);
        self.chain.leave(EVENT_FRAME);
        if result.is_ok() {
            let micros = started.elapsed().as_secs_f64() * 1e6;
            fx.metric(
                MetricsRecord::new(MetricKind::ResponseTime, &self.id, micros, "us")
                    .label("event", &event.name)
                    .label("channel", format!("{:?}", event.channel).to_lowercase()),
            );
        }
        result
    }

    fn handle_bound(&mut self, event: &EventInstance, fx: &mut dyn Effects) -> Result<(), ExecError> {
        let selected = self.select_on_transition(event)?;
        fx.trace(TraceRecord::EventHandled {
            instance: self.id.clone(),
            at: fx.now(),
            event: event.name.clone(),
            channel: event.channel,
            matched: selected.is_some(),
        });
        let stayed = match selected {
            Some(t) => {
                let internal = t.is_internal();
                self.take_transition(&t, Some(&event.name), fx)?;
                internal
            }
            None => true,
        };
        if stayed && self.is_alive() {
            self.run_while(fx)?;
        }
        self.always_chain(fx)
    }

    fn active_def(&self) -> Option<&crate::csml::StateDef> {
        self.active.as_deref().and_then(|s| self.class.state(s))
    }

    fn enabled(&self, transitions: &[&TransitionDef]) -> Result<Vec<TransitionDef>, ExecError> {
        let mut out = Vec::new();
        for t in transitions {
            let mut exprs = Vec::with_capacity(t.guards.len());
            for g in &t.guards {
                match g {
                    GuardRef::Inline(g) => exprs.push(self.class.expression(&g.expression)?),
                    GuardRef::Named(n) => return Err(ExecError::Class(format!("unresolved guard `{n}`"))),
                }
            }
            let ok = evaluate_guards(exprs.iter().map(|c| c.as_ref()), &self.chain).map_err(|error| {
                let source_text = t
                    .guards
                    .iter()
                    .map(|g| match g {
                        GuardRef::Inline(g) => g.expression.clone(),
                        GuardRef::Named(n) => n.clone(),
                    })
                    .collect::<Vec<_>>()
                    .join(" && ");
                ExecError::Guard { source_text, error }
            })?;
            if ok {
                out.push((*t).clone());
            }
        }
        Ok(out)
    }

    /// The single enabled on-transition for `event`, if any. Two or more is a
    /// conflict. The event payload must already be bound.
    pub fn select_on_transition(&self, event: &EventInstance) -> Result<Option<TransitionDef>, ExecError> {
        let Some(state) = self.active_def() else { return Ok(None) };
        let candidates: Vec<&TransitionDef> =
            state.on.iter().filter(|t| t.event.as_deref() == Some(event.name.as_str())).collect();
        let mut enabled = self.enabled(&candidates)?;
        match enabled.len() {
            0 => Ok(None),
            1 => Ok(enabled.pop()),
            count => Err(ExecError::TransitionConflict {
                state: state.name.clone(),
                event: Some(event.name.clone()),
                count,
            }),
        }
    }

    pub fn select_always_transition(&self) -> Result<Option<TransitionDef>, ExecError> {
        let Some(state) = self.active_def() else { return Ok(None) };
        let candidates: Vec<&TransitionDef> = state.always.iter().collect();
        let mut enabled = self.enabled(&candidates)?;
        match enabled.len() {
            0 => Ok(None),
            1 => Ok(enabled.pop()),
            count => Err(ExecError::TransitionConflict { state: state.name.clone(), event: None, count }),
        }
    }

    fn always_chain(&mut self, fx: &mut dyn Effects) -> Result<(), ExecError> {
        for _ in 0..MAX_ALWAYS_CHAIN {
            if !self.is_alive() {
                return Ok(());
            }
            match self.select_always_transition()? {
                Some(t) => self.take_transition(&t, None, fx)?,
                None => return Ok(()),
            }
        }
        Err(ExecError::AlwaysLoop { state: self.active.clone().unwrap_or_default(), limit: MAX_ALWAYS_CHAIN })
    }

    fn take_transition(&mut self, t: &TransitionDef, event: Option<&str>, fx: &mut dyn Effects) -> Result<(), ExecError> {
        let from = self.active.clone().unwrap_or_default();
        let Some(target) = t.target.clone() else {
            self.execute_actions(&t.actions, fx)?;
            fx.trace(TraceRecord::Transition {
                instance: self.id.clone(),
                at: fx.now(),
                from,
                to: None,
                event: event.map(str::to_string),
            });
            return Ok(());
        };
        // cancel, exit, transition actions, entry, while
        self.cancel_all_timers(fx);
        let exit = self.active_def().map(|s| s.exit.clone()).unwrap_or_default();
        self.execute_actions(&exit, fx)?;
        self.execute_actions(&t.actions, fx)?;
        self.chain.leave(&self.class.state_path(&from));
        fx.trace(TraceRecord::Transition {
            instance: self.id.clone(),
            at: fx.now(),
            from,
            to: Some(target.clone()),
            event: event.map(str::to_string),
        });
        self.enter_state(&target, fx)
    }

    fn enter_state(&mut self, name: &str, fx: &mut dyn Effects) -> Result<(), ExecError> {
        let class = self.class.clone();
        let state = class.state(name).ok_or_else(|| ExecError::Class(format!("no state `{name}`")))?;
        let existing = self.statics.get(name).cloned();
        if let Some(kept) = self.chain.enter_component(&class.state_path(name), ComponentData::of_state(state), existing)? {
            self.statics.insert(name.to_string(), kept);
        }
        self.active = Some(name.to_string());
        self.execute_actions(&state.entry, fx)?;
        if state.terminal {
            self.cancel_all_timers(fx);
            self.status = InstanceStatus::Terminated;
            fx.trace(TraceRecord::Terminated { instance: self.id.clone(), at: fx.now(), state: name.to_string() });
            return Ok(());
        }
        self.execute_actions(&state.while_actions, fx)?;
        self.execute_actions(&state.after, fx)
    }

    fn run_while(&mut self, fx: &mut dyn Effects) -> Result<(), ExecError> {
        let actions = self.active_def().map(|s| s.while_actions.clone()).unwrap_or_default();
        self.execute_actions(&actions, fx)
    }

    fn cancel_all_timers(&mut self, fx: &mut dyn Effects) {
        for (name, t) in std::mem::take(&mut self.timers) {
            fx.cancel_timer(&name, t.generation);
        }
    }

    /// A timer armed by a timeout action expired: its raise actions run now
    /// and their events join E. Stale generations are ignored.
    pub fn on_timer(&mut self, name: &str, generation: u64, fx: &mut dyn Effects) -> Result<(), ExecError> {
        if !self.is_alive() {
            return Ok(());
        }
        let Some(timer) = self.timers.get(name).filter(|t| t.generation == generation).cloned() else {
            return Ok(());
        };
        let r = self.execute_actions(&timer.actions, fx);
        self.guard(fx, r)
    }

    fn execute_actions(&mut self, actions: &[ActionRef], fx: &mut dyn Effects) -> Result<(), ExecError> {
        for a in actions {
            if !self.is_alive() {
                break;
            }
            match a {
                ActionRef::Inline(def) => self.execute_action(def, fx)?,
                ActionRef::Named(n) => return Err(ExecError::Class(format!("unresolved action `{n}`"))),
            }
        }
        Ok(())
    }

    fn eval(&self, source: &str) -> Result<Value, ExecError> {
        let expr = self.class.expression(source)?;
        Ok(self.chain.evaluate(&expr)?)
    }

    fn eval_decls(&self, decls: &[VariableDecl]) -> Result<BTreeMap<String, Value>, ExecError> {
        decls.iter().map(|d| Ok((d.name.clone(), self.eval(&d.value)?))).collect()
    }

    fn build_event(&self, def: &EventDef, extra: BTreeMap<String, Value>, fx: &dyn Effects) -> Result<EventInstance, ExecError> {
        let mut data = extra;
        data.extend(self.eval_decls(&def.data)?);
        Ok(EventInstance {
            name: def.name.clone(),
            channel: Channel::from(def.channel),
            data,
            source: Some(self.id.clone()),
            created_at: fx.now(),
        })
    }

    /// Internal events join this instance's E; the rest are published.
    fn raise(&mut self, event: EventInstance, fx: &mut dyn Effects) -> Result<(), ExecError> {
        fx.trace(TraceRecord::Raised {
            instance: self.id.clone(),
            at: event.created_at,
            event: event.name.clone(),
            channel: event.channel,
            data: event.data.clone(),
        });
        if event.channel == Channel::Internal {
            self.enqueue(event);
            Ok(())
        } else {
            fx.publish(event)
        }
    }

    fn record_write(&self, started: Instant, target: WriteTarget, fx: &mut dyn Effects) {
        let micros = started.elapsed().as_secs_f64() * 1e6;
        let (label, remote) = match target {
            WriteTarget::Persistent => ("persistent", self.chain.store().is_remote()),
            WriteTarget::Context(k) => (if k == ContextKind::Static { "static" } else { "local" }, false),
        };
        fx.metric(
            MetricsRecord::new(MetricKind::WriteLatency, &self.id, micros, "us")
                .label("target", label)
                .label("remote", remote),
        );
    }

    fn execute_action(&mut self, def: &ActionDef, fx: &mut dyn Effects) -> Result<(), ExecError> {
        let begin = fx.now();
        let mut follow_up: Vec<ActionRef> = Vec::new();
        match &def.kind {
            ActionKind::Invoke { service_type, local, input, done, properties } => {
                let request = InvokeRequest {
                    instance: self.id.clone(),
                    service_type: service_type.clone(),
                    local: *local,
                    properties: self.eval_decls(properties)?,
                    input: self.eval_decls(input)?,
                };
                let output = fx.invoke(request)?;
                for d in done {
                    let event = self.build_event(d, output.clone(), fx)?;
                    self.raise(event, fx)?;
                }
            }
            ActionKind::Create { variable, persistent } => {
                let v = self.eval(&variable.value)?;
                let t = Instant::now();
                let target = self.chain.create_variable(&variable.name, v, persistent.unwrap_or(false))?;
                self.record_write(t, target, fx);
            }
            ActionKind::Assign { variable, value } => {
                let v = self.eval(value)?;
                let t = Instant::now();
                let target = self.chain.assign_variable(&variable.name, v)?;
                self.record_write(t, target, fx);
            }
            ActionKind::Delete { variable } => {
                let t = Instant::now();
                let target = self.chain.delete_variable(&variable.name)?;
                self.record_write(t, target, fx);
            }
            ActionKind::Raise { event } => {
                let e = self.build_event(event, BTreeMap::new(), fx)?;
                self.raise(e, fx)?;
            }
            ActionKind::Timeout { delay, actions } => {
                let ms = self.eval(delay)?.as_f64().filter(|d| d.is_finite() && *d >= 0.0);
                let ms = ms.ok_or_else(|| ExecError::BadDelay(delay.clone()))?;
                let generation = self.next_generation;
                self.next_generation += 1;
                let name = def.name.clone().unwrap_or_else(|| format!("#timeout-{generation}"));
                if let Some(old) = self.timers.remove(&name) {
                    fx.cancel_timer(&name, old.generation);
                }
                self.timers.insert(name.clone(), Timer { generation, actions: actions.clone() });
                // A zero period would spin; one millisecond is the floor.
                fx.start_timer(&name, generation, Duration::from_secs_f64(ms.max(1.0) / 1000.0));
            }
            ActionKind::ResetTimeout { action } => match self.timers.remove(action) {
                Some(t) => fx.cancel_timer(action, t.generation),
                None if self.class.declares_timeout(action) => {}
                None => return Err(ExecError::UnknownTimeout(action.clone())),
            },
            ActionKind::Match { value, cases } => {
                let v = self.eval(value)?;
                for c in cases {
                    if v.loosely_equals(&self.eval(&c.case)?) {
                        follow_up.push(c.action.clone());
                    }
                }
            }
        }
        fx.trace(TraceRecord::Action {
            instance: self.id.clone(),
            action: def.type_name().to_string(),
            name: def.name.clone(),
            state: self.active.clone().unwrap_or_default(),
            begin,
            end: fx.now(),
        });
        // Case actions run after the match itself has completed.
        self.execute_actions(&follow_up, fx)
    }
}
