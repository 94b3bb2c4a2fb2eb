//! Deterministic replay on a virtual clock.
//!
//! Inputs are delivered at their timestamps; armed timers expire at their
//! virtual due times in between. The same class, inputs and instance id give
//! the same trace.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{ExecError, Instance, MachineClass, ScriptedEffects};
use crate::data::MemoryStore;
use crate::events::EventInstance;
use crate::expr::Value;

/// Outcome of [`replay`].
pub struct Replay {
    pub instance: Instance,
    pub effects: ScriptedEffects,
    /// Active configuration after every step.
    pub configurations: Vec<Vec<String>>,
    pub error: Option<ExecError>,
}

impl Replay {
    pub fn trace_jsonl(&self) -> String {
        self.effects.trace_jsonl()
    }
}

/// Runs a fresh instance of `class` against `inputs`, each a virtual time in
/// microseconds and an event. One step is executed per input and per timer
/// expiry. Stops at the first error.
pub fn replay(
    class: Arc<MachineClass>,
    id: &str,
    instance_data: BTreeMap<String, Value>,
    inputs: &[(u64, EventInstance)],
    effects: ScriptedEffects,
) -> Replay {
    let mut fx = effects;
    let mut instance = Instance::new(id, class, Vec::new(), Arc::new(MemoryStore::new()), instance_data);
    let mut configurations = Vec::new();
    let mut due: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let start_at = inputs.first().map_or(0, |(t, _)| *t);
    fx.set_clock(start_at);
    let mut error = instance.start(&mut fx).err();
    sync_timers(&fx, &mut due, start_at);
    configurations.push(instance.active_configuration());

    for (at, event) in inputs {
        if error.is_some() || !instance.is_alive() {
            break;
        }
        // Expire timers due before this input, earliest first.
        while let Some((name, t)) = next_due(&due, *at) {
            fx.set_clock(t);
            let (generation, period) = fx.timers[&name];
            due.insert(name.clone(), (generation, t + period.as_micros() as u64));
            let r = instance.on_timer(&name, generation, &mut fx).and_then(|_| instance.execute_step(&mut fx));
            sync_timers(&fx, &mut due, t);
            configurations.push(instance.active_configuration());
            if let Err(e) = r {
                error = Some(e);
                break;
            }
        }
        if error.is_some() {
            break;
        }
        fx.set_clock(*at);
        let mut e = event.clone();
        e.created_at = *at;
        instance.enqueue(e);
        let r = instance.execute_step(&mut fx);
        sync_timers(&fx, &mut due, *at);
        configurations.push(instance.active_configuration());
        if let Err(e) = r {
            error = Some(e);
        }
    }
    Replay { instance, effects: fx, configurations, error }
}

fn next_due(due: &BTreeMap<String, (u64, u64)>, limit: u64) -> Option<(String, u64)> {
    due.iter().filter(|(_, (_, t))| *t <= limit).min_by_key(|(n, (_, t))| (*t, (*n).clone())).map(|(n, (_, t))| (n.clone(), *t))
}

/// Follows timers armed or cancelled by the last call into the instance.
fn sync_timers(fx: &ScriptedEffects, due: &mut BTreeMap<String, (u64, u64)>, now: u64) {
    due.retain(|name, (generation, _)| fx.timers.get(name).is_some_and(|(g, _)| g == generation));
    for (name, (generation, period)) in &fx.timers {
        due.entry(name.clone()).or_insert((*generation, now + period.as_micros() as u64));
    }
}
