//! The railway-crossing application: a controller driven by `seen` and
//! `notSeen` sensor events, with nested `gate` and `light` machines.
//!
//! Every controller state also has a self-transition on the event that does
//! not advance the cycle, and every controller transition performs the
//! per-event work: `invokes` service invocations and `writes` writes of the
//! event payload to the `log` variable.

use csm_core::csml::{description_from_json, CsmDescription};
use csm_core::runtime::{Job, ServiceImplementationDescription};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Placement {
    /// Local service implementations, `log` in the controller's local data.
    LocalLocal,
    /// Remote service implementations, `log` in the persistent store.
    RemotePersistent,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::LocalLocal => "localLocal",
            Placement::RemotePersistent => "remotePersistent",
        }
    }
}

/// Per-event work of a controller transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    pub invokes: usize,
    pub writes: usize,
}

impl Default for Work {
    fn default() -> Self {
        Work { invokes: 2, writes: 1 }
    }
}

fn invoke(service: &str, input: Json, placement: Placement) -> Json {
    let mut a = json!({"type": "invoke", "serviceType": service, "input": input});
    if placement == Placement::LocalLocal {
        a["local"] = json!(true);
    }
    a
}

fn controller(placement: Placement, work: Work) -> Json {
    let mut actions = Vec::new();
    for _ in 0..work.invokes {
        actions.push(invoke("detect", json!([{"name": "expected", "value": "true"}]), placement));
    }
    for _ in 0..work.writes {
        actions.push(json!({"type": "assign", "variable": {"name": "log"}, "value": "payload"}));
    }
    let step = |event: &str, target: &str, extra: Vec<Json>| {
        let mut acts = actions.clone();
        acts.extend(extra);
        json!({"event": event, "target": target, "actions": acts})
    };
    let raise = |name: &str| json!({"type": "raiseEvent", "event": {"name": name, "channel": "external"}});
    let count = json!({"type": "assign", "variable": {"name": "cycles"}, "value": "cycles + 1"});
    let log = json!({"name": "log", "value": "''"});
    let mut m = json!({
        "name": "controller",
        "localData": [{"name": "cycles", "value": "0"}],
        "states": [
            {"name": "idle", "initial": true,
             "on": [step("seen", "approaching", vec![raise("approaching")]), step("notSeen", "idle", vec![])]},
            {"name": "approaching",
             "on": [step("notSeen", "crossing", vec![]), step("seen", "approaching", vec![])]},
            {"name": "crossing",
             "on": [step("seen", "departing", vec![]), step("notSeen", "crossing", vec![])]},
            {"name": "departing",
             "on": [step("notSeen", "idle", vec![raise("leaving"), count]), step("seen", "departing", vec![])]}
        ],
        "stateMachines": [
            {"name": "gate", "states": [
                {"name": "up", "initial": true, "on": [{"event": "approaching", "target": "down",
                    "actions": [invoke("gate", json!([{"name": "position", "value": "'down'"}]), placement)]}]},
                {"name": "down", "on": [{"event": "leaving", "target": "up",
                    "actions": [invoke("gate", json!([{"name": "position", "value": "'up'"}]), placement)]}]}
            ]},
            {"name": "light", "states": [
                {"name": "off", "initial": true, "on": [{"event": "approaching", "target": "on",
                    "actions": [invoke("light", json!([{"name": "on", "value": "true"}]), placement)]}]},
                {"name": "on", "on": [{"event": "leaving", "target": "off",
                    "actions": [invoke("light", json!([{"name": "on", "value": "false"}]), placement)]}]}
            ]}
        ]
    });
    match placement {
        Placement::LocalLocal => m["localData"].as_array_mut().expect("array").push(log),
        Placement::RemotePersistent => m["persistentData"] = json!([log]),
    }
    m
}

pub fn description_json(placement: Placement, work: Work) -> Json {
    json!({
        "name": "railway",
        "memoryMode": "distributed",
        "stateMachines": [controller(placement, work)]
    })
}

pub fn description(placement: Placement, work: Work) -> CsmDescription {
    description_from_json(&description_json(placement, work)).expect("railway description is well formed")
}

/// Implementations of `gate`, `light` and `detect` served under `base_url`.
/// Local placement gets local implementations, remote placement remote ones.
pub fn catalog(base_url: &str, placement: Placement) -> Vec<ServiceImplementationDescription> {
    let local = placement == Placement::LocalLocal;
    ["gate", "light", "detect"]
        .iter()
        .map(|s| {
            let mut imp = ServiceImplementationDescription::http(s, &format!("{base_url}/{s}"), local);
            imp.latency_hint = Some(if local { 0.0 } else { 10.0 });
            imp
        })
        .collect()
}

pub fn controller_job(base_url: &str, placement: Placement, work: Work) -> Job {
    let mut job = Job::new(description(placement, work), "controller");
    job.service_implementations = catalog(base_url, placement);
    job
}
