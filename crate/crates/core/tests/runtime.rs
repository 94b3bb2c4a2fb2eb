use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use csm_core::data::MemoryStore;
use csm_core::events::{EventInstance, LocalBus, Target, Transport};
use csm_core::exec::InstanceStatus;
use csm_core::metrics::{MemorySink, MetricKind};
use csm_core::runtime::{
    evaluate_eligibility, invoke_service, join_coordinator, select_implementation, select_runtime, submit_remote,
    ControlServer, Coordinator, CoordinatorServer, Job, LocalNode, Runtime, RuntimeConfig, RuntimeError,
    ServiceClient, ServiceImplementationDescription, StubServices,
};
use csm_core::{parse_description, Value};
use serde_json::json;

struct Capture(Mutex<Vec<String>>);

impl log::Log for Capture {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }
    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            self.0.lock().unwrap().push(r.args().to_string());
        }
    }
    fn flush(&self) {}
}

fn captured() -> &'static Capture {
    static LOGGER: OnceLock<&'static Capture> = OnceLock::new();
    LOGGER.get_or_init(|| {
        let c: &'static Capture = Box::leak(Box::new(Capture(Mutex::new(Vec::new()))));
        log::set_logger(c).expect("logger installed once");
        log::set_max_level(log::LevelFilter::Warn);
        c
    })
}

fn desc(json: serde_json::Value) -> csm_core::CsmDescription {
    parse_description(&json.to_string()).expect("test description parses")
}

/// `go` moves `a` to terminal `b`.
fn simple(name: &str, mode: &str, machines: &[&str]) -> csm_core::CsmDescription {
    let sms: Vec<_> = machines
        .iter()
        .map(|m| {
            json!({"name": m, "states": [
                {"name": "a", "initial": true, "on": [{"event": "go", "target": "b"}]},
                {"name": "b", "terminal": true}
            ]})
        })
        .collect();
    desc(json!({"name": name, "memoryMode": mode, "stateMachines": sms}))
}

fn attrs(pairs: &[(&str, &str)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), Value::from(*v))).collect()
}

struct Node {
    rt: Arc<Runtime>,
    sink: Arc<MemorySink>,
}

fn node(id: &str, attributes: &[(&str, &str)], bus: &Arc<LocalBus>) -> Node {
    let mut config = RuntimeConfig::new(id);
    config.attributes = attrs(attributes);
    let sink = Arc::new(MemorySink::new());
    let rt = Runtime::new(config, bus.clone(), Arc::new(MemoryStore::new()), sink.clone());
    Node { rt, sink }
}

fn cluster(nodes: &[&Node]) -> Arc<Coordinator> {
    let c = Coordinator::new();
    for n in nodes {
        c.add_node(Arc::new(LocalNode(n.rt.clone())));
    }
    c
}

fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    f()
}

fn eligibility_job(conditions: &[&str]) -> Job {
    let mut job = Job::new(simple("e", "distributed", &["m"]), "m");
    job.eligibility = conditions.iter().map(|c| c.to_string()).collect();
    job
}

#[test]
fn eligibility_matches_node_attributes() {
    let nantes = attrs(&[("site", "nantes")]);
    assert!(evaluate_eligibility(&eligibility_job(&["site == 'nantes'"]), "n1", &nantes));
    assert!(!evaluate_eligibility(&eligibility_job(&["site == 'paris'"]), "n1", &nantes));
    assert!(evaluate_eligibility(&eligibility_job(&[]), "n1", &BTreeMap::new()));
}

#[test]
fn eligibility_on_unknown_attribute_is_false_and_logged() {
    let log = captured();
    let job = eligibility_job(&["gpuCount > 0"]);
    assert!(!evaluate_eligibility(&job, "node-x", &attrs(&[("site", "nantes")])));
    let records = log.0.lock().unwrap();
    assert!(
        records.iter().any(|r| r.contains("node-x") && r.contains("gpuCount")),
        "no log record for the failed condition: {records:?}"
    );
}

#[test]
fn least_loaded_runtime_wins_ties_by_id() {
    assert_eq!(select_runtime([("A", 2), ("B", 0)]), Some("B"));
    assert_eq!(select_runtime([("B", 1), ("A", 1)]), Some("A"));
    assert_eq!(select_runtime([("only", 7)]), Some("only"));
    assert_eq!(select_runtime(std::iter::empty()), None);
}

fn light_catalog() -> Vec<ServiceImplementationDescription> {
    let mut remote = ServiceImplementationDescription::http("light", "http://cloud/light", false);
    remote.latency_hint = Some(10.0);
    let mut local = ServiceImplementationDescription::http("light", "http://localhost/light", true);
    local.latency_hint = Some(0.0);
    vec![remote, local]
}

#[test]
fn implementation_selection_examples() {
    let catalog = light_catalog();
    let none = BTreeMap::new();
    assert!(select_implementation("light", Some(true), &none, &catalog).unwrap().local);
    assert!(select_implementation("light", None, &none, &catalog).unwrap().local);
    assert_eq!(
        select_implementation("camera", None, &none, &catalog),
        Err(RuntimeError::NoImplementation("camera".into()))
    );
    let remote_only = &catalog[..1];
    assert_eq!(
        select_implementation("light", Some(true), &none, remote_only),
        Err(RuntimeError::NoLocalImplementation("light".into()))
    );
}

#[test]
fn implementation_ranking_falls_back_to_cost_then_order() {
    let mk = |endpoint: &str, latency: Option<f64>, cost: Option<f64>| {
        let mut i = ServiceImplementationDescription::http("s", endpoint, false);
        i.latency_hint = latency;
        i.cost_hint = cost;
        i
    };
    let none = BTreeMap::new();
    let catalog = vec![mk("u1", Some(5.0), Some(3.0)), mk("u2", Some(5.0), Some(1.0)), mk("u3", None, Some(0.0))];
    assert_eq!(select_implementation("s", None, &none, &catalog).unwrap().endpoint, "u2");
    let tied = vec![mk("first", Some(1.0), None), mk("second", Some(1.0), None)];
    assert_eq!(select_implementation("s", None, &none, &tied).unwrap().endpoint, "first");

    let mut fast = mk("fast", Some(1.0), None);
    fast.attributes.insert("region".into(), Value::from("eu"));
    let mut slow = mk("slow", Some(9.0), None);
    slow.attributes.insert("region".into(), Value::from("us"));
    let props: BTreeMap<String, Value> = [("region".to_string(), Value::from("us"))].into();
    assert_eq!(select_implementation("s", None, &props, &[fast, slow]).unwrap().endpoint, "slow");
}

#[test]
fn gate_service_round_trip() {
    let stubs = StubServices::start("127.0.0.1:0", Duration::ZERO, &["gate", "light", "detect"]).unwrap();
    let imp = ServiceImplementationDescription::http("gate", &stubs.url("gate"), false);
    let input: BTreeMap<String, Value> = [("position".to_string(), Value::from("down"))].into();
    let out = invoke_service(&imp, &input).unwrap().output;
    assert_eq!(out.get("ok"), Some(&Value::Bool(true)));
    assert_eq!(out.get("position"), Some(&Value::from("down")));
}

#[test]
fn stub_rejects_non_json_body_and_reports_health() {
    let stubs = StubServices::start("127.0.0.1:0", Duration::ZERO, &["gate"]).unwrap();
    let r = ureq::post(&stubs.url("gate")).send_string("not json");
    assert!(matches!(r, Err(ureq::Error::Status(400, _))));
    let health = ureq::get(&stubs.url("healthz")).call().unwrap().into_string().unwrap();
    assert!(health.contains("true"));
}

#[test]
fn light_stub_delay_is_observed() {
    let stubs = StubServices::start("127.0.0.1:0", Duration::from_millis(5), &["light"]).unwrap();
    let imp = ServiceImplementationDescription::http("light", &stubs.url("light"), true);
    let input: BTreeMap<String, Value> = [("on".to_string(), Value::Bool(true))].into();
    let done = invoke_service(&imp, &input).unwrap();
    assert!(done.latency >= Duration::from_millis(5));
    assert_eq!(done.output.get("on"), Some(&Value::Bool(true)));
}

fn closed_port_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}/gate")
}

#[test]
fn unreachable_service_is_reported() {
    let imp = ServiceImplementationDescription::http("gate", &closed_port_url(), false);
    let err = invoke_service(&imp, &BTreeMap::new()).unwrap_err();
    assert!(matches!(err, RuntimeError::ServiceUnreachable { .. }), "{err:?}");
}

/// One machine toggling `up`/`down` on `toggle`, invoking `gate` each time.
fn gate_job(endpoint: &str, local: Option<bool>) -> Job {
    let invoke = |pos: &str| {
        let mut a = json!({"type": "invoke", "serviceType": "gate",
                           "input": [{"name": "position", "value": format!("'{pos}'")}]});
        if let Some(l) = local {
            a["local"] = json!(l);
        }
        a
    };
    let d = desc(json!({"name": "g", "memoryMode": "distributed", "stateMachines": [{"name": "gate", "states": [
        {"name": "up", "initial": true, "on": [{"event": "toggle", "target": "down", "actions": [invoke("down")]}]},
        {"name": "down", "on": [{"event": "toggle", "target": "up", "actions": [invoke("up")]}]}
    ]}]}));
    let mut job = Job::new(d, "gate");
    job.service_implementations =
        vec![ServiceImplementationDescription::http("gate", endpoint, local == Some(true))];
    job
}

#[test]
fn failed_invocation_halts_the_instance() {
    let bus = Arc::new(LocalBus::new());
    let n = node("rt", &[], &bus);
    n.rt.instantiate(&gate_job(&closed_port_url(), None), "gate-1").unwrap();
    n.rt.inject(EventInstance::peripheral("toggle", BTreeMap::new()), Target::Instance("gate-1".into())).unwrap();
    assert!(wait_until(Duration::from_secs(5), || n.rt.is_finished("gate-1") == Some(true)));
    match n.rt.status("gate-1") {
        Some(InstanceStatus::Failed(msg)) => assert!(msg.contains("unreachable"), "{msg}"),
        other => panic!("expected failure, got {other:?}"),
    }
}

#[test]
fn injected_latency_shows_in_invoke_metrics() {
    let stubs = StubServices::start("127.0.0.1:0", Duration::ZERO, &["gate"]).unwrap();
    let remote = ServiceImplementationDescription::http("gate", &stubs.url("gate"), false);
    let local = ServiceImplementationDescription::http("gate", &stubs.url("gate"), true);
    let client = ServiceClient::new(Duration::from_millis(10), Duration::from_secs(5));
    assert!(client.invoke(&remote, &BTreeMap::new()).unwrap().latency >= Duration::from_millis(10));
    assert!(client.invoke(&local, &BTreeMap::new()).unwrap().latency < Duration::from_millis(10));

    let bus = Arc::new(LocalBus::new());
    let sink = Arc::new(MemorySink::new());
    let mut config = RuntimeConfig::new("rt");
    config.injected_latency = Duration::from_millis(10);
    let rt = Runtime::new(config, bus, Arc::new(MemoryStore::new()), sink.clone());
    rt.instantiate(&gate_job(&stubs.url("gate"), None), "gate-1").unwrap();
    rt.inject(EventInstance::peripheral("toggle", BTreeMap::new()), Target::Instance("gate-1".into())).unwrap();
    assert!(wait_until(Duration::from_secs(5), || !sink.of_kind(MetricKind::InvokeLatency).is_empty()));
    let m = &sink.of_kind(MetricKind::InvokeLatency)[0];
    assert!(m.value >= 10_000.0, "{m:?}");
    assert_eq!(m.unit, "us");
    assert_eq!(m.labels.get("local").map(String::as_str), Some("false"));
    rt.shutdown();
}

#[test]
fn placement_follows_eligibility() {
    let bus = Arc::new(LocalBus::new());
    let edge = node("rt-edge", &[("tier", "edge")], &bus);
    let cloud = node("rt-cloud", &[("tier", "cloud")], &bus);
    let c = cluster(&[&edge, &cloud]);
    let mut job = Job::new(simple("t", "distributed", &["m"]), "m");
    job.eligibility = vec!["tier == 'edge'".into()];
    let r = c.submit(&[job.clone()]).unwrap();
    assert_eq!(r[0].node, "rt-edge");
    assert_eq!(edge.rt.instance_ids(), vec![r[0].instance.clone()]);

    job.eligibility = vec!["tier == 'gpu'".into()];
    assert!(matches!(c.submit(&[job]), Err(RuntimeError::NoEligibleRuntime(_))));
}

#[test]
fn invalid_job_is_rejected_before_placement() {
    let bus = Arc::new(LocalBus::new());
    let a = node("rt-a", &[], &bus);
    let c = cluster(&[&a]);
    let job = Job::new(simple("t", "distributed", &["m"]), "missing");
    assert!(matches!(c.submit(&[job]), Err(RuntimeError::ValidationFailed(_))));
    assert!(a.rt.instance_ids().is_empty());
}

/// A controller with nested `gate` and `light`, shaped like the railway job.
fn nested_job() -> Job {
    let child = |name: &str| {
        json!({"name": name, "states": [
            {"name": "off", "initial": true, "on": [{"event": "approaching", "target": "on"}]},
            {"name": "on", "on": [{"event": "leaving", "target": "off"}]}
        ]})
    };
    let d = desc(json!({"name": "railway", "memoryMode": "distributed", "stateMachines": [{
        "name": "controller",
        "states": [
            {"name": "idle", "initial": true, "on": [{"event": "seen", "target": "busy",
                "actions": [{"type": "raiseEvent", "event": {"name": "approaching", "channel": "external"}}]}]},
            {"name": "busy", "on": [
                {"event": "notSeen", "target": "idle",
                 "actions": [{"type": "raiseEvent", "event": {"name": "leaving", "channel": "external"}}]},
                {"event": "halt", "target": "done"}]},
            {"name": "done", "terminal": true}
        ],
        "stateMachines": [child("gate"), child("light")]
    }]}));
    Job::new(d, "controller")
}

#[test]
fn nested_machines_start_together_and_follow_the_parent() {
    let bus = Arc::new(LocalBus::new());
    let a = node("rt-a", &[], &bus);
    let c = cluster(&[&a]);
    let r = c.submit(&[nested_job()]).unwrap();
    assert_eq!(r[0].instance, "controller-1");
    assert_eq!(r[0].instances, vec!["controller-1", "controller-1/gate", "controller-1/light"]);
    for id in &r[0].instances {
        assert!(wait_until(Duration::from_secs(2), || a.rt.status(id) == Some(InstanceStatus::Running)), "{id}");
    }
    let inject = |name: &str| {
        a.rt.inject(EventInstance::peripheral(name, BTreeMap::new()), Target::Instance("controller-1".into())).unwrap()
    };
    inject("seen");
    for child in ["controller-1/gate", "controller-1/light"] {
        assert!(a.rt.wait_for_state(child, |s| s == Some("on"), Duration::from_secs(2)), "{child}");
    }
    inject("notSeen");
    for child in ["controller-1/gate", "controller-1/light"] {
        assert!(a.rt.wait_for_state(child, |s| s == Some("off"), Duration::from_secs(2)), "{child}");
    }
    inject("seen");
    inject("halt");
    assert!(wait_until(Duration::from_secs(2), || r[0].instances.iter().all(|id| a.rt.is_finished(id) == Some(true))));
    assert_eq!(a.rt.status("controller-1"), Some(InstanceStatus::Terminated));
    assert_eq!(a.rt.status("controller-1/gate"), Some(InstanceStatus::Stopped));
    assert_eq!(a.rt.hosted_count(), 0);
}

fn place_abc(mode: &str) -> Vec<(String, String)> {
    let bus = Arc::new(LocalBus::new());
    let (a, b) = (node("rt-a", &[], &bus), node("rt-b", &[], &bus));
    let c = cluster(&[&b, &a]);
    let d = simple("abc", mode, &["A", "B", "C"]);
    let jobs: Vec<Job> = ["A", "B", "C"].iter().map(|m| Job::new(d.clone(), m)).collect();
    c.submit(&jobs).unwrap().into_iter().map(|r| (r.instance, r.node)).collect()
}

#[test]
fn distributed_job_set_places_least_loaded_deterministically() {
    let expected: Vec<(String, String)> = [("A-1", "rt-a"), ("B-1", "rt-b"), ("C-1", "rt-a")]
        .iter()
        .map(|(i, n)| (i.to_string(), n.to_string()))
        .collect();
    for _ in 0..3 {
        assert_eq!(place_abc("distributed"), expected);
    }
}

#[test]
fn shared_job_set_is_co_located() {
    let placed = place_abc("shared");
    assert_eq!(placed.len(), 3);
    assert!(placed.iter().all(|(_, n)| n == "rt-a"), "{placed:?}");
}

#[test]
fn placement_over_tcp_matches_in_process() {
    let server = CoordinatorServer::start("127.0.0.1:0").unwrap();
    let addr = server.local_addr();
    let bus = Arc::new(LocalBus::new());
    let (a, b) = (node("rt-a", &[], &bus), node("rt-b", &[], &bus));
    let _la = join_coordinator(a.rt.clone(), addr).unwrap();
    let _lb = join_coordinator(b.rt.clone(), addr).unwrap();
    assert!(wait_until(Duration::from_secs(5), || server.coordinator().node_ids().len() == 2));

    let d = simple("abc", "distributed", &["A", "B", "C"]);
    let jobs: Vec<Job> = ["A", "B", "C"].iter().map(|m| Job::new(d.clone(), m)).collect();
    let placed: Vec<(String, String)> =
        submit_remote(addr, &jobs).unwrap().into_iter().map(|r| (r.instance, r.node)).collect();
    assert_eq!(
        placed,
        vec![("A-1".into(), "rt-a".into()), ("B-1".into(), "rt-b".into()), ("C-1".into(), "rt-a".into())]
    );
    assert_eq!(a.rt.instance_ids(), vec!["A-1", "C-1"]);

    let mut gpu = Job::new(d, "A");
    gpu.eligibility = vec!["tier == 'gpu'".into()];
    assert!(matches!(submit_remote(addr, &[gpu]), Err(RuntimeError::NoEligibleRuntime(_))));
}

#[test]
fn instance_data_is_present_before_the_initial_state() {
    let d = desc(json!({"name": "d", "memoryMode": "distributed", "stateMachines": [{"name": "m",
        "localData": [{"name": "copy", "value": "0"}],
        "states": [{"name": "s", "initial": true,
                    "entry": [{"type": "assign", "variable": {"name": "copy"}, "value": "threshold * 2"}]}]}]}));
    let mut job = Job::new(d, "m");
    job.instance_data = [("threshold".to_string(), Value::from(21i64))].into();
    let bus = Arc::new(LocalBus::new());
    let a = node("rt-a", &[], &bus);
    let r = cluster(&[&a]).submit(&[job]).unwrap();
    let id = &r[0].instance;
    assert!(wait_until(Duration::from_secs(2), || a.rt.active_state(id).as_deref() == Some("s")));
    let vars = a.rt.variables(id).unwrap();
    assert_eq!(vars.get("copy"), Some(&Value::from(42i64)));
    assert_eq!(vars.get("threshold"), Some(&Value::from(21i64)));
}

#[test]
fn throughput_windows_account_for_every_delivered_event() {
    let bus = Arc::new(LocalBus::new());
    let a = node("rt-a", &[], &bus);
    let d = desc(json!({"name": "p", "memoryMode": "distributed", "stateMachines": [{"name": "m",
        "localData": [{"name": "n", "value": "0"}],
        "states": [{"name": "s", "initial": true, "on": [{"event": "tick", "target": "s",
            "actions": [{"type": "assign", "variable": {"name": "n"}, "value": "n + 1"}]}]}]}]}));
    let r = cluster(&[&a]).submit(&[Job::new(d, "m")]).unwrap();
    let id = r[0].instance.clone();
    let mut delivered = 0;
    for round in 0..5 {
        for _ in 0..(20 * (round + 1)) {
            delivered += a.rt.inject(EventInstance::peripheral("tick", BTreeMap::new()), Target::Instance(id.clone())).unwrap();
        }
        a.rt.sample(Duration::from_millis(10));
        let windows: f64 = a.sink.of_kind(MetricKind::ThroughputWindow).iter().map(|m| m.value).sum();
        let depth = a.rt.queue_depth(&id).unwrap() as f64;
        // Events drained into a step in progress are in neither count yet.
        assert!(windows + depth <= delivered as f64);
    }
    assert!(wait_until(Duration::from_secs(5), || a.rt.queue_depth(&id) == Some(0) && a.rt.handled(&id) == Some(delivered as u64)));
    a.rt.sample(Duration::from_millis(10));
    let windows: f64 = a.sink.of_kind(MetricKind::ThroughputWindow).iter().map(|m| m.value).sum();
    assert_eq!(windows, delivered as f64);
    assert_eq!(a.rt.variables(&id).unwrap().get("n"), Some(&Value::from(delivered as i64)));
}

#[test]
fn control_endpoint_injects_events() {
    let bus = Arc::new(LocalBus::new());
    let a = node("rt-a", &[], &bus);
    let r = cluster(&[&a]).submit(&[Job::new(simple("c", "distributed", &["m"]), "m")]).unwrap();
    let mut control = ControlServer::start("127.0.0.1:0", a.rt.clone()).unwrap();
    let base = format!("http://{}", control.local_addr());

    assert!(ureq::get(&format!("{base}/healthz")).call().unwrap().into_string().unwrap().contains("true"));
    let listed = ureq::get(&format!("{base}/instances")).call().unwrap().into_string().unwrap();
    assert!(listed.contains(&r[0].instance));

    let post = |body: serde_json::Value| ureq::post(&format!("{base}/events")).send_string(&body.to_string());
    assert!(matches!(post(json!({"name": "go", "target": "nobody"})), Err(ureq::Error::Status(404, _))));
    assert!(matches!(post(json!({"nme": "go"})), Err(ureq::Error::Status(400, _))));
    let ok = post(json!({"name": "go", "target": r[0].instance})).unwrap().into_string().unwrap();
    assert!(ok.contains("\"delivered\":1"), "{ok}");
    assert!(a.rt.wait_for_state(&r[0].instance, |s| s == Some("b"), Duration::from_secs(2)));

    ureq::post(&format!("{base}/shutdown")).call().unwrap();
    assert!(control.wait_for_shutdown(Some(Duration::from_secs(2))));
    control.stop();
}

#[test]
fn gate_cycles_record_at_least_the_service_delay() {
    let delay = Duration::from_millis(2);
    let stubs = StubServices::start("127.0.0.1:0", delay, &["gate"]).unwrap();
    let bus = Arc::new(LocalBus::new());
    let a = node("rt-a", &[], &bus);
    let r = cluster(&[&a]).submit(&[gate_job(&stubs.url("gate"), Some(true))]).unwrap();
    let id = r[0].instance.clone();
    for _ in 0..200 {
        a.rt.inject(EventInstance::peripheral("toggle", BTreeMap::new()), Target::Instance(id.clone())).unwrap();
    }
    assert!(wait_until(Duration::from_secs(20), || a.rt.handled(&id) == Some(200)));
    let lat = a.sink.of_kind(MetricKind::InvokeLatency);
    assert_eq!(lat.len(), 200);
    assert!(lat.iter().all(|m| m.value >= delay.as_micros() as f64 && m.labels["local"] == "true"));
    assert_eq!(a.rt.active_state(&id).as_deref(), Some("up"));
    assert_eq!(bus.dropped(), 0);
}
