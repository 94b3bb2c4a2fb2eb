use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csm_cli::bench::{analyse, percentile, run_railway_bench, write_csv, BenchConfig, LatencyStats, RateStep};
use csm_cli::railway::{description, description_json, Placement, Work};
use csm_core::metrics::{MetricKind, MetricsRecord};
use csm_core::validate;
use tempfile::TempDir;

fn csm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csm")).args(args).output().expect("csm runs")
}

fn repo(path: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(path).to_string_lossy().into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(csm(&["validate", &repo("descriptions/example.json")]).status.code(), Some(0));
    assert_eq!(csm(&["validate", &repo("descriptions/railway.json")]).status.code(), Some(0));

    let two_initial = write(
        &dir,
        "two.json",
        r#"{"name": "T", "memoryMode": "distributed", "stateMachines": [{"name": "M", "states": [
            {"name": "a", "initial": true}, {"name": "b", "initial": true}]}]}"#,
    );
    let o = csm(&["validate", two_initial.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("InitialStateCount"), "{}", stdout(&o));

    let malformed = write(&dir, "bad.json", "{\"name\": ");
    assert_eq!(csm(&["validate", malformed.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(csm(&["validate", "/nonexistent/x.json"]).status.code(), Some(2));
}

#[test]
fn validate_json_report() {
    let o = csm(&["validate", "--json", &repo("descriptions/example.json")]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["errors"], serde_json::json!([]));
}

#[test]
fn run_trivial_machine_exits_immediately() {
    let dir = TempDir::new().unwrap();
    let d = write(
        &dir,
        "t.json",
        r#"{"name": "T", "memoryMode": "distributed", "stateMachines": [{"name": "M", "states": [
            {"name": "a", "initial": true, "always": [{"target": "b"}]}, {"name": "b", "terminal": true}]}]}"#,
    );
    let o = csm(&["run", d.to_str().unwrap(), "M", "--timeout", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(out["status"], "Terminated");
    assert_eq!(out["state"], "b");
}

#[test]
fn run_railway_controller_counts_cycles() {
    let dir = TempDir::new().unwrap();
    let mut events = String::new();
    for k in 0..3 {
        for name in ["seen", "notSeen", "seen", "notSeen"] {
            events.push_str(&format!("{{\"name\": \"{name}\", \"data\": {{\"payload\": \"p{k}\"}}}}\n"));
        }
    }
    // Self-transitions do not advance the cycle.
    events.push_str("{\"name\": \"notSeen\", \"data\": {\"payload\": \"idle\"}}\n");
    let ev = write(&dir, "events.jsonl", &events);
    let metrics = dir.path().join("m.jsonl");
    let o = csm(&[
        "run",
        &repo("descriptions/railway.json"),
        "controller",
        "--stubs",
        "--events",
        ev.to_str().unwrap(),
        "--metrics-out",
        metrics.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(out["variables"]["cycles"], 3);
    assert_eq!(out["variables"]["log"], "idle");
    assert_eq!(out["state"], "idle");
    assert_eq!(out["handled"], 13);
    let records = csm_core::metrics::read_metrics(&metrics).unwrap();
    assert_eq!(records.iter().filter(|r| r.kind == MetricKind::ResponseTime && r.instance == "controller-1").count(), 13);
    assert_eq!(records.iter().filter(|r| r.kind == MetricKind::InvokeLatency).count(), 13 * 2 + 4 * 3);
}

#[test]
fn run_unknown_machine_exits_1() {
    assert_eq!(csm(&["run", &repo("descriptions/example.json"), "Nope"]).status.code(), Some(1));
}

#[test]
fn shipped_railway_description_matches_generator() {
    let shipped: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(repo("descriptions/railway.json")).unwrap()).unwrap();
    assert_eq!(shipped, description_json(Placement::LocalLocal, Work::default()));
    for p in [Placement::LocalLocal, Placement::RemotePersistent] {
        let report = validate(&description(p, Work { invokes: 3, writes: 2 }));
        assert!(report.is_ok(), "{report}");
    }
}

#[test]
fn bench_config_defaults_and_validation() {
    let cfg: BenchConfig = serde_json::from_str(r#"{"configuration": "remotePersistent"}"#).unwrap();
    assert_eq!(cfg.configuration, Placement::RemotePersistent);
    assert_eq!(cfg.injected_latency_ms, 10.0);
    assert_eq!(cfg.payload_sizes, vec![64, 1024, 16384]);
    assert_eq!(cfg.event_rate_schedule.len(), 4);
    assert!(cfg.validate().is_ok());
    let empty = BenchConfig { event_rate_schedule: vec![], ..BenchConfig::default() };
    assert!(empty.validate().is_err());
    let zero = BenchConfig {
        event_rate_schedule: vec![RateStep { duration_seconds: 1.0, events_per_second: 0.0 }],
        ..BenchConfig::default()
    };
    assert!(zero.validate().is_err());
}

#[test]
fn percentiles_and_histograms() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 50.0), 50.0);
    assert_eq!(percentile(&v, 99.0), 99.0);
    assert_eq!(percentile(&[], 50.0), 0.0);
    let s = LatencyStats::of([50.0, 300.0, 20_000.0, 1e9]);
    assert_eq!(s.count, 4);
    assert_eq!(s.histogram.iter().map(|(_, n)| n).sum::<usize>(), 4);
    assert_eq!(s.histogram.last().unwrap().1, 1);
    assert!(s.p50 <= s.p99);
}

fn rec(kind: MetricKind, instance: &str, at: u64, value: f64, labels: &[(&str, &str)]) -> MetricsRecord {
    let mut r = MetricsRecord::new(kind, instance, value, "us");
    r.timestamp = at;
    for (k, v) in labels {
        r = r.label(k, v);
    }
    r
}

#[test]
fn analysis_splits_records_into_windows() {
    let cfg = BenchConfig {
        event_rate_schedule: vec![
            RateStep { duration_seconds: 1.0, events_per_second: 2.0 },
            RateStep { duration_seconds: 2.0, events_per_second: 4.0 },
        ],
        ..BenchConfig::default()
    };
    let t0 = 1_000_000_000;
    let ctl = ["controller-1".to_string()];
    let records = vec![
        rec(MetricKind::ResponseTime, "controller-1", t0 + 10, 100.0, &[("event", "seen")]),
        rec(MetricKind::ResponseTime, "controller-1", t0 + 20, 300.0, &[("event", "notSeen")]),
        rec(MetricKind::ResponseTime, "controller-1/gate", t0 + 30, 5.0, &[("event", "approaching")]),
        rec(MetricKind::ResponseTime, "controller-1", t0 + 1_500_000, 200.0, &[("event", "seen")]),
        rec(MetricKind::InvokeLatency, "controller-1", t0 + 40, 50.0, &[("local", "true")]),
        rec(MetricKind::WriteLatency, "controller-1", t0 + 50, 20_000.0, &[("target", "persistent"), ("remote", "true")]),
        rec(MetricKind::QueueDepth, "controller-1", t0 + 1_200_000, 1.0, &[]),
        rec(MetricKind::QueueDepth, "controller-1", t0 + 2_200_000, 3.0, &[]),
        rec(MetricKind::ResponseTime, "controller-1", t0 + 3_000_001, 1.0, &[("event", "seen")]),
    ];
    let w = analyse(&cfg, t0, &[2, 8], &ctl, &records);
    assert_eq!(w.len(), 2);
    assert_eq!((w[0].start_seconds, w[1].start_seconds), (0.0, 1.0));
    assert_eq!((w[0].handled, w[0].generated, w[0].ratio), (2, 2, 1.0));
    assert_eq!(w[0].response_time.p99, 300.0);
    assert_eq!(w[0].invoke_latency_local.count, 1);
    assert_eq!(w[0].write_latency_persistent_remote.mean, 20_000.0);
    assert_eq!((w[1].handled, w[1].ratio), (1, 0.125));
    assert_eq!(w[1].throughput_per_second, 0.5);
    assert!(w[1].queue_growth_monotone);
    assert!(!w[0].queue_growth_monotone);
}

#[test]
fn short_in_process_bench_writes_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = BenchConfig {
        event_rate_schedule: vec![
            RateStep { duration_seconds: 1.0, events_per_second: 20.0 },
            RateStep { duration_seconds: 1.0, events_per_second: 40.0 },
        ],
        sample_ms: 200,
        work_dir: Some(dir.path().to_path_buf()),
        ..BenchConfig::default()
    };
    let report = run_railway_bench(&cfg).unwrap();
    assert_eq!(report.placements.len(), 2);
    assert_eq!(report.placements[0].instances.len(), 3);
    assert_ne!(report.placements[0].node, report.placements[1].node);
    assert_eq!(report.windows.iter().map(|w| w.generated).collect::<Vec<_>>(), vec![40, 80]);
    assert!(report.windows.iter().all(|w| w.handled > 0 && w.ratio <= 1.0));
    let csv = dir.path().join("w.csv");
    write_csv(&[&report], &csv).unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("configuration,window,"));
}

#[test]
fn processes_cooperate_over_the_network() {
    use std::io::{BufRead, BufReader};
    use std::process::{Child, Stdio};

    struct Kill(Vec<Child>);
    impl Drop for Kill {
        fn drop(&mut self) {
            for c in &mut self.0 {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
    let mut procs = Kill(Vec::new());
    let mut spawn = |args: &[&str]| -> String {
        let mut child = Command::new(env!("CARGO_BIN_EXE_csm")).args(args).stdout(Stdio::piped()).spawn().unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        procs.0.push(child);
        line.trim().strip_prefix("ready ").expect("ready line").to_string()
    };
    let coord = spawn(&["coordinator", "--listen", "127.0.0.1:0"]);
    let broker = spawn(&["broker", "--listen", "127.0.0.1:0"]);
    let store = spawn(&["store", "--listen", "127.0.0.1:0"]);
    let control = spawn(&[
        "runtime", "--node-id", "rt-a", "--attributes", "tier=edge", "--coordinator", &coord, "--broker", &broker,
        "--store", &store,
    ]);

    let dir = TempDir::new().unwrap();
    let desc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(repo("descriptions/example.json")).unwrap()).unwrap();
    let job = serde_json::json!({"description": desc, "stateMachineName": "SM1", "eligibility": ["tier == 'edge'"]});
    let job_file = write(&dir, "job.json", &job.to_string());
    let o = csm(&["submit", job_file.to_str().unwrap(), "--coordinator", &coord]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let receipts: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(receipts[0]["node"], "rt-a");
    assert_eq!(receipts[0]["instance"], "SM1-1");

    let gpu = serde_json::json!({"description": desc, "stateMachineName": "SM1", "eligibility": ["tier == 'gpu'"]});
    let gpu_file = write(&dir, "gpu.json", &gpu.to_string());
    assert_eq!(csm(&["submit", gpu_file.to_str().unwrap(), "--coordinator", &coord]).status.code(), Some(1));

    let instances = ureq::get(&format!("http://{control}/instances")).call().unwrap().into_string().unwrap();
    assert!(instances.contains("SM1-1"), "{instances}");
    ureq::post(&format!("http://{control}/shutdown")).call().unwrap();
    let runtime = procs.0.last_mut().unwrap();
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
    while runtime.try_wait().unwrap().is_none() {
        assert!(std::time::Instant::now() < deadline, "runtime did not exit");
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
}
