//! Railway-crossing stress benchmark.
//!
//! Starts a broker, a store, a coordinator and stub services in-process,
//! launches runtime processes, places one controller job per instance and
//! drives `seen`/`notSeen` events at the scheduled rates. Throughput, queue
//! depth and latencies are read back from the runtimes' metrics streams.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use csm_core::data::{RemoteStore, StoreServer};
use csm_core::events::{BrokerServer, EventInstance, RemoteBus, Target, Transport};
use csm_core::metrics::{now_micros, read_metrics, JsonLinesSink, MetricKind, MetricsRecord};
use csm_core::runtime::{
    join_coordinator, submit_remote, CoordinatorLink, CoordinatorServer, Receipt, Runtime, RuntimeConfig, StubServices,
};
use csm_core::Value;
use serde::{Deserialize, Serialize};

use crate::railway::{controller_job, Placement, Work};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RateStep {
    pub duration_seconds: f64,
    pub events_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct BenchConfig {
    /// Rates are per controller instance.
    pub event_rate_schedule: Vec<RateStep>,
    pub configuration: Placement,
    pub injected_latency_ms: f64,
    pub payload_sizes: Vec<usize>,
    pub runtime_count: usize,
    pub instance_count: usize,
    pub work: Work,
    /// Period of the runtimes' queue-depth and throughput samples.
    pub sample_ms: u64,
    /// Runtime executable (`csm`); runtimes run in-process when absent.
    #[serde(skip)]
    pub runtime_binary: Option<PathBuf>,
    /// Where metrics streams are written; a fresh temporary directory when absent.
    #[serde(skip)]
    pub work_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            event_rate_schedule: [25.0, 50.0, 100.0, 200.0]
                .iter()
                .map(|&r| RateStep { duration_seconds: 10.0, events_per_second: r })
                .collect(),
            configuration: Placement::LocalLocal,
            injected_latency_ms: 10.0,
            payload_sizes: vec![64, 1024, 16 * 1024],
            runtime_count: 2,
            instance_count: 2,
            work: Work::default(),
            sample_ms: 1000,
            runtime_binary: None,
            work_dir: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.event_rate_schedule.is_empty() {
            bail!("eventRateSchedule is empty");
        }
        if self.event_rate_schedule.iter().any(|s| !(s.events_per_second > 0.0 && s.duration_seconds > 0.0)) {
            bail!("rates and durations must be positive");
        }
        if self.runtime_count == 0 || self.instance_count == 0 {
            bail!("runtimeCount and instanceCount must be positive");
        }
        if self.payload_sizes.is_empty() {
            bail!("payloadSizes is empty");
        }
        Ok(())
    }

    fn events_in(step: &RateStep) -> u64 {
        (step.events_per_second * step.duration_seconds).round() as u64
    }
}

/// Summary of a latency sample set, in microseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    /// Counts per upper bound in microseconds; the last bucket is unbounded.
    pub histogram: Vec<(f64, usize)>,
}

const BUCKETS_US: [f64; 11] = [100.0, 250.0, 500.0, 1e3, 2.5e3, 5e3, 1e4, 2.5e4, 5e4, 1e5, f64::INFINITY];

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl LatencyStats {
    pub fn of(samples: impl IntoIterator<Item = f64>) -> LatencyStats {
        let mut v: Vec<f64> = samples.into_iter().collect();
        v.sort_by(f64::total_cmp);
        if v.is_empty() {
            return LatencyStats::default();
        }
        let histogram = BUCKETS_US
            .iter()
            .enumerate()
            .map(|(i, &hi)| {
                let lo = if i == 0 { f64::NEG_INFINITY } else { BUCKETS_US[i - 1] };
                (hi, v.iter().filter(|&&x| x > lo && x <= hi).count())
            })
            .collect();
        LatencyStats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: percentile(&v, 50.0),
            p99: percentile(&v, 99.0),
            histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WindowReport {
    pub index: usize,
    /// Offset from the start of the run.
    pub start_seconds: f64,
    pub duration_seconds: f64,
    pub rate_per_controller: f64,
    /// N: events generated in the window.
    pub generated: u64,
    /// T: controller events handled in the window.
    pub handled: u64,
    /// r = T / N.
    pub ratio: f64,
    pub throughput_per_second: f64,
    pub response_time: LatencyStats,
    pub invoke_latency_local: LatencyStats,
    pub invoke_latency_remote: LatencyStats,
    pub write_latency_local: LatencyStats,
    pub write_latency_persistent_remote: LatencyStats,
    /// Queue-depth samples per controller, in time order.
    pub queue_depth: BTreeMap<String, Vec<f64>>,
    /// Every controller's queue depth is non-decreasing across the window
    /// and ends higher than it started.
    pub queue_growth_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchReport {
    pub configuration: Placement,
    pub injected_latency_ms: f64,
    pub runtime_count: usize,
    pub placements: Vec<Receipt>,
    pub windows: Vec<WindowReport>,
    /// Highest handled-events rate over any window, summed over controllers.
    pub peak_throughput_per_second: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Comparison {
    pub local_local: BenchReport,
    pub remote_persistent: BenchReport,
    /// Peak throughput of localLocal over remotePersistent.
    pub peak_ratio: f64,
}

impl Comparison {
    pub fn new(local_local: BenchReport, remote_persistent: BenchReport) -> Self {
        let peak_ratio = local_local.peak_throughput_per_second / remote_persistent.peak_throughput_per_second.max(1e-9);
        Comparison { local_local, remote_persistent, peak_ratio }
    }
}

enum RuntimeHandle {
    Process { child: Child, control: String },
    InProcess { runtime: Arc<Runtime>, _link: CoordinatorLink },
}

impl RuntimeHandle {
    fn stop(self) -> Result<()> {
        match self {
            RuntimeHandle::Process { mut child, control } => {
                let _ = ureq::post(&format!("http://{control}/shutdown")).timeout(Duration::from_secs(5)).call();
                let deadline = Instant::now() + Duration::from_secs(20);
                loop {
                    if child.try_wait()?.is_some() {
                        return Ok(());
                    }
                    if Instant::now() > deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        bail!("runtime process did not exit after shutdown");
                    }
                    thread::sleep(Duration::from_millis(20));
                }
            }
            RuntimeHandle::InProcess { runtime, _link } => {
                drop(_link);
                runtime.shutdown_within(Some(Duration::from_secs(2)));
                Ok(())
            }
        }
    }
}

/// Kills runtime processes left behind by an aborted run.
struct Cleanup(Vec<RuntimeHandle>);

impl Drop for Cleanup {
    fn drop(&mut self) {
        for h in &mut self.0 {
            if let RuntimeHandle::Process { child, .. } = h {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

fn node_name(i: usize) -> String {
    let letter = (b'a' + (i % 26) as u8) as char;
    if i < 26 {
        format!("rt-{letter}")
    } else {
        format!("rt-{letter}{}", i / 26)
    }
}

#[allow(clippy::too_many_arguments)]
fn launch_runtime(
    cfg: &BenchConfig,
    node: &str,
    coordinator: &str,
    broker: &str,
    store: &str,
    metrics: &Path,
) -> Result<RuntimeHandle> {
    let latency = Duration::from_secs_f64(cfg.injected_latency_ms / 1000.0);
    match &cfg.runtime_binary {
        Some(bin) => {
            let mut child = Command::new(bin)
                .args(["runtime", "--node-id", node, "--coordinator", coordinator, "--broker", broker])
                .args(["--store", store, "--control", "127.0.0.1:0"])
                .args(["--inject-latency-ms", &cfg.injected_latency_ms.to_string()])
                .args(["--sample-ms", &cfg.sample_ms.to_string()])
                .arg("--metrics-out")
                .arg(metrics)
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .with_context(|| format!("starting {}", bin.display()))?;
            let stdout = child.stdout.take().expect("piped stdout");
            let mut line = String::new();
            BufReader::new(stdout).read_line(&mut line)?;
            let control = line
                .trim()
                .strip_prefix("ready ")
                .ok_or_else(|| anyhow!("runtime {node} did not report ready: {line:?}"))?
                .to_string();
            Ok(RuntimeHandle::Process { child, control })
        }
        None => {
            let transport = Arc::new(RemoteBus::connect(broker)?);
            let store = Arc::new(RemoteStore::connect(store, latency)?);
            let sink = Arc::new(JsonLinesSink::create(metrics)?);
            let mut config = RuntimeConfig::new(node);
            config.injected_latency = latency;
            config.sample_period = Some(Duration::from_millis(cfg.sample_ms));
            let runtime = Runtime::new(config, transport, store, sink);
            let link = join_coordinator(runtime.clone(), coordinator)?;
            Ok(RuntimeHandle::InProcess { runtime, _link: link })
        }
    }
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

/// Runs one configuration end to end.
pub fn run_railway_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let began = Instant::now();
    let dir = match &cfg.work_dir {
        Some(d) => d.clone(),
        None => std::env::temp_dir().join(format!("csm-bench-{}-{}", std::process::id(), now_micros())),
    };
    std::fs::create_dir_all(&dir)?;

    let stubs = StubServices::start("127.0.0.1:0", Duration::ZERO, &["gate", "light", "detect"])?;
    let broker = BrokerServer::start("127.0.0.1:0", Duration::ZERO)?;
    let store = StoreServer::start("127.0.0.1:0")?;
    let coordinator = CoordinatorServer::start("127.0.0.1:0")?;
    let (coord_addr, broker_addr, store_addr) =
        (coordinator.local_addr().to_string(), broker.local_addr().to_string(), store.local_addr().to_string());

    let mut cleanup = Cleanup(Vec::new());
    let mut metrics_files = Vec::new();
    for i in 0..cfg.runtime_count {
        let node = node_name(i);
        let path = dir.join(format!("{}-{node}.jsonl", cfg.configuration.name()));
        cleanup.0.push(launch_runtime(cfg, &node, &coord_addr, &broker_addr, &store_addr, &path)?);
        metrics_files.push(path);
    }
    let deadline = Instant::now() + Duration::from_secs(15);
    while coordinator.coordinator().node_ids().len() < cfg.runtime_count {
        if Instant::now() > deadline {
            bail!("runtimes did not join the coordinator");
        }
        thread::sleep(Duration::from_millis(10));
    }

    let base_url = format!("http://{}", stubs.local_addr());
    let mut placements = Vec::new();
    for _ in 0..cfg.instance_count {
        let job = controller_job(&base_url, cfg.configuration, cfg.work);
        placements.extend(submit_remote(&coord_addr, &[job])?);
    }
    let controllers: Vec<String> =
        placements.iter().filter(|r| r.machine == "controller").map(|r| r.instance.clone()).collect();
    log::info!("{}: placed {:?}", cfg.configuration.name(), placements);

    // Drive events: one thread per controller, all sharing the same clock.
    let lead = Duration::from_millis(300);
    let start = Instant::now() + lead;
    let start_unix = now_micros() + lead.as_micros() as u64;
    let payloads: Arc<Vec<Value>> = Arc::new(cfg.payload_sizes.iter().map(|&n| Value::String("x".repeat(n))).collect());
    let mut drivers = Vec::new();
    for id in controllers.clone() {
        let bus = RemoteBus::connect(broker_addr.as_str())?;
        let schedule = cfg.event_rate_schedule.clone();
        let payloads = payloads.clone();
        drivers.push(thread::spawn(move || -> Result<Vec<u64>> {
            let mut generated = Vec::new();
            let mut offset = Duration::ZERO;
            let mut k: u64 = 0;
            for step in &schedule {
                let n = BenchConfig::events_in(step);
                for j in 0..n {
                    sleep_until(start + offset + Duration::from_secs_f64(j as f64 / step.events_per_second));
                    let name = if k % 2 == 0 { "seen" } else { "notSeen" };
                    let payload = payloads[(k as usize / 2) % payloads.len()].clone();
                    let event = EventInstance::peripheral(name, [("payload".to_string(), payload)].into());
                    bus.inject_peripheral(event, Target::Instance(id.clone()))?;
                    k += 1;
                }
                generated.push(n);
                offset += Duration::from_secs_f64(step.duration_seconds);
            }
            sleep_until(start + offset);
            Ok(generated)
        }));
    }
    let mut generated = vec![0u64; cfg.event_rate_schedule.len()];
    for d in drivers {
        let per_window = d.join().map_err(|_| anyhow!("event driver panicked"))??;
        for (g, n) in generated.iter_mut().zip(per_window) {
            *g += n;
        }
    }
    // Let the last samples land before stopping the runtimes.
    thread::sleep(Duration::from_millis(cfg.sample_ms.min(1000) + 200));
    for h in std::mem::take(&mut cleanup.0) {
        h.stop()?;
    }
    drop(coordinator);

    let mut records = Vec::new();
    for f in &metrics_files {
        records.extend(read_metrics(f).with_context(|| format!("reading {}", f.display()))?);
    }
    let windows = analyse(cfg, start_unix, &generated, &controllers, &records);
    let peak = windows.iter().map(|w| w.throughput_per_second).fold(0.0, f64::max);
    Ok(BenchReport {
        configuration: cfg.configuration,
        injected_latency_ms: cfg.injected_latency_ms,
        runtime_count: cfg.runtime_count,
        placements,
        windows,
        peak_throughput_per_second: peak,
        wall_seconds: began.elapsed().as_secs_f64(),
    })
}

fn label<'a>(r: &'a MetricsRecord, key: &str) -> Option<&'a str> {
    r.labels.get(key).map(String::as_str)
}

/// Splits metrics into schedule windows.
pub fn analyse(
    cfg: &BenchConfig,
    start_unix: u64,
    generated: &[u64],
    controllers: &[String],
    records: &[MetricsRecord],
) -> Vec<WindowReport> {
    let is_controller = |r: &MetricsRecord| controllers.iter().any(|c| *c == r.instance);
    let mut out = Vec::new();
    let mut offset = 0.0;
    for (index, step) in cfg.event_rate_schedule.iter().enumerate() {
        let lo = start_unix + (offset * 1e6) as u64;
        let hi = start_unix + ((offset + step.duration_seconds) * 1e6) as u64;
        let within: Vec<&MetricsRecord> = records.iter().filter(|r| r.timestamp >= lo && r.timestamp < hi).collect();
        let of = |kind: MetricKind| within.iter().copied().filter(move |r| r.kind == kind);
        let responses: Vec<f64> = of(MetricKind::ResponseTime)
            .filter(|r| is_controller(r) && matches!(label(r, "event"), Some("seen" | "notSeen")))
            .map(|r| r.value)
            .collect();
        let invoke = |local: &str| LatencyStats::of(of(MetricKind::InvokeLatency).filter(|r| label(r, "local") == Some(local)).map(|r| r.value));
        let writes = |target: &str, remote: &str| {
            LatencyStats::of(
                of(MetricKind::WriteLatency)
                    .filter(|r| label(r, "target") == Some(target) && label(r, "remote") == Some(remote))
                    .map(|r| r.value),
            )
        };
        let mut queue_depth: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in of(MetricKind::QueueDepth).filter(|r| is_controller(r)) {
            queue_depth.entry(r.instance.clone()).or_default().push(r.value);
        }
        let queue_growth_monotone = !queue_depth.is_empty()
            && queue_depth.values().all(|s| s.windows(2).all(|w| w[0] <= w[1]) && s.last() > s.first());
        let n = generated.get(index).copied().unwrap_or(0);
        let t = responses.len() as u64;
        out.push(WindowReport {
            index,
            start_seconds: offset,
            duration_seconds: step.duration_seconds,
            rate_per_controller: step.events_per_second,
            generated: n,
            handled: t,
            ratio: if n == 0 { 0.0 } else { t as f64 / n as f64 },
            throughput_per_second: t as f64 / step.duration_seconds,
            response_time: LatencyStats::of(responses),
            invoke_latency_local: invoke("true"),
            invoke_latency_remote: invoke("false"),
            write_latency_local: writes("local", "false"),
            write_latency_persistent_remote: writes("persistent", "true"),
            queue_depth,
            queue_growth_monotone,
        });
        offset += step.duration_seconds;
    }
    out
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CsvRow {
    configuration: &'static str,
    window: usize,
    start_seconds: f64,
    duration_seconds: f64,
    rate_per_controller: f64,
    generated: u64,
    handled: u64,
    ratio: f64,
    throughput_per_second: f64,
    response_p50_us: f64,
    response_p99_us: f64,
    invoke_local_mean_us: f64,
    invoke_remote_mean_us: f64,
    write_local_mean_us: f64,
    write_persistent_remote_mean_us: f64,
    queue_depth_last: f64,
}

/// One CSV row per configuration and window.
pub fn write_csv(reports: &[&BenchReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for win in &r.windows {
            w.serialize(CsvRow {
                configuration: r.configuration.name(),
                window: win.index,
                start_seconds: win.start_seconds,
                duration_seconds: win.duration_seconds,
                rate_per_controller: win.rate_per_controller,
                generated: win.generated,
                handled: win.handled,
                ratio: win.ratio,
                throughput_per_second: win.throughput_per_second,
                response_p50_us: win.response_time.p50,
                response_p99_us: win.response_time.p99,
                invoke_local_mean_us: win.invoke_latency_local.mean,
                invoke_remote_mean_us: win.invoke_latency_remote.mean,
                write_local_mean_us: win.write_latency_local.mean,
                write_persistent_remote_mean_us: win.write_latency_persistent_remote.mean,
                queue_depth_last: win.queue_depth.values().filter_map(|s| s.last()).sum(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
