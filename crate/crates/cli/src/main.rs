use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use csm_core::csml::{parse_description, validate, ParseError};
use csm_core::data::{MemoryStore, PersistentStore, RemoteStore, StoreServer};
use csm_core::events::{BrokerServer, EventInstance, LocalBus, RemoteBus, Target, Transport};
use csm_core::metrics::{JsonLinesSink, MetricsSink, NullSink};
use csm_core::runtime::{
    join_coordinator, submit_remote, ControlServer, CoordinatorServer, Job, Runtime, RuntimeConfig,
    ServiceImplementationDescription, StubServices,
};
use csm_core::Value;
use csm_cli::bench::{run_railway_bench, write_csv, BenchConfig, Comparison};
use csm_cli::railway::Placement;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "csm", about = "Collaborative state machines")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a CSML description; exit 0 if clean, 1 on errors, 2 if unreadable.
    Validate {
        file: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run one machine of a description in-process.
    Run {
        description: PathBuf,
        machine: String,
        /// JSON lines of `{name, data?, delayMs?}` injected in order.
        #[arg(long)]
        events: Option<PathBuf>,
        /// JSON object of initial instance variables.
        #[arg(long)]
        instance_data: Option<PathBuf>,
        /// JSON array of service implementation descriptions.
        #[arg(long)]
        services: Option<PathBuf>,
        /// Serve every invoked service type from built-in stubs.
        #[arg(long)]
        stubs: bool,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Seconds to wait for the machine to terminate after the last event.
        #[arg(long, default_value_t = 2.0)]
        timeout: f64,
    },
    /// Submit jobs to a coordinator.
    Submit {
        #[arg(required = true)]
        jobs: Vec<PathBuf>,
        #[arg(long)]
        coordinator: String,
    },
    Coordinator {
        #[arg(long, default_value = "127.0.0.1:7400")]
        listen: String,
    },
    Broker {
        #[arg(long, default_value = "127.0.0.1:7401")]
        listen: String,
        #[arg(long, default_value_t = 0.0)]
        latency_ms: f64,
    },
    Store {
        #[arg(long, default_value = "127.0.0.1:7402")]
        listen: String,
    },
    /// Host instances for a coordinator.
    Runtime {
        #[arg(long)]
        node_id: String,
        /// Node attributes as `name=value`; values parse as JSON, else strings.
        #[arg(long, value_parser = parse_attribute, num_args = 1..)]
        attributes: Vec<(String, Value)>,
        #[arg(long)]
        coordinator: String,
        #[arg(long)]
        broker: String,
        /// `host:port` of a store server, or `memory`.
        #[arg(long, default_value = "memory")]
        store: String,
        #[arg(long, default_value_t = 0.0)]
        inject_latency_ms: f64,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:0")]
        control: String,
        #[arg(long)]
        sample_ms: Option<u64>,
    },
    /// Railway-crossing stress benchmark.
    BenchRailway {
        /// JSON benchmark configuration; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the report and metrics.
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Which::Both)]
        configuration: Which,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    Both,
    LocalLocal,
    RemotePersistent,
}

fn parse_attribute(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let value = serde_json::from_str::<serde_json::Value>(v)
        .map(|j| Value::from_json(&j))
        .unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn millis(ms: f64) -> Duration {
    Duration::from_secs_f64(ms.max(0.0) / 1000.0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Validate { file, json } => return validate_cmd(&file, json),
        Cmd::Run { description, machine, events, instance_data, services, stubs, metrics_out, timeout } => {
            run_cmd(RunArgs { description, machine, events, instance_data, services, stubs, metrics_out, timeout })
        }
        Cmd::Submit { jobs, coordinator } => submit_cmd(&jobs, &coordinator),
        Cmd::Coordinator { listen } => serve(|| {
            let s = CoordinatorServer::start(listen.as_str())?;
            println!("ready {}", s.local_addr());
            Ok(Box::new(s) as Box<dyn Send>)
        }),
        Cmd::Broker { listen, latency_ms } => serve(|| {
            let s = BrokerServer::start(listen.as_str(), millis(latency_ms))?;
            println!("ready {}", s.local_addr());
            Ok(Box::new(s) as Box<dyn Send>)
        }),
        Cmd::Store { listen } => serve(|| {
            let s = StoreServer::start(listen.as_str())?;
            println!("ready {}", s.local_addr());
            Ok(Box::new(s) as Box<dyn Send>)
        }),
        Cmd::Runtime { node_id, attributes, coordinator, broker, store, inject_latency_ms, metrics_out, control, sample_ms } => {
            runtime_cmd(RuntimeArgs {
                node_id,
                attributes,
                coordinator,
                broker,
                store,
                latency: millis(inject_latency_ms),
                metrics_out,
                control,
                sample_ms,
            })
        }
        Cmd::BenchRailway { config, out, configuration } => bench_cmd(config.as_deref(), &out, configuration),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn validate_cmd(file: &Path, json: bool) -> ExitCode {
    let text = match std::fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", file.display());
            return ExitCode::from(2);
        }
    };
    let desc = match parse_description(&text) {
        Ok(d) => d,
        Err(e @ ParseError::JsonSyntax(_)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let report = validate(&desc);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for d in &report.errors {
            println!("error   {d}");
        }
        for d in &report.warnings {
            println!("warning {d}");
        }
        if report.is_ok() {
            println!("ok: {}", desc.name);
        }
    }
    if report.is_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

/// Keeps a server alive until the process is killed.
fn serve(start: impl FnOnce() -> Result<Box<dyn Send>>) -> Result<ExitCode> {
    let _server = start()?;
    std::io::stdout().flush()?;
    loop {
        thread::park();
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct EventLine {
    name: String,
    #[serde(default)]
    data: BTreeMap<String, Value>,
    #[serde(default)]
    delay_ms: f64,
}

struct RunArgs {
    description: PathBuf,
    machine: String,
    events: Option<PathBuf>,
    instance_data: Option<PathBuf>,
    services: Option<PathBuf>,
    stubs: bool,
    metrics_out: Option<PathBuf>,
    timeout: f64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run_cmd(args: RunArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.description).with_context(|| format!("reading {}", args.description.display()))?;
    let desc = parse_description(&text)?;
    let mut job = Job::new(desc, &args.machine);
    if let Some(p) = &args.instance_data {
        job.instance_data = read_json(p)?;
    }
    if let Some(p) = &args.services {
        job.service_implementations = read_json::<Vec<ServiceImplementationDescription>>(p)?;
    }
    let _stubs = if args.stubs {
        let mut types = BTreeMap::new();
        collect_service_types(&serde_json::to_value(&job.description)?, &mut types);
        let names: Vec<&str> = types.keys().map(String::as_str).collect();
        let stubs = StubServices::start("127.0.0.1:0", Duration::ZERO, &names)?;
        for (ty, local) in types {
            if !job.service_implementations.iter().any(|i| i.service_type == ty) {
                job.service_implementations.push(ServiceImplementationDescription::http(&ty, &stubs.url(&ty), local));
            }
        }
        Some(stubs)
    } else {
        None
    };
    let report = job.validate();
    for d in &report.warnings {
        eprintln!("warning {d}");
    }
    if !report.is_ok() {
        for d in &report.errors {
            eprintln!("error   {d}");
        }
        return Ok(ExitCode::from(1));
    }
    let metrics: Arc<dyn MetricsSink> = match &args.metrics_out {
        Some(p) => Arc::new(JsonLinesSink::create(p)?),
        None => Arc::new(NullSink),
    };
    let runtime = Runtime::new(RuntimeConfig::new("local"), Arc::new(LocalBus::new()), Arc::new(MemoryStore::new()), metrics);
    let id = format!("{}-1", args.machine);
    runtime.instantiate(&job, &id)?;

    if let Some(p) = &args.events {
        let file = std::fs::File::open(p).with_context(|| format!("reading {}", p.display()))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: EventLine = serde_json::from_str(&line).with_context(|| format!("{}:{}", p.display(), n + 1))?;
            thread::sleep(millis(e.delay_ms));
            runtime.inject(EventInstance::peripheral(e.name, e.data), Target::Instance(id.clone()))?;
        }
    }
    let deadline = Instant::now() + Duration::from_secs_f64(args.timeout.max(0.0));
    let mut last = (u64::MAX, usize::MAX);
    // Wait for termination, or until the instance goes quiet.
    while Instant::now() < deadline && runtime.is_finished(&id) == Some(false) {
        let now = (runtime.handled(&id).unwrap_or(0), runtime.queue_depth(&id).unwrap_or(0));
        if now.1 == 0 && now == last {
            break;
        }
        last = now;
        thread::sleep(Duration::from_millis(50));
    }
    let status = runtime.status(&id);
    let out = serde_json::json!({
        "instance": id,
        "state": runtime.active_state(&id),
        "status": status.as_ref().map(|s| format!("{s:?}")),
        "handled": runtime.handled(&id),
        "variables": runtime.variables(&id).map(|v| v.into_iter().map(|(k, v)| (k, v.to_json())).collect::<serde_json::Map<_, _>>()),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    let failed = status.as_ref().is_some_and(|s| format!("{s:?}").starts_with("Failed"));
    runtime.shutdown_within(Some(Duration::from_secs(2)));
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

/// Service types invoked anywhere in a description, with their `local` flag.
fn collect_service_types(json: &serde_json::Value, out: &mut BTreeMap<String, bool>) {
    match json {
        serde_json::Value::Object(m) => {
            if m.get("type").and_then(|t| t.as_str()) == Some("invoke") {
                if let Some(ty) = m.get("serviceType").and_then(|t| t.as_str()) {
                    let local = m.get("local").and_then(|l| l.as_bool()).unwrap_or(false);
                    out.insert(ty.to_string(), local);
                }
            }
            m.values().for_each(|v| collect_service_types(v, out));
        }
        serde_json::Value::Array(a) => a.iter().for_each(|v| collect_service_types(v, out)),
        _ => {}
    }
}

fn submit_cmd(paths: &[PathBuf], coordinator: &str) -> Result<ExitCode> {
    let mut jobs = Vec::new();
    for p in paths {
        let json: serde_json::Value = read_json(p)?;
        match json {
            serde_json::Value::Array(items) => {
                for j in items {
                    jobs.push(serde_json::from_value::<Job>(j).with_context(|| format!("job in {}", p.display()))?);
                }
            }
            j => jobs.push(serde_json::from_value::<Job>(j).with_context(|| format!("job in {}", p.display()))?),
        }
    }
    match submit_remote(coordinator, &jobs) {
        Ok(receipts) => {
            println!("{}", serde_json::to_string_pretty(&receipts)?);
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(1))
        }
    }
}

struct RuntimeArgs {
    node_id: String,
    attributes: Vec<(String, Value)>,
    coordinator: String,
    broker: String,
    store: String,
    latency: Duration,
    metrics_out: Option<PathBuf>,
    control: String,
    sample_ms: Option<u64>,
}

fn runtime_cmd(args: RuntimeArgs) -> Result<ExitCode> {
    let transport: Arc<dyn Transport> = Arc::new(RemoteBus::connect(args.broker.as_str())?);
    let store: Arc<dyn PersistentStore> = if args.store == "memory" {
        Arc::new(MemoryStore::new())
    } else {
        Arc::new(RemoteStore::connect(args.store.as_str(), args.latency)?)
    };
    let metrics: Arc<dyn MetricsSink> = match &args.metrics_out {
        Some(p) => Arc::new(JsonLinesSink::create(p)?),
        None => Arc::new(NullSink),
    };
    let mut config = RuntimeConfig::new(&args.node_id);
    config.attributes = args.attributes.into_iter().collect();
    config.injected_latency = args.latency;
    config.sample_period = args.sample_ms.map(Duration::from_millis);
    let runtime = Runtime::new(config, transport, store, metrics);
    let control = ControlServer::start(&args.control, runtime.clone())?;
    let link = join_coordinator(runtime.clone(), args.coordinator.as_str())?;
    println!("ready {}", control.local_addr());
    std::io::stdout().flush()?;
    control.wait_for_shutdown(None);
    drop(link);
    let clean = runtime.shutdown_within(Some(Duration::from_secs(2)));
    if !clean {
        log::info!("some instances were still busy at shutdown");
    }
    // Instance threads still inside a step must not hold the process open.
    std::process::exit(0);
}

fn bench_cmd(config: Option<&Path>, out: &Path, which: Which) -> Result<ExitCode> {
    let mut cfg: BenchConfig = match config {
        Some(p) => read_json(p)?,
        None => BenchConfig::default(),
    };
    std::fs::create_dir_all(out)?;
    cfg.runtime_binary = Some(std::env::current_exe()?);
    cfg.work_dir = Some(out.to_path_buf());
    let run = |placement: Placement| {
        let mut c = cfg.clone();
        c.configuration = placement;
        eprintln!("running {} ...", placement.name());
        run_railway_bench(&c)
    };
    let reports = match which {
        Which::LocalLocal => vec![run(Placement::LocalLocal)?],
        Which::RemotePersistent => vec![run(Placement::RemotePersistent)?],
        Which::Both => {
            let cmp = Comparison::new(run(Placement::LocalLocal)?, run(Placement::RemotePersistent)?);
            std::fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&cmp)?)?;
            println!("peak throughput ratio localLocal/remotePersistent: {:.2}", cmp.peak_ratio);
            vec![cmp.local_local, cmp.remote_persistent]
        }
    };
    for r in &reports {
        std::fs::write(out.join(format!("{}.json", r.configuration.name())), serde_json::to_string_pretty(r)?)?;
        for w in &r.windows {
            println!(
                "{:<17} window {} rate {:>6.1}/s  N {:>5}  T {:>5}  r {:.3}  p99 {:>9.0}us",
                r.configuration.name(),
                w.index,
                w.rate_per_controller,
                w.generated,
                w.handled,
                w.ratio,
                w.response_time.p99
            );
        }
    }
    write_csv(&reports.iter().collect::<Vec<_>>(), &out.join("windows.csv"))?;
    if reports.iter().any(|r| r.windows.iter().all(|w| w.handled == 0)) {
        bail!("a configuration handled no events");
    }
    Ok(ExitCode::SUCCESS)
}
