//! Metrics records and sinks. Records are written as JSON lines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    ThroughputWindow,
    ResponseTime,
    InvokeLatency,
    WriteLatency,
    QueueDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsRecord {
    pub kind: MetricKind,
    pub instance: String,
    pub value: f64,
    pub unit: String,
    /// Wall-clock time in microseconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
}

impl MetricsRecord {
    pub fn new(kind: MetricKind, instance: impl Into<String>, value: f64, unit: &str) -> Self {
        MetricsRecord {
            kind,
            instance: instance.into(),
            value,
            unit: unit.to_string(),
            timestamp: now_micros(),
            labels: BTreeMap::new(),
        }
    }

    pub fn label(mut self, key: &str, value: impl ToString) -> Self {
        self.labels.insert(key.to_string(), value.to_string());
        self
    }
}

pub fn now_micros() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

pub trait MetricsSink: Send + Sync {
    fn record(&self, record: MetricsRecord);
    fn flush(&self) {}
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&self, _: MetricsRecord) {}
}

/// Keeps records in memory; used by tests and the in-process runner.
#[derive(Default)]
pub struct MemorySink {
    records: Mutex<Vec<MetricsRecord>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Vec<MetricsRecord> {
        self.records.lock().clone()
    }

    pub fn of_kind(&self, kind: MetricKind) -> Vec<MetricsRecord> {
        self.records.lock().iter().filter(|r| r.kind == kind).cloned().collect()
    }
}

impl MetricsSink for MemorySink {
    fn record(&self, record: MetricsRecord) {
        self.records.lock().push(record);
    }
}

/// Appends JSON lines to a file.
pub struct JsonLinesSink {
    out: Mutex<BufWriter<File>>,
}

impl JsonLinesSink {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(JsonLinesSink { out: Mutex::new(BufWriter::new(File::create(path)?)) })
    }
}

impl MetricsSink for JsonLinesSink {
    fn record(&self, record: MetricsRecord) {
        let mut out = self.out.lock();
        if let Ok(line) = serde_json::to_string(&record) {
            let _ = writeln!(out, "{line}");
        }
    }

    fn flush(&self) {
        let _ = self.out.lock().flush();
    }
}

impl Drop for JsonLinesSink {
    fn drop(&mut self) {
        let _ = self.out.get_mut().flush();
    }
}

/// Reads a JSON-lines metrics file, skipping malformed lines.
pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_encoding() {
        let rec = MetricsRecord {
            kind: MetricKind::InvokeLatency,
            instance: "controller-1".into(),
            value: 10.5,
            unit: "ms".into(),
            timestamp: 42,
            labels: BTreeMap::new(),
        }
        .label("local", false);
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            r#"{"kind":"invoke-latency","instance":"controller-1","value":10.5,"unit":"ms","timestamp":42,"labels":{"local":"false"}}"#
        );
        assert_eq!(serde_json::from_str::<MetricsRecord>(&line).unwrap(), rec);
    }
}
