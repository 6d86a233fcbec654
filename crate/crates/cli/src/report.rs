//! Run reports as append-only CSV and JSON lines.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

pub const SCHEMA: &str = "# flowhpc-report v1";

pub const COLUMNS: [&str; 14] = [
    "app",
    "cluster",
    "devices_per_task",
    "params",
    "rep",
    "total_s",
    "collect_s",
    "merge_s",
    "flops",
    "rate",
    "rate_unit",
    "host",
    "cores",
    "build",
];

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunReport {
    pub app: String,
    /// `job:count` pairs joined by `;`.
    pub cluster: String,
    pub devices_per_task: u16,
    /// `key=value` pairs joined by `;`.
    pub params: String,
    pub rep: usize,
    pub total_s: f64,
    pub collect_s: Option<f64>,
    pub merge_s: Option<f64>,
    pub flops: Option<u64>,
    /// Gflops/s for compute apps, MB/s for the stream benchmark.
    pub rate: f64,
    pub rate_unit: String,
    pub host: String,
    pub cores: usize,
    pub build: String,
}

#[derive(Clone, Debug)]
pub struct Fingerprint {
    pub host: String,
    pub cores: usize,
    pub build: String,
}

impl Fingerprint {
    pub fn current() -> Fingerprint {
        let host = std::env::var("HOSTNAME")
            .ok()
            .or_else(|| fs::read_to_string("/etc/hostname").ok().map(|s| s.trim().to_string()))
            .filter(|h| !h.is_empty())
            .unwrap_or_else(|| "unknown".into());
        let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
        Fingerprint {
            host,
            cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            build: format!("{}-{profile}", env!("CARGO_PKG_VERSION")),
        }
    }
}

/// Gflops/s from a flop count and seconds.
pub fn gflops(flops: u64, seconds: f64) -> f64 {
    flops as f64 / seconds / 1e9
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl RunReport {
    pub fn csv_row(&self) -> String {
        [
            field(&self.app),
            field(&self.cluster),
            self.devices_per_task.to_string(),
            field(&self.params),
            self.rep.to_string(),
            self.total_s.to_string(),
            opt(&self.collect_s),
            opt(&self.merge_s),
            opt(&self.flops),
            self.rate.to_string(),
            field(&self.rate_unit),
            field(&self.host),
            self.cores.to_string(),
            field(&self.build),
        ]
        .join(",")
    }
}

/// Append rows, writing the schema comment and column header only when the
/// file is new or empty.
pub fn append_csv(path: &Path, reports: &[RunReport]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut out = String::new();
    if fresh {
        out.push_str(SCHEMA);
        out.push('\n');
        out.push_str(&COLUMNS.join(","));
        out.push('\n');
    }
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    f.write_all(out.as_bytes())
}

pub fn append_jsonl(path: &Path, reports: &[RunReport]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    f.write_all(out.as_bytes())
}

/// Index of the report with the median collect (or total) time.
pub fn median_index(reports: &[RunReport]) -> Option<usize> {
    let mut idx: Vec<usize> = (0..reports.len()).collect();
    idx.sort_by(|&a, &b| phase_time(&reports[a]).total_cmp(&phase_time(&reports[b])));
    idx.get(idx.len().checked_sub(1)? / 2).copied()
}

/// The scaling-relevant time: collect phase when measured, else total.
pub fn phase_time(r: &RunReport) -> f64 {
    r.collect_s.unwrap_or(r.total_s)
}
