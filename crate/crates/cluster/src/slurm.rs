//! Cluster specs from a Slurm allocation.

use std::collections::BTreeMap;
use std::process::Command;

use flowhpc_core::DeviceName;
use thiserror::Error;

use crate::error::ClusterError;
use crate::spec::{ClusterSpec, TaskAddress, TaskIdentity};

pub const NODELIST_ENV: &str = "SLURM_JOB_NODELIST";
pub const TASKS_PER_NODE_ENV: &str = "SLURM_NTASKS_PER_NODE";

/// Guard against ranges like `n[0-999999999]`.
const MAX_HOSTS: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum SlurmError {
    #[error("hostlist parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("{needed} tasks need more than {nodes} nodes at {per_node} tasks per node")]
    InsufficientNodes { needed: usize, nodes: usize, per_node: usize },
    #[error("{devices} devices per node cannot be split evenly over {tasks} tasks")]
    IndivisibleDevices { devices: usize, tasks: usize },
    #[error("invalid resolver config: {0}")]
    InvalidConfig(String),
    #[error("scontrol failed: {0}")]
    Scontrol(String),
    #[error(transparent)]
    Spec(#[from] ClusterError),
}

fn parse_err(offset: usize, reason: impl Into<String>) -> SlurmError {
    SlurmError::Parse { offset, reason: reason.into() }
}

fn is_host_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, b'-' | b'.' | b'_')
}

/// Expand `lo-hi` or `n` inside brackets. Zero padding follows the width of
/// the lower bound.
fn expand_range(text: &str, base: usize, out: &mut Vec<String>) -> Result<(), SlurmError> {
    let digits = |s: &str, at: usize| -> Result<u64, SlurmError> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(parse_err(at, format!("`{s}` is not a number")));
        }
        s.parse().map_err(|_| parse_err(at, "number too large"))
    };
    match text.split_once('-') {
        None => {
            digits(text, base)?;
            out.push(text.to_string());
        }
        Some((lo_s, hi_s)) => {
            let lo = digits(lo_s, base)?;
            let hi = digits(hi_s, base + lo_s.len() + 1)?;
            if hi < lo {
                return Err(parse_err(base, format!("range {lo_s}-{hi_s} is decreasing")));
            }
            if (hi - lo) as usize >= MAX_HOSTS {
                return Err(parse_err(base, "range too large"));
            }
            let width = lo_s.len();
            out.extend((lo..=hi).map(|i| format!("{i:0width$}")));
        }
    }
    Ok(())
}

/// Expand one comma-free group such as `t01n[01-03,05]` or `r[1-2]n[3-4]`.
/// Brackets multiply left to right; the leftmost varies slowest.
fn expand_group(group: &str, base: usize) -> Result<Vec<String>, SlurmError> {
    let bytes = group.as_bytes();
    let mut acc = vec![String::new()];
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'[' => {
                let close = group[i..].find(']').map(|c| c + i).ok_or_else(|| parse_err(base + i, "unclosed `[`"))?;
                let inner = &group[i + 1..close];
                if inner.is_empty() {
                    return Err(parse_err(base + i, "empty brackets"));
                }
                let mut values = Vec::new();
                let mut off = i + 1;
                for part in inner.split(',') {
                    expand_range(part, base + off, &mut values)?;
                    off += part.len() + 1;
                }
                if acc.len().saturating_mul(values.len()) > MAX_HOSTS {
                    return Err(parse_err(base + i, "hostlist too large"));
                }
                acc = acc.iter().flat_map(|a| values.iter().map(move |v| format!("{a}{v}"))).collect();
                i = close + 1;
            }
            b']' => return Err(parse_err(base + i, "unmatched `]`")),
            c if is_host_char(c) => {
                let start = i;
                while i < bytes.len() && is_host_char(bytes[i]) {
                    i += 1;
                }
                let lit = &group[start..i];
                acc.iter_mut().for_each(|a| a.push_str(lit));
            }
            _ => return Err(parse_err(base + i, format!("unexpected character `{}`", group[i..].chars().next().unwrap()))),
        }
    }
    Ok(acc)
}

/// Expand a Slurm compressed hostlist, preserving order and zero padding.
pub fn expand_hostlist(compressed: &str) -> Result<Vec<String>, SlurmError> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    let bytes = compressed.as_bytes();
    for i in 0..=bytes.len() {
        let c = bytes.get(i).copied().unwrap_or(b',');
        match c {
            b'[' => {
                if depth > 0 {
                    return Err(parse_err(i, "nested `[`"));
                }
                depth += 1;
            }
            b']' => {
                if depth == 0 {
                    return Err(parse_err(i, "unmatched `]`"));
                }
                depth -= 1;
            }
            b',' if depth == 0 => {
                if i == start {
                    return Err(parse_err(i, "empty host group"));
                }
                out.extend(expand_group(&compressed[start..i], start)?);
                if out.len() > MAX_HOSTS {
                    return Err(parse_err(start, "hostlist too large"));
                }
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth > 0 {
        return Err(parse_err(compressed.len(), "unclosed `[`"));
    }
    Ok(out)
}

/// Expand through `scontrol show hostnames`, for allocations whose node
/// names this parser does not cover.
pub fn expand_with_scontrol(compressed: &str) -> Result<Vec<String>, SlurmError> {
    let out = Command::new("scontrol")
        .args(["show", "hostnames", compressed])
        .output()
        .map_err(|e| SlurmError::Scontrol(e.to_string()))?;
    if !out.status.success() {
        return Err(SlurmError::Scontrol(String::from_utf8_lossy(&out.stderr).trim().to_string()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).split_whitespace().map(str::to_string).collect())
}

pub fn nodelist_from_env() -> Option<String> {
    std::env::var(NODELIST_ENV).ok().filter(|s| !s.is_empty())
}

/// `SLURM_NTASKS_PER_NODE`, reading the leading count of forms like `2(x3)`.
pub fn tasks_per_node_from_env() -> Option<usize> {
    let v = std::env::var(TASKS_PER_NODE_ENV).ok()?;
    let digits: String = v.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolverConfig {
    /// Jobs in layout order.
    pub jobs: Vec<(String, usize)>,
    pub tasks_per_node: usize,
    pub base_port: u16,
    pub devices_per_node: usize,
    /// Reject device counts that do not divide evenly over the tasks of a
    /// node instead of leaving the remainder unassigned.
    pub strict_devices: bool,
}

impl ResolverConfig {
    pub fn new(jobs: &[(&str, usize)], tasks_per_node: usize, base_port: u16, devices_per_node: usize) -> ResolverConfig {
        ResolverConfig {
            jobs: jobs.iter().map(|(j, n)| (j.to_string(), *n)).collect(),
            tasks_per_node,
            base_port,
            devices_per_node,
            strict_devices: false,
        }
    }

    pub fn total_tasks(&self) -> usize {
        self.jobs.iter().map(|(_, n)| n).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskPlacement {
    pub identity: TaskIdentity,
    pub node: String,
    pub port: u16,
    /// Node-level device indices this task may use.
    pub visible_devices: Vec<usize>,
}

impl TaskPlacement {
    /// Devices as the task sees them: its slice renumbered from `/dev:0`.
    pub fn devices(&self) -> Vec<DeviceName> {
        DeviceName::host_with_devs(self.visible_devices.len() as u16)
    }
}

#[derive(Clone, Debug)]
pub struct Resolution {
    pub spec: ClusterSpec,
    pub tasks: Vec<TaskPlacement>,
}

impl Resolution {
    pub fn placement(&self, id: &TaskIdentity) -> Option<&TaskPlacement> {
        self.tasks.iter().find(|t| &t.identity == id)
    }
}

/// Lay jobs out over the nodes of `nodelist`, filling each node with
/// `tasks_per_node` tasks before moving to the next.
pub fn resolve(config: &ResolverConfig, nodelist: &str) -> Result<Resolution, SlurmError> {
    resolve_nodes(config, &expand_hostlist(nodelist)?)
}

pub fn resolve_nodes(config: &ResolverConfig, nodes: &[String]) -> Result<Resolution, SlurmError> {
    let tpn = config.tasks_per_node;
    if tpn == 0 {
        return Err(SlurmError::InvalidConfig("tasks per node must be positive".into()));
    }
    if config.jobs.is_empty() || config.jobs.iter().any(|(j, n)| j.is_empty() || *n == 0) {
        return Err(SlurmError::InvalidConfig("every job needs a name and at least one task".into()));
    }
    if config.base_port as usize + tpn - 1 > u16::MAX as usize {
        return Err(SlurmError::InvalidConfig("port range exceeds 65535".into()));
    }
    if config.strict_devices && config.devices_per_node % tpn != 0 {
        return Err(SlurmError::IndivisibleDevices { devices: config.devices_per_node, tasks: tpn });
    }
    let total = config.total_tasks();
    if total > nodes.len().saturating_mul(tpn) {
        return Err(SlurmError::InsufficientNodes { needed: total, nodes: nodes.len(), per_node: tpn });
    }
    let per_task = config.devices_per_node / tpn;
    let mut jobs: BTreeMap<String, Vec<TaskAddress>> = BTreeMap::new();
    let mut tasks = Vec::with_capacity(total);
    let mut slot = 0usize;
    for (job, count) in &config.jobs {
        for index in 0..*count {
            let node = &nodes[slot / tpn];
            let local = slot % tpn;
            let port = config.base_port + local as u16;
            jobs.entry(job.clone()).or_default().push(TaskAddress::new(node.clone(), port));
            tasks.push(TaskPlacement {
                identity: TaskIdentity::new(job.clone(), index),
                node: node.clone(),
                port,
                visible_devices: (local * per_task..(local + 1) * per_task).collect(),
            });
            slot += 1;
        }
    }
    Ok(Resolution { spec: ClusterSpec::new(jobs)?, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hosts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn expansion_examples() {
        assert_eq!(expand_hostlist("t01n01").unwrap(), hosts(&["t01n01"]));
        assert_eq!(expand_hostlist("t01n[01-03]").unwrap(), hosts(&["t01n01", "t01n02", "t01n03"]));
        assert_eq!(expand_hostlist("a[1-2],b3").unwrap(), hosts(&["a1", "a2", "b3"]));
        assert_eq!(expand_hostlist("t01n[01-03,05]").unwrap(), hosts(&["t01n01", "t01n02", "t01n03", "t01n05"]));
        assert_eq!(expand_hostlist("r[1-2]n[8-9]").unwrap(), hosts(&["r1n8", "r1n9", "r2n8", "r2n9"]));
        assert_eq!(expand_hostlist("n[098-101]").unwrap(), hosts(&["n098", "n099", "n100", "n101"]));
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let off = |s: &str| match expand_hostlist(s) {
            Err(SlurmError::Parse { offset, .. }) => offset,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(off("a[1-2"), 5);
        assert_eq!(off("a]"), 1);
        assert_eq!(off("a[3-1]"), 2);
        assert_eq!(off("a[[1]]"), 2);
        assert_eq!(off("a,,b"), 2);
        assert_eq!(off("a[1-x]"), 4);
        assert_eq!(off("a b"), 1);
    }

    #[test]
    fn listing_two_layout() {
        let cfg = ResolverConfig::new(&[("ps", 1), ("worker", 2)], 1, 8888, 0);
        let r = resolve(&cfg, "t01n[01-03]").unwrap();
        let expected =
            ClusterSpec::from_pairs([("ps", vec!["t01n01:8888"]), ("worker", vec!["t01n02:8888", "t01n03:8888"])]).unwrap();
        assert_eq!(r.spec, expected);
    }

    #[test]
    fn device_slices() {
        let cfg = ResolverConfig::new(&[("worker", 2)], 2, 9000, 2);
        let r = resolve(&cfg, "n1").unwrap();
        assert_eq!(r.tasks[0].visible_devices, vec![0]);
        assert_eq!(r.tasks[1].visible_devices, vec![1]);
        assert_eq!(r.tasks[1].port, 9001);
        assert_eq!(r.tasks[1].devices(), vec![DeviceName::CPU0, DeviceName::dev(0)]);

        let single = resolve(&ResolverConfig::new(&[("worker", 1)], 1, 7000, 4), "solo").unwrap();
        assert_eq!(single.tasks[0].visible_devices, vec![0, 1, 2, 3]);
        assert_eq!(single.spec.address(&TaskIdentity::new("worker", 0)).unwrap().to_string(), "solo:7000");
    }

    #[test]
    fn remainder_and_strict_modes() {
        let mut cfg = ResolverConfig::new(&[("worker", 2)], 2, 9000, 3);
        let r = resolve(&cfg, "n1").unwrap();
        assert_eq!(r.tasks[0].visible_devices, vec![0]);
        assert_eq!(r.tasks[1].visible_devices, vec![1]);
        cfg.strict_devices = true;
        assert!(matches!(resolve(&cfg, "n1"), Err(SlurmError::IndivisibleDevices { devices: 3, tasks: 2 })));
    }

    #[test]
    fn insufficient_nodes() {
        let cfg = ResolverConfig::new(&[("ps", 1), ("worker", 4)], 2, 9000, 0);
        assert!(matches!(resolve(&cfg, "n[1-2]"), Err(SlurmError::InsufficientNodes { needed: 5, .. })));
    }
}
