//! Cluster specification: named jobs mapped to ordered task endpoints.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ClusterError;

/// Environment variable selecting a launched server's identity.
pub const TASK_ENV: &str = "FLOWHPC_TASK";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskAddress {
    pub host: String,
    pub port: u16,
}

impl TaskAddress {
    pub fn new(host: impl Into<String>, port: u16) -> TaskAddress {
        TaskAddress { host: host.into(), port }
    }
}

impl fmt::Display for TaskAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl FromStr for TaskAddress {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<TaskAddress, ClusterError> {
        let bad = |why: &str| ClusterError::InvalidSpec(format!("task address `{s}`: {why}"));
        let (host, port) = s.rsplit_once(':').ok_or_else(|| bad("missing port"))?;
        if host.is_empty() {
            return Err(bad("empty host"));
        }
        let port = port.parse().map_err(|_| bad("bad port"))?;
        Ok(TaskAddress::new(host, port))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskIdentity {
    pub job: String,
    pub index: usize,
}

impl TaskIdentity {
    pub fn new(job: impl Into<String>, index: usize) -> TaskIdentity {
        TaskIdentity { job: job.into(), index }
    }

    /// Identity from `FLOWHPC_TASK`, if set.
    pub fn from_env() -> Result<Option<TaskIdentity>, ClusterError> {
        match std::env::var(TASK_ENV) {
            Ok(v) => v.parse().map(Some),
            Err(_) => Ok(None),
        }
    }
}

impl fmt::Display for TaskIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.job, self.index)
    }
}

impl FromStr for TaskIdentity {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<TaskIdentity, ClusterError> {
        let bad = || ClusterError::InvalidSpec(format!("task identity `{s}` is not job:index"));
        let (job, index) = s.rsplit_once(':').ok_or_else(bad)?;
        if job.is_empty() {
            return Err(bad());
        }
        Ok(TaskIdentity::new(job, index.parse().map_err(|_| bad())?))
    }
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    jobs: BTreeMap<String, Vec<String>>,
}

/// Validated mapping of job name to task endpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterSpec {
    jobs: BTreeMap<String, Vec<TaskAddress>>,
}

impl ClusterSpec {
    pub fn new(jobs: BTreeMap<String, Vec<TaskAddress>>) -> Result<ClusterSpec, ClusterError> {
        let mut seen = HashSet::new();
        for (job, tasks) in &jobs {
            if job.is_empty() || job.contains(':') {
                return Err(ClusterError::InvalidSpec(format!("bad job name `{job}`")));
            }
            if tasks.is_empty() {
                return Err(ClusterError::InvalidSpec(format!("job `{job}` has no tasks")));
            }
            for t in tasks {
                if !seen.insert(t.clone()) {
                    return Err(ClusterError::InvalidSpec(format!("endpoint {t} appears twice")));
                }
            }
        }
        Ok(ClusterSpec { jobs })
    }

    /// Build from `(job, ["host:port", ...])` pairs.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Vec<&'a str>)>) -> Result<ClusterSpec, ClusterError> {
        let mut jobs = BTreeMap::new();
        for (job, tasks) in pairs {
            let tasks = tasks.into_iter().map(str::parse).collect::<Result<Vec<_>, _>>()?;
            if jobs.insert(job.to_string(), tasks).is_some() {
                return Err(ClusterError::InvalidSpec(format!("job `{job}` listed twice")));
            }
        }
        ClusterSpec::new(jobs)
    }

    pub fn from_json(text: &str) -> Result<ClusterSpec, ClusterError> {
        let file: SpecFile = serde_json::from_str(text).map_err(|e| ClusterError::InvalidSpec(e.to_string()))?;
        ClusterSpec::from_pairs(file.jobs.iter().map(|(j, t)| (j.as_str(), t.iter().map(String::as_str).collect())))
    }

    pub fn to_json(&self) -> String {
        let file = SpecFile {
            jobs: self.jobs.iter().map(|(j, t)| (j.clone(), t.iter().map(ToString::to_string).collect())).collect(),
        };
        serde_json::to_string_pretty(&file).expect("spec serializes")
    }

    pub fn load(path: &Path) -> Result<ClusterSpec, ClusterError> {
        ClusterSpec::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClusterError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn jobs(&self) -> &BTreeMap<String, Vec<TaskAddress>> {
        &self.jobs
    }

    pub fn job(&self, name: &str) -> Option<&[TaskAddress]> {
        self.jobs.get(name).map(Vec::as_slice)
    }

    pub fn task_count(&self, job: &str) -> usize {
        self.jobs.get(job).map_or(0, Vec::len)
    }

    pub fn address(&self, id: &TaskIdentity) -> Result<&TaskAddress, ClusterError> {
        self.jobs
            .get(&id.job)
            .and_then(|t| t.get(id.index))
            .ok_or_else(|| ClusterError::IdentityNotInSpec { job: id.job.clone(), index: id.index })
    }

    /// Every task in job-name then index order.
    pub fn tasks(&self) -> impl Iterator<Item = (TaskIdentity, &TaskAddress)> {
        self.jobs
            .iter()
            .flat_map(|(job, tasks)| tasks.iter().enumerate().map(move |(i, a)| (TaskIdentity::new(job.clone(), i), a)))
    }

    pub fn len(&self) -> usize {
        self.jobs.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let spec = ClusterSpec::from_pairs([("ps", vec!["t01n01:8888"]), ("worker", vec!["t01n02:8888", "t01n03:8888"])])
            .unwrap();
        let back = ClusterSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(spec.len(), 3);
        assert_eq!(spec.address(&TaskIdentity::new("worker", 1)).unwrap().to_string(), "t01n03:8888");
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(ClusterSpec::from_json(r#"{"jobs":{"ps":[]}}"#).is_err());
        assert!(ClusterSpec::from_json(r#"{"jobs":{"ps":["a:1"],"worker":["a:1"]}}"#).is_err());
        assert!(ClusterSpec::from_json(r#"{"jobs":{"":["a:1"]}}"#).is_err());
        assert!(ClusterSpec::from_json(r#"{"jobs":{"ps":["a"]}}"#).is_err());
        assert!(ClusterSpec::from_json(r#"{"tasks":{}}"#).is_err());
    }

    #[test]
    fn identity_bounds() {
        let spec = ClusterSpec::from_pairs([("ps", vec!["127.0.0.1:7000"])]).unwrap();
        assert!(matches!(
            spec.address(&TaskIdentity::new("ps", 1)),
            Err(ClusterError::IdentityNotInSpec { index: 1, .. })
        ));
        assert_eq!("worker:3".parse::<TaskIdentity>().unwrap(), TaskIdentity::new("worker", 3));
        assert!("worker".parse::<TaskIdentity>().is_err());
    }
}
