use std::fmt;
use std::str::FromStr;

use crate::error::GraphError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeviceKind {
    Cpu,
    /// Accelerator slot. Executed on the host, but scheduled on its own lane.
    Dev,
}

/// Logical compute slot, written `/cpu:0` or `/dev:1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceName {
    pub kind: DeviceKind,
    pub index: u16,
}

impl DeviceName {
    pub const CPU0: DeviceName = DeviceName { kind: DeviceKind::Cpu, index: 0 };

    pub const fn cpu(index: u16) -> DeviceName {
        DeviceName { kind: DeviceKind::Cpu, index }
    }

    pub const fn dev(index: u16) -> DeviceName {
        DeviceName { kind: DeviceKind::Dev, index }
    }

    /// `/cpu:0` followed by `count` accelerator slots.
    pub fn host_with_devs(count: u16) -> Vec<DeviceName> {
        std::iter::once(DeviceName::CPU0).chain((0..count).map(DeviceName::dev)).collect()
    }

    /// Parse a comma-separated list such as `/cpu:0,/dev:0`.
    pub fn parse_list(s: &str) -> Result<Vec<DeviceName>, GraphError> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for DeviceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            DeviceKind::Cpu => "cpu",
            DeviceKind::Dev => "dev",
        };
        write!(f, "/{kind}:{}", self.index)
    }
}

impl FromStr for DeviceName {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<DeviceName, GraphError> {
        let bad = || GraphError::BadDevice(s.to_string());
        let rest = s.strip_prefix('/').ok_or_else(bad)?;
        let (kind, index) = rest.split_once(':').ok_or_else(bad)?;
        let kind = match kind {
            "cpu" => DeviceKind::Cpu,
            "dev" => DeviceKind::Dev,
            _ => return Err(bad()),
        };
        if index.is_empty() || !index.bytes().all(|b| b.is_ascii_digit()) || (index.len() > 1 && index.starts_with('0')) {
            return Err(bad());
        }
        let index = index.parse::<u16>().map_err(|_| bad())?;
        Ok(DeviceName { kind, index })
    }
}
