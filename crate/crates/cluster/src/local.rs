//! In-process cluster on loopback, one server per task.

use std::collections::BTreeMap;
use std::net::TcpListener;

use flowhpc_core::DeviceName;

use crate::error::ClusterError;
use crate::server::{Server, ServerConfig};
use crate::spec::{ClusterSpec, TaskAddress, TaskIdentity};

pub struct LocalCluster {
    spec: ClusterSpec,
    devices: BTreeMap<TaskIdentity, Vec<DeviceName>>,
    servers: BTreeMap<TaskIdentity, Server>,
}

impl LocalCluster {
    /// Start `(job, task count)` servers on ephemeral loopback ports, each
    /// exposing `/cpu:0` plus `devs_per_task` accelerator slots.
    pub fn start(jobs: &[(&str, usize)], devs_per_task: u16) -> Result<LocalCluster, ClusterError> {
        let mut listeners = Vec::new();
        let mut spec_jobs: BTreeMap<String, Vec<TaskAddress>> = BTreeMap::new();
        for &(job, count) in jobs {
            for index in 0..count {
                let l = TcpListener::bind("127.0.0.1:0")?;
                let port = l.local_addr()?.port();
                spec_jobs.entry(job.to_string()).or_default().push(TaskAddress::new("127.0.0.1", port));
                listeners.push((TaskIdentity::new(job, index), l));
            }
        }
        let spec = ClusterSpec::new(spec_jobs)?;
        let mut cluster = LocalCluster { spec, devices: BTreeMap::new(), servers: BTreeMap::new() };
        for (id, l) in listeners {
            let devices = DeviceName::host_with_devs(devs_per_task);
            cluster.devices.insert(id.clone(), devices.clone());
            let server = Server::from_listener(l, cluster.config(&id, devices))?;
            cluster.servers.insert(id, server);
        }
        Ok(cluster)
    }

    fn config(&self, id: &TaskIdentity, devices: Vec<DeviceName>) -> ServerConfig {
        ServerConfig { identity: Some(id.clone()), spec: Some(self.spec.clone()), devices, ..ServerConfig::default() }
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn address(&self, id: &TaskIdentity) -> Result<String, ClusterError> {
        Ok(self.spec.address(id)?.to_string())
    }

    pub fn server(&self, id: &TaskIdentity) -> Option<&Server> {
        self.servers.get(id)
    }

    pub fn identities(&self) -> impl Iterator<Item = &TaskIdentity> {
        self.servers.keys()
    }

    /// Abruptly stop one task, as if its process died. Its variables and
    /// queues are lost.
    pub fn kill(&mut self, id: &TaskIdentity) {
        if let Some(mut s) = self.servers.remove(id) {
            s.shutdown();
        }
    }

    /// Start a fresh server for a killed task on its original port.
    pub fn restart(&mut self, id: &TaskIdentity) -> Result<(), ClusterError> {
        self.kill(id);
        let addr = self.address(id)?;
        let l = TcpListener::bind(&addr).map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => ClusterError::AddressInUse(addr.clone()),
            _ => ClusterError::Io(e),
        })?;
        let devices = self.devices.get(id).cloned().unwrap_or_else(|| vec![DeviceName::CPU0]);
        let server = Server::from_listener(l, self.config(id, devices))?;
        self.servers.insert(id.clone(), server);
        Ok(())
    }

    pub fn shutdown(&mut self) {
        for (_, mut s) in std::mem::take(&mut self.servers) {
            s.shutdown();
        }
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        self.shutdown();
    }
}
