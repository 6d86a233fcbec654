//! Task server: accepts sessions and serves graph runs and state operations.

use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use flowhpc_core::{exec, DeviceName, Graph, GraphError, NodeId, RunOptions, StateError, Tensor};

use crate::checkpoint;
use crate::error::ClusterError;
use crate::proto;
use crate::spec::{ClusterSpec, TaskIdentity};
use crate::state::TaskState;
use crate::wire::{self, ErrorCode, Framing, MsgType, Payload, WireError};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub identity: Option<TaskIdentity>,
    pub spec: Option<ClusterSpec>,
    /// Devices exposed to graphs run on this task.
    pub devices: Vec<DeviceName>,
    pub soft_placement: bool,
    pub cpu_threads: usize,
    pub default_queue_capacity: usize,
}

impl Default for ServerConfig {
    fn default() -> ServerConfig {
        ServerConfig {
            identity: None,
            spec: None,
            devices: vec![DeviceName::CPU0],
            soft_placement: true,
            cpu_threads: 2,
            default_queue_capacity: crate::queue::DEFAULT_CAPACITY,
        }
    }
}

struct Shared {
    config: ServerConfig,
    state: Arc<TaskState>,
    addr: SocketAddr,
    stopping: AtomicBool,
    stopped: (Mutex<bool>, Condvar),
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
}

impl Shared {
    fn trigger_stop(&self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        self.state.close_all_queues();
        for (_, c) in self.conns.lock().unwrap().drain() {
            let _ = c.shutdown(Shutdown::Both);
        }
        // Unblock the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        *self.stopped.0.lock().unwrap() = true;
        self.stopped.1.notify_all();
    }
}

pub struct Server {
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl Server {
    /// Bind the address `identity` has in `spec` and start serving.
    pub fn serve(identity: TaskIdentity, spec: ClusterSpec, devices: Vec<DeviceName>) -> Result<Server, ClusterError> {
        let addr = spec.address(&identity)?.to_string();
        let listener = TcpListener::bind(&addr).map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => ClusterError::AddressInUse(addr.clone()),
            _ => ClusterError::Io(e),
        })?;
        let config = ServerConfig { identity: Some(identity), spec: Some(spec), devices, ..ServerConfig::default() };
        Server::from_listener(listener, config)
    }

    /// Serve on an already bound listener.
    pub fn from_listener(listener: TcpListener, config: ServerConfig) -> Result<Server, ClusterError> {
        if !config.devices.contains(&DeviceName::CPU0) {
            return Err(ClusterError::InvalidSpec("device list must include /cpu:0".into()));
        }
        let addr = listener.local_addr()?;
        let state = Arc::new(TaskState::with_capacity(
            config.identity.clone(),
            config.spec.clone(),
            config.default_queue_capacity,
        ));
        let shared = Arc::new(Shared {
            config,
            state,
            addr,
            stopping: AtomicBool::new(false),
            stopped: (Mutex::new(false), Condvar::new()),
            conns: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(0),
        });
        let s = shared.clone();
        let acceptor = thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || accept_loop(listener, s))?;
        Ok(Server { shared, acceptor: Some(acceptor) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.addr
    }

    pub fn identity(&self) -> Option<&TaskIdentity> {
        self.shared.config.identity.as_ref()
    }

    pub fn devices(&self) -> &[DeviceName] {
        &self.shared.config.devices
    }

    pub fn state(&self) -> &Arc<TaskState> {
        &self.shared.state
    }

    pub fn is_stopping(&self) -> bool {
        self.shared.stopping.load(Ordering::SeqCst)
    }

    /// Block until a client sends `Shutdown` or [`Server::shutdown`] runs.
    pub fn wait(&self) {
        let mut stopped = self.shared.stopped.0.lock().unwrap();
        while !*stopped {
            stopped = self.shared.stopped.1.wait(stopped).unwrap();
        }
    }

    /// Close all queues, drop all connections and stop accepting.
    pub fn shutdown(&mut self) {
        self.shared.trigger_stop();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed on {}: {e}", shared.addr);
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
        match stream.try_clone() {
            Ok(c) => {
                shared.conns.lock().unwrap().insert(id, c);
            }
            Err(e) => {
                log::warn!("cannot track connection: {e}");
                continue;
            }
        }
        let s = shared.clone();
        let spawned = thread::Builder::new().name(format!("conn-{id}")).spawn(move || {
            serve_connection(stream, &s);
            s.conns.lock().unwrap().remove(&id);
        });
        if let Err(e) = spawned {
            log::warn!("cannot spawn connection thread: {e}");
        }
    }
}

fn protocol(e: impl ToString) -> WireError {
    WireError::new(ErrorCode::Protocol, e.to_string())
}

fn state_err(e: StateError) -> WireError {
    WireError::from_state(&e)
}

/// Receive buffers larger than this are released after each frame.
const KEEP_RECV_BUFFER: usize = 256 << 20;

fn serve_connection(mut stream: TcpStream, shared: &Shared) {
    let mut graphs: HashMap<u64, Arc<Graph>> = HashMap::new();
    let mut payload = Vec::new();
    loop {
        if payload.capacity() > KEEP_RECV_BUFFER {
            payload = Vec::new();
        }
        let (raw_msg, request_id) = match wire::read_frame_into(&mut stream, &mut payload) {
            Ok(f) => f,
            Err(e) => {
                if e.kind() != io::ErrorKind::UnexpectedEof {
                    log::debug!("connection closed: {e}");
                }
                return;
            }
        };
        let msg = MsgType::from_u8(raw_msg);
        let outcome = match msg {
            Some(MsgType::Shutdown) => {
                let _ = wire::write_frame(&mut stream, MsgType::Shutdown, request_id, &Payload::new(), Framing::Eager);
                shared.trigger_stop();
                return;
            }
            Some(m) => handle(m, &payload, shared, &mut graphs, &mut stream, request_id),
            None => Err(protocol(format!("unknown message type {}", raw_msg))),
        };
        let written = match outcome {
            Ok(()) => Ok(()),
            Err(w) => {
                let body = w.encode();
                wire::write_raw_frame(&mut stream, MsgType::Error, request_id, &body, Framing::Eager)
            }
        };
        if written.is_err() {
            return;
        }
    }
}

fn reply(stream: &mut TcpStream, msg: MsgType, id: u32, payload: &Payload<'_>) -> Result<(), WireError> {
    // A failed write means the client is gone; the read side notices next.
    let _ = wire::write_frame(stream, msg, id, payload, Framing::Eager);
    Ok(())
}

fn handle(
    msg: MsgType,
    payload: &[u8],
    shared: &Shared,
    graphs: &mut HashMap<u64, Arc<Graph>>,
    stream: &mut TcpStream,
    id: u32,
) -> Result<(), WireError> {
    let state = &shared.state;
    match msg {
        MsgType::Ping => {
            let mut p = Payload::new();
            p.bytes(payload);
            reply(stream, msg, id, &p)
        }
        MsgType::RegisterGraph => {
            if payload.len() < 8 {
                return Err(protocol("short RegisterGraph payload"));
            }
            let version = u64::from_le_bytes(payload[..8].try_into().unwrap());
            let graph = Graph::from_bytes(&payload[8..]).map_err(|e| WireError::from_graph(&e))?;
            graphs.insert(version, Arc::new(graph));
            reply(stream, msg, id, &Payload::new())
        }
        MsgType::RunGraph => {
            let req = proto::decode_run(payload).map_err(protocol)?;
            let graph = graphs
                .get(&req.version)
                .cloned()
                .ok_or_else(|| WireError::new(ErrorCode::UnknownGraph, format!("graph version {} not registered", req.version)))?;
            let feeds: HashMap<NodeId, Tensor> = req.feeds.into_iter().collect();
            let opts = RunOptions {
                devices: shared.config.devices.clone(),
                soft_placement: shared.config.soft_placement,
                parallel: !req.flags.single_threaded,
                trace: req.flags.trace,
                cpu_threads: shared.config.cpu_threads,
            };
            let store = state.store(req.flags.framing);
            let out = exec::run(&graph, &req.fetches, &feeds, &store, &opts).map_err(|e: GraphError| WireError::from_graph(&e))?;
            let values: &[Tensor] = if req.flags.return_values { &out.values } else { &[] };
            reply(stream, msg, id, &proto::encode_run_response(values, out.trace.as_ref()))
        }
        MsgType::Enqueue => {
            let (q, element, close) = proto::decode_enqueue(payload).map_err(protocol)?;
            if !element.is_empty() || !close {
                state.enqueue(&q, element).map_err(state_err)?;
            }
            if close {
                state.queue(&q.name, q.capacity).close();
            }
            reply(stream, msg, id, &Payload::new())
        }
        MsgType::Dequeue => {
            let q = proto::decode_dequeue(payload).map_err(protocol)?;
            let element = state.dequeue(&q).map_err(state_err)?;
            reply(stream, msg, id, &proto::encode_tensors(&element))
        }
        MsgType::AssignAdd => {
            let (name, value, replace, read_back) = proto::decode_assign_view(payload).map_err(protocol)?;
            if replace {
                let value = Tensor::from_le_bytes(value.dtype, value.shape, value.data)
                    .map_err(|e| protocol(e.to_string()))?;
                state.assign(&name, value).map_err(state_err)?;
                reply(stream, msg, id, &proto::encode_optional_tensor(None))
            } else {
                let updated = state.assign_add_le(&name, &value).map_err(state_err)?;
                reply(stream, msg, id, &proto::encode_optional_tensor(read_back.then_some(&updated)))
            }
        }
        MsgType::ReadVariable => {
            let name = proto::decode_name(payload).map_err(protocol)?;
            let t = state.read(&name).map_err(state_err)?;
            reply(stream, msg, id, &proto::encode_tensor(&t))
        }
        MsgType::CheckpointSave => {
            let (cid, dir) = proto::decode_checkpoint(payload).map_err(protocol)?;
            let manifest = checkpoint::save(Path::new(&dir), cid, &state.snapshot())
                .map_err(|e| WireError::new(ErrorCode::Checkpoint, e.to_string()))?;
            reply(stream, msg, id, &proto::encode_u32(manifest.entries.len() as u32))
        }
        MsgType::CheckpointRestore => {
            let (cid, dir) = proto::decode_checkpoint(payload).map_err(protocol)?;
            let vars = checkpoint::restore(Path::new(&dir), cid)
                .map_err(|e| WireError::new(ErrorCode::Checkpoint, e.to_string()))?;
            let n = vars.len() as u32;
            state.restore(vars);
            reply(stream, msg, id, &proto::encode_u32(n))
        }
        MsgType::Shutdown | MsgType::Error => Err(protocol(format!("unexpected {msg:?} request"))),
    }
}
