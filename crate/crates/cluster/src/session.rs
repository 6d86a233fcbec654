//! Client side of the transport.

use std::collections::{HashMap, HashSet};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use flowhpc_core::graph::DEFAULT_QUEUE_TIMEOUT_MS;
use flowhpc_core::{Graph, NodeId, QueueRef, Tensor, TraceLog};

use crate::error::ClusterError;
use crate::proto::{self, RunFlags};
use crate::wire::{self, ErrorCode, Framing, MsgType, Payload, WireError};

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_millis(DEFAULT_QUEUE_TIMEOUT_MS);

/// One request/response stream to a task server.
pub struct Connection {
    stream: TcpStream,
    peer: String,
    next_id: u32,
    last_response_len: usize,
}

fn resolve(addr: &str) -> Result<Vec<SocketAddr>, ClusterError> {
    addr.to_socket_addrs()
        .map(|a| a.collect())
        .map_err(|e| ClusterError::ConnectionFailed { addr: addr.to_string(), reason: e.to_string() })
}

impl Connection {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Connection, ClusterError> {
        let mut last = String::from("no addresses");
        for sa in resolve(addr)? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    return Ok(Connection { stream, peer: addr.to_string(), next_id: 1, last_response_len: 0 });
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(ClusterError::ConnectionFailed { addr: addr.to_string(), reason: last })
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    /// Bound the wait for any single response; `None` waits forever.
    pub fn set_response_timeout(&self, timeout: Option<Duration>) -> Result<(), ClusterError> {
        self.stream.set_read_timeout(timeout)?;
        Ok(())
    }

    /// Payload length of the most recent response frame.
    pub fn last_response_len(&self) -> usize {
        self.last_response_len
    }

    /// Send one request and wait for its response payload.
    pub fn call(&mut self, msg: MsgType, payload: &Payload<'_>, framing: Framing) -> Result<Vec<u8>, ClusterError> {
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1);
        wire::write_frame(&mut self.stream, msg, id, payload, framing).map_err(|e| self.io_failure(e))?;
        let frame = wire::read_frame(&mut self.stream).map_err(|e| self.io_failure(e))?;
        self.last_response_len = frame.payload.len();
        if frame.request_id != id {
            return Err(ClusterError::Protocol(format!("response id {} for request {id}", frame.request_id)));
        }
        match frame.msg_type() {
            Some(MsgType::Error) => Err(ClusterError::Remote(
                WireError::decode(&frame.payload).map_err(|e| ClusterError::Protocol(e.to_string()))?,
            )),
            Some(t) if t == msg => Ok(frame.payload),
            _ => Err(ClusterError::Protocol(format!("response type {} for request {:?}", frame.msg, msg))),
        }
    }

    fn io_failure(&self, e: std::io::Error) -> ClusterError {
        match e.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => ClusterError::Io(e),
            _ => ClusterError::ConnectionFailed { addr: self.peer.clone(), reason: e.to_string() },
        }
    }
}

fn decode<T>(r: Result<T, flowhpc_core::codec::DecodeError>) -> Result<T, ClusterError> {
    r.map_err(|e| ClusterError::Protocol(e.to_string()))
}

/// Options for one remote graph run.
#[derive(Clone, Debug)]
pub struct SessionRunOptions {
    /// Off: the server only acknowledges, no tensors travel back.
    pub return_values: bool,
    pub trace: bool,
    pub single_threaded: bool,
    /// Framing the server uses when the run forwards tensors to peers.
    pub framing: Framing,
}

impl Default for SessionRunOptions {
    fn default() -> SessionRunOptions {
        SessionRunOptions { return_values: true, trace: false, single_threaded: false, framing: Framing::Eager }
    }
}

#[derive(Clone, Debug)]
pub struct SessionOutput {
    pub values: Vec<Tensor>,
    pub trace: Option<TraceLog>,
}

/// A client connection that registers each graph once and then runs it by
/// version. Not shareable across threads; open one session per thread.
pub struct Session {
    conn: Connection,
    registered: HashSet<u64>,
    framing: Framing,
}

impl Session {
    pub fn connect(addr: &str) -> Result<Session, ClusterError> {
        Session::connect_timeout(addr, DEFAULT_CONNECT_TIMEOUT)
    }

    pub fn connect_timeout(addr: &str, timeout: Duration) -> Result<Session, ClusterError> {
        Ok(Session { conn: Connection::connect(addr, timeout)?, registered: HashSet::new(), framing: Framing::Eager })
    }

    /// Framing for frames this session sends.
    pub fn set_framing(&mut self, framing: Framing) {
        self.framing = framing;
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    pub fn last_response_len(&self) -> usize {
        self.conn.last_response_len()
    }

    pub fn ping(&mut self, payload: &[u8]) -> Result<Vec<u8>, ClusterError> {
        let mut p = Payload::new();
        p.bytes(payload);
        self.conn.call(MsgType::Ping, &p, self.framing)
    }

    pub fn register(&mut self, graph: &Graph) -> Result<(), ClusterError> {
        let bytes = graph.to_bytes()?;
        let mut p = Payload::new();
        p.u64(graph.version()).bytes(&bytes);
        self.conn.call(MsgType::RegisterGraph, &p, self.framing)?;
        self.registered.insert(graph.version());
        Ok(())
    }

    pub fn run(
        &mut self,
        graph: &Graph,
        fetches: &[NodeId],
        feeds: &HashMap<NodeId, Tensor>,
        opts: &SessionRunOptions,
    ) -> Result<SessionOutput, ClusterError> {
        if !self.registered.contains(&graph.version()) {
            self.register(graph)?;
        }
        let flags = RunFlags {
            return_values: opts.return_values,
            trace: opts.trace,
            single_threaded: opts.single_threaded,
            framing: opts.framing,
        };
        let mut feed_list: Vec<(NodeId, &Tensor)> = feeds.iter().map(|(k, v)| (*k, v)).collect();
        feed_list.sort_by_key(|(k, _)| *k);
        let payload = proto::encode_run(&flags, graph.version(), fetches, &feed_list);
        let resp = match self.conn.call(MsgType::RunGraph, &payload, self.framing) {
            Err(ClusterError::Remote(w)) if w.code == ErrorCode::UnknownGraph => {
                self.register(graph)?;
                self.conn.call(MsgType::RunGraph, &payload, self.framing)?
            }
            other => other?,
        };
        let (values, trace) = decode(proto::decode_run_response(&resp, opts.trace))?;
        Ok(SessionOutput { values, trace })
    }

    /// Run with default options and return the fetched values.
    pub fn run_values(&mut self, graph: &Graph, fetches: &[NodeId], feeds: &HashMap<NodeId, Tensor>) -> Result<Vec<Tensor>, ClusterError> {
        Ok(self.run(graph, fetches, feeds, &SessionRunOptions::default())?.values)
    }

    pub fn enqueue(&mut self, queue: &QueueRef, components: &[Tensor]) -> Result<(), ClusterError> {
        self.conn.call(MsgType::Enqueue, &proto::encode_enqueue(queue, components, false), self.framing)?;
        Ok(())
    }

    /// Close a queue; pending elements remain dequeueable.
    pub fn close_queue(&mut self, queue: &QueueRef) -> Result<(), ClusterError> {
        self.conn.call(MsgType::Enqueue, &proto::encode_enqueue(queue, &[], true), self.framing)?;
        Ok(())
    }

    pub fn dequeue(&mut self, queue: &QueueRef) -> Result<Vec<Tensor>, ClusterError> {
        let resp = self.conn.call(MsgType::Dequeue, &proto::encode_dequeue(queue), self.framing)?;
        decode(proto::decode_tensors(&resp))
    }

    /// Atomically add `delta` to a variable on the server. Returns the new
    /// value only when `read_back` is set.
    pub fn assign_add(&mut self, name: &str, delta: &Tensor, read_back: bool) -> Result<Option<Tensor>, ClusterError> {
        let resp = self.conn.call(MsgType::AssignAdd, &proto::encode_assign(name, delta, false, read_back), self.framing)?;
        decode(proto::decode_optional_tensor(&resp))
    }

    /// Create or overwrite a variable.
    pub fn assign(&mut self, name: &str, value: &Tensor) -> Result<(), ClusterError> {
        self.conn.call(MsgType::AssignAdd, &proto::encode_assign(name, value, true, false), self.framing)?;
        Ok(())
    }

    pub fn read_variable(&mut self, name: &str) -> Result<Tensor, ClusterError> {
        let resp = self.conn.call(MsgType::ReadVariable, &proto::encode_name(name), self.framing)?;
        decode(proto::decode_tensor(&resp))
    }

    /// Save every variable of the server as checkpoint `id` under `dir` (a
    /// path on the server's file system). Returns the entry count.
    pub fn checkpoint_save(&mut self, dir: &str, id: u64) -> Result<u32, ClusterError> {
        let resp = self.conn.call(MsgType::CheckpointSave, &proto::encode_checkpoint(id, dir), self.framing)?;
        decode(proto::decode_u32(&resp))
    }

    pub fn checkpoint_restore(&mut self, dir: &str, id: u64) -> Result<u32, ClusterError> {
        let resp = self.conn.call(MsgType::CheckpointRestore, &proto::encode_checkpoint(id, dir), self.framing)?;
        decode(proto::decode_u32(&resp))
    }

    /// Ask the server to stop. Its queues are closed and open connections
    /// dropped.
    pub fn shutdown_server(&mut self) -> Result<(), ClusterError> {
        self.conn.call(MsgType::Shutdown, &Payload::new(), self.framing)?;
        Ok(())
    }
}

/// Reusable connections to peer tasks, keyed by address.
#[derive(Default)]
pub struct ConnectionPool {
    idle: std::sync::Mutex<HashMap<String, Vec<Connection>>>,
    connect_timeout: Option<Duration>,
}

impl ConnectionPool {
    pub fn new(connect_timeout: Duration) -> ConnectionPool {
        ConnectionPool { idle: Default::default(), connect_timeout: Some(connect_timeout) }
    }

    /// Run `f` on a pooled connection to `addr`. The connection is returned
    /// to the pool only if `f` leaves it in a known state.
    pub fn with<T>(&self, addr: &str, f: impl FnOnce(&mut Connection) -> Result<T, ClusterError>) -> Result<T, ClusterError> {
        let existing = self.idle.lock().unwrap().get_mut(addr).and_then(Vec::pop);
        let mut conn = match existing {
            Some(c) => c,
            None => Connection::connect(addr, self.connect_timeout.unwrap_or(DEFAULT_CONNECT_TIMEOUT))?,
        };
        let out = f(&mut conn);
        let reusable = match &out {
            Ok(_) | Err(ClusterError::Remote(_)) => true,
            Err(_) => false,
        };
        if reusable {
            self.idle.lock().unwrap().entry(addr.to_string()).or_default().push(conn);
        }
        out
    }

    pub fn clear(&self) {
        self.idle.lock().unwrap().clear();
    }
}

