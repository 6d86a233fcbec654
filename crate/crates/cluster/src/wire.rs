//! Framed TCP transport.
//!
//! Every frame is `length u32 LE, message type u8, request id u32 LE,
//! payload`, where `length` counts payload bytes only. Responses echo the
//! request's type and id; failures come back as an `Error` frame.

use std::borrow::Cow;
use std::fmt;
use std::io::{self, IoSlice, Read, Write};

use flowhpc_core::codec::{self, ByteReader, DecodeError};
use flowhpc_core::{GraphError, StateError, Tensor};

pub const HEADER_LEN: usize = 9;

/// Largest payload a peer will accept.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Ping = 0,
    RegisterGraph = 1,
    RunGraph = 2,
    Enqueue = 3,
    Dequeue = 4,
    AssignAdd = 5,
    ReadVariable = 6,
    CheckpointSave = 7,
    CheckpointRestore = 8,
    Shutdown = 9,
    Error = 255,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<MsgType> {
        use MsgType::*;
        Some(match v {
            0 => Ping,
            1 => RegisterGraph,
            2 => RunGraph,
            3 => Enqueue,
            4 => Dequeue,
            5 => AssignAdd,
            6 => ReadVariable,
            7 => CheckpointSave,
            8 => CheckpointRestore,
            9 => Shutdown,
            255 => Error,
            _ => return None,
        })
    }
}

/// How a sender puts a frame on the socket. Both produce identical bytes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Framing {
    /// Header and payload pieces handed to the kernel in one vectored write,
    /// tensor bytes borrowed in place.
    #[default]
    Eager,
    /// Payload first copied into an intermediate host buffer, then sent.
    Staged,
}

impl Framing {
    pub fn name(self) -> &'static str {
        match self {
            Framing::Eager => "eager",
            Framing::Staged => "staged",
        }
    }
}

impl fmt::Display for Framing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Framing {
    type Err = String;

    fn from_str(s: &str) -> Result<Framing, String> {
        match s {
            "eager" => Ok(Framing::Eager),
            "staged" => Ok(Framing::Staged),
            _ => Err(format!("unknown framing `{s}` (expected eager or staged)")),
        }
    }
}

/// A payload assembled from owned scalars and borrowed tensor bytes.
#[derive(Default)]
pub struct Payload<'a> {
    parts: Vec<Cow<'a, [u8]>>,
    scratch: Vec<u8>,
}

impl<'a> Payload<'a> {
    pub fn new() -> Payload<'a> {
        Payload::default()
    }

    fn flush_scratch(&mut self) {
        if !self.scratch.is_empty() {
            self.parts.push(Cow::Owned(std::mem::take(&mut self.scratch)));
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.scratch.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        codec::put_u16(&mut self.scratch, v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        codec::put_u32(&mut self.scratch, v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        codec::put_u64(&mut self.scratch, v);
        self
    }

    pub fn str16(&mut self, s: &str) -> &mut Self {
        let s = truncate_utf8(s, u16::MAX as usize);
        codec::put_str16(&mut self.scratch, s);
        self
    }

    pub fn bytes(&mut self, b: &'a [u8]) -> &mut Self {
        self.flush_scratch();
        self.parts.push(Cow::Borrowed(b));
        self
    }

    pub fn tensor(&mut self, t: &'a Tensor) -> &mut Self {
        self.scratch.extend_from_slice(&codec::tensor_header(t));
        self.flush_scratch();
        self.parts.push(t.le_bytes());
        self
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.len()).sum::<usize>() + self.scratch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        for p in &self.parts {
            out.extend_from_slice(p);
        }
        out.extend_from_slice(&self.scratch);
        out
    }

    fn slices(&self) -> Vec<&[u8]> {
        let mut v: Vec<&[u8]> = self.parts.iter().map(|p| p.as_ref()).collect();
        if !self.scratch.is_empty() {
            v.push(&self.scratch);
        }
        v
    }
}

fn truncate_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

pub fn header(msg: MsgType, request_id: u32, payload_len: usize) -> io::Result<[u8; HEADER_LEN]> {
    let len = u32::try_from(payload_len)
        .ok()
        .filter(|&l| l as usize <= MAX_PAYLOAD)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("payload of {payload_len} bytes is too large")))?;
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&len.to_le_bytes());
    h[4] = msg as u8;
    h[5..].copy_from_slice(&request_id.to_le_bytes());
    Ok(h)
}

fn write_all_vectored(w: &mut impl Write, mut bufs: &mut [IoSlice<'_>]) -> io::Result<()> {
    IoSlice::advance_slices(&mut bufs, 0);
    while !bufs.is_empty() {
        match w.write_vectored(bufs) {
            Ok(0) => return Err(io::Error::new(io::ErrorKind::WriteZero, "connection closed while writing")),
            Ok(n) => IoSlice::advance_slices(&mut bufs, n),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Send one frame using the given framing strategy.
pub fn write_frame(w: &mut impl Write, msg: MsgType, request_id: u32, payload: &Payload<'_>, framing: Framing) -> io::Result<()> {
    let h = header(msg, request_id, payload.len())?;
    match framing {
        Framing::Eager => {
            let pieces = payload.slices();
            let mut slices: Vec<IoSlice<'_>> = Vec::with_capacity(pieces.len() + 1);
            slices.push(IoSlice::new(&h));
            slices.extend(pieces.iter().map(|p| IoSlice::new(p)));
            write_all_vectored(w, &mut slices)?;
        }
        Framing::Staged => {
            let mut staged = Vec::with_capacity(HEADER_LEN + payload.len());
            staged.extend_from_slice(&h);
            for p in payload.slices() {
                staged.extend_from_slice(p);
            }
            w.write_all(&staged)?;
        }
    }
    w.flush()
}

/// Send one frame whose payload is a single byte slice.
pub fn write_raw_frame(w: &mut impl Write, msg: MsgType, request_id: u32, payload: &[u8], framing: Framing) -> io::Result<()> {
    let mut p = Payload::new();
    p.bytes(payload);
    write_frame(w, msg, request_id, &p, framing)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Raw type byte; unknown values are preserved for error reporting.
    pub msg: u8,
    pub request_id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn msg_type(&self) -> Option<MsgType> {
        MsgType::from_u8(self.msg)
    }
}

/// Read one frame. Returns `UnexpectedEof` when the peer closed cleanly
/// before a header.
pub fn read_frame(r: &mut impl Read) -> io::Result<Frame> {
    let mut payload = Vec::new();
    let (msg, request_id) = read_frame_into(r, &mut payload)?;
    Ok(Frame { msg, request_id, payload })
}

/// Read one frame into `payload`, reusing its allocation. Returns the raw
/// message type and request id.
pub fn read_frame_into(r: &mut impl Read, payload: &mut Vec<u8>) -> io::Result<(u8, u32)> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)?;
    let len = u32::from_le_bytes(h[..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame payload of {len} bytes exceeds limit")));
    }
    payload.clear();
    payload.reserve_exact(len);
    let got = r.take(len as u64).read_to_end(payload)?;
    if got != len {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, format!("frame truncated at {got} of {len} bytes")));
    }
    Ok((h[4], u32::from_le_bytes(h[5..].try_into().unwrap())))
}

/// Category carried in an `Error` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    Internal = 0,
    Protocol = 1,
    UnknownGraph = 2,
    Graph = 3,
    Kernel = 4,
    UnknownVariable = 5,
    Timeout = 6,
    QueueClosed = 7,
    Queue = 8,
    Unreachable = 9,
    Checkpoint = 10,
    ShapeMismatch = 11,
}

impl ErrorCode {
    fn from_u8(v: u8) -> ErrorCode {
        use ErrorCode::*;
        match v {
            1 => Protocol,
            2 => UnknownGraph,
            3 => Graph,
            4 => Kernel,
            5 => UnknownVariable,
            6 => Timeout,
            7 => QueueClosed,
            8 => Queue,
            9 => Unreachable,
            10 => Checkpoint,
            11 => ShapeMismatch,
            _ => Internal,
        }
    }
}

/// Decoded `Error` frame: `code u8, node u32 (u32::MAX for none),
/// subject str16, message str16`.
#[derive(Clone, Debug, PartialEq)]
pub struct WireError {
    pub code: ErrorCode,
    pub node: Option<u32>,
    /// Variable or queue name for state errors.
    pub subject: String,
    pub message: String,
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(n) = self.node {
            write!(f, "node {n}: ")?;
        }
        write!(f, "{} ({:?})", self.message, self.code)
    }
}

impl std::error::Error for WireError {}

impl WireError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> WireError {
        WireError { code, node: None, subject: String::new(), message: message.into() }
    }

    pub fn from_state(e: &StateError) -> WireError {
        let (code, subject) = match e {
            StateError::UnknownVariable(n) => (ErrorCode::UnknownVariable, n.clone()),
            StateError::Timeout(n) => (ErrorCode::Timeout, n.clone()),
            StateError::QueueClosed(n) => (ErrorCode::QueueClosed, n.clone()),
            StateError::QueueSpec { name, .. } => (ErrorCode::Queue, name.clone()),
            StateError::Tensor(_) => (ErrorCode::ShapeMismatch, String::new()),
            StateError::Remote { owner, .. } => (ErrorCode::Unreachable, owner.clone()),
        };
        WireError { code, node: None, subject, message: e.to_string() }
    }

    pub fn from_graph(e: &GraphError) -> WireError {
        let mut w = match e {
            GraphError::State { source, .. } => WireError::from_state(source),
            GraphError::Kernel { .. } => WireError::new(ErrorCode::Kernel, String::new()),
            _ => WireError::new(ErrorCode::Graph, String::new()),
        };
        w.node = e.node();
        w.message = e.to_string();
        w
    }

    /// Reconstruct the state error kind, where one applies.
    pub fn to_state_error(&self) -> Option<StateError> {
        let name = self.subject.clone();
        Some(match self.code {
            ErrorCode::UnknownVariable => StateError::UnknownVariable(name),
            ErrorCode::Timeout => StateError::Timeout(name),
            ErrorCode::QueueClosed => StateError::QueueClosed(name),
            ErrorCode::Queue => StateError::QueueSpec { name, reason: self.message.clone() },
            _ => return None,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut p = Payload::new();
        p.u8(self.code as u8).u32(self.node.unwrap_or(u32::MAX)).str16(&self.subject).str16(&self.message);
        p.to_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<WireError, DecodeError> {
        let mut r = ByteReader::new(bytes);
        let code = ErrorCode::from_u8(r.u8()?);
        let node = r.u32()?;
        Ok(WireError {
            code,
            node: (node != u32::MAX).then_some(node),
            subject: r.str16()?,
            message: r.str16()?,
        })
    }
}
