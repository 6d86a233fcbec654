//! Request and response payload layouts.
//!
//! | type | request | response |
//! |---|---|---|
//! | Ping | arbitrary bytes | same bytes |
//! | RegisterGraph | version u64, graph bytes | empty |
//! | RunGraph | flags u8, version u64, n u16, ids u32 × n, m u16, (id u32, tensor) × m | n u16, tensors; then trace if requested |
//! | Enqueue | flags u8, queue, n u16, tensors | empty |
//! | Dequeue | queue | n u16, tensors |
//! | AssignAdd | flags u8, name str16, tensor | present u8, tensor if present |
//! | ReadVariable | name str16 | tensor |
//! | CheckpointSave / Restore | id u64, dir str16 | entries u32 |
//! | Shutdown | empty | empty |
//!
//! A queue is `name str16, capacity u32, timeout_ms u64`. RunGraph flags:
//! bit 0 return values, bit 1 trace, bit 2 single-threaded, bit 3 staged
//! framing for forwarded state traffic. Enqueue flag bit 0 closes the queue
//! after the (possibly empty) element. AssignAdd flags: bit 0 replace
//! instead of add, bit 1 read back.

use flowhpc_core::codec::{ByteReader, DecodeError, TensorView};
use flowhpc_core::{DeviceKind, DeviceName, NodeId, OpKind, QueueRef, Tensor, TraceLog, TraceRecord};

use crate::wire::{Framing, Payload};

pub const RUN_RETURN_VALUES: u8 = 1;
pub const RUN_TRACE: u8 = 2;
pub const RUN_SINGLE_THREADED: u8 = 4;
pub const RUN_STAGED: u8 = 8;

pub const ENQUEUE_CLOSE: u8 = 1;

pub const ASSIGN_REPLACE: u8 = 1;
pub const ASSIGN_READ_BACK: u8 = 2;

fn put_queue(p: &mut Payload<'_>, q: &QueueRef) {
    p.str16(&q.name).u32(q.capacity).u64(q.timeout_ms);
}

fn get_queue(r: &mut ByteReader<'_>) -> Result<QueueRef, DecodeError> {
    let name = r.str16()?;
    let capacity = r.u32()?;
    let timeout_ms = r.u64()?;
    Ok(QueueRef { name, owner: None, capacity, timeout_ms })
}

fn put_tensors<'a>(p: &mut Payload<'a>, ts: &'a [Tensor]) {
    p.u16(ts.len() as u16);
    for t in ts {
        p.tensor(t);
    }
}

fn get_tensors(r: &mut ByteReader<'_>) -> Result<Vec<Tensor>, DecodeError> {
    let n = r.u16()? as usize;
    (0..n).map(|_| r.tensor()).collect()
}

fn finish(r: &ByteReader<'_>) -> Result<(), DecodeError> {
    if r.is_empty() {
        Ok(())
    } else {
        Err(r.error(format!("{} trailing bytes", r.remaining())))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunFlags {
    pub return_values: bool,
    pub trace: bool,
    pub single_threaded: bool,
    pub framing: Framing,
}

impl RunFlags {
    pub fn bits(&self) -> u8 {
        let mut b = 0;
        if self.return_values {
            b |= RUN_RETURN_VALUES;
        }
        if self.trace {
            b |= RUN_TRACE;
        }
        if self.single_threaded {
            b |= RUN_SINGLE_THREADED;
        }
        if self.framing == Framing::Staged {
            b |= RUN_STAGED;
        }
        b
    }

    pub fn from_bits(b: u8) -> RunFlags {
        RunFlags {
            return_values: b & RUN_RETURN_VALUES != 0,
            trace: b & RUN_TRACE != 0,
            single_threaded: b & RUN_SINGLE_THREADED != 0,
            framing: if b & RUN_STAGED != 0 { Framing::Staged } else { Framing::Eager },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRequest {
    pub flags: RunFlags,
    pub version: u64,
    pub fetches: Vec<NodeId>,
    pub feeds: Vec<(NodeId, Tensor)>,
}

pub fn encode_run<'a>(flags: &RunFlags, version: u64, fetches: &[NodeId], feeds: &[(NodeId, &'a Tensor)]) -> Payload<'a> {
    let mut p = Payload::new();
    p.u8(flags.bits()).u64(version).u16(fetches.len() as u16);
    for f in fetches {
        p.u32(f.0);
    }
    p.u16(feeds.len() as u16);
    for (id, t) in feeds {
        p.u32(id.0).tensor(t);
    }
    p
}

pub fn decode_run(bytes: &[u8]) -> Result<RunRequest, DecodeError> {
    let mut r = ByteReader::new(bytes);
    let flags = RunFlags::from_bits(r.u8()?);
    let version = r.u64()?;
    let n = r.u16()? as usize;
    let fetches = (0..n).map(|_| r.u32().map(NodeId)).collect::<Result<_, _>>()?;
    let m = r.u16()? as usize;
    let mut feeds = Vec::with_capacity(m);
    for _ in 0..m {
        let id = NodeId(r.u32()?);
        feeds.push((id, r.tensor()?));
    }
    finish(&r)?;
    Ok(RunRequest { flags, version, fetches, feeds })
}

fn op_from(r: &ByteReader<'_>, tag: u8) -> Result<OpKind, DecodeError> {
    OpKind::from_tag(tag).ok_or_else(|| r.error(format!("unknown op tag {tag}")))
}

pub fn encode_run_response<'a>(values: &'a [Tensor], trace: Option<&TraceLog>) -> Payload<'a> {
    let mut p = Payload::new();
    put_tensors(&mut p, values);
    if let Some(t) = trace {
        p.u32(t.records.len() as u32);
        for rec in &t.records {
            let kind = match rec.device.kind {
                DeviceKind::Cpu => 0,
                DeviceKind::Dev => 1,
            };
            p.u32(rec.node)
                .u8(rec.op as u8)
                .u8(kind)
                .u16(rec.device.index)
                .u64(rec.start_ns)
                .u64(rec.end_ns)
                .u64(rec.input_bytes)
                .u64(rec.output_bytes);
        }
    }
    p
}

pub fn decode_run_response(bytes: &[u8], trace: bool) -> Result<(Vec<Tensor>, Option<TraceLog>), DecodeError> {
    let mut r = ByteReader::new(bytes);
    let values = get_tensors(&mut r)?;
    let log = if trace {
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let node = r.u32()?;
            let op = r.u8()?;
            let op = op_from(&r, op)?;
            let device = match r.u8()? {
                0 => DeviceName::cpu(r.u16()?),
                1 => DeviceName::dev(r.u16()?),
                k => return Err(r.error(format!("unknown device kind {k}"))),
            };
            records.push(TraceRecord {
                node,
                op,
                device,
                start_ns: r.u64()?,
                end_ns: r.u64()?,
                input_bytes: r.u64()?,
                output_bytes: r.u64()?,
            });
        }
        Some(TraceLog { records })
    } else {
        None
    };
    finish(&r)?;
    Ok((values, log))
}

pub fn encode_enqueue<'a>(q: &QueueRef, components: &'a [Tensor], close: bool) -> Payload<'a> {
    let mut p = Payload::new();
    p.u8(if close { ENQUEUE_CLOSE } else { 0 });
    put_queue(&mut p, q);
    put_tensors(&mut p, components);
    p
}

pub fn decode_enqueue(bytes: &[u8]) -> Result<(QueueRef, Vec<Tensor>, bool), DecodeError> {
    let mut r = ByteReader::new(bytes);
    let flags = r.u8()?;
    let q = get_queue(&mut r)?;
    let ts = get_tensors(&mut r)?;
    finish(&r)?;
    Ok((q, ts, flags & ENQUEUE_CLOSE != 0))
}

pub fn encode_dequeue(q: &QueueRef) -> Payload<'static> {
    let mut p = Payload::new();
    put_queue(&mut p, q);
    p
}

pub fn decode_dequeue(bytes: &[u8]) -> Result<QueueRef, DecodeError> {
    let mut r = ByteReader::new(bytes);
    let q = get_queue(&mut r)?;
    finish(&r)?;
    Ok(q)
}

pub fn encode_tensors(ts: &[Tensor]) -> Payload<'_> {
    let mut p = Payload::new();
    put_tensors(&mut p, ts);
    p
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>, DecodeError> {
    let mut r = ByteReader::new(bytes);
    let ts = get_tensors(&mut r)?;
    finish(&r)?;
    Ok(ts)
}

pub fn encode_assign<'a>(name: &str, value: &'a Tensor, replace: bool, read_back: bool) -> Payload<'a> {
    let mut flags = 0;
    if replace {
        flags |= ASSIGN_REPLACE;
    }
    if read_back {
        flags |= ASSIGN_READ_BACK;
    }
    let mut p = Payload::new();
    p.u8(flags).str16(name).tensor(value);
    p
}

/// `(name, value, replace, read_back)`
pub fn decode_assign(bytes: &[u8]) -> Result<(String, Tensor, bool, bool), DecodeError> {
    let mut r = ByteReader::new(bytes);
    let flags = r.u8()?;
    let name = r.str16()?;
    let t = r.tensor()?;
    finish(&r)?;
    Ok((name, t, flags & ASSIGN_REPLACE != 0, flags & ASSIGN_READ_BACK != 0))
}

/// Like [`decode_assign`] but leaves the value in `bytes`.
pub fn decode_assign_view(bytes: &[u8]) -> Result<(String, TensorView<'_>, bool, bool), DecodeError> {
    let mut r = ByteReader::new(bytes);
    let flags = r.u8()?;
    let name = r.str16()?;
    let t = r.tensor_view()?;
    finish(&r)?;
    Ok((name, t, flags & ASSIGN_REPLACE != 0, flags & ASSIGN_READ_BACK != 0))
}

pub fn encode_optional_tensor(t: Option<&Tensor>) -> Payload<'_> {
    let mut p = Payload::new();
    match t {
        Some(t) => p.u8(1).tensor(t),
        None => p.u8(0),
    };
    p
}

pub fn decode_optional_tensor(bytes: &[u8]) -> Result<Option<Tensor>, DecodeError> {
    let mut r = ByteReader::new(bytes);
    let t = match r.u8()? {
        0 => None,
        _ => Some(r.tensor()?),
    };
    finish(&r)?;
    Ok(t)
}

pub fn encode_name(name: &str) -> Payload<'static> {
    let mut p = Payload::new();
    p.str16(name);
    p
}

pub fn decode_name(bytes: &[u8]) -> Result<String, DecodeError> {
    let mut r = ByteReader::new(bytes);
    let n = r.str16()?;
    finish(&r)?;
    Ok(n)
}

pub fn encode_tensor(t: &Tensor) -> Payload<'_> {
    let mut p = Payload::new();
    p.tensor(t);
    p
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, DecodeError> {
    let mut r = ByteReader::new(bytes);
    let t = r.tensor()?;
    finish(&r)?;
    Ok(t)
}

pub fn encode_checkpoint(id: u64, dir: &str) -> Payload<'static> {
    let mut p = Payload::new();
    p.u64(id).str16(dir);
    p
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(u64, String), DecodeError> {
    let mut r = ByteReader::new(bytes);
    let id = r.u64()?;
    let dir = r.str16()?;
    finish(&r)?;
    Ok((id, dir))
}

pub fn encode_u32(v: u32) -> Payload<'static> {
    let mut p = Payload::new();
    p.u32(v);
    p
}

pub fn decode_u32(bytes: &[u8]) -> Result<u32, DecodeError> {
    let mut r = ByteReader::new(bytes);
    let v = r.u32()?;
    finish(&r)?;
    Ok(v)
}
