//! Immutable dataflow graphs and their canonical binary form.
//!
//! Nodes are appended through [`GraphBuilder`]; an input may only name a node
//! created earlier, so construction order is always a topological order and
//! a finished [`Graph`] is acyclic.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::codec::{self, ByteReader};
use crate::device::{DeviceKind, DeviceName};
use crate::error::GraphError;
use crate::tensor::{DType, Shape, Tensor};

/// Size cap on a serialized graph. Large data belongs in feeds and
/// variables, not in graph constants.
pub const MAX_GRAPH_BYTES: usize = 64 << 20;

const MAGIC: &[u8; 4] = b"DFG1";

/// Default blocking timeout of queue nodes, in milliseconds.
pub const DEFAULT_QUEUE_TIMEOUT_MS: u64 = 30_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpKind {
    MatMul = 0,
    Add = 1,
    Dot = 2,
    MatVec = 3,
    Axpy = 4,
    Scale = 5,
    Fft = 6,
    RandomUniform = 7,
    Const = 8,
    Placeholder = 9,
    VariableRead = 10,
    AssignAdd = 11,
    Assign = 12,
    Enqueue = 13,
    Dequeue = 14,
    Identity = 15,
    Div = 16,
    Slice = 17,
    Pad = 18,
}

impl OpKind {
    const ALL: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Dot,
        OpKind::MatVec,
        OpKind::Axpy,
        OpKind::Scale,
        OpKind::Fft,
        OpKind::RandomUniform,
        OpKind::Const,
        OpKind::Placeholder,
        OpKind::VariableRead,
        OpKind::AssignAdd,
        OpKind::Assign,
        OpKind::Enqueue,
        OpKind::Dequeue,
        OpKind::Identity,
        OpKind::Div,
        OpKind::Slice,
        OpKind::Pad,
    ];

    pub fn from_tag(tag: u8) -> Option<OpKind> {
        OpKind::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "MatMul",
            OpKind::Add => "Add",
            OpKind::Dot => "Dot",
            OpKind::MatVec => "MatVec",
            OpKind::Axpy => "Axpy",
            OpKind::Scale => "Scale",
            OpKind::Fft => "FFT",
            OpKind::RandomUniform => "RandomUniform",
            OpKind::Const => "Const",
            OpKind::Placeholder => "Placeholder",
            OpKind::VariableRead => "VariableRead",
            OpKind::AssignAdd => "AssignAdd",
            OpKind::Assign => "Assign",
            OpKind::Enqueue => "Enqueue",
            OpKind::Dequeue => "Dequeue",
            OpKind::Identity => "Identity",
            OpKind::Div => "Div",
            OpKind::Slice => "Slice",
            OpKind::Pad => "Pad",
        }
    }

    /// Whether an accelerator slot has a kernel for this op. Feeds, state and
    /// queue ops are host-resident.
    pub fn supports_dev(self) -> bool {
        !matches!(
            self,
            OpKind::Placeholder
                | OpKind::VariableRead
                | OpKind::AssignAdd
                | OpKind::Assign
                | OpKind::Enqueue
                | OpKind::Dequeue
        )
    }

    pub fn is_stateful(self) -> bool {
        matches!(
            self,
            OpKind::VariableRead | OpKind::AssignAdd | OpKind::Assign | OpKind::Enqueue | OpKind::Dequeue
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Str(String),
    Tensor(Tensor),
    DType(DType),
    Shape(Shape),
}

impl AttrValue {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            AttrValue::Int(v) => {
                out.push(0);
                out.extend_from_slice(&v.to_le_bytes());
            }
            AttrValue::Float(v) => {
                out.push(1);
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            AttrValue::Str(s) => {
                out.push(2);
                out.extend_from_slice(s.as_bytes());
            }
            AttrValue::Tensor(t) => {
                out.push(3);
                codec::put_tensor(out, t);
            }
            AttrValue::DType(d) => {
                out.push(4);
                out.push(d.tag());
            }
            AttrValue::Shape(s) => {
                out.push(5);
                out.push(s.rank() as u8);
                for &d in s.dims() {
                    codec::put_u64(out, d as u64);
                }
            }
        }
    }

    fn decode(bytes: &[u8]) -> Result<AttrValue, String> {
        let mut r = ByteReader::new(bytes);
        let tag = r.u8().map_err(|e| e.to_string())?;
        let v = match tag {
            0 => AttrValue::Int(r.i64().map_err(|e| e.to_string())?),
            1 => AttrValue::Float(r.f64().map_err(|e| e.to_string())?),
            2 => AttrValue::Str(String::from_utf8(bytes[1..].to_vec()).map_err(|_| "invalid utf-8".to_string())?),
            3 => AttrValue::Tensor(r.tensor().map_err(|e| e.to_string())?),
            4 => AttrValue::DType(DType::from_tag(r.u8().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?),
            5 => {
                let rank = r.u8().map_err(|e| e.to_string())?;
                let mut dims = Vec::new();
                for _ in 0..rank {
                    dims.push(r.u64().map_err(|e| e.to_string())? as usize);
                }
                AttrValue::Shape(Shape::new(dims).map_err(|e| e.to_string())?)
            }
            other => return Err(format!("unknown attr tag {other}")),
        };
        if tag != 2 && !r.is_empty() {
            return Err("trailing bytes in attribute".into());
        }
        Ok(v)
    }
}

/// Index of a node inside its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub id: u32,
    pub op: OpKind,
    pub inputs: Vec<u32>,
    pub attrs: BTreeMap<String, AttrValue>,
    pub device: Option<DeviceName>,
}

impl NodeSpec {
    fn attr(&self, name: &str) -> Result<&AttrValue, GraphError> {
        self.attrs.get(name).ok_or_else(|| self.bad_attr(name, "missing"))
    }

    pub fn bad_attr(&self, name: &str, reason: &str) -> GraphError {
        GraphError::BadAttr { node: self.id, name: name.to_string(), reason: reason.to_string() }
    }

    pub fn attr_int(&self, name: &str) -> Result<i64, GraphError> {
        match self.attr(name)? {
            AttrValue::Int(v) => Ok(*v),
            _ => Err(self.bad_attr(name, "expected int")),
        }
    }

    pub fn attr_int_or(&self, name: &str, default: i64) -> Result<i64, GraphError> {
        if self.attrs.contains_key(name) {
            self.attr_int(name)
        } else {
            Ok(default)
        }
    }

    pub fn attr_float(&self, name: &str) -> Result<f64, GraphError> {
        match self.attr(name)? {
            AttrValue::Float(v) => Ok(*v),
            AttrValue::Int(v) => Ok(*v as f64),
            _ => Err(self.bad_attr(name, "expected float")),
        }
    }

    pub fn attr_str(&self, name: &str) -> Result<&str, GraphError> {
        match self.attr(name)? {
            AttrValue::Str(s) => Ok(s),
            _ => Err(self.bad_attr(name, "expected string")),
        }
    }

    pub fn attr_str_opt(&self, name: &str) -> Result<Option<&str>, GraphError> {
        if self.attrs.contains_key(name) {
            self.attr_str(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn attr_tensor(&self, name: &str) -> Result<&Tensor, GraphError> {
        match self.attr(name)? {
            AttrValue::Tensor(t) => Ok(t),
            _ => Err(self.bad_attr(name, "expected tensor")),
        }
    }

    pub fn attr_dtype(&self, name: &str) -> Result<DType, GraphError> {
        match self.attr(name)? {
            AttrValue::DType(d) => Ok(*d),
            _ => Err(self.bad_attr(name, "expected dtype")),
        }
    }

    pub fn attr_shape(&self, name: &str) -> Result<&Shape, GraphError> {
        match self.attr(name)? {
            AttrValue::Shape(s) => Ok(s),
            _ => Err(self.bad_attr(name, "expected shape")),
        }
    }

    pub fn attr_usize(&self, name: &str) -> Result<usize, GraphError> {
        usize::try_from(self.attr_int(name)?).map_err(|_| self.bad_attr(name, "expected non-negative int"))
    }
}

/// Address of a variable: a name, optionally qualified by its owner task
/// (`"job:index"`). Unqualified names resolve on the executing task.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VarRef {
    pub name: String,
    pub owner: Option<String>,
}

impl VarRef {
    pub fn local(name: impl Into<String>) -> VarRef {
        VarRef { name: name.into(), owner: None }
    }

    pub fn on(name: impl Into<String>, owner: impl Into<String>) -> VarRef {
        VarRef { name: name.into(), owner: Some(owner.into()) }
    }

    pub(crate) fn from_node(node: &NodeSpec) -> Result<VarRef, GraphError> {
        Ok(VarRef {
            name: node.attr_str("name")?.to_string(),
            owner: node.attr_str_opt("owner")?.map(str::to_string),
        })
    }
}

/// Address and creation parameters of a FIFO queue. The queue is created on
/// its owner the first time any operation names it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QueueRef {
    pub name: String,
    pub owner: Option<String>,
    /// Zero means the owner's default capacity.
    pub capacity: u32,
    pub timeout_ms: u64,
}

impl QueueRef {
    pub fn local(name: impl Into<String>) -> QueueRef {
        QueueRef { name: name.into(), owner: None, capacity: 0, timeout_ms: DEFAULT_QUEUE_TIMEOUT_MS }
    }

    pub fn on(name: impl Into<String>, owner: impl Into<String>) -> QueueRef {
        QueueRef { owner: Some(owner.into()), ..QueueRef::local(name) }
    }

    pub fn with_capacity(mut self, capacity: u32) -> QueueRef {
        self.capacity = capacity;
        self
    }

    pub fn with_timeout_ms(mut self, timeout_ms: u64) -> QueueRef {
        self.timeout_ms = timeout_ms;
        self
    }

    pub(crate) fn from_node(node: &NodeSpec) -> Result<QueueRef, GraphError> {
        Ok(QueueRef {
            name: node.attr_str("name")?.to_string(),
            owner: node.attr_str_opt("owner")?.map(str::to_string),
            capacity: u32::try_from(node.attr_int_or("capacity", 0)?)
                .map_err(|_| node.bad_attr("capacity", "out of range"))?,
            timeout_ms: u64::try_from(node.attr_int_or("timeout_ms", DEFAULT_QUEUE_TIMEOUT_MS as i64)?)
                .map_err(|_| node.bad_attr("timeout_ms", "out of range"))?,
        })
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

/// Immutable DAG of operation nodes.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<NodeSpec>,
    version: u64,
}

impl Graph {
    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: u32) -> Result<&NodeSpec, GraphError> {
        self.nodes.get(id as usize).ok_or(GraphError::UnknownNode(id))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Process-unique, increasing identifier assigned when the graph was
    /// finished or decoded.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn encode_unchecked(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        codec::put_u32(&mut out, self.nodes.len() as u32);
        for n in &self.nodes {
            codec::put_u32(&mut out, n.id);
            out.push(n.op as u8);
            match n.device {
                None => {
                    out.push(0);
                    codec::put_u16(&mut out, 0);
                }
                Some(d) => {
                    out.push(match d.kind {
                        DeviceKind::Cpu => 1,
                        DeviceKind::Dev => 2,
                    });
                    codec::put_u16(&mut out, d.index);
                }
            }
            codec::put_u16(&mut out, n.inputs.len() as u16);
            for &i in &n.inputs {
                codec::put_u32(&mut out, i);
            }
            codec::put_u16(&mut out, n.attrs.len() as u16);
            for (k, v) in &n.attrs {
                codec::put_u32(&mut out, k.len() as u32);
                out.extend_from_slice(k.as_bytes());
                let mut value = Vec::new();
                v.encode(&mut value);
                codec::put_u32(&mut out, value.len() as u32);
                out.extend_from_slice(&value);
            }
        }
        out
    }

    /// Canonical bytes: `"DFG1"`, node count, then each node in id order.
    pub fn to_bytes(&self) -> Result<Vec<u8>, GraphError> {
        let out = self.encode_unchecked();
        if out.len() > MAX_GRAPH_BYTES {
            return Err(GraphError::GraphTooLarge { size: out.len(), limit: MAX_GRAPH_BYTES });
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Graph, GraphError> {
        if bytes.len() > MAX_GRAPH_BYTES {
            return Err(GraphError::GraphTooLarge { size: bytes.len(), limit: MAX_GRAPH_BYTES });
        }
        let dec = |e: codec::DecodeError| GraphError::Decode(e.to_string());
        let mut r = ByteReader::new(bytes);
        if r.bytes(4).map_err(dec)? != MAGIC {
            return Err(GraphError::Decode("bad magic".into()));
        }
        let count = r.u32().map_err(dec)?;
        let mut nodes = Vec::with_capacity(count.min(1 << 20) as usize);
        for expected_id in 0..count {
            let id = r.u32().map_err(dec)?;
            if id != expected_id {
                return Err(GraphError::Decode(format!("node id {id} out of order, expected {expected_id}")));
            }
            let op_tag = r.u8().map_err(dec)?;
            let op = OpKind::from_tag(op_tag).ok_or_else(|| GraphError::Decode(format!("unknown op tag {op_tag}")))?;
            let dev_tag = r.u8().map_err(dec)?;
            let index = r.u16().map_err(dec)?;
            let device = match dev_tag {
                0 => None,
                1 => Some(DeviceName::cpu(index)),
                2 => Some(DeviceName::dev(index)),
                t => return Err(GraphError::Decode(format!("unknown device tag {t}"))),
            };
            let n_inputs = r.u16().map_err(dec)?;
            let mut inputs = Vec::with_capacity(n_inputs as usize);
            for _ in 0..n_inputs {
                let i = r.u32().map_err(dec)?;
                if i >= id {
                    return Err(GraphError::CycleDetected(id));
                }
                inputs.push(i);
            }
            let n_attrs = r.u16().map_err(dec)?;
            let mut attrs = BTreeMap::new();
            for _ in 0..n_attrs {
                let klen = r.u32().map_err(dec)? as usize;
                let key = String::from_utf8(r.bytes(klen).map_err(dec)?.to_vec())
                    .map_err(|_| GraphError::Decode("attr key is not utf-8".into()))?;
                let vlen = r.u32().map_err(dec)? as usize;
                let value = AttrValue::decode(r.bytes(vlen).map_err(dec)?)
                    .map_err(|e| GraphError::Decode(format!("attr `{key}` of node {id}: {e}")))?;
                attrs.insert(key, value);
            }
            nodes.push(NodeSpec { id, op, inputs, attrs, device });
        }
        if !r.is_empty() {
            return Err(GraphError::Decode("trailing bytes".into()));
        }
        Ok(Graph { nodes, version: NEXT_VERSION.fetch_add(1, Ordering::Relaxed) })
    }
}

/// Append-only graph construction with a current device scope.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<NodeSpec>,
    device: Option<DeviceName>,
}

impl GraphBuilder {
    pub fn new() -> GraphBuilder {
        GraphBuilder::default()
    }

    /// Device pinned on every node created from now on (`None` to unpin).
    pub fn set_device(&mut self, device: Option<DeviceName>) -> &mut Self {
        self.device = device;
        self
    }

    /// Run `f` with `device` as the current scope, then restore the previous one.
    pub fn with_device<R>(&mut self, device: DeviceName, f: impl FnOnce(&mut GraphBuilder) -> R) -> R {
        let saved = self.device.replace(device);
        let out = f(self);
        self.device = saved;
        out
    }

    pub fn add_node(
        &mut self,
        op: OpKind,
        inputs: &[NodeId],
        attrs: impl IntoIterator<Item = (&'static str, AttrValue)>,
    ) -> NodeId {
        let id = self.nodes.len() as u32;
        for i in inputs {
            assert!(i.0 < id, "input {} does not precede node {id}", i.0);
        }
        self.nodes.push(NodeSpec {
            id,
            op,
            inputs: inputs.iter().map(|i| i.0).collect(),
            attrs: attrs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            device: self.device,
        });
        NodeId(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.add_node(OpKind::Const, &[], [("value", AttrValue::Tensor(value))])
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar_f64(value))
    }

    /// Feed slot; `shape` of `None` accepts any shape.
    pub fn placeholder(&mut self, dtype: DType, shape: Option<Shape>) -> NodeId {
        let mut attrs = vec![("dtype", AttrValue::DType(dtype))];
        if let Some(s) = shape {
            attrs.push(("shape", AttrValue::Shape(s)));
        }
        self.add_node(OpKind::Placeholder, &[], attrs)
    }

    pub fn random_uniform(&mut self, shape: Shape, dtype: DType, seed: u64) -> NodeId {
        self.add_node(
            OpKind::RandomUniform,
            &[],
            [
                ("shape", AttrValue::Shape(shape)),
                ("dtype", AttrValue::DType(dtype)),
                ("seed", AttrValue::Int(seed as i64)),
            ],
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_node(OpKind::MatMul, &[a, b], [])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_node(OpKind::Add, &[a, b], [])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_node(OpKind::Div, &[a, b], [])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_node(OpKind::Dot, &[a, b], [])
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> NodeId {
        self.add_node(OpKind::MatVec, &[a, x], [])
    }

    /// `alpha * x + y` where `alpha` is a scalar-valued node.
    pub fn axpy(&mut self, alpha: NodeId, x: NodeId, y: NodeId) -> NodeId {
        self.add_node(OpKind::Axpy, &[alpha, x, y], [])
    }

    pub fn scale(&mut self, alpha: f64, x: NodeId) -> NodeId {
        self.add_node(OpKind::Scale, &[x], [("alpha", AttrValue::Float(alpha))])
    }

    pub fn fft(&mut self, x: NodeId) -> NodeId {
        self.add_node(OpKind::Fft, &[x], [])
    }

    pub fn slice(&mut self, x: NodeId, offset: usize, len: usize) -> NodeId {
        self.add_node(
            OpKind::Slice,
            &[x],
            [("offset", AttrValue::Int(offset as i64)), ("len", AttrValue::Int(len as i64))],
        )
    }

    pub fn pad(&mut self, x: NodeId, offset: usize, total: usize) -> NodeId {
        self.add_node(
            OpKind::Pad,
            &[x],
            [("offset", AttrValue::Int(offset as i64)), ("total", AttrValue::Int(total as i64))],
        )
    }

    pub fn identity(&mut self, x: NodeId) -> NodeId {
        self.add_node(OpKind::Identity, &[x], [])
    }

    fn var_attrs(var: &VarRef) -> Vec<(&'static str, AttrValue)> {
        let mut attrs = vec![("name", AttrValue::Str(var.name.clone()))];
        if let Some(o) = &var.owner {
            attrs.push(("owner", AttrValue::Str(o.clone())));
        }
        attrs
    }

    pub fn read_variable(&mut self, var: &VarRef) -> NodeId {
        self.add_node(OpKind::VariableRead, &[], GraphBuilder::var_attrs(var))
    }

    /// Create or overwrite a variable; the node outputs the assigned value.
    pub fn assign(&mut self, var: &VarRef, value: NodeId) -> NodeId {
        self.add_node(OpKind::Assign, &[value], GraphBuilder::var_attrs(var))
    }

    /// Atomic `var += delta`. With `read_back` the node outputs the updated
    /// value; otherwise an empty acknowledgement tensor (no payload comes
    /// back from a remote owner).
    pub fn assign_add(&mut self, var: &VarRef, delta: NodeId, read_back: bool) -> NodeId {
        let mut attrs = GraphBuilder::var_attrs(var);
        attrs.push(("read_back", AttrValue::Int(read_back as i64)));
        self.add_node(OpKind::AssignAdd, &[delta], attrs)
    }

    fn queue_attrs(q: &QueueRef) -> Vec<(&'static str, AttrValue)> {
        let mut attrs = vec![
            ("name", AttrValue::Str(q.name.clone())),
            ("capacity", AttrValue::Int(q.capacity as i64)),
            ("timeout_ms", AttrValue::Int(q.timeout_ms as i64)),
        ];
        if let Some(o) = &q.owner {
            attrs.push(("owner", AttrValue::Str(o.clone())));
        }
        attrs
    }

    /// Push one element whose components are `components`, in order.
    pub fn enqueue(&mut self, queue: &QueueRef, components: &[NodeId]) -> NodeId {
        self.add_node(OpKind::Enqueue, components, GraphBuilder::queue_attrs(queue))
    }

    /// Pop one element and output its `component`-th tensor. `after` are
    /// ordering-only dependencies.
    pub fn dequeue(&mut self, queue: &QueueRef, component: usize, after: &[NodeId]) -> NodeId {
        let mut attrs = GraphBuilder::queue_attrs(queue);
        attrs.push(("component", AttrValue::Int(component as i64)));
        self.add_node(OpKind::Dequeue, after, attrs)
    }

    pub fn finish(self) -> Graph {
        Graph { nodes: self.nodes, version: NEXT_VERSION.fetch_add(1, Ordering::Relaxed) }
    }
}

/// Placement policy for a single node.
///
/// A pinned device is honored when it is available and has a kernel for the
/// op. Otherwise soft placement falls back to the first available device that
/// supports the op, and strict placement fails. Unpinned nodes go to the
/// first accelerator slot when the op can run there, else to `/cpu:0`.
pub fn place(node: &NodeSpec, available: &[DeviceName], soft_placement: bool) -> Result<DeviceName, GraphError> {
    if available.is_empty() {
        return Err(GraphError::NoDevices);
    }
    let supports = |d: &DeviceName| d.kind == DeviceKind::Cpu || node.op.supports_dev();
    match node.device {
        Some(d) if available.contains(&d) && supports(&d) => Ok(d),
        Some(d) => {
            if soft_placement {
                available.iter().copied().find(supports).ok_or(GraphError::NoDevices)
            } else {
                Err(GraphError::UnsupportedPlacement { node: node.id, op: node.op.name(), device: d.to_string() })
            }
        }
        None => {
            if node.op.supports_dev() {
                if let Some(d) = available.iter().find(|d| d.kind == DeviceKind::Dev) {
                    return Ok(*d);
                }
            }
            Ok(available.iter().copied().find(|d| d.kind == DeviceKind::Cpu).unwrap_or(DeviceName::CPU0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing_one() -> (Graph, NodeId) {
        let mut g = GraphBuilder::new();
        let (a, b) = g.with_device(DeviceName::CPU0, |g| {
            (g.random_uniform(Shape::matrix(3, 3), DType::F32, 1), g.random_uniform(Shape::matrix(3, 3), DType::F32, 2))
        });
        let c = g.with_device(DeviceName::dev(0), |g| g.matmul(a, b));
        (g.finish(), c)
    }

    #[test]
    fn placement_rules() {
        let avail = [DeviceName::CPU0, DeviceName::dev(0), DeviceName::dev(1)];
        let mut g = GraphBuilder::new();
        let a = g.scalar(1.0);
        let m = g.matmul(a, a);
        let pinned = g.with_device(DeviceName::CPU0, |g| g.add(a, a));
        let far = g.with_device(DeviceName::dev(3), |g| g.add(a, a));
        let q = g.with_device(DeviceName::dev(0), |g| g.enqueue(&QueueRef::local("q"), &[a]));
        let g = g.finish();
        assert_eq!(place(g.node(m.0).unwrap(), &avail, false).unwrap(), DeviceName::dev(0));
        assert_eq!(place(g.node(pinned.0).unwrap(), &avail, false).unwrap(), DeviceName::CPU0);
        assert_eq!(place(g.node(far.0).unwrap(), &[DeviceName::CPU0], true).unwrap(), DeviceName::CPU0);
        assert!(matches!(
            place(g.node(far.0).unwrap(), &[DeviceName::CPU0], false),
            Err(GraphError::UnsupportedPlacement { .. })
        ));
        // A queue op has no accelerator kernel.
        assert_eq!(place(g.node(q.0).unwrap(), &avail, true).unwrap(), DeviceName::CPU0);
        assert!(place(g.node(q.0).unwrap(), &avail, false).is_err());
        assert_eq!(place(g.node(m.0).unwrap(), &[DeviceName::CPU0], false).unwrap(), DeviceName::CPU0);
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let (g, _) = listing_one();
        let bytes = g.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DFG1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        let back = Graph::from_bytes(&bytes).unwrap();
        assert_eq!(back.nodes(), g.nodes());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.version() > g.version());
    }

    #[test]
    fn decoder_rejects_forward_edges_and_garbage() {
        let (g, _) = listing_one();
        let mut bytes = g.to_bytes().unwrap();
        assert!(Graph::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Graph::from_bytes(&bytes).is_err());

        // Hand-built node 0 that names itself as input.
        let mut raw = b"DFG1".to_vec();
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.extend_from_slice(&0u32.to_le_bytes());
        raw.push(OpKind::Identity as u8);
        raw.push(0);
        raw.extend_from_slice(&0u16.to_le_bytes());
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&0u32.to_le_bytes());
        raw.extend_from_slice(&0u16.to_le_bytes());
        assert_eq!(Graph::from_bytes(&raw).unwrap_err(), GraphError::CycleDetected(0));
    }

    #[test]
    fn size_guard() {
        let mut g = GraphBuilder::new();
        g.constant(Tensor::zeros(DType::F64, Shape::vector((MAX_GRAPH_BYTES / 8) + 1)));
        assert!(matches!(g.finish().to_bytes(), Err(GraphError::GraphTooLarge { .. })));
    }
}
