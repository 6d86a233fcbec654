//! Server-resident variables and queues.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use flowhpc_core::{Buffer, QueueRef, StateError, StateStore, Tensor, TensorError, VarRef};
use flowhpc_core::codec::TensorView;

use crate::error::ClusterError;
use crate::proto;
use crate::queue::{FifoQueue, DEFAULT_CAPACITY};
use crate::session::{ConnectionPool, DEFAULT_CONNECT_TIMEOUT};
use crate::spec::{ClusterSpec, TaskIdentity};
use crate::wire::{Framing, MsgType};

/// Variables and queues owned by one task, plus routing to peer tasks for
/// references qualified with another owner.
pub struct TaskState {
    identity: Option<TaskIdentity>,
    spec: Option<ClusterSpec>,
    vars: Mutex<HashMap<String, Arc<Mutex<Tensor>>>>,
    queues: Mutex<HashMap<String, Arc<FifoQueue>>>,
    default_capacity: usize,
    peers: ConnectionPool,
}

fn check_conformable(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch { op, expected: a.dtype(), found: b.dtype() });
    }
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.shape().clone(), rhs: b.shape().clone() });
    }
    Ok(())
}

/// `dst += delta`, reusing `dst`'s buffer when nobody else holds it.
fn add_in_place(dst: &mut Tensor, delta: &Tensor) -> Result<(), TensorError> {
    check_conformable("assign_add", dst, delta)?;
    let shape = dst.shape().clone();
    let old = std::mem::replace(dst, Tensor::zeros(delta.dtype(), flowhpc_core::Shape::vector(0)));
    let buffer = match (old.into_buffer(), delta.buffer()) {
        (Buffer::F32(mut a), Buffer::F32(b)) => {
            Arc::make_mut(&mut a).iter_mut().zip(b.iter()).for_each(|(x, y)| *x += *y);
            Buffer::F32(a)
        }
        (Buffer::F64(mut a), Buffer::F64(b)) => {
            Arc::make_mut(&mut a).iter_mut().zip(b.iter()).for_each(|(x, y)| *x += *y);
            Buffer::F64(a)
        }
        (Buffer::C128(mut a), Buffer::C128(b)) => {
            Arc::make_mut(&mut a).iter_mut().zip(b.iter()).for_each(|(x, y)| *x += *y);
            Buffer::C128(a)
        }
        _ => unreachable!("dtypes checked above"),
    };
    *dst = Tensor::new(shape, buffer)?;
    Ok(())
}

impl TaskState {
    pub fn new(identity: Option<TaskIdentity>, spec: Option<ClusterSpec>) -> TaskState {
        TaskState::with_capacity(identity, spec, DEFAULT_CAPACITY)
    }

    pub fn with_capacity(identity: Option<TaskIdentity>, spec: Option<ClusterSpec>, default_capacity: usize) -> TaskState {
        TaskState {
            identity,
            spec,
            vars: Mutex::new(HashMap::new()),
            queues: Mutex::new(HashMap::new()),
            default_capacity: default_capacity.max(1),
            peers: ConnectionPool::new(DEFAULT_CONNECT_TIMEOUT),
        }
    }

    pub fn identity(&self) -> Option<&TaskIdentity> {
        self.identity.as_ref()
    }

    fn slot(&self, name: &str) -> Result<Arc<Mutex<Tensor>>, StateError> {
        self.vars.lock().unwrap().get(name).cloned().ok_or_else(|| StateError::UnknownVariable(name.to_string()))
    }

    pub fn read(&self, name: &str) -> Result<Tensor, StateError> {
        Ok(self.slot(name)?.lock().unwrap().clone())
    }

    /// Create or overwrite.
    pub fn assign(&self, name: &str, value: Tensor) -> Result<(), StateError> {
        let existing = self.vars.lock().unwrap().get(name).cloned();
        match existing {
            Some(slot) => *slot.lock().unwrap() = value,
            None => {
                self.vars.lock().unwrap().insert(name.to_string(), Arc::new(Mutex::new(value)));
            }
        }
        Ok(())
    }

    /// Atomic `v += delta` on an existing variable; returns the new value.
    pub fn assign_add(&self, name: &str, delta: &Tensor) -> Result<Tensor, StateError> {
        let slot = self.slot(name)?;
        let mut v = slot.lock().unwrap();
        add_in_place(&mut v, delta)?;
        Ok(v.clone())
    }

    /// [`assign_add`](Self::assign_add) with the delta still in wire form.
    pub fn assign_add_le(&self, name: &str, delta: &TensorView<'_>) -> Result<Tensor, StateError> {
        let slot = self.slot(name)?;
        let mut v = slot.lock().unwrap();
        v.add_le_bytes(delta.dtype, &delta.shape, delta.data)?;
        Ok(v.clone())
    }

    pub fn variable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.vars.lock().unwrap().keys().cloned().collect();
        names.sort();
        names
    }

    /// Consistent per-variable copies, sorted by name.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let slots: Vec<(String, Arc<Mutex<Tensor>>)> =
            self.vars.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut out: Vec<(String, Tensor)> = slots.into_iter().map(|(k, v)| (k, v.lock().unwrap().clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Replace all variables with `vars`.
    pub fn restore(&self, vars: Vec<(String, Tensor)>) {
        let fresh = vars.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect();
        *self.vars.lock().unwrap() = fresh;
    }

    /// Queue by name, created with `capacity` (0 = default) on first use.
    pub fn queue(&self, name: &str, capacity: u32) -> Arc<FifoQueue> {
        let cap = if capacity == 0 { self.default_capacity } else { capacity as usize };
        self.queues
            .lock()
            .unwrap()
            .entry(name.to_string())
            .or_insert_with(|| Arc::new(FifoQueue::new(name, cap)))
            .clone()
    }

    pub fn queue_if_exists(&self, name: &str) -> Option<Arc<FifoQueue>> {
        self.queues.lock().unwrap().get(name).cloned()
    }

    pub fn close_all_queues(&self) {
        for q in self.queues.lock().unwrap().values() {
            q.close();
        }
    }

    pub fn enqueue(&self, q: &QueueRef, element: Vec<Tensor>) -> Result<(), StateError> {
        self.queue(&q.name, q.capacity).enqueue(element, Duration::from_millis(q.timeout_ms))
    }

    pub fn dequeue(&self, q: &QueueRef) -> Result<Vec<Tensor>, StateError> {
        self.queue(&q.name, q.capacity).dequeue(Duration::from_millis(q.timeout_ms))
    }

    /// True when `owner` names this task or is absent.
    fn is_local(&self, owner: &Option<String>) -> bool {
        match (owner, &self.identity) {
            (None, _) => true,
            (Some(o), Some(me)) => o.parse::<TaskIdentity>().map(|o| &o == me).unwrap_or(false),
            (Some(_), None) => false,
        }
    }

    fn peer_addr(&self, owner: &str) -> Result<String, StateError> {
        let unreachable = |message: String| StateError::Remote { owner: owner.to_string(), message };
        let id: TaskIdentity = owner.parse().map_err(|e: ClusterError| unreachable(e.to_string()))?;
        let spec = self.spec.as_ref().ok_or_else(|| unreachable("this task has no cluster spec".into()))?;
        Ok(spec.address(&id).map_err(|e| unreachable(e.to_string()))?.to_string())
    }

    fn forward<T>(
        &self,
        owner: &str,
        msg: MsgType,
        payload: &crate::wire::Payload<'_>,
        framing: Framing,
        decode: impl FnOnce(&[u8]) -> Result<T, flowhpc_core::codec::DecodeError>,
    ) -> Result<T, StateError> {
        let addr = self.peer_addr(owner)?;
        let result = self.peers.with(&addr, |c| c.call(msg, payload, framing));
        match result {
            Ok(bytes) => decode(&bytes).map_err(|e| StateError::Remote { owner: owner.to_string(), message: e.to_string() }),
            Err(ClusterError::Remote(w)) => Err(w
                .to_state_error()
                .unwrap_or_else(|| StateError::Remote { owner: owner.to_string(), message: w.message.clone() })),
            Err(e) => Err(StateError::Remote { owner: owner.to_string(), message: e.to_string() }),
        }
    }

    /// A [`StateStore`] view that forwards remote references with `framing`.
    pub fn store(&self, framing: Framing) -> RoutedStore<'_> {
        RoutedStore { state: self, framing }
    }
}

pub struct RoutedStore<'a> {
    state: &'a TaskState,
    framing: Framing,
}

impl StateStore for RoutedStore<'_> {
    fn read_variable(&self, var: &VarRef) -> Result<Tensor, StateError> {
        match &var.owner {
            Some(o) if !self.state.is_local(&var.owner) => {
                self.state.forward(o, MsgType::ReadVariable, &proto::encode_name(&var.name), self.framing, proto::decode_tensor)
            }
            _ => self.state.read(&var.name),
        }
    }

    fn assign(&self, var: &VarRef, value: Tensor) -> Result<(), StateError> {
        match &var.owner {
            Some(o) if !self.state.is_local(&var.owner) => self.state.forward(
                o,
                MsgType::AssignAdd,
                &proto::encode_assign(&var.name, &value, true, false),
                self.framing,
                |_| Ok(()),
            ),
            _ => self.state.assign(&var.name, value),
        }
    }

    fn assign_add(&self, var: &VarRef, delta: Tensor, read_back: bool) -> Result<Option<Tensor>, StateError> {
        match &var.owner {
            Some(o) if !self.state.is_local(&var.owner) => self.state.forward(
                o,
                MsgType::AssignAdd,
                &proto::encode_assign(&var.name, &delta, false, read_back),
                self.framing,
                proto::decode_optional_tensor,
            ),
            _ => self.state.assign_add(&var.name, &delta).map(Some),
        }
    }

    fn enqueue(&self, queue: &QueueRef, components: Vec<Tensor>) -> Result<(), StateError> {
        match &queue.owner {
            Some(o) if !self.state.is_local(&queue.owner) => self.state.forward(
                o,
                MsgType::Enqueue,
                &proto::encode_enqueue(queue, &components, false),
                self.framing,
                |_| Ok(()),
            ),
            _ => self.state.enqueue(queue, components),
        }
    }

    fn dequeue(&self, queue: &QueueRef) -> Result<Vec<Tensor>, StateError> {
        match &queue.owner {
            Some(o) if !self.state.is_local(&queue.owner) => {
                self.state.forward(o, MsgType::Dequeue, &proto::encode_dequeue(queue), self.framing, proto::decode_tensors)
            }
            _ => self.state.dequeue(queue),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowhpc_core::{DType, Shape};
    use std::thread;

    #[test]
    fn assign_add_semantics() {
        let s = TaskState::new(None, None);
        s.assign("v", Tensor::zeros(DType::F32, Shape::vector(4))).unwrap();
        let one = Tensor::ones(DType::F32, Shape::vector(4));
        assert_eq!(s.assign_add("v", &one).unwrap(), one);
        for _ in 0..99 {
            s.assign_add("v", &one).unwrap();
        }
        assert_eq!(s.read("v").unwrap(), Tensor::filled(DType::F32, Shape::vector(4), 100.0));
        assert!(matches!(s.assign_add("w", &one), Err(StateError::UnknownVariable(_))));
        assert!(matches!(
            s.assign_add("v", &Tensor::ones(DType::F32, Shape::vector(3))),
            Err(StateError::Tensor(TensorError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn read_snapshot_unaffected_by_later_adds() {
        let s = TaskState::new(None, None);
        s.assign("v", Tensor::zeros(DType::F64, Shape::vector(2))).unwrap();
        let before = s.read("v").unwrap();
        s.assign_add("v", &Tensor::ones(DType::F64, Shape::vector(2))).unwrap();
        assert_eq!(before, Tensor::zeros(DType::F64, Shape::vector(2)));
    }

    #[test]
    fn concurrent_adds_serialize() {
        let s = Arc::new(TaskState::new(None, None));
        s.assign("v", Tensor::zeros(DType::F32, Shape::vector(4))).unwrap();
        let hs: Vec<_> = (0..8)
            .map(|_| {
                let s = s.clone();
                thread::spawn(move || {
                    s.assign_add("v", &Tensor::ones(DType::F32, Shape::vector(4))).unwrap();
                })
            })
            .collect();
        hs.into_iter().for_each(|h| h.join().unwrap());
        assert_eq!(s.read("v").unwrap(), Tensor::filled(DType::F32, Shape::vector(4), 8.0));
    }

    #[test]
    fn local_owner_recognized() {
        let s = TaskState::new(Some(TaskIdentity::new("ps", 0)), None);
        assert!(s.is_local(&None));
        assert!(s.is_local(&Some("ps:0".into())));
        assert!(!s.is_local(&Some("ps:1".into())));
        let store = s.store(Framing::Eager);
        let err = store.read_variable(&VarRef::on("x", "ps:1")).unwrap_err();
        assert!(matches!(err, StateError::Remote { .. }));
    }
}
