//! Executing a fetch set against a graph.
//!
//! Only the transitive producers of the requested fetches run. In parallel
//! mode ready nodes are dispatched to one lane per placed device (the CPU lane
//! has a small thread pool); single-threaded mode runs the closure in id
//! order, which is a topological order.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::mpsc;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Instant;

use crate::device::{DeviceKind, DeviceName};
use crate::error::{GraphError, StateError};
use crate::fft;
use crate::graph::{place, Graph, NodeId, NodeSpec, OpKind, QueueRef, VarRef};
use crate::kernels;
use crate::random;
use crate::tensor::{DType, Shape, Tensor};

/// Resolves the stateful ops of a graph: variables and queues.
///
/// Implementations provide their own synchronization; every method may be
/// called concurrently from several executing nodes and runs.
pub trait StateStore: Send + Sync {
    fn read_variable(&self, var: &VarRef) -> Result<Tensor, StateError>;

    /// Create or overwrite `var` with `value`.
    fn assign(&self, var: &VarRef, value: Tensor) -> Result<(), StateError>;

    /// Atomically add `delta` to an existing variable. Returns the updated
    /// value when `read_back` is set or when it is available for free.
    fn assign_add(&self, var: &VarRef, delta: Tensor, read_back: bool) -> Result<Option<Tensor>, StateError>;

    fn enqueue(&self, queue: &QueueRef, components: Vec<Tensor>) -> Result<(), StateError>;

    fn dequeue(&self, queue: &QueueRef) -> Result<Vec<Tensor>, StateError>;
}

/// A store with no state; every stateful op fails.
pub struct NoState;

impl StateStore for NoState {
    fn read_variable(&self, var: &VarRef) -> Result<Tensor, StateError> {
        Err(StateError::UnknownVariable(var.name.clone()))
    }

    fn assign(&self, var: &VarRef, _: Tensor) -> Result<(), StateError> {
        Err(StateError::UnknownVariable(var.name.clone()))
    }

    fn assign_add(&self, var: &VarRef, _: Tensor, _: bool) -> Result<Option<Tensor>, StateError> {
        Err(StateError::UnknownVariable(var.name.clone()))
    }

    fn enqueue(&self, queue: &QueueRef, _: Vec<Tensor>) -> Result<(), StateError> {
        Err(StateError::QueueSpec { name: queue.name.clone(), reason: "no state store".into() })
    }

    fn dequeue(&self, queue: &QueueRef) -> Result<Vec<Tensor>, StateError> {
        Err(StateError::QueueSpec { name: queue.name.clone(), reason: "no state store".into() })
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Devices this executor may place nodes on; must include `/cpu:0`.
    pub devices: Vec<DeviceName>,
    pub soft_placement: bool,
    /// `false` selects the strict single-threaded mode.
    pub parallel: bool,
    pub trace: bool,
    /// Threads serving the CPU lane in parallel mode.
    pub cpu_threads: usize,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        RunOptions {
            devices: vec![DeviceName::CPU0],
            soft_placement: true,
            parallel: true,
            trace: false,
            cpu_threads: 2,
        }
    }
}

impl RunOptions {
    pub fn single_threaded() -> RunOptions {
        RunOptions { parallel: false, ..RunOptions::default() }
    }
}

/// One executed node.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub node: u32,
    pub op: OpKind,
    pub device: DeviceName,
    /// Monotonic nanoseconds since a process-wide epoch.
    pub start_ns: u64,
    pub end_ns: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceLog {
    pub records: Vec<TraceRecord>,
}

impl TraceLog {
    pub fn executed(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.node).collect()
    }

    pub fn executions_of(&self, node: NodeId) -> usize {
        self.records.iter().filter(|r| r.node == node.0).count()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub values: Vec<Tensor>,
    pub trace: Option<TraceLog>,
}

fn monotonic_ns() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

/// Empty tensor returned by ops that only acknowledge.
pub fn ack() -> Tensor {
    Tensor::zeros(DType::F32, Shape::vector(0))
}

/// Ids of every node the fetches transitively depend on, ascending.
pub fn producer_closure(graph: &Graph, fetches: &[NodeId]) -> Result<Vec<u32>, GraphError> {
    let mut seen = vec![false; graph.len()];
    let mut stack = Vec::new();
    for f in fetches {
        graph.node(f.0)?;
        stack.push(f.0);
    }
    while let Some(id) = stack.pop() {
        if std::mem::replace(&mut seen[id as usize], true) {
            continue;
        }
        for &i in &graph.node(id)?.inputs {
            if i >= id {
                return Err(GraphError::CycleDetected(id));
            }
            if !seen[i as usize] {
                stack.push(i);
            }
        }
    }
    Ok(seen.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i as u32).collect())
}

fn kernel_err(node: &NodeSpec) -> impl Fn(crate::error::TensorError) -> GraphError + '_ {
    move |source| GraphError::Kernel { node: node.id, source }
}

fn state_err(node: &NodeSpec) -> impl Fn(StateError) -> GraphError + '_ {
    move |source| GraphError::State { node: node.id, source }
}

fn compute(
    node: &NodeSpec,
    inputs: &[Tensor],
    feeds: &HashMap<NodeId, Tensor>,
    state: &dyn StateStore,
) -> Result<Tensor, GraphError> {
    let k = kernel_err(node);
    let s = state_err(node);
    let arity = |n: usize| {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(node.bad_attr("inputs", &format!("{} takes {n} inputs, got {}", node.op, inputs.len())))
        }
    };
    match node.op {
        OpKind::Const => Ok(node.attr_tensor("value")?.clone()),
        OpKind::Placeholder => {
            let t = feeds.get(&NodeId(node.id)).ok_or(GraphError::MissingFeed(node.id))?;
            let dtype = node.attr_dtype("dtype")?;
            if t.dtype() != dtype {
                return Err(k(crate::error::TensorError::DTypeMismatch {
                    op: "placeholder",
                    expected: dtype,
                    found: t.dtype(),
                }));
            }
            if node.attrs.contains_key("shape") {
                let shape = node.attr_shape("shape")?;
                if t.shape() != shape {
                    return Err(k(crate::error::TensorError::ShapeMismatch {
                        op: "placeholder",
                        lhs: shape.clone(),
                        rhs: t.shape().clone(),
                    }));
                }
            }
            Ok(t.clone())
        }
        OpKind::RandomUniform => {
            let seed = node.attr_int("seed")? as u64;
            Ok(random::random_uniform(node.attr_shape("shape")?, node.attr_dtype("dtype")?, seed))
        }
        OpKind::MatMul => {
            arity(2)?;
            kernels::matmul(&inputs[0], &inputs[1]).map_err(k)
        }
        OpKind::Add => {
            arity(2)?;
            kernels::add(&inputs[0], &inputs[1]).map_err(k)
        }
        OpKind::Div => {
            arity(2)?;
            kernels::div(&inputs[0], &inputs[1]).map_err(k)
        }
        OpKind::Dot => {
            arity(2)?;
            kernels::dot(&inputs[0], &inputs[1]).map_err(k)
        }
        OpKind::MatVec => {
            arity(2)?;
            kernels::matvec(&inputs[0], &inputs[1]).map_err(k)
        }
        OpKind::Axpy => {
            arity(3)?;
            let alpha = inputs[0].scalar_value().map_err(&k)?;
            kernels::axpy(alpha, &inputs[1], &inputs[2]).map_err(k)
        }
        OpKind::Scale => {
            arity(1)?;
            kernels::scale(node.attr_float("alpha")?, &inputs[0]).map_err(k)
        }
        OpKind::Fft => {
            arity(1)?;
            fft::fft_local(&inputs[0]).map_err(k)
        }
        OpKind::Slice => {
            arity(1)?;
            kernels::slice(&inputs[0], node.attr_usize("offset")?, node.attr_usize("len")?).map_err(k)
        }
        OpKind::Pad => {
            arity(1)?;
            kernels::pad(&inputs[0], node.attr_usize("offset")?, node.attr_usize("total")?).map_err(k)
        }
        OpKind::Identity => {
            arity(1)?;
            Ok(inputs[0].clone())
        }
        OpKind::VariableRead => state.read_variable(&VarRef::from_node(node)?).map_err(s),
        OpKind::Assign => {
            arity(1)?;
            state.assign(&VarRef::from_node(node)?, inputs[0].clone()).map_err(s)?;
            Ok(inputs[0].clone())
        }
        OpKind::AssignAdd => {
            arity(1)?;
            let read_back = node.attr_int_or("read_back", 0)? != 0;
            let updated = state.assign_add(&VarRef::from_node(node)?, inputs[0].clone(), read_back).map_err(s)?;
            Ok(match updated {
                Some(v) if read_back => v,
                _ => ack(),
            })
        }
        OpKind::Enqueue => {
            state.enqueue(&QueueRef::from_node(node)?, inputs.to_vec()).map_err(s)?;
            Ok(ack())
        }
        OpKind::Dequeue => {
            let component = node.attr_usize("component")?;
            let mut element = state.dequeue(&QueueRef::from_node(node)?).map_err(s)?;
            if component >= element.len() {
                return Err(node.bad_attr("component", &format!("element has {} components", element.len())));
            }
            Ok(element.swap_remove(component))
        }
    }
}

fn record(node: &NodeSpec, device: DeviceName, start: u64, inputs: &[Tensor], out: &Tensor) -> TraceRecord {
    TraceRecord {
        node: node.id,
        op: node.op,
        device,
        start_ns: start,
        end_ns: monotonic_ns(),
        input_bytes: inputs.iter().map(|t| t.byte_len() as u64).sum(),
        output_bytes: out.byte_len() as u64,
    }
}

/// Execute the producers of `fetches` and return the fetched tensors in
/// request order.
///
/// The first failing node cancels every node not yet started. Variable and
/// queue mutations already applied are kept.
pub fn run(
    graph: &Graph,
    fetches: &[NodeId],
    feeds: &HashMap<NodeId, Tensor>,
    state: &dyn StateStore,
    opts: &RunOptions,
) -> Result<RunOutput, GraphError> {
    if fetches.is_empty() {
        return Err(GraphError::EmptyFetch);
    }
    let closure = producer_closure(graph, fetches)?;
    let mut placement = HashMap::with_capacity(closure.len());
    for &id in &closure {
        let node = graph.node(id)?;
        if node.op == OpKind::Placeholder && !feeds.contains_key(&NodeId(id)) {
            return Err(GraphError::MissingFeed(id));
        }
        placement.insert(id, place(node, &opts.devices, opts.soft_placement)?);
    }
    if opts.parallel {
        run_parallel(graph, &closure, &placement, fetches, feeds, state, opts)
    } else {
        run_sequential(graph, &closure, &placement, fetches, feeds, state, opts)
    }
}

fn run_sequential(
    graph: &Graph,
    closure: &[u32],
    placement: &HashMap<u32, DeviceName>,
    fetches: &[NodeId],
    feeds: &HashMap<NodeId, Tensor>,
    state: &dyn StateStore,
    opts: &RunOptions,
) -> Result<RunOutput, GraphError> {
    let mut values: Vec<Option<Tensor>> = vec![None; graph.len()];
    let mut trace = opts.trace.then(TraceLog::default);
    for &id in closure {
        let node = graph.node(id)?;
        let inputs: Vec<Tensor> =
            node.inputs.iter().map(|&i| values[i as usize].clone().ok_or(GraphError::CycleDetected(id))).collect::<Result<_, _>>()?;
        let start = monotonic_ns();
        let out = compute(node, &inputs, feeds, state)?;
        if let Some(t) = trace.as_mut() {
            t.records.push(record(node, placement[&id], start, &inputs, &out));
        }
        values[id as usize] = Some(out);
    }
    let values = fetches.iter().map(|f| values[f.0 as usize].clone().expect("fetched node executed")).collect();
    Ok(RunOutput { values, trace })
}

struct Lane {
    state: Mutex<(VecDeque<u32>, bool)>,
    ready: Condvar,
}

impl Lane {
    fn new() -> Lane {
        Lane { state: Mutex::new((VecDeque::new(), false)), ready: Condvar::new() }
    }

    fn push(&self, id: u32) {
        self.state.lock().unwrap().0.push_back(id);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.state.lock().unwrap().1 = true;
        self.ready.notify_all();
    }

    fn pop(&self) -> Option<u32> {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.1 {
                return None;
            }
            if let Some(id) = st.0.pop_front() {
                return Some(id);
            }
            st = self.ready.wait(st).unwrap();
        }
    }
}

type Completion = (u32, Result<(), GraphError>, Option<TraceRecord>);

fn run_parallel(
    graph: &Graph,
    closure: &[u32],
    placement: &HashMap<u32, DeviceName>,
    fetches: &[NodeId],
    feeds: &HashMap<NodeId, Tensor>,
    state: &dyn StateStore,
    opts: &RunOptions,
) -> Result<RunOutput, GraphError> {
    let n = graph.len();
    let mut pending = vec![0usize; n];
    let mut consumers: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut uses = vec![0usize; n];
    for &id in closure {
        let node = graph.node(id)?;
        pending[id as usize] = node.inputs.len();
        for &i in &node.inputs {
            consumers[i as usize].push(id);
            uses[i as usize] += 1;
        }
    }
    let mut fetched = vec![false; n];
    for f in fetches {
        fetched[f.0 as usize] = true;
    }

    let mut lanes: HashMap<DeviceName, Lane> = HashMap::new();
    for &id in closure {
        lanes.entry(placement[&id]).or_insert_with(Lane::new);
    }
    let values: Mutex<Vec<Option<Tensor>>> = Mutex::new(vec![None; n]);
    let (done_tx, done_rx) = mpsc::channel::<Completion>();

    let outcome = std::thread::scope(|scope| {
        for (&device, lane) in &lanes {
            let threads = if device.kind == DeviceKind::Cpu { opts.cpu_threads.max(1) } else { 1 };
            for _ in 0..threads {
                let done_tx = done_tx.clone();
                let values = &values;
                scope.spawn(move || {
                    while let Some(id) = lane.pop() {
                        let node = graph.node(id).expect("closure node");
                        let inputs: Vec<Tensor> = {
                            let v = values.lock().unwrap();
                            node.inputs.iter().map(|&i| v[i as usize].clone().expect("input ready")).collect()
                        };
                        let start = monotonic_ns();
                        let result = compute(node, &inputs, feeds, state);
                        let msg = match result {
                            Ok(out) => {
                                let rec = opts.trace.then(|| record(node, device, start, &inputs, &out));
                                values.lock().unwrap()[id as usize] = Some(out);
                                (id, Ok(()), rec)
                            }
                            Err(e) => (id, Err(e), None),
                        };
                        if done_tx.send(msg).is_err() {
                            return;
                        }
                    }
                });
            }
        }
        drop(done_tx);

        let mut in_flight = 0usize;
        for &id in closure {
            if pending[id as usize] == 0 {
                lanes[&placement[&id]].push(id);
                in_flight += 1;
            }
        }
        let mut completed = 0usize;
        let mut first_error: Option<GraphError> = None;
        let mut trace = opts.trace.then(TraceLog::default);
        while in_flight > 0 {
            let (id, result, rec) = done_rx.recv().expect("executor threads alive");
            in_flight -= 1;
            match result {
                Err(e) => {
                    if first_error.is_none() {
                        first_error = Some(e);
                    }
                }
                Ok(()) => {
                    completed += 1;
                    if let (Some(t), Some(r)) = (trace.as_mut(), rec) {
                        t.records.push(r);
                    }
                    let node = graph.node(id).expect("closure node");
                    {
                        let mut v = values.lock().unwrap();
                        for &i in &node.inputs {
                            uses[i as usize] -= 1;
                            if uses[i as usize] == 0 && !fetched[i as usize] {
                                v[i as usize] = None;
                            }
                        }
                    }
                    if first_error.is_none() {
                        for &c in &consumers[id as usize] {
                            pending[c as usize] -= 1;
                            if pending[c as usize] == 0 {
                                lanes[&placement[&c]].push(c);
                                in_flight += 1;
                            }
                        }
                    }
                }
            }
        }
        for lane in lanes.values() {
            lane.close();
        }
        match first_error {
            Some(e) => Err(e),
            None => {
                debug_assert_eq!(completed, closure.len());
                Ok(trace)
            }
        }
    });

    let trace = outcome?;
    let mut v = values.into_inner().unwrap();
    let values = fetches.iter().map(|f| v[f.0 as usize].clone().expect("fetched node executed")).collect();
    v.clear();
    Ok(RunOutput { values, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use std::collections::HashMap as Map;

    /// Minimal in-memory store for executor tests.
    #[derive(Default)]
    struct MemState {
        vars: Mutex<Map<String, Tensor>>,
        queues: Mutex<Map<String, VecDeque<Vec<Tensor>>>>,
    }

    impl StateStore for MemState {
        fn read_variable(&self, var: &VarRef) -> Result<Tensor, StateError> {
            self.vars.lock().unwrap().get(&var.name).cloned().ok_or(StateError::UnknownVariable(var.name.clone()))
        }
        fn assign(&self, var: &VarRef, value: Tensor) -> Result<(), StateError> {
            self.vars.lock().unwrap().insert(var.name.clone(), value);
            Ok(())
        }
        fn assign_add(&self, var: &VarRef, delta: Tensor, _: bool) -> Result<Option<Tensor>, StateError> {
            let mut vars = self.vars.lock().unwrap();
            let cur = vars.get(&var.name).ok_or(StateError::UnknownVariable(var.name.clone()))?;
            let next = kernels::add(cur, &delta)?;
            vars.insert(var.name.clone(), next.clone());
            Ok(Some(next))
        }
        fn enqueue(&self, q: &QueueRef, c: Vec<Tensor>) -> Result<(), StateError> {
            self.queues.lock().unwrap().entry(q.name.clone()).or_default().push_back(c);
            Ok(())
        }
        fn dequeue(&self, q: &QueueRef) -> Result<Vec<Tensor>, StateError> {
            self.queues
                .lock()
                .unwrap()
                .get_mut(&q.name)
                .and_then(|d| d.pop_front())
                .ok_or(StateError::Timeout(q.name.clone()))
        }
    }

    fn modes() -> [RunOptions; 2] {
        [
            RunOptions { trace: true, ..RunOptions::single_threaded() },
            RunOptions { trace: true, devices: DeviceName::host_with_devs(2), ..RunOptions::default() },
        ]
    }

    #[test]
    fn listing_one_analog() {
        let mut g = GraphBuilder::new();
        let (a, b) = g.with_device(DeviceName::CPU0, |g| {
            (g.random_uniform(Shape::matrix(3, 3), DType::F32, 1), g.random_uniform(Shape::matrix(3, 3), DType::F32, 2))
        });
        let c = g.with_device(DeviceName::dev(0), |g| g.matmul(a, b));
        let g = g.finish();
        for opts in modes() {
            let out = run(&g, &[c], &Map::new(), &NoState, &opts).unwrap();
            let expect = kernels::matmul(
                &random::random_uniform(&Shape::matrix(3, 3), DType::F32, 1),
                &random::random_uniform(&Shape::matrix(3, 3), DType::F32, 2),
            )
            .unwrap();
            assert!(out.values[0].bit_identical(&expect));
            let trace = out.trace.unwrap();
            let mm = trace.records.iter().find(|r| r.node == c.0).unwrap();
            let expected_dev = if opts.parallel { DeviceName::dev(0) } else { DeviceName::CPU0 };
            assert_eq!(mm.device, expected_dev);
        }
    }

    #[test]
    fn leaf_fetch_runs_nothing_else() {
        let mut g = GraphBuilder::new();
        let k = g.constant(Tensor::scalar_f64(42.0));
        let other = g.scalar(1.0);
        let _sum = g.add(k, other);
        let g = g.finish();
        for opts in modes() {
            let out = run(&g, &[k], &Map::new(), &NoState, &opts).unwrap();
            assert_eq!(out.values[0].scalar_value().unwrap(), 42.0);
            assert_eq!(out.trace.unwrap().records.len(), 1);
        }
    }

    #[test]
    fn diamond_executes_root_once() {
        let mut g = GraphBuilder::new();
        let a = g.scalar(2.0);
        let b = g.scale(3.0, a);
        let c = g.scale(5.0, a);
        let d = g.add(b, c);
        let g = g.finish();
        for opts in modes() {
            let out = run(&g, &[d], &Map::new(), &NoState, &opts).unwrap();
            assert_eq!(out.values[0].scalar_value().unwrap(), 16.0);
            let trace = out.trace.unwrap();
            assert_eq!(trace.records.len(), 4);
            assert_eq!(trace.executions_of(a), 1);
            assert!(trace.records.iter().all(|r| r.end_ns >= r.start_ns));
        }
    }

    #[test]
    fn missing_feed_and_empty_fetch() {
        let mut g = GraphBuilder::new();
        let p = g.placeholder(DType::F64, None);
        let q = g.scale(2.0, p);
        let g = g.finish();
        assert_eq!(run(&g, &[q], &Map::new(), &NoState, &RunOptions::default()).unwrap_err(), GraphError::MissingFeed(p.0));
        assert_eq!(run(&g, &[], &Map::new(), &NoState, &RunOptions::default()).unwrap_err(), GraphError::EmptyFetch);
        let mut feeds = Map::new();
        feeds.insert(p, Tensor::scalar_f64(4.0));
        let out = run(&g, &[q, p], &feeds, &NoState, &RunOptions::default()).unwrap();
        assert_eq!(out.values[0].scalar_value().unwrap(), 8.0);
        assert_eq!(out.values[1].scalar_value().unwrap(), 4.0);
        feeds.insert(p, Tensor::scalar_f32(4.0));
        assert!(matches!(
            run(&g, &[q], &feeds, &NoState, &RunOptions::default()),
            Err(GraphError::Kernel { .. })
        ));
    }

    #[test]
    fn kernel_error_carries_node_id() {
        let mut g = GraphBuilder::new();
        let a = g.constant(Tensor::vector_f64(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector_f64(vec![1.0, 2.0, 3.0]));
        let bad = g.add(a, b);
        let after = g.scale(2.0, bad);
        let g = g.finish();
        for opts in modes() {
            let err = run(&g, &[after], &Map::new(), &NoState, &opts).unwrap_err();
            assert_eq!(err.node(), Some(bad.0));
        }
    }

    #[test]
    fn strict_placement_error_surfaces() {
        let mut g = GraphBuilder::new();
        let a = g.with_device(DeviceName::dev(7), |g| g.scalar(1.0));
        let g = g.finish();
        let opts = RunOptions { soft_placement: false, ..RunOptions::default() };
        assert!(matches!(run(&g, &[a], &Map::new(), &NoState, &opts), Err(GraphError::UnsupportedPlacement { .. })));
    }

    #[test]
    fn stateful_ops_against_store() {
        let state = MemState::default();
        let v = VarRef::local("v");
        let mut g = GraphBuilder::new();
        let init = g.constant(Tensor::zeros(DType::F32, Shape::vector(4)));
        let assign = g.assign(&v, init);
        let g_init = g.finish();
        run(&g_init, &[assign], &Map::new(), &state, &RunOptions::default()).unwrap();

        let mut g = GraphBuilder::new();
        let one = g.constant(Tensor::ones(DType::F32, Shape::vector(4)));
        let up = g.assign_add(&v, one, true);
        let g_add = g.finish();
        for _ in 0..100 {
            run(&g_add, &[up], &Map::new(), &state, &RunOptions::default()).unwrap();
        }
        assert_eq!(state.read_variable(&v).unwrap(), Tensor::filled(DType::F32, Shape::vector(4), 100.0));

        let q = QueueRef::local("q");
        let mut g = GraphBuilder::new();
        let x = g.scalar(7.0);
        let y = g.scalar(9.0);
        let e = g.enqueue(&q, &[x, y]);
        let d = g.dequeue(&q, 1, &[e]);
        let g = g.finish();
        let out = run(&g, &[d], &Map::new(), &state, &RunOptions::default()).unwrap();
        assert_eq!(out.values[0].scalar_value().unwrap(), 9.0);
    }

    #[test]
    fn parallel_matches_sequential_on_independent_branches() {
        let mut g = GraphBuilder::new();
        let mut outs = Vec::new();
        for seed in 0..6 {
            let a = g.random_uniform(Shape::matrix(16, 16), DType::F32, seed);
            let b = g.random_uniform(Shape::matrix(16, 16), DType::F32, seed + 100);
            let m = g.matmul(a, b);
            outs.push(g.add(m, a));
        }
        let g = g.finish();
        let seq = run(&g, &outs, &Map::new(), &NoState, &RunOptions::single_threaded()).unwrap();
        let opts = RunOptions { devices: DeviceName::host_with_devs(3), cpu_threads: 3, ..RunOptions::default() };
        for _ in 0..5 {
            let par = run(&g, &outs, &Map::new(), &NoState, &opts).unwrap();
            for (x, y) in seq.values.iter().zip(&par.values) {
                assert!(x.bit_identical(y));
            }
        }
    }
}
