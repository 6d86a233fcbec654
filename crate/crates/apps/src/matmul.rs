//! Tiled matrix multiply in map-reduce shape. Workers multiply tile pairs
//! and push `(target, partial)` to the reducer owning `target mod R`;
//! reducers sum partials into C tiles.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;
use std::thread;
use std::time::Instant;

use flowhpc_cluster::{ClusterError, ClusterSpec, Session, SessionRunOptions, TaskIdentity};
use flowhpc_core::random::random_block;
use flowhpc_core::{kernels, DType, DeviceName, Graph, GraphBuilder, NodeId, QueueRef, Shape, Tensor};

use crate::error::AppError;
use crate::tiles::{AuditLog, TileStore};

pub const WORKER_JOB: &str = "worker";
pub const REDUCER_JOB: &str = "reducer";
const PARTIALS: &str = "mm_partials";
const WORK: &str = "mm_work";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShardPolicy {
    /// Item `q` of the work list goes to worker `q mod W`.
    RoundRobin,
    /// Workers pull item indices from a shared queue on reducer 0.
    Dynamic,
}

impl FromStr for ShardPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<ShardPolicy, String> {
        match s {
            "round-robin" | "static" => Ok(ShardPolicy::RoundRobin),
            "dynamic" => Ok(ShardPolicy::Dynamic),
            _ => Err(format!("unknown shard policy {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkItem {
    pub i: usize,
    pub k: usize,
    pub j: usize,
}

impl WorkItem {
    pub fn target(&self, grid: usize) -> usize {
        self.i * grid + self.j
    }
}

#[derive(Clone, Debug)]
pub struct MatmulPlan {
    pub n: usize,
    pub s: usize,
    pub workers: usize,
    pub reducers: usize,
    pub shard: ShardPolicy,
    pub queue_capacity: u32,
    pub timeout_ms: u64,
}

impl MatmulPlan {
    pub fn new(n: usize, s: usize, workers: usize) -> Result<MatmulPlan, AppError> {
        if s == 0 || n == 0 || n % s != 0 {
            return Err(AppError::IndivisibleTile { n, tile: s });
        }
        if workers == 0 {
            return Err(AppError::InvalidPlan("no workers".into()));
        }
        Ok(MatmulPlan {
            n,
            s,
            workers,
            reducers: 2,
            shard: ShardPolicy::RoundRobin,
            queue_capacity: 32,
            timeout_ms: 120_000,
        })
    }

    pub fn grid(&self) -> usize {
        self.n / self.s
    }

    /// All `(i, k, j)` triples in lexicographic order.
    pub fn work_list(&self) -> Vec<WorkItem> {
        let t = self.grid();
        let mut v = Vec::with_capacity(t * t * t);
        for i in 0..t {
            for k in 0..t {
                for j in 0..t {
                    v.push(WorkItem { i, k, j });
                }
            }
        }
        v
    }

    /// Static shard of worker `w` under round-robin.
    pub fn shard(&self, w: usize) -> Vec<WorkItem> {
        self.work_list().into_iter().skip(w).step_by(self.workers).collect()
    }

    pub fn reducer_of(&self, target: usize) -> usize {
        target % self.reducers
    }

    pub fn targets_of(&self, reducer: usize) -> Vec<usize> {
        (0..self.grid() * self.grid()).filter(|&t| self.reducer_of(t) == reducer).collect()
    }

    fn partials_queue(&self, r: usize) -> QueueRef {
        QueueRef::on(PARTIALS, TaskIdentity::new(REDUCER_JOB, r).to_string())
            .with_capacity(self.queue_capacity)
            .with_timeout_ms(self.timeout_ms)
    }

    fn work_queue(&self) -> QueueRef {
        let cap = (self.grid().pow(3) + self.workers) as u32;
        QueueRef::local(WORK).with_capacity(cap).with_timeout_ms(self.timeout_ms)
    }
}

pub fn flops_matmul(n: u64) -> u64 {
    2 * n * n * n - n * n
}

pub fn tile_file(matrix: char, row: usize, col: usize) -> String {
    format!("{matrix}_{row:04}_{col:04}.til")
}

fn check_square(m: &Tensor, n: usize) -> Result<(), AppError> {
    if m.shape().dims() != [n, n] {
        return Err(AppError::InvalidPlan(format!("expected a {n}x{n} matrix, got {}", m.shape())));
    }
    Ok(())
}

/// Copy the `(row, col)` tile of edge `s` out of a row-major `n × n` matrix.
pub fn extract_tile(m: &Tensor, n: usize, s: usize, row: usize, col: usize) -> Result<Tensor, AppError> {
    let dims = Shape::matrix(s, s);
    Ok(match m.dtype() {
        DType::F32 => {
            let src = m.expect_f32("extract_tile")?;
            let mut out = Vec::with_capacity(s * s);
            for r in 0..s {
                let base = (row * s + r) * n + col * s;
                out.extend_from_slice(&src[base..base + s]);
            }
            Tensor::from_f32(dims, out)?
        }
        DType::F64 => {
            let src = m.expect_f64("extract_tile")?;
            let mut out = Vec::with_capacity(s * s);
            for r in 0..s {
                let base = (row * s + r) * n + col * s;
                out.extend_from_slice(&src[base..base + s]);
            }
            Tensor::from_f64(dims, out)?
        }
        DType::C128 => return Err(AppError::InvalidPlan("complex matrices are not tiled".into())),
    })
}

/// Write the `(n/s)²` tiles of `m` as `<name>_<row>_<col>.til`.
pub fn split_matrix(m: &Tensor, n: usize, s: usize, store: &TileStore, name: char) -> Result<(), AppError> {
    if s == 0 || n % s != 0 {
        return Err(AppError::IndivisibleTile { n, tile: s });
    }
    check_square(m, n)?;
    for i in 0..n / s {
        for j in 0..n / s {
            store.write(&tile_file(name, i, j), i as u32, j as u32, &extract_tile(m, n, s, i, j)?)?;
        }
    }
    Ok(())
}

/// Tiles of the F32 uniform matrix for `seed`, generated block by block so
/// the full matrix never exists in memory.
pub fn split_generated(n: usize, s: usize, seed: u64, store: &TileStore, name: char) -> Result<(), AppError> {
    if s == 0 || n % s != 0 {
        return Err(AppError::IndivisibleTile { n, tile: s });
    }
    for i in 0..n / s {
        for j in 0..n / s {
            let t = random_block(Shape::matrix(s, s), DType::F32, seed, n, i * s, j * s, s, s);
            store.write(&tile_file(name, i, j), i as u32, j as u32, &t)?;
        }
    }
    Ok(())
}

/// Full F32 matrix for `seed`, identical to the tiles of [`split_generated`].
pub fn generated_matrix(n: usize, seed: u64) -> Tensor {
    random_block(Shape::matrix(n, n), DType::F32, seed, n, 0, 0, n, n)
}

/// Reassemble an `n × n` matrix from its tiles.
pub fn reassemble(store: &TileStore, name: char, n: usize, s: usize) -> Result<Tensor, AppError> {
    if s == 0 || n % s != 0 {
        return Err(AppError::IndivisibleTile { n, tile: s });
    }
    let mut out: Option<(DType, Vec<u8>)> = None;
    for i in 0..n / s {
        for j in 0..n / s {
            let rec = store.read(&tile_file(name, i, j))?;
            if rec.tensor.shape().dims() != [s, s] {
                return Err(AppError::LengthMismatch { expected: s * s, found: rec.tensor.num_elements() });
            }
            let dt = rec.tensor.dtype();
            let (_, buf) = out.get_or_insert_with(|| (dt, vec![0u8; n * n * dt.size_of()]));
            let es = dt.size_of();
            let bytes = rec.tensor.le_bytes();
            for r in 0..s {
                let dst = ((i * s + r) * n + j * s) * es;
                buf[dst..dst + s * es].copy_from_slice(&bytes[r * s * es..(r + 1) * s * es]);
            }
        }
    }
    let (dt, buf) = out.expect("at least one tile");
    Ok(Tensor::from_le_bytes(dt, Shape::matrix(n, n), &buf)?)
}

/// The worker's compute graph: `a · b` on the first accelerator slot,
/// enqueued with its target to one of the reducers.
struct WorkerGraph {
    graph: Graph,
    a: NodeId,
    b: NodeId,
    target: NodeId,
    push: Vec<NodeId>,
}

fn worker_graph(plan: &MatmulPlan) -> WorkerGraph {
    let tile = Shape::matrix(plan.s, plan.s);
    let mut g = GraphBuilder::new();
    let a = g.placeholder(DType::F32, Some(tile.clone()));
    let b = g.placeholder(DType::F32, Some(tile));
    let target = g.placeholder(DType::F64, Some(Shape::scalar()));
    let c = g.with_device(DeviceName::dev(0), |g| g.matmul(a, b));
    let push = (0..plan.reducers).map(|r| g.enqueue(&plan.partials_queue(r), &[target, c])).collect();
    WorkerGraph { graph: g.finish(), a, b, target, push }
}

fn done_graph(plan: &MatmulPlan) -> (Graph, Vec<NodeId>) {
    let mut g = GraphBuilder::new();
    let marker = g.constant(Tensor::scalar_f32(0.0));
    let push = (0..plan.reducers).map(|r| g.enqueue(&plan.partials_queue(r), &[marker])).collect();
    (g.finish(), push)
}

fn connect(spec: &ClusterSpec, job: &str, index: usize) -> Result<Session, AppError> {
    Ok(Session::connect(&spec.address(&TaskIdentity::new(job, index))?.to_string())?)
}

#[derive(Clone, Debug, Default)]
pub struct WorkerStats {
    pub items: Vec<WorkItem>,
}

/// Process worker `w`'s share of the work list, then send a done-marker to
/// every reducer.
pub fn worker_loop(spec: &ClusterSpec, plan: &MatmulPlan, w: usize, store: &TileStore) -> Result<WorkerStats, AppError> {
    let mut sess = connect(spec, WORKER_JOB, w)?;
    let wg = worker_graph(plan);
    let opts = SessionRunOptions { return_values: false, ..SessionRunOptions::default() };
    let grid = plan.grid();
    let list = plan.work_list();
    let mut stats = WorkerStats::default();

    let mut process = |item: WorkItem, sess: &mut Session| -> Result<(), AppError> {
        let a = store.read(&tile_file('A', item.i, item.k))?.tensor;
        let b = store.read(&tile_file('B', item.k, item.j))?.tensor;
        let target = item.target(grid);
        let feeds = HashMap::from([
            (wg.a, a),
            (wg.b, b),
            (wg.target, Tensor::scalar_f64(target as f64)),
        ]);
        sess.run(&wg.graph, &[wg.push[plan.reducer_of(target)]], &feeds, &opts)?;
        stats.items.push(item);
        Ok(())
    };

    match plan.shard {
        ShardPolicy::RoundRobin => {
            for item in plan.shard(w) {
                process(item, &mut sess)?;
            }
        }
        ShardPolicy::Dynamic => {
            let mut feed = connect(spec, REDUCER_JOB, 0)?;
            loop {
                let elem = feed.dequeue(&plan.work_queue())?;
                let idx = elem.first().map(|t| t.scalar_value()).transpose()?.unwrap_or(-1.0);
                if idx < 0.0 {
                    break;
                }
                process(list[idx as usize], &mut sess)?;
            }
        }
    }

    let (g, push) = done_graph(plan);
    sess.run(&g, &push, &HashMap::new(), &opts)?;
    Ok(stats)
}

#[derive(Clone, Debug, Default)]
pub struct ReducerOutput {
    pub received: usize,
    pub targets: Vec<usize>,
    /// Every partial in arrival order, when recording was requested.
    pub partials: Option<Vec<(usize, Tensor)>>,
}

/// Sum incoming partials until every worker has sent its done-marker, then
/// write the C tiles of this reducer's parity class.
pub fn reducer_loop(
    spec: &ClusterSpec,
    plan: &MatmulPlan,
    r: usize,
    store: &TileStore,
    record: bool,
) -> Result<ReducerOutput, AppError> {
    let mut sess = connect(spec, REDUCER_JOB, r)?;
    if plan.shard == ShardPolicy::Dynamic && r == 0 {
        let q = plan.work_queue();
        for idx in 0..plan.grid().pow(3) {
            sess.enqueue(&q, &[Tensor::scalar_f64(idx as f64)])?;
        }
        for _ in 0..plan.workers {
            sess.enqueue(&q, &[Tensor::scalar_f64(-1.0)])?;
        }
    }
    let grid = plan.grid();
    let s = plan.s;
    let mut acc: BTreeMap<usize, Vec<f32>> = plan.targets_of(r).into_iter().map(|t| (t, vec![0.0; s * s])).collect();
    let mut out = ReducerOutput { partials: record.then(Vec::new), ..ReducerOutput::default() };
    let local = QueueRef::local(PARTIALS).with_capacity(plan.queue_capacity).with_timeout_ms(plan.timeout_ms);
    let mut done = 0;
    while done < plan.workers {
        let elem = sess.dequeue(&local)?;
        match elem.as_slice() {
            [_marker] => done += 1,
            [target, tile] => {
                let target = target.scalar_value()? as usize;
                if plan.reducer_of(target) != r || target >= grid * grid {
                    return Err(AppError::UnexpectedTargetParity { target, reducer: r });
                }
                let sum = acc.get_mut(&target).expect("target of this parity");
                let part = tile.expect_f32("reducer")?;
                if part.len() != sum.len() {
                    return Err(AppError::LengthMismatch { expected: sum.len(), found: part.len() });
                }
                for (d, p) in sum.iter_mut().zip(part) {
                    *d += *p;
                }
                out.received += 1;
                if let Some(v) = out.partials.as_mut() {
                    v.push((target, tile.clone()));
                }
            }
            other => return Err(AppError::Cluster(ClusterError::Protocol(format!("{}-component element on the partials queue", other.len())))),
        }
    }
    for (target, data) in acc {
        let (i, j) = (target / grid, target % grid);
        store.write(&tile_file('C', i, j), i as u32, j as u32, &Tensor::from_f32(Shape::matrix(s, s), data)?)?;
        out.targets.push(target);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct MatmulRun {
    pub workers: Vec<WorkerStats>,
    pub reducers: Vec<ReducerOutput>,
    /// Launch until the last reducer has written its tiles.
    pub elapsed: std::time::Duration,
}

/// Run every worker and reducer of `plan` as threads of this process.
/// Workers read A and B from `tiles`; reducers write C to `out`. With an
/// audit log each party's file accesses are recorded under its task name.
pub fn run_job(
    spec: &ClusterSpec,
    plan: &MatmulPlan,
    tiles: &Path,
    out: &Path,
    audit: Option<AuditLog>,
    record: bool,
) -> Result<MatmulRun, AppError> {
    let store = |dir: &Path, actor: String| match &audit {
        Some(log) => TileStore::audited(dir, actor, log.clone()),
        None => TileStore::new(dir),
    };
    let t0 = Instant::now();
    let (workers, reducers) = thread::scope(|s| {
        let reducers: Vec<_> = (0..plan.reducers)
            .map(|r| {
                let st = store(out, format!("{REDUCER_JOB}:{r}"));
                s.spawn(move || reducer_loop(spec, plan, r, &st, record))
            })
            .collect();
        let workers: Vec<_> = (0..plan.workers)
            .map(|w| {
                let st = store(tiles, format!("{WORKER_JOB}:{w}"));
                s.spawn(move || worker_loop(spec, plan, w, &st))
            })
            .collect();
        let workers: Vec<_> = workers.into_iter().map(|h| h.join().expect("worker panicked")).collect();
        let reducers: Vec<_> = reducers.into_iter().map(|h| h.join().expect("reducer panicked")).collect();
        (workers, reducers)
    });
    let elapsed = t0.elapsed();
    Ok(MatmulRun {
        workers: workers.into_iter().collect::<Result<_, _>>()?,
        reducers: reducers.into_iter().collect::<Result<_, _>>()?,
        elapsed,
    })
}

/// One C tile recomputed from the A and B tiles in double precision.
pub fn reference_tile(store: &TileStore, plan: &MatmulPlan, i: usize, j: usize) -> Result<Tensor, AppError> {
    let s = plan.s;
    let mut sum = vec![0.0f64; s * s];
    for k in 0..plan.grid() {
        let a = kernels::cast(&store.read(&tile_file('A', i, k))?.tensor, DType::F64)?;
        let b = kernels::cast(&store.read(&tile_file('B', k, j))?.tensor, DType::F64)?;
        let p = kernels::matmul(&a, &b)?;
        for (d, v) in sum.iter_mut().zip(p.expect_f64("reference")?) {
            *d += v;
        }
    }
    Ok(Tensor::from_f64(Shape::matrix(s, s), sum)?)
}
