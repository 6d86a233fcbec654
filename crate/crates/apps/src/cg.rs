//! Distributed conjugate gradient.
//!
//! Each worker holds a row block of A and its slices of b, x, r, p as
//! variables on its own task, plus a full-length copy of p for the matvec.
//! One iteration is one graph run. Dot products go through the scalar
//! channels `pap` and `rr`; the new p is assembled through the all-gather
//! channel `pg` (each worker contributes its slice zero-padded to full
//! length, so the sum is the concatenation). Every `residual_interval`
//! iterations r is recomputed as b - Ax, with x gathered through `xg`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use flowhpc_cluster::checkpoint;
use flowhpc_cluster::{ClusterSpec, LocalCluster, Session, SessionRunOptions, TaskIdentity};
use flowhpc_core::random::random_uniform;
use flowhpc_core::{DType, DeviceName, Graph, GraphBuilder, NodeId, QueueRef, Shape, Tensor, VarRef};

use crate::error::AppError;
use crate::reduce::{self, ChannelStats, ReduceChannel};
use crate::tiles::{read_tile, write_tile};

pub const WORKER_JOB: &str = "worker";
pub const PS_JOB: &str = "ps";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CgMode {
    FixedIters(u64),
    Tolerance(f64),
}

#[derive(Clone, Debug)]
pub struct CgPlan {
    pub m: usize,
    pub workers: usize,
    pub mode: CgMode,
    /// Cap for tolerance mode.
    pub max_iters: u64,
    pub residual_interval: u64,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub timeout_ms: u64,
    /// Keep x after every iteration (costs one variable read per worker).
    pub record_x: bool,
    /// Distinguishes queue names between restarts of one solve.
    pub epoch: u32,
}

impl CgPlan {
    pub fn new(m: usize, workers: usize, mode: CgMode) -> Result<CgPlan, AppError> {
        if m == 0 || workers == 0 {
            return Err(AppError::InvalidPlan(format!("dimension {m} with {workers} workers")));
        }
        Ok(CgPlan {
            m,
            workers,
            mode,
            max_iters: 10_000,
            residual_interval: 50,
            checkpoint_every: None,
            checkpoint_dir: None,
            timeout_ms: 30_000,
            record_x: false,
            epoch: 0,
        })
    }

    /// Dimension after padding to a multiple of the worker count.
    pub fn padded(&self) -> usize {
        self.m.div_ceil(self.workers) * self.workers
    }

    pub fn rows(&self) -> usize {
        self.padded() / self.workers
    }

    fn channel(&self, name: &str) -> ReduceChannel {
        ReduceChannel::new(format!("cg{}_{name}", self.epoch), ps_owner(), self.workers).with_timeout_ms(self.timeout_ms)
    }

    pub fn channels(&self) -> Channels {
        Channels { pap: self.channel("pap"), rr: self.channel("rr"), pg: self.channel("pg"), xg: self.channel("xg") }
    }

    fn done_queue(&self) -> QueueRef {
        QueueRef::on(format!("cg{}_done", self.epoch), ps_owner())
            .with_capacity(self.workers as u32)
            .with_timeout_ms(self.timeout_ms)
    }

    pub fn worker_checkpoint_dir(&self, w: usize) -> Option<PathBuf> {
        self.checkpoint_dir.as_ref().map(|d| d.join(format!("worker-{w}")))
    }
}

fn ps_owner() -> String {
    TaskIdentity::new(PS_JOB, 0).to_string()
}

#[derive(Clone, Debug)]
pub struct Channels {
    pub pap: ReduceChannel,
    pub rr: ReduceChannel,
    pub pg: ReduceChannel,
    pub xg: ReduceChannel,
}

impl Channels {
    pub fn all(&self) -> [&ReduceChannel; 4] {
        [&self.pap, &self.rr, &self.pg, &self.xg]
    }
}

pub fn flops_cg(n: u64, iters: u64) -> u64 {
    iters * 2 * n * n
}

#[derive(Clone, Debug)]
pub struct CgProblem {
    pub a: Tensor,
    pub b: Tensor,
}

impl CgProblem {
    pub fn new(a: Tensor, b: Tensor) -> Result<CgProblem, AppError> {
        let m = b.num_elements();
        if a.shape().dims() != [m, m] || b.shape().rank() != 1 {
            return Err(AppError::InvalidPlan(format!("A is {}, b is {}", a.shape(), b.shape())));
        }
        a.expect_f64("cg")?;
        b.expect_f64("cg")?;
        Ok(CgProblem { a, b })
    }

    pub fn dim(&self) -> usize {
        self.b.num_elements()
    }
}

/// Five-point Laplacian on a `k × k` grid, dimension `k²`.
pub fn poisson_2d(k: usize) -> Tensor {
    let m = k * k;
    let mut a = vec![0.0; m * m];
    for gy in 0..k {
        for gx in 0..k {
            let i = gy * k + gx;
            a[i * m + i] = 4.0;
            if gx > 0 {
                a[i * m + i - 1] = -1.0;
            }
            if gx + 1 < k {
                a[i * m + i + 1] = -1.0;
            }
            if gy > 0 {
                a[i * m + i - k] = -1.0;
            }
            if gy + 1 < k {
                a[i * m + i + k] = -1.0;
            }
        }
    }
    Tensor::from_f64(Shape::matrix(m, m), a).unwrap()
}

/// Symmetric matrix with unit diagonal and off-diagonal entries uniform in
/// `±0.45/√m`, which keeps the spectrum inside roughly `[0.1, 1.9]`.
pub fn random_spd(m: usize, seed: u64) -> Tensor {
    let u = random_uniform(&Shape::matrix(m, m), DType::F64, seed);
    let u = u.as_f64().unwrap();
    let c = 0.45 / (m as f64).sqrt();
    let mut a = vec![0.0; m * m];
    for i in 0..m {
        a[i * m + i] = 1.0;
        for j in 0..i {
            let v = (2.0 * u[i * m + j] - 1.0) * c;
            a[i * m + j] = v;
            a[j * m + i] = v;
        }
    }
    Tensor::from_f64(Shape::matrix(m, m), a).unwrap()
}

/// Worker `w`'s padded row block of A and slice of b. Padding rows carry a
/// one on the diagonal and the matching b entries are zero.
pub fn worker_block(problem: &CgProblem, plan: &CgPlan, w: usize) -> Result<(Tensor, Tensor), AppError> {
    let (m, mp, rows) = (plan.m, plan.padded(), plan.rows());
    if problem.dim() != m {
        return Err(AppError::LengthMismatch { expected: m, found: problem.dim() });
    }
    let a = problem.a.expect_f64("cg")?;
    let b = problem.b.expect_f64("cg")?;
    let mut blk = vec![0.0; rows * mp];
    let mut bs = vec![0.0; rows];
    for lr in 0..rows {
        let gr = w * rows + lr;
        if gr < m {
            blk[lr * mp..lr * mp + m].copy_from_slice(&a[gr * m..(gr + 1) * m]);
            bs[lr] = b[gr];
        } else {
            blk[lr * mp + gr] = 1.0;
        }
    }
    Ok((Tensor::from_f64(Shape::matrix(rows, mp), blk)?, Tensor::vector_f64(bs)))
}

pub fn row_block_file(start: usize) -> String {
    format!("rows_{start:08}.til")
}

/// Store A as TIL1 row blocks of `block_rows` rows each.
pub fn write_row_blocks(dir: &Path, a: &Tensor, block_rows: usize) -> Result<usize, AppError> {
    let (m, n) = match a.shape().dims() {
        &[m, n] => (m, n),
        _ => return Err(AppError::InvalidPlan(format!("A must be a matrix, got {}", a.shape()))),
    };
    let data = a.expect_f64("row blocks")?;
    fs::create_dir_all(dir)?;
    let mut count = 0;
    for (idx, start) in (0..m).step_by(block_rows.max(1)).enumerate() {
        let end = (start + block_rows).min(m);
        let t = Tensor::from_f64(Shape::matrix(end - start, n), data[start * n..end * n].to_vec())?;
        write_tile(&dir.join(row_block_file(start)), idx as u32, 0, &t)?;
        count += 1;
    }
    Ok(count)
}

/// Worker `w`'s padded block, read from row-block files and a vector file.
pub fn read_worker_block(dir: &Path, b_file: &Path, plan: &CgPlan, w: usize) -> Result<(Tensor, Tensor), AppError> {
    let (m, mp, rows) = (plan.m, plan.padded(), plan.rows());
    let b = read_tile(b_file)?.tensor;
    let b = b.expect_f64("cg b")?;
    if b.len() != m {
        return Err(AppError::LengthMismatch { expected: m, found: b.len() });
    }
    let (lo, hi) = (w * rows, ((w + 1) * rows).min(m));
    let mut blk = vec![0.0; rows * mp];
    let mut starts = Vec::new();
    for e in fs::read_dir(dir)? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(s) = name.strip_prefix("rows_").and_then(|s| s.strip_suffix(".til")) {
            if let Ok(start) = s.parse::<usize>() {
                starts.push(start);
            }
        }
    }
    starts.sort_unstable();
    let mut covered = 0;
    for start in starts {
        if start >= hi {
            continue;
        }
        let path = dir.join(row_block_file(start));
        let t = read_tile(&path)?.tensor;
        let (br, bc) = match t.shape().dims() {
            &[r, c] => (r, c),
            &[n] => (1, n),
            _ => return Err(AppError::BadTile { path, reason: "row block must be a matrix".into() }),
        };
        if bc != m {
            return Err(AppError::LengthMismatch { expected: m, found: bc });
        }
        let d = t.expect_f64("row block")?;
        for r in start.max(lo)..(start + br).min(hi) {
            let lr = r - lo;
            blk[lr * mp..lr * mp + m].copy_from_slice(&d[(r - start) * m..(r - start + 1) * m]);
            covered += 1;
        }
    }
    if covered != hi.saturating_sub(lo) {
        return Err(AppError::LengthMismatch { expected: hi.saturating_sub(lo), found: covered });
    }
    let mut bs = vec![0.0; rows];
    for lr in 0..rows {
        let gr = lo + lr;
        if gr < m {
            bs[lr] = b[gr];
        } else {
            blk[lr * mp + gr] = 1.0;
        }
    }
    Ok((Tensor::from_f64(Shape::matrix(rows, mp), blk)?, Tensor::vector_f64(bs)))
}

fn var(name: &str) -> VarRef {
    VarRef::local(name)
}

struct Built {
    graph: Graph,
    fetch: Vec<NodeId>,
}

/// x = 0, r = p = b, rr = bb = b'b, p_full = all-gathered b, iter = 0.
fn init_graph(plan: &CgPlan, w: usize) -> Built {
    let ch = plan.channels();
    let mut g = GraphBuilder::new();
    let b = g.read_variable(&var("b"));
    let zero = g.constant(Tensor::zeros(DType::F64, Shape::vector(plan.rows())));
    let tag = g.scalar(0.0);
    let bb_l = g.dot(b, b);
    let bb = ch.rr.add_round(&mut g, w, bb_l, tag);
    let padded = g.pad(b, w * plan.rows(), plan.padded());
    let full = ch.pg.add_round(&mut g, w, padded, tag);
    let fetch = vec![
        g.assign(&var("x"), zero),
        g.assign(&var("r"), b),
        g.assign(&var("p"), b),
        g.assign(&var("p_full"), full),
        g.assign(&var("bb"), bb),
        g.assign(&var("rr"), bb),
        g.assign(&var("pap"), tag),
        g.assign(&var("alpha"), tag),
        g.assign(&var("beta"), tag),
        g.assign(&var("iter"), tag),
    ];
    Built { graph: g.finish(), fetch }
}

/// One CG iteration, tagged `iter + 1`.
pub fn iteration_graph(plan: &CgPlan, w: usize) -> Graph {
    build_iteration(plan, w).graph
}

fn build_iteration(plan: &CgPlan, w: usize) -> Built {
    let ch = plan.channels();
    let mut g = GraphBuilder::new();
    let iter = g.read_variable(&var("iter"));
    let one = g.scalar(1.0);
    let tag = g.add(iter, one);
    let a = g.read_variable(&var("A"));
    let p_full = g.read_variable(&var("p_full"));
    let p = g.read_variable(&var("p"));
    let x = g.read_variable(&var("x"));
    let r = g.read_variable(&var("r"));
    let rr = g.read_variable(&var("rr"));

    let ap = g.with_device(DeviceName::dev(0), |g| g.matvec(a, p_full));
    let pap_l = g.dot(p, ap);
    let pap = ch.pap.add_round(&mut g, w, pap_l, tag);
    let alpha = g.div(rr, pap);
    let x1 = g.axpy(alpha, p, x);
    let neg_alpha = g.scale(-1.0, alpha);
    let r1 = g.axpy(neg_alpha, ap, r);
    let rr_l = g.dot(r1, r1);
    let rr1 = ch.rr.add_round(&mut g, w, rr_l, tag);
    let beta = g.div(rr1, rr);
    let p1 = g.axpy(beta, p, r1);
    let padded = g.pad(p1, w * plan.rows(), plan.padded());
    let full = ch.pg.add_round(&mut g, w, padded, tag);

    let fetch = vec![
        g.assign(&var("x"), x1),
        g.assign(&var("r"), r1),
        g.assign(&var("p"), p1),
        g.assign(&var("p_full"), full),
        g.assign(&var("rr"), rr1),
        g.assign(&var("pap"), pap),
        g.assign(&var("alpha"), alpha),
        g.assign(&var("beta"), beta),
        g.assign(&var("iter"), tag),
    ];
    Built { graph: g.finish(), fetch }
}

/// r = b - A x with x gathered in full, tagged `iter + 0.5`.
fn recompute_graph(plan: &CgPlan, w: usize) -> Built {
    let ch = plan.channels();
    let mut g = GraphBuilder::new();
    let iter = g.read_variable(&var("iter"));
    let half = g.scalar(0.5);
    let tag = g.add(iter, half);
    let x = g.read_variable(&var("x"));
    let padded = g.pad(x, w * plan.rows(), plan.padded());
    let x_full = ch.xg.add_round(&mut g, w, padded, tag);
    let a = g.read_variable(&var("A"));
    let b = g.read_variable(&var("b"));
    let ax = g.with_device(DeviceName::dev(0), |g| g.matvec(a, x_full));
    let minus_one = g.scalar(-1.0);
    let r = g.axpy(minus_one, ax, b);
    let rr_l = g.dot(r, r);
    let rr = ch.rr.add_round(&mut g, w, rr_l, tag);
    let fetch = vec![g.assign(&var("r"), r), g.assign(&var("rr"), rr)];
    Built { graph: g.finish(), fetch }
}

fn connect(spec: &ClusterSpec, job: &str, index: usize) -> Result<Session, AppError> {
    Ok(Session::connect(&spec.address(&TaskIdentity::new(job, index))?.to_string())?)
}

fn scalar_var(sess: &mut Session, name: &str) -> Result<f64, AppError> {
    Ok(sess.read_variable(name)?.scalar_value()?)
}

/// Put worker `w`'s block of A and slice of b on its task.
pub fn load_worker(spec: &ClusterSpec, w: usize, a_block: &Tensor, b_slice: &Tensor) -> Result<(), AppError> {
    let mut sess = connect(spec, WORKER_JOB, w)?;
    sess.assign("A", a_block)?;
    sess.assign("b", b_slice)?;
    Ok(())
}

pub fn load_problem(spec: &ClusterSpec, plan: &CgPlan, problem: &CgProblem) -> Result<(), AppError> {
    for w in 0..plan.workers {
        let (a, b) = worker_block(problem, plan, w)?;
        load_worker(spec, w, &a, &b)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct WorkerOutcome {
    pub iterations: u64,
    /// `(iteration, ‖r‖/‖b‖)` from the start iteration on.
    pub residuals: Vec<(u64, f64)>,
    /// Local slice of x after each iteration, when recorded.
    pub x_history: Vec<(u64, Vec<f64>)>,
    pub checkpoints: Vec<u64>,
}

/// Run worker `w` until the plan's stopping rule holds. With `fresh` the
/// state is initialised from b first; otherwise it continues from whatever
/// iteration the task's variables hold (e.g. after a restore).
pub fn cg_worker(
    spec: &ClusterSpec,
    plan: &CgPlan,
    w: usize,
    fresh: bool,
    progress: &(dyn Fn(usize, u64) + Sync),
) -> Result<WorkerOutcome, AppError> {
    let mut sess = connect(spec, WORKER_JOB, w)?;
    let quiet = SessionRunOptions { return_values: false, ..SessionRunOptions::default() };
    let none = HashMap::new();
    if fresh {
        let init = init_graph(plan, w);
        sess.run(&init.graph, &init.fetch, &none, &quiet)?;
    }
    let step = build_iteration(plan, w);
    let recompute = recompute_graph(plan, w);
    let bb = scalar_var(&mut sess, "bb")?;
    let mut iter = scalar_var(&mut sess, "iter")? as u64;
    let mut rr = scalar_var(&mut sess, "rr")?;
    let mut out = WorkerOutcome::default();
    let rel = |rr: f64| if bb > 0.0 { (rr / bb).sqrt() } else { 0.0 };
    out.residuals.push((iter, rel(rr)));

    loop {
        match plan.mode {
            CgMode::FixedIters(n) if iter >= n => break,
            CgMode::Tolerance(eps) if rel(rr) <= eps => break,
            CgMode::Tolerance(_) if iter >= plan.max_iters => {
                return Err(AppError::NotConverged { iterations: iter, residual: rel(rr) })
            }
            _ => {}
        }
        sess.run(&step.graph, &step.fetch, &none, &quiet)?;
        iter += 1;
        let pap = scalar_var(&mut sess, "pap")?;
        if pap.is_nan() || pap <= 0.0 {
            return Err(AppError::Breakdown { iteration: iter, pap });
        }
        if plan.residual_interval > 0 && iter % plan.residual_interval == 0 {
            sess.run(&recompute.graph, &recompute.fetch, &none, &quiet)?;
        }
        rr = scalar_var(&mut sess, "rr")?;
        out.residuals.push((iter, rel(rr)));
        if plan.record_x {
            let x = sess.read_variable("x")?;
            out.x_history.push((iter, x.expect_f64("cg x")?.to_vec()));
        }
        if let (Some(k), Some(dir)) = (plan.checkpoint_every, plan.worker_checkpoint_dir(w)) {
            if k > 0 && iter % k == 0 {
                sess.checkpoint_save(&dir.to_string_lossy(), iter)?;
                out.checkpoints.push(iter);
            }
        }
        progress(w, iter);
    }
    out.iterations = iter;
    let mut ps = connect(spec, PS_JOB, 0)?;
    ps.enqueue(&plan.done_queue(), &[Tensor::scalar_f64(w as f64), Tensor::scalar_f64(iter as f64)])?;
    Ok(out)
}

/// Serve all four channels from the ps task until they are closed.
pub fn cg_reducer(spec: &ClusterSpec, plan: &CgPlan) -> Result<Vec<ChannelStats>, AppError> {
    let channels = plan.channels();
    thread::scope(|s| {
        let handles: Vec<_> = channels
            .all()
            .into_iter()
            .map(|ch| {
                s.spawn(move || {
                    let mut sess = connect(spec, PS_JOB, 0)?;
                    reduce::serve_channel(&mut sess, ch)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("reducer thread panicked")).collect()
    })
}

/// Close the incoming side of every channel so reducers drain and exit.
pub fn close_channels(spec: &ClusterSpec, plan: &CgPlan) -> Result<(), AppError> {
    let mut ps = connect(spec, PS_JOB, 0)?;
    for ch in plan.channels().all() {
        reduce::close_channel(&mut ps, ch)?;
    }
    Ok(())
}

/// Best-effort: close every queue of the solve so blocked parties fail fast.
fn abort_channels(spec: &ClusterSpec, plan: &CgPlan) {
    let Ok(mut ps) = connect(spec, PS_JOB, 0) else { return };
    for ch in plan.channels().all() {
        let _ = ps.close_queue(&ch.in_queue());
        for w in 0..plan.workers {
            let _ = ps.close_queue(&ch.out_queue(w));
        }
    }
    let _ = ps.close_queue(&plan.done_queue());
}

/// Wait for every worker's completion message; returns the iteration count.
pub fn wait_for_workers(spec: &ClusterSpec, plan: &CgPlan) -> Result<u64, AppError> {
    let mut ps = connect(spec, PS_JOB, 0)?;
    let mut seen = BTreeSet::new();
    let mut iters = BTreeSet::new();
    while seen.len() < plan.workers {
        let elem = ps.dequeue(&plan.done_queue())?;
        if let [w, it] = elem.as_slice() {
            seen.insert(w.scalar_value()? as usize);
            iters.insert(it.scalar_value()? as u64);
        }
    }
    if iters.len() != 1 {
        return Err(AppError::SanityCheckFailed(format!("workers stopped at different iterations: {iters:?}")));
    }
    Ok(iters.into_iter().next().unwrap())
}

/// Concatenate the workers' x slices and strip padding.
pub fn collect_x(spec: &ClusterSpec, plan: &CgPlan) -> Result<Vec<f64>, AppError> {
    let mut x = Vec::with_capacity(plan.padded());
    for w in 0..plan.workers {
        let mut sess = connect(spec, WORKER_JOB, w)?;
        x.extend_from_slice(sess.read_variable("x")?.expect_f64("cg x")?);
    }
    x.truncate(plan.m);
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: u64,
    pub residuals: Vec<(u64, f64)>,
    /// Full x after each iteration, when recorded.
    pub x_history: Vec<(u64, Vec<f64>)>,
    pub channel_stats: Vec<ChannelStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Abort,
}

enum Event {
    Progress(usize, u64),
    Finished(usize, Result<WorkerOutcome, AppError>),
}

/// Drive a solve whose matrix blocks are already loaded: reducers and
/// workers run as threads of this process, each with its own sessions.
/// `monitor` sees every `(worker, iteration)` completion on the calling
/// thread and may abort the solve.
pub fn run_loaded(
    spec: &ClusterSpec,
    plan: &CgPlan,
    fresh: bool,
    monitor: &mut dyn FnMut(usize, u64) -> Control,
) -> Result<CgResult, AppError> {
    let (outcomes, stats) = thread::scope(|s| {
        let reducer = s.spawn(|| cg_reducer(spec, plan));
        let (tx, rx) = mpsc::channel::<Event>();
        for w in 0..plan.workers {
            let tx = tx.clone();
            s.spawn(move || {
                let ptx = std::sync::Mutex::new(tx.clone());
                let hook = move |w: usize, t: u64| {
                    let _ = ptx.lock().unwrap().send(Event::Progress(w, t));
                };
                let r = cg_worker(spec, plan, w, fresh, &hook);
                let _ = tx.send(Event::Finished(w, r));
            });
        }
        drop(tx);
        let mut outcomes: Vec<Option<WorkerOutcome>> = vec![None; plan.workers];
        let mut failure: Option<AppError> = None;
        let mut aborted = false;
        for ev in rx {
            match ev {
                Event::Progress(w, t) => {
                    if !aborted && failure.is_none() && monitor(w, t) == Control::Abort {
                        aborted = true;
                        abort_channels(spec, plan);
                    }
                }
                Event::Finished(w, Ok(o)) => outcomes[w] = Some(o),
                Event::Finished(_, Err(e)) => {
                    if failure.is_none() && !aborted {
                        abort_channels(spec, plan);
                        failure = Some(e);
                    }
                }
            }
        }
        if failure.is_none() && !aborted {
            if let Err(e) = wait_for_workers(spec, plan).and_then(|_| close_channels(spec, plan)) {
                abort_channels(spec, plan);
                failure = Some(e);
            }
        }
        let stats = reducer.join().expect("reducer panicked");
        if aborted {
            return Err(AppError::Aborted);
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok((outcomes, stats?))
    })?;

    let outcomes: Vec<WorkerOutcome> = outcomes.into_iter().map(|o| o.expect("every worker finished")).collect();
    let iterations = outcomes[0].iterations;
    let mut x_history = Vec::new();
    if plan.record_x {
        for (idx, (it, _)) in outcomes[0].x_history.iter().enumerate() {
            let mut full: Vec<f64> = outcomes.iter().flat_map(|o| o.x_history[idx].1.iter().copied()).collect();
            full.truncate(plan.m);
            x_history.push((*it, full));
        }
    }
    Ok(CgResult {
        x: collect_x(spec, plan)?,
        iterations,
        residuals: outcomes[0].residuals.clone(),
        x_history,
        channel_stats: stats,
    })
}

/// Load `problem` onto the workers and solve it.
pub fn cg_solve(spec: &ClusterSpec, plan: &CgPlan, problem: &CgProblem) -> Result<CgResult, AppError> {
    load_problem(spec, plan, problem)?;
    run_loaded(spec, plan, true, &mut |_, _| Control::Continue)
}

/// Highest checkpoint id every worker has.
pub fn common_checkpoint(plan: &CgPlan) -> Result<Option<u64>, AppError> {
    let mut common: Option<BTreeSet<u64>> = None;
    for w in 0..plan.workers {
        let dir = match plan.worker_checkpoint_dir(w) {
            Some(d) => d,
            None => return Ok(None),
        };
        let ids: BTreeSet<u64> = if dir.exists() {
            checkpoint::list(&dir).map_err(|e| AppError::SanityCheckFailed(e.to_string()))?.into_iter().collect()
        } else {
            BTreeSet::new()
        };
        common = Some(match common {
            None => ids,
            Some(c) => c.intersection(&ids).copied().collect(),
        });
    }
    Ok(common.and_then(|c| c.last().copied()))
}

#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub worker: usize,
    pub after_iteration: u64,
}

#[derive(Clone, Debug)]
pub struct FaultReport {
    /// Iteration the victim had reached when every task was killed.
    pub killed_at: Option<u64>,
    pub restored_from: Option<u64>,
}

/// Solve on an in-process cluster, killing every task once `fault.worker`
/// completes `fault.after_iteration`, then restarting the tasks, restoring
/// the newest checkpoint common to all workers and finishing the solve.
pub fn solve_with_fault(
    cluster: &mut LocalCluster,
    plan: &CgPlan,
    problem: &CgProblem,
    fault: Fault,
) -> Result<(CgResult, FaultReport), AppError> {
    if plan.checkpoint_every.is_none() || plan.checkpoint_dir.is_none() {
        return Err(AppError::InvalidPlan("fault injection needs checkpointing".into()));
    }
    let spec = cluster.spec().clone();
    load_problem(&spec, plan, problem)?;
    let mut killed_at = None;
    let ids: Vec<TaskIdentity> = cluster.identities().cloned().collect();
    let first = run_loaded(&spec, plan, true, &mut |w, t| {
        if w == fault.worker && t >= fault.after_iteration {
            killed_at = Some(t);
            for id in &ids {
                cluster.kill(id);
            }
            Control::Abort
        } else {
            Control::Continue
        }
    });
    match first {
        Ok(r) => return Ok((r, FaultReport { killed_at: None, restored_from: None })),
        Err(AppError::Aborted) => {}
        Err(e) => return Err(e),
    }
    for id in &ids {
        cluster.restart(id)?;
    }
    let resumed = CgPlan { epoch: plan.epoch + 1, ..plan.clone() };
    let restored_from = common_checkpoint(&resumed)?;
    let result = match restored_from {
        Some(id) => {
            for w in 0..resumed.workers {
                let mut sess = connect(&spec, WORKER_JOB, w)?;
                let dir = resumed.worker_checkpoint_dir(w).unwrap();
                sess.checkpoint_restore(&dir.to_string_lossy(), id)?;
            }
            run_loaded(&spec, &resumed, false, &mut |_, _| Control::Continue)?
        }
        None => cg_solve(&spec, &resumed, problem)?,
    };
    Ok((result, FaultReport { killed_at, restored_from }))
}
