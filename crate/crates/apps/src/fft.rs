//! Distributed 1D FFT by interleaved decomposition.
//!
//! Tile `t` holds `x[t::T]`. Workers transform their tiles and push
//! `(t, Y_t)` to the merger, which stores `Y_t[j]` at `buf[j*T + t]` and
//! combines the tiles with twiddle factors.

use std::collections::{BTreeSet, HashMap};
use std::str::FromStr;
use std::time::{Duration, Instant};

use flowhpc_cluster::{ClusterError, ClusterSpec, Session, SessionRunOptions, TaskIdentity};
use flowhpc_core::fft::twiddle;
use flowhpc_core::{DType, DeviceName, Graph, GraphBuilder, NodeId, QueueRef, Shape, Tensor};
use num_complex::Complex64;

use crate::error::AppError;
use crate::tiles::TileStore;

pub const WORKER_JOB: &str = "worker";
pub const MERGER_JOB: &str = "merger";
const TILES_QUEUE: &str = "fft_tiles";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeKind {
    /// `X[k] = Σ_t w(t·k, N) · Y_t[k mod n]`, O(N·T).
    Direct,
    /// log₂T radix-2 combination stages, O(N log T).
    Butterfly,
}

impl FromStr for MergeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<MergeKind, String> {
        match s {
            "direct" => Ok(MergeKind::Direct),
            "butterfly" => Ok(MergeKind::Butterfly),
            _ => Err(format!("unknown merge kind {s:?}")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FftPlan {
    pub n: usize,
    pub tiles: usize,
    pub workers: usize,
    pub merge: MergeKind,
    pub queue_capacity: u32,
    pub timeout_ms: u64,
}

impl FftPlan {
    pub fn new(n: usize, tiles: usize, workers: usize) -> Result<FftPlan, AppError> {
        if !n.is_power_of_two() || !tiles.is_power_of_two() {
            return Err(AppError::InvalidPlan(format!("N={n} and T={tiles} must be powers of two")));
        }
        if tiles > n {
            return Err(AppError::IndivisibleTile { n, tile: tiles });
        }
        if workers == 0 || workers > tiles {
            return Err(AppError::InvalidPlan(format!("{workers} workers for {tiles} tiles")));
        }
        Ok(FftPlan { n, tiles, workers, merge: MergeKind::Direct, queue_capacity: 32, timeout_ms: 120_000 })
    }

    pub fn tile_len(&self) -> usize {
        self.n / self.tiles
    }

    /// Worker `w` owns tiles `w, w+W, ...`.
    pub fn tiles_of(&self, w: usize) -> Vec<usize> {
        (w..self.tiles).step_by(self.workers).collect()
    }

    fn queue(&self) -> QueueRef {
        QueueRef::on(TILES_QUEUE, TaskIdentity::new(MERGER_JOB, 0).to_string())
            .with_capacity(self.queue_capacity)
            .with_timeout_ms(self.timeout_ms)
    }
}

pub fn flops_fft(n: u64) -> u64 {
    5 * n * u64::from(n.max(1).ilog2())
}

pub fn signal_tile_file(t: usize) -> String {
    format!("x_{t:04}.til")
}

/// Split `x` into `t` stride-`t` subsequences.
pub fn split_signal(x: &Tensor, t: usize) -> Result<Vec<Tensor>, AppError> {
    let v = x.expect_c128("split_signal")?;
    if t == 0 || v.len() % t != 0 {
        return Err(AppError::IndivisibleTile { n: v.len(), tile: t });
    }
    Ok((0..t).map(|s| Tensor::vector_c128(v.iter().skip(s).step_by(t).copied().collect())).collect())
}

/// Inverse of [`split_signal`].
pub fn interleave(tiles: &[Tensor]) -> Result<Tensor, AppError> {
    let t = tiles.len();
    let n = tiles.first().map_or(0, Tensor::num_elements);
    let mut out = vec![Complex64::new(0.0, 0.0); n * t];
    for (s, tile) in tiles.iter().enumerate() {
        let v = tile.expect_c128("interleave")?;
        if v.len() != n {
            return Err(AppError::LengthMismatch { expected: n, found: v.len() });
        }
        for (j, z) in v.iter().enumerate() {
            out[j * t + s] = *z;
        }
    }
    Ok(Tensor::vector_c128(out))
}

pub fn write_signal_tiles(store: &TileStore, x: &Tensor, t: usize) -> Result<(), AppError> {
    for (s, tile) in split_signal(x, t)?.iter().enumerate() {
        store.write(&signal_tile_file(s), s as u32, 0, tile)?;
    }
    Ok(())
}

/// Direct merge from an interleaved buffer holding `Y_t[j]` at `j*T + t`.
pub fn merge_direct(buf: &[Complex64], tiles: usize) -> Vec<Complex64> {
    let n_total = buf.len();
    let n = n_total / tiles;
    let mut out = Vec::with_capacity(n_total);
    for k in 0..n_total {
        let row = &buf[(k % n) * tiles..(k % n + 1) * tiles];
        let mut acc = Complex64::new(0.0, 0.0);
        for (t, y) in row.iter().enumerate() {
            acc += twiddle(((t * k) % n_total) as u64, n_total as u64) * y;
        }
        out.push(acc);
    }
    out
}

/// Butterfly merge from the same interleaved layout. At a level with `g`
/// groups of length `l`, element `k` of group `t` sits at `k*g + t`.
pub fn merge_butterfly(buf: &[Complex64], tiles: usize) -> Vec<Complex64> {
    let n_total = buf.len();
    let mut cur = buf.to_vec();
    let mut next = vec![Complex64::new(0.0, 0.0); n_total];
    let mut g = tiles;
    while g > 1 {
        let h = g / 2;
        let l = n_total / g;
        for t in 0..h {
            for k in 0..l {
                let e = cur[k * g + t];
                let o = twiddle(k as u64, 2 * l as u64) * cur[k * g + t + h];
                next[k * h + t] = e + o;
                next[(k + l) * h + t] = e - o;
            }
        }
        std::mem::swap(&mut cur, &mut next);
        g = h;
    }
    cur
}

/// Merge separately held tile spectra into the spectrum of length `n_total`.
pub fn fft_merge(tiles: &[Option<Tensor>], n_total: usize, kind: MergeKind) -> Result<Tensor, AppError> {
    let t = tiles.len();
    if t == 0 || n_total % t != 0 {
        return Err(AppError::IndivisibleTile { n: n_total, tile: t });
    }
    let n = n_total / t;
    let mut buf = vec![Complex64::new(0.0, 0.0); n_total];
    for (s, tile) in tiles.iter().enumerate() {
        let tile = tile.as_ref().ok_or(AppError::MissingTile(s))?;
        store_tile(&mut buf, t, s, tile, n)?;
    }
    Ok(Tensor::vector_c128(merge(&buf, t, kind)))
}

fn merge(buf: &[Complex64], tiles: usize, kind: MergeKind) -> Vec<Complex64> {
    match kind {
        MergeKind::Direct => merge_direct(buf, tiles),
        MergeKind::Butterfly => merge_butterfly(buf, tiles),
    }
}

fn store_tile(buf: &mut [Complex64], tiles: usize, t: usize, y: &Tensor, n: usize) -> Result<(), AppError> {
    let v = y.expect_c128("merger")?;
    if v.len() != n {
        return Err(AppError::LengthMismatch { expected: n, found: v.len() });
    }
    for (j, z) in v.iter().enumerate() {
        buf[j * tiles + t] = *z;
    }
    Ok(())
}

struct WorkerGraph {
    graph: Graph,
    x: NodeId,
    tag: NodeId,
    push: NodeId,
}

fn worker_graph(plan: &FftPlan) -> WorkerGraph {
    let mut g = GraphBuilder::new();
    let x = g.placeholder(DType::C128, Some(Shape::vector(plan.tile_len())));
    let tag = g.placeholder(DType::F64, Some(Shape::scalar()));
    let y = g.with_device(DeviceName::dev(0), |g| g.fft(x));
    let push = g.enqueue(&plan.queue(), &[tag, y]);
    WorkerGraph { graph: g.finish(), x, tag, push }
}

fn connect(spec: &ClusterSpec, job: &str, index: usize) -> Result<Session, AppError> {
    Ok(Session::connect(&spec.address(&TaskIdentity::new(job, index))?.to_string())?)
}

/// Transform worker `w`'s tiles on its task and push them to the merger.
/// Returns the tiles sent, in order.
pub fn fft_worker(spec: &ClusterSpec, plan: &FftPlan, w: usize, store: &TileStore) -> Result<Vec<usize>, AppError> {
    let mut sess = connect(spec, WORKER_JOB, w)?;
    let wg = worker_graph(plan);
    let opts = SessionRunOptions { return_values: false, ..SessionRunOptions::default() };
    let mut sent = Vec::new();
    for t in plan.tiles_of(w) {
        let x = store.read(&signal_tile_file(t))?.tensor;
        let feeds = HashMap::from([(wg.x, x), (wg.tag, Tensor::scalar_f64(t as f64))]);
        sess.run(&wg.graph, &[wg.push], &feeds, &opts)?;
        sent.push(t);
    }
    let mut g = GraphBuilder::new();
    let marker = g.constant(Tensor::scalar_f64(-1.0));
    let push = g.enqueue(&plan.queue(), &[marker]);
    sess.run(&g.finish(), &[push], &HashMap::new(), &opts)?;
    Ok(sent)
}

#[derive(Clone, Debug)]
pub struct MergeOutput {
    pub spectrum: Tensor,
    /// When the last tile arrived.
    pub collected_at: Instant,
    pub merge_time: Duration,
    pub arrival_order: Vec<usize>,
}

/// Collect every tile, then merge. Single-threaded by design.
pub fn fft_merger(spec: &ClusterSpec, plan: &FftPlan) -> Result<MergeOutput, AppError> {
    let mut sess = connect(spec, MERGER_JOB, 0)?;
    let local = QueueRef::local(TILES_QUEUE).with_capacity(plan.queue_capacity).with_timeout_ms(plan.timeout_ms);
    let (t_count, n) = (plan.tiles, plan.tile_len());
    let mut buf = vec![Complex64::new(0.0, 0.0); plan.n];
    let mut seen = BTreeSet::new();
    let mut arrival_order = Vec::with_capacity(t_count);
    let mut collected_at = None;
    let mut done = 0;
    while done < plan.workers {
        let elem = sess.dequeue(&local)?;
        match elem.as_slice() {
            [_marker] => done += 1,
            [tag, y] => {
                let t = tag.scalar_value()? as usize;
                if t >= t_count || !seen.insert(t) {
                    return Err(AppError::InvalidPlan(format!("unexpected or repeated tile {t}")));
                }
                store_tile(&mut buf, t_count, t, y, n)?;
                arrival_order.push(t);
                if seen.len() == t_count {
                    collected_at = Some(Instant::now());
                }
            }
            other => {
                return Err(AppError::Cluster(ClusterError::Protocol(format!("{}-component element on the tile queue", other.len()))))
            }
        }
    }
    let collected_at = match collected_at {
        Some(at) => at,
        None => return Err(AppError::MissingTile((0..t_count).find(|t| !seen.contains(t)).unwrap_or(0))),
    };
    let t0 = Instant::now();
    let spectrum = Tensor::vector_c128(merge(&buf, t_count, plan.merge));
    Ok(MergeOutput { spectrum, collected_at, merge_time: t0.elapsed(), arrival_order })
}

#[derive(Clone, Debug)]
pub struct FftRun {
    pub merge: MergeOutput,
    /// Launch until the merger held every tile.
    pub collect_time: Duration,
    pub sent: Vec<Vec<usize>>,
}

/// Run the merger and all workers of `plan` as threads of this process.
pub fn run_job(spec: &ClusterSpec, plan: &FftPlan, tiles: &TileStore) -> Result<FftRun, AppError> {
    let t0 = Instant::now();
    let (merge, sent) = std::thread::scope(|s| {
        let merger = s.spawn(|| fft_merger(spec, plan));
        let workers: Vec<_> = (0..plan.workers).map(|w| s.spawn(move || fft_worker(spec, plan, w, tiles))).collect();
        let sent: Vec<_> = workers.into_iter().map(|h| h.join().expect("worker panicked")).collect();
        (merger.join().expect("merger panicked"), sent)
    });
    let sent = sent.into_iter().collect::<Result<Vec<_>, _>>()?;
    let merge = merge?;
    Ok(FftRun { collect_time: merge.collected_at.duration_since(t0), merge, sent })
}
