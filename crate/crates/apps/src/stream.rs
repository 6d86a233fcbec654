//! STREAM-style bandwidth benchmark: repeated assign_add pushes of a worker
//! tensor into a ps variable.

use std::collections::HashMap;
use std::time::Instant;

use flowhpc_cluster::{ClusterSpec, Framing, Session, SessionRunOptions, TaskIdentity};
use flowhpc_core::{DType, DeviceName, GraphBuilder, Shape, Tensor, VarRef};

use crate::error::AppError;

pub const MIB: usize = 1 << 20;
const SRC: &str = "stream_src";
const DST: &str = "stream_dst";

/// The default sweep: 2, 4, ..., 128 MiB.
pub fn default_sizes() -> Vec<usize> {
    (1..=7).map(|k| MIB << k).collect()
}

#[derive(Clone, Debug)]
pub struct StreamConfig {
    pub size_bytes: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub framing: Framing,
    pub source_device: DeviceName,
    pub dest_device: DeviceName,
    /// Value of every source element. Small integers keep the final check exact.
    pub source_value: f32,
}

impl StreamConfig {
    pub fn new(size_bytes: usize) -> StreamConfig {
        StreamConfig {
            size_bytes,
            repetitions: 100,
            warmup: 3,
            framing: Framing::Eager,
            source_device: DeviceName::dev(0),
            dest_device: DeviceName::CPU0,
            source_value: 1.0,
        }
    }

    pub fn elements(&self) -> usize {
        self.size_bytes / 4
    }
}

#[derive(Clone, Debug)]
pub struct BandwidthReport {
    pub size_bytes: usize,
    pub framing: Framing,
    pub elapsed_ns: Vec<u64>,
    pub total_bytes: u64,
}

impl BandwidthReport {
    fn rates(&self) -> Vec<f64> {
        self.elapsed_ns.iter().map(|&ns| mb_per_s(self.size_bytes, ns)).collect()
    }

    pub fn mean_mbps(&self) -> f64 {
        let r = self.rates();
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }

    pub fn median_mbps(&self) -> f64 {
        median(&self.rates())
    }
}

/// Decimal megabytes per second.
pub fn mb_per_s(bytes: usize, elapsed_ns: u64) -> f64 {
    bytes as f64 / (elapsed_ns.max(1) as f64 * 1e-9) / 1e6
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

pub fn run_stream(spec: &ClusterSpec, cfg: &StreamConfig) -> Result<BandwidthReport, AppError> {
    if cfg.size_bytes % 4 != 0 || cfg.size_bytes == 0 {
        return Err(AppError::InvalidPlan(format!("transfer size {} is not a positive multiple of 4", cfg.size_bytes)));
    }
    let ps = TaskIdentity::new("ps", 0);
    let worker = TaskIdentity::new("worker", 0);
    let mut ps_sess = Session::connect(&spec.address(&ps)?.to_string())?;
    let mut w_sess = Session::connect(&spec.address(&worker)?.to_string())?;

    let shape = Shape::vector(cfg.elements());
    let source = Tensor::filled(DType::F32, shape.clone(), cfg.source_value as f64);
    let zeros = Tensor::zeros(DType::F32, shape);
    w_sess.assign(SRC, &source)?;
    ps_sess.assign(DST, &zeros)?;

    let mut g = GraphBuilder::new();
    let src = g.with_device(cfg.source_device, |g| g.read_variable(&VarRef::local(SRC)));
    let push = g.with_device(cfg.dest_device, |g| g.assign_add(&VarRef::on(DST, ps.to_string()), src, false));
    let graph = g.finish();
    let opts = SessionRunOptions { return_values: false, framing: cfg.framing, ..SessionRunOptions::default() };
    let feeds = HashMap::new();

    for _ in 0..cfg.warmup {
        w_sess.run(&graph, &[push], &feeds, &opts)?;
    }
    ps_sess.assign(DST, &zeros)?;
    drop(zeros);

    let mut elapsed_ns = Vec::with_capacity(cfg.repetitions);
    let mut max_response = 0;
    for _ in 0..cfg.repetitions {
        let t0 = Instant::now();
        w_sess.run(&graph, &[push], &feeds, &opts)?;
        elapsed_ns.push(t0.elapsed().as_nanos() as u64);
        max_response = max_response.max(w_sess.last_response_len());
    }
    if max_response >= 64 {
        return Err(AppError::SanityCheckFailed(format!("response frame of {max_response} bytes carried a payload")));
    }

    let dst = ps_sess.read_variable(DST)?;
    let want = cfg.repetitions as f32 * cfg.source_value;
    let got = dst.expect_f32("stream check")?;
    if got.len() != cfg.elements() {
        return Err(AppError::SanityCheckFailed(format!("destination has {} elements", got.len())));
    }
    if let Some(i) = got.iter().position(|&v| v != want) {
        return Err(AppError::SanityCheckFailed(format!("destination[{i}] = {}, expected {want}", got[i])));
    }
    Ok(BandwidthReport {
        size_bytes: cfg.size_bytes,
        framing: cfg.framing,
        total_bytes: (cfg.size_bytes * cfg.repetitions) as u64,
        elapsed_ns,
    })
}
