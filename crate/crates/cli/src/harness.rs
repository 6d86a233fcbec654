//! Cluster launch and per-application orchestration.
//!
//! App roles always run as client threads of this process; what the mode
//! changes is where the task servers live. Simulated keeps them in-process,
//! launched spawns one `flowhpc serve` child per task, external attaches to
//! servers someone else started.

use std::fs::{self, File};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU32, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use flowhpc_apps::cg::{self, CgMode, CgPlan, CgProblem, Control};
use flowhpc_apps::fft::{self, FftPlan, MergeKind};
use flowhpc_apps::matmul::{self, MatmulPlan, ShardPolicy};
use flowhpc_apps::stream::{self, BandwidthReport, StreamConfig};
use flowhpc_apps::tiles::TileStore;
use flowhpc_apps::AppError;
use flowhpc_cluster::slurm::{ResolverConfig, SlurmError, TaskPlacement};
use flowhpc_cluster::{ClusterError, ClusterSpec, Framing, LocalCluster, Session, TaskAddress, TaskIdentity};
use flowhpc_core::random::random_uniform;
use flowhpc_core::{kernels, DType, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::report::{self, Fingerprint, RunReport};

/// Env var carrying a launched task's node-level device indices.
pub const VISIBLE_DEVICES_ENV: &str = "FLOWHPC_VISIBLE_DEVICES";

const READY_TIMEOUT: Duration = Duration::from_secs(10);
const EXIT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("failed to spawn {task}: {reason}")]
    SpawnFailed { task: String, reason: String },
    #[error("no free loopback port range")]
    PortExhausted,
    #[error("tasks not answering pings: {0}")]
    NotReady(String),
    #[error("sanity check failed: {0}")]
    SanityCheckFailed(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Slurm(#[from] SlurmError),
    #[error(transparent)]
    Tensor(#[from] flowhpc_core::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Simulated,
    Launched,
    External,
}

#[derive(Clone, Debug)]
pub struct HarnessConfig {
    pub mode: Mode,
    pub repetitions: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Spec file for external mode.
    pub cluster: Option<PathBuf>,
    /// Executable started as `<binary> serve` in launched mode. Defaults to
    /// the running executable.
    pub binary: Option<PathBuf>,
}

impl HarnessConfig {
    pub fn new(mode: Mode, out_dir: impl Into<PathBuf>) -> HarnessConfig {
        HarnessConfig { mode, repetitions: 5, out_dir: out_dir.into(), seed: 1, cluster: None, binary: None }
    }

    fn binary(&self) -> Result<PathBuf, HarnessError> {
        match &self.binary {
            Some(b) => Ok(b.clone()),
            None => Ok(std::env::current_exe()?),
        }
    }
}

enum Backing {
    Local(LocalCluster),
    Children(Vec<(TaskIdentity, Child)>),
    External,
}

pub struct ClusterHandle {
    spec: ClusterSpec,
    devices_per_task: u16,
    placements: Vec<TaskPlacement>,
    backing: Backing,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ShutdownReport {
    pub exited: usize,
    /// Children still alive after the exit timeout.
    pub killed: usize,
}

impl ClusterHandle {
    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn devices_per_task(&self) -> u16 {
        self.devices_per_task
    }

    /// Resolver placements, empty unless launched from resolver args.
    pub fn placements(&self) -> &[TaskPlacement] {
        &self.placements
    }

    pub fn local_mut(&mut self) -> Option<&mut LocalCluster> {
        match &mut self.backing {
            Backing::Local(c) => Some(c),
            _ => None,
        }
    }

    pub fn child_pids(&self) -> Vec<u32> {
        match &self.backing {
            Backing::Children(c) => c.iter().map(|(_, ch)| ch.id()).collect(),
            _ => Vec::new(),
        }
    }

    /// `job:count` pairs, e.g. `ps:1;worker:2`.
    pub fn shape(&self) -> String {
        self.spec.jobs().iter().map(|(j, t)| format!("{j}:{}", t.len())).collect::<Vec<_>>().join(";")
    }

    pub fn ping_all(&self, timeout: Duration) -> Result<(), HarnessError> {
        let deadline = Instant::now() + timeout;
        let mut pending: Vec<(TaskIdentity, String)> =
            self.spec.tasks().map(|(id, a)| (id, a.to_string())).collect();
        while !pending.is_empty() {
            pending.retain(|(_, addr)| {
                let ok = Session::connect_timeout(addr, Duration::from_millis(500))
                    .and_then(|mut s| s.ping(b"ready"))
                    .is_ok_and(|echo| echo == b"ready");
                !ok
            });
            if pending.is_empty() {
                break;
            }
            if Instant::now() >= deadline {
                let names: Vec<String> = pending.iter().map(|(id, a)| format!("{id}@{a}")).collect();
                return Err(HarnessError::NotReady(names.join(", ")));
            }
            thread::sleep(Duration::from_millis(50));
        }
        Ok(())
    }

    /// Stop every task this handle owns. Children get a Shutdown message and
    /// are killed if they have not exited within 10 s. External clusters are
    /// left running.
    pub fn shutdown(&mut self) -> ShutdownReport {
        match std::mem::replace(&mut self.backing, Backing::External) {
            Backing::Local(mut c) => {
                let n = c.identities().count();
                c.shutdown();
                ShutdownReport { exited: n, killed: 0 }
            }
            Backing::Children(mut children) => {
                for (id, _) in &children {
                    if let Ok(addr) = self.spec.address(id) {
                        if let Ok(mut s) = Session::connect_timeout(&addr.to_string(), Duration::from_secs(1)) {
                            let _ = s.shutdown_server();
                        }
                    }
                }
                let deadline = Instant::now() + EXIT_TIMEOUT;
                let mut report = ShutdownReport::default();
                for (id, child) in &mut children {
                    loop {
                        match child.try_wait() {
                            Ok(Some(_)) => {
                                report.exited += 1;
                                break;
                            }
                            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
                            _ => {
                                log::warn!("{id} did not exit in time, killing it");
                                let _ = child.kill();
                                let _ = child.wait();
                                report.killed += 1;
                                break;
                            }
                        }
                    }
                }
                report
            }
            Backing::External => ShutdownReport::default(),
        }
    }
}

impl Drop for ClusterHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn free_port() -> Result<u16, HarnessError> {
    let l = TcpListener::bind("127.0.0.1:0").map_err(|_| HarnessError::PortExhausted)?;
    Ok(l.local_addr()?.port())
}

/// First base port with `count` consecutive free loopback ports.
fn free_port_range(count: usize) -> Result<u16, HarnessError> {
    let start = 20_000 + (std::process::id() % 20_000) as u16;
    for attempt in 0..200u16 {
        let base = start.wrapping_add(attempt.wrapping_mul(count as u16 + 7));
        if base < 1024 || base as usize + count > u16::MAX as usize {
            continue;
        }
        let held: Result<Vec<TcpListener>, _> =
            (0..count).map(|i| TcpListener::bind(("127.0.0.1", base + i as u16))).collect();
        if held.is_ok() {
            return Ok(base);
        }
    }
    Err(HarnessError::PortExhausted)
}

static SPEC_SEQ: AtomicU32 = AtomicU32::new(0);

fn spawn_children(
    cfg: &HarnessConfig,
    spec: &ClusterSpec,
    tasks: &[(TaskIdentity, u16, Option<Vec<usize>>)],
) -> Result<Vec<(TaskIdentity, Child)>, HarnessError> {
    let binary = cfg.binary()?;
    let run_dir = cfg.out_dir.join("cluster");
    fs::create_dir_all(&run_dir)?;
    let tag = format!("{}-{}", std::process::id(), SPEC_SEQ.fetch_add(1, Ordering::Relaxed));
    let spec_path = run_dir.join(format!("spec-{tag}.json"));
    spec.save(&spec_path)?;
    let mut children = Vec::new();
    for (id, devs, visible) in tasks {
        let log_path = run_dir.join(format!("{}-{}-{tag}.log", id.job, id.index));
        let mut cmd = Command::new(&binary);
        cmd.arg("serve")
            .arg("--cluster")
            .arg(&spec_path)
            .arg("--devs")
            .arg(devs.to_string())
            .env(flowhpc_cluster::spec::TASK_ENV, id.to_string())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(File::create(&log_path)?);
        if let Some(v) = visible {
            cmd.env(VISIBLE_DEVICES_ENV, v.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        }
        match cmd.spawn() {
            Ok(child) => children.push((id.clone(), child)),
            Err(e) => {
                for (_, mut c) in children {
                    let _ = c.kill();
                    let _ = c.wait();
                }
                return Err(HarnessError::SpawnFailed { task: id.to_string(), reason: e.to_string() });
            }
        }
    }
    Ok(children)
}

/// Start (or attach to) a cluster of `(job, task count)` tasks with
/// `devs_per_task` accelerator slots each. External mode ignores `jobs`
/// beyond checking the provided spec has at least that many tasks.
pub fn launch(cfg: &HarnessConfig, jobs: &[(&str, usize)], devs_per_task: u16) -> Result<ClusterHandle, HarnessError> {
    let handle = match cfg.mode {
        Mode::Simulated => {
            let c = LocalCluster::start(jobs, devs_per_task)?;
            ClusterHandle { spec: c.spec().clone(), devices_per_task: devs_per_task, placements: Vec::new(), backing: Backing::Local(c) }
        }
        Mode::Launched => {
            let mut map = std::collections::BTreeMap::<String, Vec<TaskAddress>>::new();
            let mut tasks = Vec::new();
            for &(job, n) in jobs {
                for i in 0..n {
                    map.entry(job.to_string()).or_default().push(TaskAddress::new("127.0.0.1", free_port()?));
                    tasks.push((TaskIdentity::new(job, i), devs_per_task, None));
                }
            }
            let spec = ClusterSpec::new(map)?;
            let children = spawn_children(cfg, &spec, &tasks)?;
            ClusterHandle { spec, devices_per_task: devs_per_task, placements: Vec::new(), backing: Backing::Children(children) }
        }
        Mode::External => {
            let path = cfg.cluster.as_ref().ok_or_else(|| HarnessError::Invalid("external mode needs --cluster".into()))?;
            let spec = ClusterSpec::load(path)?;
            for &(job, n) in jobs {
                if spec.task_count(job) < n {
                    return Err(HarnessError::Invalid(format!("spec has {} {job} tasks, need {n}", spec.task_count(job))));
                }
            }
            ClusterHandle { spec, devices_per_task: devs_per_task, placements: Vec::new(), backing: Backing::External }
        }
    };
    handle.ping_all(READY_TIMEOUT)?;
    Ok(handle)
}

/// Launch one child per resolver placement on this host. `nodes` must all
/// name the local machine; the base port is replaced by a free range.
pub fn launch_resolved(cfg: &HarnessConfig, resolver: &ResolverConfig, nodes: &[String]) -> Result<ClusterHandle, HarnessError> {
    if let Some(n) = nodes.iter().find(|n| !matches!(n.as_str(), "localhost" | "127.0.0.1")) {
        return Err(HarnessError::Invalid(format!("node {n} is not this host")));
    }
    let mut rc = resolver.clone();
    rc.base_port = free_port_range(rc.tasks_per_node)?;
    let res = flowhpc_cluster::slurm::resolve_nodes(&rc, nodes)?;
    let tasks: Vec<_> = res
        .tasks
        .iter()
        .map(|p| (p.identity.clone(), p.visible_devices.len() as u16, Some(p.visible_devices.clone())))
        .collect();
    let children = spawn_children(cfg, &res.spec, &tasks)?;
    let per_task = (rc.devices_per_node / rc.tasks_per_node) as u16;
    let handle = ClusterHandle { spec: res.spec, devices_per_task: per_task, placements: res.tasks, backing: Backing::Children(children) };
    handle.ping_all(READY_TIMEOUT)?;
    Ok(handle)
}

/// Reports that passed their sanity check, and one message per repetition
/// that did not.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub reports: Vec<RunReport>,
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn median(&self) -> Option<&RunReport> {
        report::median_index(&self.reports).map(|i| &self.reports[i])
    }

    /// Append passing reports to `<out_dir>/reports/<app>.{csv,jsonl}`.
    pub fn write(&self, out_dir: &Path, app: &str) -> std::io::Result<()> {
        let dir = out_dir.join("reports");
        report::append_csv(&dir.join(format!("{app}.csv")), &self.reports)?;
        report::append_jsonl(&dir.join(format!("{app}.jsonl")), &self.reports)
    }
}

struct Row<'a> {
    app: &'a str,
    params: String,
    rep: usize,
    total_s: f64,
    collect_s: Option<f64>,
    merge_s: Option<f64>,
    flops: Option<u64>,
    rate: f64,
    unit: &'a str,
}

fn make_report(handle: &ClusterHandle, fp: &Fingerprint, r: Row<'_>) -> RunReport {
    RunReport {
        app: r.app.into(),
        cluster: handle.shape(),
        devices_per_task: handle.devices_per_task,
        params: r.params,
        rep: r.rep,
        total_s: r.total_s,
        collect_s: r.collect_s,
        merge_s: r.merge_s,
        flops: r.flops,
        rate: r.rate,
        rate_unit: r.unit.into(),
        host: fp.host.clone(),
        cores: fp.cores,
        build: fp.build.clone(),
    }
}

fn workers_of(spec: &ClusterSpec) -> Result<usize, HarnessError> {
    match spec.task_count("worker") {
        0 => Err(HarnessError::Invalid("cluster has no worker tasks".into())),
        w => Ok(w),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MatmulParams {
    pub n: usize,
    pub s: usize,
    pub shard: ShardPolicy,
}

/// Split generated A (seed) and B (seed + 1) into tiles once per problem.
pub fn prepare_matmul(out_dir: &Path, n: usize, s: usize, seed: u64) -> Result<PathBuf, HarnessError> {
    let dir = out_dir.join("tiles").join(format!("matmul-n{n}-s{s}-seed{seed}"));
    let done = dir.join(".complete");
    if !done.exists() {
        fs::create_dir_all(&dir)?;
        let store = TileStore::new(&dir);
        matmul::split_generated(n, s, seed, &store, 'A')?;
        matmul::split_generated(n, s, seed + 1, &store, 'B')?;
        fs::write(done, b"")?;
    }
    Ok(dir)
}

/// Where repetition `rep` of a matmul run writes its C tiles.
pub fn matmul_run_dir(out_dir: &Path, n: usize, s: usize, workers: usize, rep: usize) -> PathBuf {
    out_dir.join("runs").join(format!("matmul-n{n}-s{s}-w{workers}")).join(format!("rep{rep}"))
}

pub fn orchestrate_matmul(handle: &ClusterHandle, cfg: &HarnessConfig, p: MatmulParams) -> Result<Outcome, HarnessError> {
    let spec = handle.spec();
    let mut plan = MatmulPlan::new(p.n, p.s, workers_of(spec)?)?;
    plan.reducers = spec.task_count(matmul::REDUCER_JOB);
    if plan.reducers == 0 {
        return Err(HarnessError::Invalid("cluster has no reducer tasks".into()));
    }
    plan.shard = p.shard;
    let tiles = prepare_matmul(&cfg.out_dir, p.n, p.s, cfg.seed)?;
    let params = format!("n={};s={};shard={:?};seed={}", p.n, p.s, p.shard, cfg.seed).to_lowercase();
    let fp = Fingerprint::current();
    let mut out = Outcome::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for rep in 0..cfg.repetitions {
        let dest = matmul_run_dir(&cfg.out_dir, p.n, p.s, plan.workers, rep);
        if dest.exists() {
            fs::remove_dir_all(&dest)?;
        }
        fs::create_dir_all(&dest)?;
        let run = matmul::run_job(spec, &plan, &tiles, &dest, None, false)?;
        let (i, j) = (rng.gen_range(0..plan.grid()), rng.gen_range(0..plan.grid()));
        let got = TileStore::new(&dest).read(&matmul::tile_file('C', i, j))?.tensor;
        let want = matmul::reference_tile(&TileStore::new(&tiles), &plan, i, j)?;
        if !kernels::cast(&got, DType::F64)?.all_close(&want, 1e-4, 1e-6) {
            out.failures.push(format!("matmul rep {rep}: tile C[{i},{j}] differs from the reference"));
            continue;
        }
        let t = run.elapsed.as_secs_f64();
        let flops = matmul::flops_matmul(p.n as u64);
        out.reports.push(make_report(handle, &fp, Row {
            app: "matmul",
            params: params.clone(),
            rep,
            total_s: t,
            collect_s: Some(t),
            merge_s: None,
            flops: Some(flops),
            rate: report::gflops(flops, t),
            unit: "Gflops/s",
        }));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub enum CgSource {
    /// 2-D Poisson on a k×k grid, m = k².
    Poisson(usize),
    /// Seeded dense SPD matrix of order m.
    Random(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct CgParams {
    pub source: CgSource,
    pub mode: CgMode,
}

pub fn cg_problem(source: CgSource, seed: u64) -> Result<CgProblem, HarnessError> {
    let a = match source {
        CgSource::Poisson(k) => cg::poisson_2d(k),
        CgSource::Random(m) => cg::random_spd(m, seed),
    };
    let m = a.shape().dims()[0];
    let b = random_uniform(&Shape::vector(m), DType::F64, seed + 1);
    Ok(CgProblem::new(a, b)?)
}

/// ‖b − A·x‖ / ‖b‖ in double precision.
pub fn true_residual(problem: &CgProblem, x: &[f64]) -> Result<f64, HarnessError> {
    let m = problem.dim();
    let a = problem.a.expect_f64("A")?;
    let b = problem.b.expect_f64("b")?;
    let (mut rr, mut bb) = (0.0, 0.0);
    for i in 0..m {
        let ax: f64 = a[i * m..(i + 1) * m].iter().zip(x).map(|(a, x)| a * x).sum();
        rr += (b[i] - ax).powi(2);
        bb += b[i] * b[i];
    }
    Ok(if bb > 0.0 { (rr / bb).sqrt() } else { rr.sqrt() })
}

static CG_EPOCH: AtomicU32 = AtomicU32::new(1000);

pub fn orchestrate_cg(handle: &ClusterHandle, cfg: &HarnessConfig, p: CgParams) -> Result<Outcome, HarnessError> {
    let spec = handle.spec();
    let problem = cg_problem(p.source, cfg.seed)?;
    let m = problem.dim();
    let mut plan = CgPlan::new(m, workers_of(spec)?, p.mode)?;
    cg::load_problem(spec, &plan, &problem)?;
    let mode = match p.mode {
        CgMode::FixedIters(n) => format!("iters={n}"),
        CgMode::Tolerance(e) => format!("tol={e:e}"),
    };
    let source = match p.source {
        CgSource::Poisson(k) => format!("poisson={k}"),
        CgSource::Random(m) => format!("random={m}"),
    };
    let params = format!("m={m};{source};{mode};seed={}", cfg.seed);
    let fp = Fingerprint::current();
    let mut out = Outcome::default();
    for rep in 0..cfg.repetitions {
        // Queues of a finished solve stay closed on the ps; each run needs
        // its own names.
        plan.epoch = CG_EPOCH.fetch_add(1, Ordering::Relaxed);
        let t0 = Instant::now();
        let res = cg::run_loaded(spec, &plan, true, &mut |_, _| Control::Continue)?;
        let t = t0.elapsed().as_secs_f64();
        let resid = true_residual(&problem, &res.x)?;
        let bound = match p.mode {
            CgMode::Tolerance(e) => 10.0 * e,
            CgMode::FixedIters(_) => 1.0,
        };
        if !(resid <= bound) {
            out.failures.push(format!("cg rep {rep}: residual {resid:e} above {bound:e}"));
            continue;
        }
        let flops = cg::flops_cg(m as u64, res.iterations);
        out.reports.push(make_report(handle, &fp, Row {
            app: "cg",
            params: params.clone(),
            rep,
            total_s: t,
            collect_s: Some(t),
            merge_s: None,
            flops: Some(flops),
            rate: report::gflops(flops, t),
            unit: "Gflops/s",
        }));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct FftParams {
    pub n: usize,
    pub tiles: usize,
    pub merge: MergeKind,
}

pub fn fft_signal(n: usize, seed: u64) -> Tensor {
    random_uniform(&Shape::vector(n), DType::C128, seed)
}

pub fn prepare_fft(out_dir: &Path, n: usize, tiles: usize, seed: u64) -> Result<PathBuf, HarnessError> {
    let dir = out_dir.join("tiles").join(format!("fft-n{n}-t{tiles}-seed{seed}"));
    let done = dir.join(".complete");
    if !done.exists() {
        fs::create_dir_all(&dir)?;
        fft::write_signal_tiles(&TileStore::new(&dir), &fft_signal(n, seed), tiles)?;
        fs::write(done, b"")?;
    }
    Ok(dir)
}

/// Relative gap between Σ|x|² and Σ|X|²/N.
pub fn parseval_gap(x: &Tensor, spectrum: &Tensor) -> Result<f64, HarnessError> {
    let x = x.expect_c128("signal")?;
    let s = spectrum.expect_c128("spectrum")?;
    let ex: f64 = x.iter().map(|v| v.norm_sqr()).sum();
    let es: f64 = s.iter().map(|v| v.norm_sqr()).sum::<f64>() / s.len() as f64;
    Ok((ex - es).abs() / ex.max(f64::MIN_POSITIVE))
}

pub fn orchestrate_fft(handle: &ClusterHandle, cfg: &HarnessConfig, p: FftParams) -> Result<Outcome, HarnessError> {
    let spec = handle.spec();
    let mut plan = FftPlan::new(p.n, p.tiles, workers_of(spec)?)?;
    plan.merge = p.merge;
    let dir = prepare_fft(&cfg.out_dir, p.n, p.tiles, cfg.seed)?;
    let store = TileStore::new(&dir);
    let parts: Vec<Tensor> =
        (0..p.tiles).map(|t| store.read(&fft::signal_tile_file(t)).map(|r| r.tensor)).collect::<Result<_, _>>()?;
    let signal = fft::interleave(&parts)?;
    let params = format!("n={};tiles={};merge={:?};seed={}", p.n, p.tiles, p.merge, cfg.seed).to_lowercase();
    let fp = Fingerprint::current();
    let mut out = Outcome::default();
    for rep in 0..cfg.repetitions {
        let run = fft::run_job(spec, &plan, &store)?;
        let gap = parseval_gap(&signal, &run.merge.spectrum)?;
        if !(gap <= 1e-9) {
            out.failures.push(format!("fft rep {rep}: Parseval gap {gap:e}"));
            continue;
        }
        let collect = run.collect_time.as_secs_f64();
        let merge = run.merge.merge_time.as_secs_f64();
        let flops = fft::flops_fft(p.n as u64);
        out.reports.push(make_report(handle, &fp, Row {
            app: "fft",
            params: params.clone(),
            rep,
            total_s: collect + merge,
            collect_s: Some(collect),
            merge_s: Some(merge),
            flops: Some(flops),
            rate: report::gflops(flops, collect),
            unit: "Gflops/s",
        }));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StreamParams {
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub framings: Vec<Framing>,
}

/// One bandwidth measurement per (framing, size); each RunReport carries
/// the mean MB/s of its repetitions.
pub fn orchestrate_stream(
    handle: &ClusterHandle,
    p: &StreamParams,
) -> Result<(Vec<BandwidthReport>, Outcome), HarnessError> {
    let fp = Fingerprint::current();
    let mut bws = Vec::new();
    let mut out = Outcome::default();
    for &framing in &p.framings {
        for &size in &p.sizes {
            let mut sc = StreamConfig::new(size);
            sc.repetitions = p.repetitions;
            sc.framing = framing;
            match stream::run_stream(handle.spec(), &sc) {
                Ok(bw) => {
                    let total: u64 = bw.elapsed_ns.iter().sum();
                    out.reports.push(make_report(handle, &fp, Row {
                        app: "stream",
                        params: format!("size_bytes={size};framing={};reps={}", framing.name(), p.repetitions),
                        rep: 0,
                        total_s: total as f64 / 1e9,
                        collect_s: None,
                        merge_s: None,
                        flops: None,
                        rate: bw.mean_mbps(),
                        unit: "MB/s",
                    }));
                    bws.push(bw);
                }
                Err(AppError::SanityCheckFailed(m)) => out.failures.push(format!("stream {size} B {}: {m}", framing.name())),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok((bws, out))
}

/// Per-repetition rows, then a `# summary` block of mean and median MB/s.
pub fn write_stream_csv(path: &Path, bws: &[BandwidthReport]) -> std::io::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let mut s = String::from("size_bytes,framing,rep,elapsed_ns\n");
    for bw in bws {
        for (rep, ns) in bw.elapsed_ns.iter().enumerate() {
            s.push_str(&format!("{},{},{rep},{ns}\n", bw.size_bytes, bw.framing.name()));
        }
    }
    s.push_str("# summary\n# size_bytes,framing,mean_mbps,median_mbps\n");
    for bw in bws {
        s.push_str(&format!("# {},{},{:.3},{:.3}\n", bw.size_bytes, bw.framing.name(), bw.mean_mbps(), bw.median_mbps()));
    }
    fs::write(path, s)
}
