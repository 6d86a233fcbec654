use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowhpc::harness::{self, CgParams, CgSource, ClusterHandle, FftParams, HarnessConfig, HarnessError, MatmulParams, Mode, Outcome, StreamParams};
use flowhpc::report;
use flowhpc_apps::cg::{self, CgMode, CgPlan, CgProblem};
use flowhpc_apps::fft::{self, FftPlan, MergeKind};
use flowhpc_apps::matmul::{self, MatmulPlan, ShardPolicy};
use flowhpc_apps::stream::MIB;
use flowhpc_apps::tiles::{self, TileStore};
use flowhpc_cluster::slurm::{self, ResolverConfig};
use flowhpc_cluster::{ClusterSpec, Framing, Server, TaskIdentity};
use flowhpc_core::DeviceName;

#[derive(Parser)]
#[command(name = "flowhpc", version, about = "Dataflow-graph HPC benchmarks")]
struct Cli {
    /// Where task servers run.
    #[arg(long, global = true, value_enum, default_value_t = Mode::Simulated)]
    mode: Mode,
    /// Cluster spec JSON (external mode and role runs).
    #[arg(long, global = true)]
    cluster: Option<PathBuf>,
    /// Repetitions per configuration [default: 5, stream: 100].
    #[arg(long, global = true)]
    reps: Option<usize>,
    #[arg(long, global = true, default_value = "flowhpc-out")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Variable-to-variable bandwidth between two tasks.
    Stream(StreamArgs),
    /// Tiled matrix multiply.
    Matmul(MatmulArgs),
    /// Conjugate gradient solve.
    Cg(CgArgs),
    /// Tiled 1-D FFT.
    Fft(FftArgs),
    /// Write tile files for an app.
    #[command(subcommand)]
    Split(SplitCmd),
    /// Build a cluster spec from a Slurm-style node list.
    Resolve(ResolveArgs),
    /// Run one task server until it receives Shutdown.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FramingArg {
    Eager,
    Staged,
    Both,
}

#[derive(Args)]
struct StreamArgs {
    /// Transfer sizes in MiB; `a,b,...,z` continues the ratio of a and b.
    #[arg(long, default_value = "2,4,...,128")]
    sizes: String,
    #[arg(long, value_enum, default_value_t = FramingArg::Eager)]
    framing: FramingArg,
    /// Per-repetition CSV [default: <out-dir>/stream.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatmulRole {
    Worker,
    Reducer,
}

#[derive(Args)]
struct MatmulArgs {
    #[arg(long, value_enum)]
    role: Option<MatmulRole>,
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    tile: usize,
    /// A and B tiles (worker role).
    #[arg(long)]
    tiles_dir: Option<PathBuf>,
    /// Worker counts to sweep when orchestrating.
    #[arg(long, default_value = "2", value_delimiter = ',')]
    workers: Vec<usize>,
    #[arg(long, default_value = "round-robin")]
    shard: ShardPolicy,
}

#[derive(Clone, Copy, ValueEnum)]
enum CgRole {
    Worker,
    Reducer,
    Driver,
}

#[derive(Args)]
struct CgArgs {
    #[arg(long, value_enum)]
    role: Option<CgRole>,
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    /// Directory of row-block tiles (role runs).
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Right-hand side tile (role runs).
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long, conflicts_with = "tol")]
    iters: Option<u64>,
    /// Relative residual to stop at [default: 1e-8].
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Checkpoint interval in iterations when a directory is given.
    #[arg(long, default_value_t = 50)]
    checkpoint_every: u64,
    /// 2-D Poisson grid side k (m = k²).
    #[arg(long, conflicts_with = "m")]
    poisson: Option<usize>,
    /// Order of a seeded random SPD matrix.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value = "2", value_delimiter = ',')]
    workers: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FftRole {
    Worker,
    Merger,
}

#[derive(Args)]
struct FftArgs {
    #[arg(long, value_enum)]
    role: Option<FftRole>,
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    #[arg(long, default_value_t = 1 << 14)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    tiles: usize,
    #[arg(long)]
    tiles_dir: Option<PathBuf>,
    /// Spectrum tile written by the merger [default: <out-dir>/spectrum.bin].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "2", value_delimiter = ',')]
    workers: Vec<usize>,
    #[arg(long, default_value = "direct")]
    merge: MergeKind,
}

#[derive(Subcommand)]
enum SplitCmd {
    /// A and B into s×s tiles, generated from the seed unless given.
    Matmul {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        tile: usize,
        #[arg(long)]
        tiles_dir: PathBuf,
        /// Square F32 matrix tile file for A.
        #[arg(long, requires = "b")]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
    },
    /// A C128 signal into T stride tiles.
    Fft {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        tiles: usize,
        #[arg(long)]
        tiles_dir: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// A CG system into row-block files and a right-hand side file.
    Cg {
        #[arg(long, conflicts_with = "m")]
        poisson: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value_t = 64)]
        block_rows: usize,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

#[derive(Args)]
struct ResolveArgs {
    /// Compressed host list [default: $SLURM_JOB_NODELIST].
    #[arg(long)]
    nodelist: Option<String>,
    /// [default: $SLURM_NTASKS_PER_NODE, else 1]
    #[arg(long)]
    tasks_per_node: Option<usize>,
    /// Jobs in layout order, as `name:count`.
    #[arg(long, default_value = "ps:1,worker:2", value_delimiter = ',')]
    jobs: Vec<String>,
    #[arg(long, default_value_t = 8888)]
    port: u16,
    #[arg(long, default_value_t = 0)]
    devices_per_node: usize,
    /// Reject device counts that do not divide over the tasks of a node.
    #[arg(long)]
    strict_devices: bool,
    /// Expand the host list with `scontrol show hostnames`.
    #[arg(long)]
    scontrol: bool,
    /// Write the spec here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// `job:index` [default: $FLOWHPC_TASK].
    #[arg(long)]
    task: Option<String>,
    /// Accelerator slots exposed as /dev:0.. besides /cpu:0.
    #[arg(long, default_value_t = 0)]
    devs: u16,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

type Res<T> = Result<T, HarnessError>;

fn config(cli: &Cli, default_reps: usize) -> HarnessConfig {
    HarnessConfig {
        mode: cli.mode,
        repetitions: cli.reps.unwrap_or(default_reps),
        out_dir: cli.out_dir.clone(),
        seed: cli.seed,
        cluster: cli.cluster.clone(),
        binary: None,
    }
}

fn load_spec(cli: &Cli) -> Res<ClusterSpec> {
    let path = cli.cluster.as_ref().ok_or_else(|| HarnessError::Invalid("role runs need --cluster".into()))?;
    Ok(ClusterSpec::load(path)?)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Res<&'a Path> {
    p.as_deref().ok_or_else(|| HarnessError::Invalid(format!("--{flag} is required here")))
}

fn run(cli: Cli) -> Res<bool> {
    match &cli.cmd {
        Cmd::Stream(a) => stream_cmd(&cli, a),
        Cmd::Matmul(a) => matmul_cmd(&cli, a),
        Cmd::Cg(a) => cg_cmd(&cli, a),
        Cmd::Fft(a) => fft_cmd(&cli, a),
        Cmd::Split(s) => split_cmd(&cli, s),
        Cmd::Resolve(a) => resolve_cmd(a),
        Cmd::Serve(a) => serve_cmd(&cli, a),
    }
}

fn print_outcome(app: &str, out: &Outcome) {
    let median = report::median_index(&out.reports);
    for (i, r) in out.reports.iter().enumerate() {
        let mark = if Some(i) == median { '*' } else { ' ' };
        println!(
            "{mark} {app} [{}] {} rep {}: {:.4} s, {:.3} {}",
            r.cluster, r.params, r.rep, report::phase_time(r), r.rate, r.rate_unit
        );
    }
    for f in &out.failures {
        println!("! {f}");
    }
}

/// Launch one cluster per worker count (once in external mode), run `f` on
/// it and append the reports.
fn sweep(
    cfg: &HarnessConfig,
    app: &str,
    workers: &[usize],
    jobs: impl Fn(usize) -> Vec<(&'static str, usize)>,
    f: impl Fn(&ClusterHandle) -> Res<Outcome>,
) -> Res<bool> {
    let counts: Vec<usize> = if cfg.mode == Mode::External { vec![0] } else { workers.to_vec() };
    let mut ok = true;
    for w in counts {
        let mut handle = harness::launch(cfg, &jobs(w), 1)?;
        let out = f(&handle);
        handle.shutdown();
        let out = out?;
        out.write(&cfg.out_dir, app)?;
        print_outcome(app, &out);
        ok &= out.failures.is_empty();
    }
    Ok(ok)
}

/// `2,4,...,128` style lists: after `...` the ratio of the two preceding
/// values repeats up to the final value.
fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    let num = |p: &str| p.parse::<usize>().map_err(|_| format!("bad size {p:?}"));
    let mut out = Vec::new();
    let mut i = 0;
    while i < parts.len() {
        if parts[i] == "..." {
            let (a, b) = match out[..] {
                [.., a, b] if b > a && b % a == 0 => (a, b),
                _ => return Err("`...` needs two increasing multiples before it".into()),
            };
            let end = num(parts.get(i + 1).ok_or("`...` needs an end value")?)?;
            let mut v = b * (b / a);
            while v < end {
                out.push(v);
                v *= b / a;
            }
            i += 1;
            continue;
        }
        out.push(num(parts[i])?);
        i += 1;
    }
    if out.is_empty() {
        return Err("no sizes".into());
    }
    Ok(out)
}

fn stream_cmd(cli: &Cli, a: &StreamArgs) -> Res<bool> {
    let cfg = config(cli, 100);
    let sizes = parse_sizes(&a.sizes).map_err(HarnessError::Invalid)?;
    let framings = match a.framing {
        FramingArg::Eager => vec![Framing::Eager],
        FramingArg::Staged => vec![Framing::Staged],
        FramingArg::Both => vec![Framing::Eager, Framing::Staged],
    };
    let p = StreamParams { sizes: sizes.iter().map(|s| s * MIB).collect(), repetitions: cfg.repetitions, framings };
    let mut handle = harness::launch(&cfg, &[("ps", 1), ("worker", 1)], 1)?;
    let res = harness::orchestrate_stream(&handle, &p);
    handle.shutdown();
    let (bws, out) = res?;
    let csv = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("stream.csv"));
    harness::write_stream_csv(&csv, &bws)?;
    out.write(&cfg.out_dir, "stream")?;
    for bw in &bws {
        println!(
            "{:>10} B {:<6} mean {:>10.1} MB/s  median {:>10.1} MB/s",
            bw.size_bytes,
            bw.framing.name(),
            bw.mean_mbps(),
            bw.median_mbps()
        );
    }
    for f in &out.failures {
        println!("! {f}");
    }
    Ok(out.failures.is_empty())
}

fn matmul_cmd(cli: &Cli, a: &MatmulArgs) -> Res<bool> {
    let Some(role) = a.role else {
        let cfg = config(cli, 5);
        let p = MatmulParams { n: a.n, s: a.tile, shard: a.shard };
        return sweep(
            &cfg,
            "matmul",
            &a.workers,
            |w| vec![(matmul::WORKER_JOB, w), (matmul::REDUCER_JOB, 2)],
            |h| harness::orchestrate_matmul(h, &cfg, p),
        );
    };
    let spec = load_spec(cli)?;
    let mut plan = MatmulPlan::new(a.n, a.tile, spec.task_count(matmul::WORKER_JOB))?;
    plan.reducers = spec.task_count(matmul::REDUCER_JOB);
    plan.shard = a.shard;
    match role {
        MatmulRole::Worker => {
            let store = TileStore::new(required(&a.tiles_dir, "tiles-dir")?);
            let stats = matmul::worker_loop(&spec, &plan, a.task_index, &store)?;
            println!("worker {} multiplied {} tile pairs", a.task_index, stats.items.len());
        }
        MatmulRole::Reducer => {
            std::fs::create_dir_all(&cli.out_dir)?;
            let out = matmul::reducer_loop(&spec, &plan, a.task_index, &TileStore::new(&cli.out_dir), false)?;
            println!("reducer {} summed {} partials into {} tiles", a.task_index, out.received, out.targets.len());
        }
    }
    Ok(true)
}

fn cg_mode(a: &CgArgs) -> CgMode {
    match (a.iters, a.tol) {
        (Some(n), _) => CgMode::FixedIters(n),
        (None, t) => CgMode::Tolerance(t.unwrap_or(1e-8)),
    }
}

fn cg_cmd(cli: &Cli, a: &CgArgs) -> Res<bool> {
    let mode = cg_mode(a);
    let Some(role) = a.role else {
        let cfg = config(cli, 5);
        let source = match (a.poisson, a.m) {
            (Some(k), _) => CgSource::Poisson(k),
            (None, Some(m)) => CgSource::Random(m),
            (None, None) => CgSource::Poisson(32),
        };
        let p = CgParams { source, mode };
        return sweep(&cfg, "cg", &a.workers, |w| vec![(cg::PS_JOB, 1), (cg::WORKER_JOB, w)], |h| {
            harness::orchestrate_cg(h, &cfg, p)
        });
    };
    let spec = load_spec(cli)?;
    let b_path = required(&a.b, "b")?;
    let m = tiles::read_tile(b_path)?.tensor.shape().dims()[0];
    let mut plan = CgPlan::new(m, spec.task_count(cg::WORKER_JOB), mode)?;
    if let Some(dir) = &a.checkpoint_dir {
        plan.checkpoint_dir = Some(dir.clone());
        plan.checkpoint_every = Some(a.checkpoint_every);
    }
    match role {
        CgRole::Worker => {
            let (blk, b) = cg::read_worker_block(required(&a.matrix, "matrix")?, b_path, &plan, a.task_index)?;
            cg::load_worker(&spec, a.task_index, &blk, &b)?;
            let out = cg::cg_worker(&spec, &plan, a.task_index, true, &|_, _| {})?;
            let last = out.residuals.last().map_or(f64::NAN, |r| r.1);
            println!("worker {} stopped after {} iterations, residual {last:e}", a.task_index, out.iterations);
        }
        CgRole::Reducer => {
            let stats = cg::cg_reducer(&spec, &plan)?;
            let rounds: Vec<u64> = stats.iter().map(|s| s.rounds).collect();
            println!("reducer served rounds {rounds:?}");
        }
        CgRole::Driver => {
            let iters = cg::wait_for_workers(&spec, &plan)?;
            cg::close_channels(&spec, &plan)?;
            let x = cg::collect_x(&spec, &plan)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let x_path = cli.out_dir.join("x.til");
            tiles::write_tile(&x_path, 0, 0, &flowhpc_core::Tensor::vector_f64(x.clone()))?;
            println!("solve finished after {iters} iterations, x written to {}", x_path.display());
            if let Some(dir) = &a.matrix {
                let whole = CgPlan::new(m, 1, mode)?;
                let (a_full, b) = cg::read_worker_block(dir, b_path, &whole, 0)?;
                let resid = harness::true_residual(&CgProblem::new(a_full, b)?, &x)?;
                println!("true residual {resid:e}");
                if let CgMode::Tolerance(e) = mode {
                    return Ok(resid <= 10.0 * e);
                }
            }
        }
    }
    Ok(true)
}

fn fft_cmd(cli: &Cli, a: &FftArgs) -> Res<bool> {
    let Some(role) = a.role else {
        let cfg = config(cli, 5);
        let p = FftParams { n: a.n, tiles: a.tiles, merge: a.merge };
        return sweep(&cfg, "fft", &a.workers, |w| vec![(fft::WORKER_JOB, w), (fft::MERGER_JOB, 1)], |h| {
            harness::orchestrate_fft(h, &cfg, p)
        });
    };
    let spec = load_spec(cli)?;
    let mut plan = FftPlan::new(a.n, a.tiles, spec.task_count(fft::WORKER_JOB))?;
    plan.merge = a.merge;
    match role {
        FftRole::Worker => {
            let store = TileStore::new(required(&a.tiles_dir, "tiles-dir")?);
            let sent = fft::fft_worker(&spec, &plan, a.task_index, &store)?;
            println!("worker {} transformed tiles {sent:?}", a.task_index);
        }
        FftRole::Merger => {
            let out = fft::fft_merger(&spec, &plan)?;
            let path = a.out.clone().unwrap_or_else(|| cli.out_dir.join("spectrum.bin"));
            if let Some(d) = path.parent() {
                std::fs::create_dir_all(d)?;
            }
            tiles::write_tile(&path, 0, 0, &out.spectrum)?;
            println!(
                "merged {} tiles in {:.4} s, arrival order {:?}, spectrum in {}",
                a.tiles,
                out.merge_time.as_secs_f64(),
                out.arrival_order,
                path.display()
            );
        }
    }
    Ok(true)
}

fn split_cmd(cli: &Cli, s: &SplitCmd) -> Res<bool> {
    match s {
        SplitCmd::Matmul { n, tile, tiles_dir, a, b } => {
            std::fs::create_dir_all(tiles_dir)?;
            let store = TileStore::new(tiles_dir);
            match (a, b) {
                (Some(a), Some(b)) => {
                    matmul::split_matrix(&tiles::read_tile(a)?.tensor, *n, *tile, &store, 'A')?;
                    matmul::split_matrix(&tiles::read_tile(b)?.tensor, *n, *tile, &store, 'B')?;
                }
                _ => {
                    matmul::split_generated(*n, *tile, cli.seed, &store, 'A')?;
                    matmul::split_generated(*n, *tile, cli.seed + 1, &store, 'B')?;
                }
            }
            let g = n / tile;
            println!("wrote {} tiles to {}", 2 * g * g, tiles_dir.display());
        }
        SplitCmd::Fft { n, tiles: t, tiles_dir, input } => {
            std::fs::create_dir_all(tiles_dir)?;
            let x = match input {
                Some(p) => tiles::read_tile(p)?.tensor,
                None => harness::fft_signal(*n, cli.seed),
            };
            fft::write_signal_tiles(&TileStore::new(tiles_dir), &x, *t)?;
            println!("wrote {t} tiles to {}", tiles_dir.display());
        }
        SplitCmd::Cg { poisson, m, block_rows, matrix, b } => {
            let source = match (poisson, m) {
                (Some(k), _) => CgSource::Poisson(*k),
                (None, Some(m)) => CgSource::Random(*m),
                (None, None) => return Err(HarnessError::Invalid("give --poisson or --m".into())),
            };
            let problem = harness::cg_problem(source, cli.seed)?;
            std::fs::create_dir_all(matrix)?;
            let files = cg::write_row_blocks(matrix, &problem.a, *block_rows)?;
            if let Some(d) = b.parent() {
                std::fs::create_dir_all(d)?;
            }
            tiles::write_tile(b, 0, 0, &problem.b)?;
            println!("wrote {files} row blocks to {} and b to {}", matrix.display(), b.display());
        }
    }
    Ok(true)
}

fn resolve_cmd(a: &ResolveArgs) -> Res<bool> {
    let nodelist = a
        .nodelist
        .clone()
        .or_else(slurm::nodelist_from_env)
        .ok_or_else(|| HarnessError::Invalid("no --nodelist and no SLURM_JOB_NODELIST".into()))?;
    let tpn = a.tasks_per_node.or_else(slurm::tasks_per_node_from_env).unwrap_or(1);
    let mut jobs = Vec::new();
    for j in &a.jobs {
        let (name, n) = j.rsplit_once(':').ok_or_else(|| HarnessError::Invalid(format!("job {j:?} is not name:count")))?;
        let n: usize = n.parse().map_err(|_| HarnessError::Invalid(format!("job {j:?} has a bad count")))?;
        jobs.push((name, n));
    }
    let mut rc = ResolverConfig::new(&jobs, tpn, a.port, a.devices_per_node);
    rc.strict_devices = a.strict_devices;
    let nodes = if a.scontrol { slurm::expand_with_scontrol(&nodelist)? } else { slurm::expand_hostlist(&nodelist)? };
    let res = slurm::resolve_nodes(&rc, &nodes)?;
    match &a.out {
        Some(p) => {
            res.spec.save(p)?;
            for t in &res.tasks {
                println!("{} {}:{} devices {:?}", t.identity, t.node, t.port, t.visible_devices);
            }
        }
        None => println!("{}", res.spec.to_json()),
    }
    Ok(true)
}

fn serve_cmd(cli: &Cli, a: &ServeArgs) -> Res<bool> {
    let spec = load_spec(cli)?;
    let id: TaskIdentity = match &a.task {
        Some(t) => t.parse()?,
        None => TaskIdentity::from_env()?
            .ok_or_else(|| HarnessError::Invalid("no --task and no FLOWHPC_TASK".into()))?,
    };
    let server = Server::serve(id.clone(), spec, DeviceName::host_with_devs(a.devs))?;
    log::info!("{id} serving on {}", server.local_addr());
    server.wait();
    Ok(true)
}
