//! Random pure-graph generator for equivalence tests.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::device::DeviceName;
use crate::graph::{Graph, GraphBuilder, NodeId};
use crate::random::random_uniform;
use crate::tensor::{DType, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Scalar,
    Vec64,
    Mat64,
    Mat32,
    Spectrum,
}

pub struct GeneratedGraph {
    pub graph: Graph,
    pub fetches: Vec<NodeId>,
    pub feeds: HashMap<NodeId, Tensor>,
}

/// A random DAG of stateless ops with `size` interior nodes over operands of
/// edge `n`, fetching up to four of its nodes.
pub fn random_pure_graph(seed: u64, size: usize, n: usize) -> GeneratedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GraphBuilder::new();
    let mut pool: HashMap<Kind, Vec<NodeId>> = HashMap::new();
    let mut feeds = HashMap::new();
    let spectrum_len = n.next_power_of_two();
    let mut all = Vec::new();

    let push = |pool: &mut HashMap<Kind, Vec<NodeId>>, all: &mut Vec<NodeId>, k: Kind, id: NodeId| {
        pool.entry(k).or_default().push(id);
        all.push(id);
    };

    let s = rng.gen();
    let id = g.random_uniform(Shape::vector(n), DType::F64, s);
    push(&mut pool, &mut all, Kind::Vec64, id);
    let s = rng.gen();
    let id = g.random_uniform(Shape::matrix(n, n), DType::F64, s);
    push(&mut pool, &mut all, Kind::Mat64, id);
    let s = rng.gen();
    let id = g.random_uniform(Shape::matrix(n, n), DType::F32, s);
    push(&mut pool, &mut all, Kind::Mat32, id);
    let id = g.scalar(rng.gen_range(-2.0..2.0));
    push(&mut pool, &mut all, Kind::Scalar, id);
    let id = g.placeholder(DType::F64, Some(Shape::vector(n)));
    feeds.insert(id, random_uniform(&Shape::vector(n), DType::F64, rng.gen()));
    push(&mut pool, &mut all, Kind::Vec64, id);
    let s = rng.gen();
    let id = g.random_uniform(Shape::vector(spectrum_len), DType::C128, s);
    push(&mut pool, &mut all, Kind::Spectrum, id);

    let devices = [None, Some(DeviceName::CPU0), Some(DeviceName::dev(0)), Some(DeviceName::dev(1))];
    for _ in 0..size {
        g.set_device(devices[rng.gen_range(0..devices.len())]);
        let pick = |rng: &mut ChaCha8Rng, pool: &HashMap<Kind, Vec<NodeId>>, k: Kind| {
            let v = &pool[&k];
            v[rng.gen_range(0..v.len())]
        };
        let (kind, id) = match rng.gen_range(0..12) {
            0 => {
                let (a, b) = (pick(&mut rng, &pool, Kind::Mat32), pick(&mut rng, &pool, Kind::Mat32));
                (Kind::Mat32, g.matmul(a, b))
            }
            1 => {
                let (a, b) = (pick(&mut rng, &pool, Kind::Mat64), pick(&mut rng, &pool, Kind::Mat64));
                (Kind::Mat64, g.add(a, b))
            }
            2 => {
                let (a, b) = (pick(&mut rng, &pool, Kind::Vec64), pick(&mut rng, &pool, Kind::Vec64));
                (Kind::Scalar, g.dot(a, b))
            }
            3 => {
                let (a, x) = (pick(&mut rng, &pool, Kind::Mat64), pick(&mut rng, &pool, Kind::Vec64));
                (Kind::Vec64, g.matvec(a, x))
            }
            4 => {
                let al = pick(&mut rng, &pool, Kind::Scalar);
                let (x, y) = (pick(&mut rng, &pool, Kind::Vec64), pick(&mut rng, &pool, Kind::Vec64));
                (Kind::Vec64, g.axpy(al, x, y))
            }
            5 => {
                let x = pick(&mut rng, &pool, Kind::Vec64);
                (Kind::Vec64, g.scale(rng.gen_range(-3.0..3.0), x))
            }
            6 => {
                let x = pick(&mut rng, &pool, Kind::Spectrum);
                (Kind::Spectrum, g.fft(x))
            }
            7 => {
                let x = pick(&mut rng, &pool, Kind::Vec64);
                let off = rng.gen_range(0..n);
                let len = rng.gen_range(0..=n - off);
                let sl = g.slice(x, off, len);
                (Kind::Vec64, g.pad(sl, off, n))
            }
            8 => {
                let (a, b) = (pick(&mut rng, &pool, Kind::Scalar), pick(&mut rng, &pool, Kind::Scalar));
                (Kind::Scalar, g.div(a, b))
            }
            9 => {
                let x = pick(&mut rng, &pool, Kind::Mat32);
                (Kind::Mat32, g.identity(x))
            }
            10 => {
                let (a, b) = (pick(&mut rng, &pool, Kind::Spectrum), pick(&mut rng, &pool, Kind::Spectrum));
                (Kind::Spectrum, g.add(a, b))
            }
            _ => {
                let (a, b) = (pick(&mut rng, &pool, Kind::Vec64), pick(&mut rng, &pool, Kind::Vec64));
                (Kind::Vec64, g.add(a, b))
            }
        };
        push(&mut pool, &mut all, kind, id);
    }
    g.set_device(None);
    let count = rng.gen_range(1..=4);
    let fetches = (0..count).map(|_| all[rng.gen_range(0..all.len())]).collect();
    GeneratedGraph { graph: g.finish(), fetches, feeds }
}
