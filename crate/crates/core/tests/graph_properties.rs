use std::collections::BTreeSet;

use flowhpc_core::exec::{producer_closure, run, NoState, RunOptions};
use flowhpc_core::testing::random_pure_graph;
use flowhpc_core::{DeviceName, Graph};
use proptest::prelude::*;

/// Producer closure computed by repeated forward sweeps, independent of the
/// executor's own traversal.
fn closure_oracle(g: &Graph, fetches: &[flowhpc_core::NodeId]) -> BTreeSet<u32> {
    let mut set: BTreeSet<u32> = fetches.iter().map(|f| f.0).collect();
    loop {
        let before = set.len();
        for n in g.nodes() {
            if set.contains(&n.id) {
                set.extend(n.inputs.iter().copied());
            }
        }
        if set.len() == before {
            return set;
        }
    }
}

fn parallel() -> RunOptions {
    RunOptions { devices: DeviceName::host_with_devs(2), cpu_threads: 3, trace: true, ..RunOptions::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn executed_set_is_producer_closure(seed in any::<u64>(), size in 1usize..40) {
        let gg = random_pure_graph(seed, size, 5);
        let expected = closure_oracle(&gg.graph, &gg.fetches);
        let listed: BTreeSet<u32> = producer_closure(&gg.graph, &gg.fetches).unwrap().into_iter().collect();
        prop_assert_eq!(&listed, &expected);
        for opts in [RunOptions { trace: true, ..RunOptions::single_threaded() }, parallel()] {
            let out = run(&gg.graph, &gg.fetches, &gg.feeds, &NoState, &opts).unwrap();
            let trace = out.trace.unwrap();
            prop_assert_eq!(trace.records.len(), expected.len());
            prop_assert_eq!(trace.executed(), expected.clone());
        }
    }

    #[test]
    fn single_threaded_runs_are_bit_identical(seed in any::<u64>(), size in 1usize..40) {
        let gg = random_pure_graph(seed, size, 6);
        let a = run(&gg.graph, &gg.fetches, &gg.feeds, &NoState, &RunOptions::single_threaded()).unwrap();
        let b = run(&gg.graph, &gg.fetches, &gg.feeds, &NoState, &RunOptions::single_threaded()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(x.bit_identical(y));
        }
    }

    #[test]
    fn parallel_matches_single_threaded(seed in any::<u64>(), size in 1usize..40) {
        let gg = random_pure_graph(seed, size, 6);
        let a = run(&gg.graph, &gg.fetches, &gg.feeds, &NoState, &RunOptions::single_threaded()).unwrap();
        let b = run(&gg.graph, &gg.fetches, &gg.feeds, &NoState, &parallel()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(x.bit_identical(y));
        }
    }

    #[test]
    fn serialization_round_trip_preserves_results(seed in any::<u64>(), size in 1usize..40) {
        let gg = random_pure_graph(seed, size, 4);
        let bytes = gg.graph.to_bytes().unwrap();
        let back = Graph::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let a = run(&gg.graph, &gg.fetches, &gg.feeds, &NoState, &RunOptions::single_threaded()).unwrap();
        let b = run(&back, &gg.fetches, &gg.feeds, &NoState, &RunOptions::single_threaded()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(x.bit_identical(y));
        }
    }
}

#[test]
fn concurrent_runs_share_one_graph() {
    let gg = random_pure_graph(7, 30, 8);
    let reference = run(&gg.graph, &gg.fetches, &gg.feeds, &NoState, &RunOptions::single_threaded()).unwrap();
    std::thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| {
                let out = run(&gg.graph, &gg.fetches, &gg.feeds, &NoState, &parallel()).unwrap();
                for (x, y) in out.values.iter().zip(&reference.values) {
                    assert!(x.bit_identical(y));
                }
            });
        }
    });
}
