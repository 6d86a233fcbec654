use std::collections::HashMap;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use flowhpc_cluster::{ClusterError, ClusterSpec, LocalCluster, Server, Session, SessionRunOptions, TaskIdentity};
use flowhpc_core::testing::random_pure_graph;
use flowhpc_core::{exec, DType, DeviceName, GraphBuilder, NoState, QueueRef, RunOptions, Shape, Tensor, VarRef};

fn id(job: &str, i: usize) -> TaskIdentity {
    TaskIdentity::new(job, i)
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn serve_from_spec_answers_ping() {
    let port = free_port();
    let spec = ClusterSpec::from_pairs([("worker", vec![format!("127.0.0.1:{port}").as_str()])]).unwrap();
    let server = Server::serve(id("worker", 0), spec.clone(), vec![DeviceName::CPU0]).unwrap();
    let mut s = Session::connect(&server.local_addr().to_string()).unwrap();
    assert_eq!(s.ping(b"hello").unwrap(), b"hello");

    assert!(matches!(
        Server::serve(id("worker", 0), spec.clone(), vec![DeviceName::CPU0]),
        Err(ClusterError::AddressInUse(_))
    ));
    assert!(matches!(
        Server::serve(id("ps", 1), spec, vec![DeviceName::CPU0]),
        Err(ClusterError::IdentityNotInSpec { .. })
    ));
}

#[test]
fn two_servers_answer_concurrently() {
    let cluster = LocalCluster::start(&[("worker", 2)], 0).unwrap();
    let addrs: Vec<String> = (0..2).map(|i| cluster.address(&id("worker", i)).unwrap()).collect();
    let barrier = Arc::new(Barrier::new(2));
    let hs: Vec<_> = addrs
        .into_iter()
        .map(|a| {
            let b = barrier.clone();
            thread::spawn(move || {
                let mut s = Session::connect(&a).unwrap();
                b.wait();
                for i in 0..200u32 {
                    assert_eq!(s.ping(&i.to_le_bytes()).unwrap(), i.to_le_bytes());
                }
            })
        })
        .collect();
    hs.into_iter().for_each(|h| h.join().unwrap());
}

#[test]
fn remote_const_and_ack_only() {
    let cluster = LocalCluster::start(&[("worker", 1)], 0).unwrap();
    let mut s = Session::connect(&cluster.address(&id("worker", 0)).unwrap()).unwrap();
    let mut g = GraphBuilder::new();
    let c = g.constant(Tensor::scalar_f64(42.0));
    let big = g.constant(Tensor::zeros(DType::F32, Shape::vector(4096)));
    let g = g.finish();
    let v = s.run_values(&g, &[c], &HashMap::new()).unwrap();
    assert_eq!(v[0].scalar_value().unwrap(), 42.0);

    let opts = SessionRunOptions { return_values: false, ..Default::default() };
    let out = s.run(&g, &[big], &HashMap::new(), &opts).unwrap();
    assert!(out.values.is_empty());
    assert!(s.last_response_len() < 64, "{}", s.last_response_len());
}

#[test]
fn dead_target_fails_fast() {
    let port = free_port();
    let start = Instant::now();
    let err = Session::connect_timeout(&format!("127.0.0.1:{port}"), Duration::from_secs(2)).err().unwrap();
    assert!(matches!(err, ClusterError::ConnectionFailed { .. }));
    assert!(start.elapsed() < Duration::from_secs(3));
}

#[test]
fn remote_kernel_error_carries_node() {
    let cluster = LocalCluster::start(&[("worker", 1)], 0).unwrap();
    let mut s = Session::connect(&cluster.address(&id("worker", 0)).unwrap()).unwrap();
    let mut g = GraphBuilder::new();
    let a = g.constant(Tensor::vector_f64(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector_f64(vec![1.0]));
    let bad = g.add(a, b);
    let g = g.finish();
    let err = s.run_values(&g, &[bad], &HashMap::new()).unwrap_err();
    assert_eq!(err.node(), Some(bad.0));
    // The connection survives a failed run.
    assert_eq!(s.ping(b"x").unwrap(), b"x");
}

#[test]
fn assign_add_sequential_and_concurrent() {
    let cluster = LocalCluster::start(&[("ps", 1)], 0).unwrap();
    let addr = cluster.address(&id("ps", 0)).unwrap();
    let mut s = Session::connect(&addr).unwrap();
    let ones = Tensor::ones(DType::F32, Shape::vector(4));
    s.assign("v", &Tensor::zeros(DType::F32, Shape::vector(4))).unwrap();
    assert_eq!(s.assign_add("v", &ones, true).unwrap().unwrap(), ones);
    for _ in 0..99 {
        assert!(s.assign_add("v", &ones, false).unwrap().is_none());
    }
    assert_eq!(s.read_variable("v").unwrap(), Tensor::filled(DType::F32, Shape::vector(4), 100.0));

    s.assign("w", &Tensor::zeros(DType::F32, Shape::vector(4))).unwrap();
    let hs: Vec<_> = (0..8)
        .map(|_| {
            let addr = addr.clone();
            let ones = ones.clone();
            thread::spawn(move || Session::connect(&addr).unwrap().assign_add("w", &ones, false).unwrap())
        })
        .collect();
    hs.into_iter().for_each(|h| {
        h.join().unwrap();
    });
    assert_eq!(s.read_variable("w").unwrap(), Tensor::filled(DType::F32, Shape::vector(4), 8.0));

    let err = s.assign_add("missing", &ones, false).unwrap_err();
    assert!(err.to_string().contains("missing"));
    let err = s.assign_add("v", &Tensor::ones(DType::F32, Shape::vector(3)), false).unwrap_err();
    assert!(err.to_string().contains("shape"));
}

#[test]
fn queues_over_sessions() {
    let cluster = LocalCluster::start(&[("ps", 1)], 0).unwrap();
    let addr = cluster.address(&id("ps", 0)).unwrap();
    let mut s = Session::connect(&addr).unwrap();
    let q = QueueRef::local("fifo");
    for i in 1..=3 {
        s.enqueue(&q, &[Tensor::scalar_f64(i as f64)]).unwrap();
    }
    for i in 1..=3 {
        assert_eq!(s.dequeue(&q).unwrap()[0].scalar_value().unwrap(), i as f64);
    }

    // Blocking dequeue satisfied by another client.
    let a2 = addr.clone();
    let q2 = q.clone();
    let h = thread::spawn(move || Session::connect(&a2).unwrap().dequeue(&q2).unwrap());
    thread::sleep(Duration::from_millis(100));
    s.enqueue(&q, &[Tensor::scalar_f64(7.0)]).unwrap();
    assert_eq!(h.join().unwrap()[0].scalar_value().unwrap(), 7.0);

    // Capacity 1: second enqueue waits for a dequeue.
    let small = QueueRef::local("small").with_capacity(1);
    s.enqueue(&small, &[Tensor::scalar_f64(1.0)]).unwrap();
    let (a3, sm) = (addr.clone(), small.clone());
    let t0 = Instant::now();
    let h = thread::spawn(move || {
        Session::connect(&a3).unwrap().enqueue(&sm, &[Tensor::scalar_f64(2.0)]).unwrap();
        t0.elapsed()
    });
    thread::sleep(Duration::from_millis(300));
    assert_eq!(s.dequeue(&small).unwrap()[0].scalar_value().unwrap(), 1.0);
    assert!(h.join().unwrap() >= Duration::from_millis(250));
    assert_eq!(s.dequeue(&small).unwrap()[0].scalar_value().unwrap(), 2.0);

    // Timeout and close semantics.
    let short = QueueRef::local("short").with_timeout_ms(50);
    assert!(s.dequeue(&short).unwrap_err().is_timeout());
    s.enqueue(&short, &[Tensor::scalar_f64(5.0)]).unwrap();
    s.close_queue(&short).unwrap();
    assert!(s.enqueue(&short, &[Tensor::scalar_f64(6.0)]).unwrap_err().is_queue_closed());
    assert_eq!(s.dequeue(&short).unwrap()[0].scalar_value().unwrap(), 5.0);
    assert!(s.dequeue(&short).unwrap_err().is_queue_closed());
}

#[test]
fn graph_ops_forward_to_owner() {
    let cluster = LocalCluster::start(&[("ps", 1), ("worker", 1)], 1).unwrap();
    let mut ps = Session::connect(&cluster.address(&id("ps", 0)).unwrap()).unwrap();
    let mut worker = Session::connect(&cluster.address(&id("worker", 0)).unwrap()).unwrap();
    ps.assign("dst", &Tensor::zeros(DType::F32, Shape::vector(8))).unwrap();

    let mut g = GraphBuilder::new();
    let src = g.constant(Tensor::filled(DType::F32, Shape::vector(8), 2.0));
    let up = g.assign_add(&VarRef::on("dst", "ps:0"), src, false);
    let q = QueueRef::on("out", "ps:0");
    let enq = g.enqueue(&q, &[src]);
    let g = g.finish();
    for framing in [flowhpc_cluster::Framing::Eager, flowhpc_cluster::Framing::Staged] {
        let opts = SessionRunOptions { return_values: false, framing, ..Default::default() };
        worker.run(&g, &[up, enq], &HashMap::new(), &opts).unwrap();
    }
    assert_eq!(ps.read_variable("dst").unwrap(), Tensor::filled(DType::F32, Shape::vector(8), 4.0));
    assert_eq!(ps.dequeue(&q).unwrap()[0], Tensor::filled(DType::F32, Shape::vector(8), 2.0));

    // Unknown remote variable surfaces as a state error on the right node.
    let mut g = GraphBuilder::new();
    let r = g.read_variable(&VarRef::on("nope", "ps:0"));
    let g = g.finish();
    let err = worker.run_values(&g, &[r], &HashMap::new()).unwrap_err();
    assert_eq!(err.node(), Some(r.0));
    assert!(err.to_string().contains("nope"));
}

#[test]
fn remote_matches_local_on_random_graphs() {
    let cluster = LocalCluster::start(&[("worker", 1)], 2).unwrap();
    let mut s = Session::connect(&cluster.address(&id("worker", 0)).unwrap()).unwrap();
    for seed in 0..25 {
        let gg = random_pure_graph(seed, 30, 7);
        let local = exec::run(&gg.graph, &gg.fetches, &gg.feeds, &NoState, &RunOptions::single_threaded()).unwrap();
        let remote = s.run_values(&gg.graph, &gg.fetches, &gg.feeds).unwrap();
        assert_eq!(local.values.len(), remote.len());
        for (a, b) in local.values.iter().zip(&remote) {
            assert!(a.bit_identical(b), "seed {seed}");
        }
    }
}

#[test]
fn remote_trace_reports_placement() {
    let cluster = LocalCluster::start(&[("worker", 1)], 1).unwrap();
    let mut s = Session::connect(&cluster.address(&id("worker", 0)).unwrap()).unwrap();
    let mut g = GraphBuilder::new();
    let a = g.random_uniform(Shape::matrix(3, 3), DType::F32, 1);
    let b = g.random_uniform(Shape::matrix(3, 3), DType::F32, 2);
    let c = g.matmul(a, b);
    let g = g.finish();
    let out = s.run(&g, &[c], &HashMap::new(), &SessionRunOptions { trace: true, ..Default::default() }).unwrap();
    let trace = out.trace.unwrap();
    assert_eq!(trace.records.len(), 3);
    assert_eq!(trace.records.iter().find(|r| r.node == c.0).unwrap().device, DeviceName::dev(0));
}

#[test]
fn checkpoint_through_session() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cluster = LocalCluster::start(&[("ps", 1)], 0).unwrap();
    let mut s = Session::connect(&cluster.address(&id("ps", 0)).unwrap()).unwrap();
    let x = flowhpc_core::random::random_uniform(&Shape::vector(33), DType::F64, 9);
    s.assign("x", &x).unwrap();
    assert_eq!(s.checkpoint_save(d, 4).unwrap(), 1);
    s.assign("x", &Tensor::zeros(DType::F64, Shape::vector(33))).unwrap();
    assert_eq!(s.checkpoint_restore(d, 4).unwrap(), 1);
    assert!(s.read_variable("x").unwrap().bit_identical(&x));
    assert!(s.checkpoint_restore(d, 5).unwrap_err().to_string().contains("manifest"));
}

#[test]
fn shutdown_closes_queues_and_connections() {
    let mut cluster = LocalCluster::start(&[("ps", 1)], 0).unwrap();
    let addr = cluster.address(&id("ps", 0)).unwrap();
    let a2 = addr.clone();
    let h = thread::spawn(move || Session::connect(&a2).unwrap().dequeue(&QueueRef::local("never")));
    thread::sleep(Duration::from_millis(100));
    let mut s = Session::connect(&addr).unwrap();
    s.shutdown_server().unwrap();
    let err = h.join().unwrap().unwrap_err();
    assert!(err.is_queue_closed() || matches!(err, ClusterError::ConnectionFailed { .. }), "{err}");
    cluster.shutdown();
    assert!(Session::connect_timeout(&addr, Duration::from_secs(1)).is_err());
}

#[test]
fn killed_task_restarts_on_same_port() {
    let mut cluster = LocalCluster::start(&[("worker", 1)], 0).unwrap();
    let w = id("worker", 0);
    let addr = cluster.address(&w).unwrap();
    Session::connect(&addr).unwrap().assign("v", &Tensor::scalar_f64(1.0)).unwrap();
    cluster.kill(&w);
    assert!(Session::connect_timeout(&addr, Duration::from_secs(1)).is_err());
    cluster.restart(&w).unwrap();
    let mut s = Session::connect(&addr).unwrap();
    assert!(s.read_variable("v").is_err());
}
