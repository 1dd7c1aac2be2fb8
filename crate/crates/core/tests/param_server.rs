use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;

use dsoftmax::config::{ConfigMap, ExperimentConfig};
use dsoftmax::math::seeded_gaussian_matrix;
use dsoftmax::param_server::net::{PsServer, RemoteStore, ServerHandle};
use dsoftmax::param_server::protocol::{read_frame, write_frame, Request, Response, STATUS_ERR, STATUS_OK};
use dsoftmax::param_server::{snapshot_len, PushOutcome, ShardedStore, Update, WeightBackend};
use dsoftmax::trainer::run_experiment;
use dsoftmax::{Matrix, RngState};
use proptest::prelude::*;

fn weights(k: usize, n: usize, seed: u64) -> Matrix {
    seeded_gaussian_matrix(k, n, &mut RngState::new(seed))
}

fn server(k: usize, n: usize, shards: usize) -> ServerHandle {
    let store = Arc::new(ShardedStore::new(&weights(k, n, 3), shards).unwrap());
    PsServer::bind("127.0.0.1:0", store).unwrap().spawn().unwrap()
}

#[test]
fn socket_fetch_is_byte_identical_to_in_process_fetch() {
    let handle = server(200, 16, 4);
    let mut client = RemoteStore::connect(handle.addr()).unwrap();
    let ids = [0usize, 7, 199, 42, 7];
    let raw = client.roundtrip_raw(&Request::Fetch(ids.to_vec()).encode()).unwrap();
    let local = Response::Fetched { dim: 16, records: handle.store().fetch(&ids).unwrap() }.encode();
    assert_eq!(raw, local);
    assert_eq!(raw[0], STATUS_OK);
    handle.shutdown().unwrap();
}

#[test]
fn malformed_frame_gets_error_and_connection_survives() {
    let handle = server(50, 8, 2);
    let mut client = RemoteStore::connect(handle.addr()).unwrap();
    for garbage in [vec![], vec![99u8], vec![1u8, 0xff, 0xff], vec![2u8; 7]] {
        let raw = client.roundtrip_raw(&garbage).unwrap();
        assert_eq!(raw[0], STATUS_ERR, "payload {garbage:?}");
    }
    assert_eq!(client.fetch(&[3]).unwrap()[0].class_id, 3);
    handle.shutdown().unwrap();
}

#[test]
fn oversized_length_prefix_is_answered_then_closed() {
    let handle = server(10, 4, 1);
    let mut stream = TcpStream::connect(handle.addr()).unwrap();
    stream.write_all(&u32::MAX.to_le_bytes()).unwrap();
    let reply = read_frame(&mut stream).unwrap().unwrap();
    assert_eq!(reply[0], STATUS_ERR);
    let mut rest = Vec::new();
    stream.read_to_end(&mut rest).unwrap();
    assert!(rest.is_empty());

    // the server keeps accepting new connections
    let mut fresh = TcpStream::connect(handle.addr()).unwrap();
    write_frame(&mut fresh, &Request::Info.encode()).unwrap();
    assert_eq!(read_frame(&mut fresh).unwrap().unwrap()[0], STATUS_OK);
    handle.shutdown().unwrap();
}

#[test]
fn concurrent_clients_on_disjoint_shards_both_succeed() {
    let (k, n, shards) = (400, 8, 2);
    let handle = server(k, n, shards);
    let before = handle.store().to_matrix();
    let addr = handle.addr();
    let workers: Vec<_> = (0..shards)
        .map(|shard| {
            thread::spawn(move || {
                let mut client = RemoteStore::connect(addr).unwrap();
                let ids: Vec<usize> = (0..k).filter(|c| c % shards == shard).collect();
                for round in 0..25u64 {
                    let records = client.fetch(&ids).unwrap();
                    let updates = records
                        .iter()
                        .map(|r| Update {
                            class_id: r.class_id,
                            delta: vec![1.0; n],
                            expected_version: Some(r.version),
                        })
                        .collect();
                    let outcomes = client.push(updates).unwrap();
                    assert!(outcomes.iter().all(|o| *o == PushOutcome::Applied { version: round + 1 }));
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    let after = handle.store().to_matrix();
    assert!(handle.store().versions().iter().all(|&v| v == 25));
    for (a, b) in after.as_slice().iter().zip(before.as_slice()) {
        assert!((a - b - 25.0).abs() < 1e-9);
    }
    handle.shutdown().unwrap();
}

#[test]
fn in_process_pushes_from_many_threads_are_not_lost() {
    let store = Arc::new(ShardedStore::new(&Matrix::zeros(64, 4), 8).unwrap());
    let threads: Vec<_> = (0..8)
        .map(|_| {
            let store = Arc::clone(&store);
            thread::spawn(move || {
                for _ in 0..100 {
                    let ups: Vec<Update> = (0..64)
                        .map(|c| Update { class_id: c, delta: vec![1.0; 4], expected_version: None })
                        .collect();
                    store.push_update(&ups).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    assert!(store.versions().iter().all(|&v| v == 800));
    assert!(store.to_matrix().as_slice().iter().all(|&v| v == 800.0));
}

#[test]
fn remote_backend_snapshot_and_info() {
    let handle = server(30, 6, 3);
    let mut client = RemoteStore::connect(handle.addr()).unwrap();
    assert_eq!((client.info().num_classes, client.info().dim, client.info().num_shards), (30, 6, 3));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("remote.dsps");
    client.snapshot(path.to_str().unwrap()).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, snapshot_len(30, 6));
    let loaded = ShardedStore::load(&path, 1).unwrap();
    assert_eq!(loaded.to_matrix(), handle.store().to_matrix());
    assert_eq!(client.export_all().unwrap(), handle.store().to_matrix());
    handle.shutdown().unwrap();
}

fn small_experiment(sampler: &str, rate: &str, shards: usize) -> ExperimentConfig {
    let mut map = ConfigMap::default();
    for (k, v) in [
        ("data.classes", "20"),
        ("data.per_class", "8"),
        ("data.dim", "16"),
        ("train.embed_dim", "16"),
        ("train.batch_size", "16"),
        ("train.epochs", "3"),
        ("train.eval_pairs", "200"),
        ("sampler.kind", sampler),
        ("sampler.rate", rate),
        ("ps.shards", &shards.to_string()),
    ] {
        map.set(k, v).unwrap();
    }
    map.resolve().unwrap()
}

#[test]
fn training_through_the_store_matches_the_dense_oracle_bitwise() {
    for (sampler, rate) in [("FullClasses", "1"), ("ClassSubset", "1/4"), ("BatchSubset", "1/2")] {
        let dense = run_experiment(&small_experiment(sampler, rate, 0)).unwrap();
        let sharded = run_experiment(&small_experiment(sampler, rate, 3)).unwrap();
        assert_eq!(dense.final_weights.as_slice(), sharded.final_weights.as_slice(), "{sampler}");
        assert_eq!(dense.final_versions, sharded.final_versions);

        let init = dsoftmax::trainer::init_class_weights(1, 20, 16);
        let store = Arc::new(ShardedStore::new(&init, 2).unwrap());
        let handle = PsServer::bind("127.0.0.1:0", store).unwrap().spawn().unwrap();
        let mut cfg = small_experiment(sampler, rate, 0);
        cfg.ps.addr = Some(handle.addr().to_string());
        let remote = run_experiment(&cfg).unwrap();
        assert_eq!(dense.final_weights.as_slice(), remote.final_weights.as_slice(), "{sampler} remote");
        handle.shutdown().unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn snapshot_round_trips_bitwise(k in 1usize..40, n in 1usize..12, shards in 1usize..5, seed in 0u64..1000, pushes in 0usize..5) {
        let store = ShardedStore::new(&weights(k, n, seed), shards).unwrap();
        for p in 0..pushes {
            let ups: Vec<Update> = (0..k).step_by(p + 1)
                .map(|c| Update { class_id: c, delta: vec![0.1 * (p as f64 + 1.0); n], expected_version: None })
                .collect();
            store.push_update(&ups).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dsps");
        store.snapshot(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(bytes.len(), snapshot_len(k, n));
        let loaded = ShardedStore::load(&path, shards).unwrap();
        prop_assert_eq!(loaded.encode_snapshot(), bytes);
        prop_assert_eq!(loaded.versions(), store.versions());
        let a: Vec<u64> = loaded.to_matrix().as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = store.to_matrix().as_slice().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}
