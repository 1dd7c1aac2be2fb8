//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::HashSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use dsoftmax::analysis::{intra_curve_gradient, intra_curve_value, intra_termination_point, pairwise_cosine_stats};
use dsoftmax::bench::{bench_loss_layer, BenchSpec, Method};
use dsoftmax::config::{ConfigMap, ExperimentConfig};
use dsoftmax::losses::compute_loss;
use dsoftmax::math::seeded_gaussian_matrix;
use dsoftmax::param_server::net::{PsServer, RemoteStore};
use dsoftmax::param_server::protocol::{Request, Response};
use dsoftmax::param_server::ShardedStore;
use dsoftmax::sampling::{round_half_up, sample_batch_b, sample_classes_k};
use dsoftmax::trainer::{run_experiment, ExperimentRun, MetricsRecord};
use dsoftmax::{ActivationBatch, InterSelection, LossConfig, LossKind, Matrix, RngState};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget_s: f64, what: &str) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < budget_s,
        format!("{what} took {:.1}s, budget {budget_s}s", elapsed.as_secs_f64()),
    )
}

fn gradient_oracle() -> Outcome {
    const STEP: f64 = 1e-6;
    let start = Instant::now();
    let mut rng = RngState::new(2024);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for kind in LossKind::ALL {
        for s in [1.0, 8.0, 32.0] {
            let cfg = LossConfig::new(kind, s, 0.9).map_err(|e| e.to_string())?;
            for _ in 0..20 {
                let (rows, cols) = (4, 9);
                let data = (0..rows * cols).map(|_| rng.random_range(-0.95..0.95)).collect();
                let z = Matrix::new(rows, cols, data).unwrap();
                let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
                let loss = |z: &Matrix| {
                    let b = ActivationBatch::with_labels(z.clone(), &labels).unwrap();
                    compute_loss(&b, &cfg, &InterSelection::default()).unwrap()
                };
                let out = loss(&z);
                for i in 0..rows {
                    for j in 0..cols {
                        if kind.is_hybrid() && j == labels[i] {
                            continue;
                        }
                        let (mut p, mut m) = (z.clone(), z.clone());
                        p.set(i, j, z.get(i, j) + STEP);
                        m.set(i, j, z.get(i, j) - STEP);
                        let numeric = (loss(&p).per_row[i] - loss(&m).per_row[i]) / (2.0 * STEP);
                        let analytic = out.dz.get(i, j);
                        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
                        if rel > worst {
                            worst = rel;
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    ensure(worst < 1e-5, format!("worst relative error {worst:.2e}"))?;
    within(start.elapsed(), 10.0, "gradient oracle")?;
    Ok(format!(
        "{checked} entries, worst relative error {worst:.2e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn termination_math() -> Outcome {
    let (s, log_m) = (32.0, 16.0f64);
    let d = intra_termination_point(log_m.exp(), s);
    ensure(d == 0.5, format!("d = {d}"))?;
    let cfg = LossConfig::new(LossKind::Softmax, s, 0.9).unwrap();
    let g = intra_curve_gradient(&cfg, log_m, d);
    ensure((g + s / 2.0).abs() < 1e-9, format!("gradient at d is {g}"))?;
    let hi = d + 4.0 / s;
    let lo = d - 4.0 / s;
    let g_hi = intra_curve_gradient(&cfg, log_m, hi).abs();
    let g_lo = intra_curve_gradient(&cfg, log_m, lo).abs();
    ensure(g_hi < 0.02 * s, format!("|gradient| at d+4/s is {g_hi}"))?;
    ensure(g_lo > 0.96 * s, format!("|gradient| at d-4/s is {g_lo}"))?;
    let mut worst_left = 0.0f64;
    for i in 0..=1000 {
        let z = -1.0 + (lo + 1.0) * i as f64 / 1000.0;
        let gap = (intra_curve_value(&cfg, log_m, z) - (log_m - s * z)).abs();
        ensure(gap < 0.02 * s * (d - z), format!("left branch gap {gap} at z_y={z}"))?;
        worst_left = worst_left.max(gap / (0.02 * s * (d - z)));
        let zr = hi + (1.0 - hi) * i as f64 / 1000.0;
        let v = intra_curve_value(&cfg, log_m, zr);
        ensure(v < 0.02, format!("right branch value {v} at z_y={zr}"))?;
    }
    Ok(format!(
        "d=0.5, g(d)={g:.12}, |g(d+4/s)|={g_hi:.4}, |g(d-4/s)|={g_lo:.4}, left-branch gap at most {:.0}% of bound",
        100.0 * worst_left
    ))
}

fn orthogonality() -> Outcome {
    let start = Instant::now();
    let w = seeded_gaussian_matrix(10_000, 256, &mut RngState::new(1));
    let stats = pairwise_cosine_stats(&w, 1_000_000, &mut RngState::new(2)).map_err(|e| e.to_string())?;
    ensure(stats.pairs == 1_000_000, format!("{} pairs", stats.pairs))?;
    ensure(stats.mean.abs() < 0.005, format!("mean {}", stats.mean))?;
    ensure((0.055..=0.070).contains(&stats.std), format!("std {}", stats.std))?;
    within(start.elapsed(), 30.0, "weight statistics")?;
    Ok(format!(
        "mean {:.5}, std {:.5}, {:.2}s",
        stats.mean,
        stats.std,
        start.elapsed().as_secs_f64()
    ))
}

/// The synthetic task shared by criteria 4, 5 and 9 (library defaults).
fn synthetic(overrides: &[(&str, &str)]) -> ExperimentConfig {
    let mut map = ConfigMap::default();
    for (k, v) in overrides {
        map.set(k, v).unwrap();
    }
    map.resolve().unwrap()
}

struct Runs {
    d_softmax: ExperimentRun,
    softmax: ExperimentRun,
    intra_only: ExperimentRun,
    d_k: ExperimentRun,
    rand: ExperimentRun,
    seconds: Vec<(&'static str, f64)>,
}

fn train_all() -> Runs {
    let arms: [(&'static str, Vec<(&str, &str)>); 5] = [
        ("D-Softmax", vec![]),
        ("Softmax", vec![("loss.kind", "Softmax")]),
        ("intra-only", vec![("train.inter_weight", "0")]),
        ("D-Softmax-K 1/8", vec![("sampler.kind", "ClassSubset"), ("sampler.rate", "1/8")]),
        (
            "Rand-Softmax 1/8",
            vec![("loss.kind", "Softmax"), ("sampler.kind", "RandEntangled"), ("sampler.rate", "1/8")],
        ),
    ];
    let mut seconds = Vec::new();
    let mut runs: Vec<ExperimentRun> = arms
        .iter()
        .map(|(name, ov)| {
            let t = Instant::now();
            let cfg = synthetic(ov);
            assert_eq!((cfg.data.classes, cfg.train.embed_dim, cfg.train.batch_size, cfg.train.epochs), (100, 64, 64, 30));
            assert_eq!(cfg.train.loss.s(), 32.0);
            let run = run_experiment(&cfg).unwrap();
            seconds.push((*name, t.elapsed().as_secs_f64()));
            run
        })
        .collect();
    let rand = runs.pop().unwrap();
    let d_k = runs.pop().unwrap();
    let intra_only = runs.pop().unwrap();
    let softmax = runs.pop().unwrap();
    let d_softmax = runs.pop().unwrap();
    Runs { d_softmax, softmax, intra_only, d_k, rand, seconds }
}

fn last(run: &ExperimentRun) -> &MetricsRecord {
    run.run.records.last().unwrap()
}

fn entanglement(runs: &Runs) -> Outcome {
    let (d, s) = (last(&runs.d_softmax).mean_intra_cos, last(&runs.softmax).mean_intra_cos);
    ensure(d > 0.8, format!("D-Softmax mean intra cosine {d:.4}"))?;
    ensure(d - s >= 0.15, format!("gap {:.4} (D-Softmax {d:.4}, Softmax {s:.4})", d - s))?;
    let slowest = runs.seconds.iter().map(|x| x.1).fold(0.0, f64::max);
    ensure(slowest < 300.0, format!("slowest run {slowest:.1}s"))?;
    Ok(format!("D-Softmax {d:.4}, Softmax {s:.4}, gap {:.4}", d - s))
}

fn regularization(runs: &Runs) -> Outcome {
    let bound = 3.0 / 64f64.sqrt();
    let intra = last(&runs.intra_only).weight_cos_mean;
    let full = last(&runs.d_softmax);
    let dk = last(&runs.d_k);
    let start = runs.intra_only.run.records[0].weight_cos_mean;
    ensure(intra > bound, format!("intra-only weight cosine mean {intra:.4} <= {bound:.4}"))?;
    ensure(intra > start, "intra-only weight cosine mean did not rise")?;
    ensure(full.weight_cos_mean.abs() < bound, format!("D-Softmax weight cosine mean {:.4}", full.weight_cos_mean))?;
    let ratio = dk.weight_cos_std / full.weight_cos_std;
    ensure((ratio - 1.0).abs() <= 0.2, format!("std ratio {ratio:.4}"))?;
    Ok(format!(
        "intra-only mean {intra:.4} (from {start:.4}), full mean {:.4}, bound {bound:.4}; std 1/8 {:.4} vs full {:.4} (ratio {ratio:.3})",
        full.weight_cos_mean, dk.weight_cos_std, full.weight_cos_std
    ))
}

fn sampling_equivalences() -> Outcome {
    let base = synthetic(&[("train.epochs", "5")]);
    let full = run_experiment(&base).map_err(|e| e.to_string())?;
    let mut b_cfg = base.clone();
    b_cfg.train.sampler = dsoftmax::SamplerKind::BatchSubset;
    let b = run_experiment(&b_cfg).map_err(|e| e.to_string())?;
    ensure(full.run.records == b.run.records, "metrics differ")?;
    let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&full.final_weights) == bits(&b.final_weights), "final weights differ")?;

    let mut rng = RngState::new(77);
    for _ in 0..10_000 {
        let labels: Vec<usize> = (0..64).map(|_| rng.random_range(0..1000)).collect();
        let rate = [0.5, 0.25, 0.125, 1.0 / 64.0][rng.random_range(0..4)];
        let set = sample_classes_k(1000, &labels, rate, &mut rng).map_err(|e| e.to_string())?;
        let batch: HashSet<usize> = labels.into_iter().collect();
        ensure(set.class_indices.iter().all(|c| !batch.contains(c)), "S_K hit a batch label")?;
    }

    let labels: Vec<usize> = (0..256).map(|i| i * 331).collect();
    let sb = sample_batch_b(256, 1.0 / 64.0, &mut rng).unwrap().batch_rows.len();
    let sk = sample_classes_k(85_000, &labels, 1.0 / 64.0, &mut rng).unwrap().class_indices.len();
    ensure(sb == 4, format!("|S_B| = {sb}"))?;
    ensure(sk == round_half_up((85_000 - 256) as f64 / 64.0), format!("|S_K| = {sk}"))?;
    ensure((1250..=1350).contains(&sk), format!("|S_K| = {sk}"))?;
    Ok(format!("rate-1 B bitwise equal to full; 10000 disjoint draws; |S_B|={sb}, |S_K|={sk}"))
}

fn speedup() -> Outcome {
    let start = Instant::now();
    let time = |k: usize, rate: f64| -> Result<f64, String> {
        let spec = BenchSpec::new(Method::DSoftmaxK, k, 64, rate, 5);
        Ok(bench_loss_layer(&spec, &mut RngState::new(5)).map_err(|e| e.to_string())?.min_s)
    };
    let full = time(100_000, 1.0)?;
    let sampled = time(100_000, 1.0 / 64.0)?;
    let double = time(200_000, 1.0)?;
    let speed = full / sampled;
    let growth = double / full;
    ensure(speed >= 10.0, format!("rate 1/64 only {speed:.1}x faster"))?;
    ensure((1.6..=2.6).contains(&growth), format!("doubling K scaled time by {growth:.2}"))?;
    within(start.elapsed(), 120.0, "benchmarks")?;
    Ok(format!(
        "K=100000: rate 1 {full:.4}s, rate 1/64 {sampled:.4}s ({speed:.1}x); K 100000->200000 x{growth:.2}; {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn param_server_fidelity() -> Outcome {
    let mut cfg = synthetic(&[
        ("train.epochs", "3"),
        ("sampler.kind", "ClassSubset"),
        ("sampler.rate", "1/4"),
    ]);
    let dense = run_experiment(&cfg).map_err(|e| e.to_string())?;
    cfg.ps.shards = 4;
    let sharded = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&dense.final_weights) == bits(&sharded.final_weights), "store-backed weights differ")?;
    ensure(dense.run.records == sharded.run.records, "store-backed metrics differ")?;

    let store = Arc::new(ShardedStore::new(&sharded.final_weights, 4).unwrap());
    let handle = PsServer::bind("127.0.0.1:0", Arc::clone(&store)).unwrap().spawn().map_err(|e| e.to_string())?;
    let mut client = RemoteStore::connect(handle.addr()).map_err(|e| e.to_string())?;
    let ids: Vec<usize> = (0..100).rev().collect();
    let raw = client.roundtrip_raw(&Request::Fetch(ids.clone()).encode()).map_err(|e| e.to_string())?;
    let local = Response::Fetched { dim: 64, records: store.fetch(&ids).unwrap() }.encode();
    ensure(raw == local, "socket fetch bytes differ from in-process fetch")?;
    handle.shutdown().map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.dsps");
    let versioned = ShardedStore::with_versions(&sharded.final_weights, &sharded.final_versions, 4).unwrap();
    versioned.snapshot(&path).map_err(|e| e.to_string())?;
    let loaded = ShardedStore::load(&path, 3).map_err(|e| e.to_string())?;
    ensure(bits(&loaded.to_matrix()) == bits(&sharded.final_weights), "snapshot weights differ")?;
    ensure(loaded.versions() == sharded.final_versions, "snapshot versions differ")?;
    ensure(loaded.encode_snapshot() == std::fs::read(&path).unwrap(), "re-encoded snapshot differs")?;
    Ok(format!(
        "{} steps bitwise equal; {} fetched bytes equal; snapshot round trip exact",
        sharded.run.steps,
        raw.len()
    ))
}

fn rand_direction(runs: &Runs) -> Outcome {
    let (dk, rand) = (last(&runs.d_k).pair_accuracy, last(&runs.rand).pair_accuracy);
    ensure(dk >= rand, format!("D-Softmax-K {dk:.4} < Rand-Softmax {rand:.4}"))?;
    Ok(format!(
        "D-Softmax-K {dk:.4} >= Rand-Softmax {rand:.4} (mean intra cosine {:.4} vs {:.4})",
        last(&runs.d_k).mean_intra_cos,
        last(&runs.rand).mean_intra_cos
    ))
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    match &outcome {
        Ok(detail) => println!("criterion {id} {name}: PASS ({detail})"),
        Err(why) => println!("criterion {id} {name}: FAIL ({why})"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters should not trigger the full suite
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    ok &= run(1, "gradient oracle", gradient_oracle);
    ok &= run(2, "termination-point math", termination_math);
    ok &= run(3, "orthogonality statistics", orthogonality);
    let runs = panic::catch_unwind(train_all).ok();
    if let Some(r) = &runs {
        let times: Vec<String> = r.seconds.iter().map(|(n, s)| format!("{n} {s:.1}s")).collect();
        println!("synthetic runs: {}", times.join(", "));
    }
    let missing = || Err::<String, String>("synthetic training failed".into());
    ok &= run(4, "entanglement", || runs.as_ref().map_or_else(missing, entanglement));
    ok &= run(5, "inter-term regularization", || runs.as_ref().map_or_else(missing, regularization));
    ok &= run(6, "sampling equivalences", sampling_equivalences);
    ok &= run(7, "speedup", speedup);
    ok &= run(8, "parameter-server fidelity", param_server_fidelity);
    ok &= run(9, "Rand-Softmax direction", || runs.as_ref().map_or_else(missing, rand_direction));
    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
