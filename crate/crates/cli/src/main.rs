//! `dsoftmax` command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for runtime failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use log::info;

use dsoftmax::analysis::{pairwise_cosine_stats, trace_loss_curve, CurveFamily, TERMINATION_GRID_STEP};
use dsoftmax::bench::{bench_loss_layer, emit_bench_csv, BenchSpec, Method, MIN_REPS};
use dsoftmax::config::{ConfigMap, DEFAULTS};
use dsoftmax::io::{csv_bytes, write_atomic};
use dsoftmax::losses::LossConfig;
use dsoftmax::math::{seeded_gaussian_matrix, Matrix, NormalizedRows, RngState};
use dsoftmax::param_server::net::{PsServer, RemoteStore};
use dsoftmax::param_server::ShardedStore;
use dsoftmax::sampling::parse_rate;
use dsoftmax::trainer::{init_class_weights, metrics_csv, run_experiment, run_sampling_sweep, sweep_csv, STREAM_WEIGHTS};
use dsoftmax::{Error, LossKind, Result};

fn config_args(mut cmd: Command) -> Command {
    cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .value_parser(value_parser!(PathBuf))
                .help("Flat key = value configuration file"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("Override any configuration key"),
        );
    for &(key, default) in DEFAULTS {
        let mut arg = Arg::new(key)
            .long(key)
            .value_name("VALUE")
            .action(ArgAction::Append)
            .allow_hyphen_values(true)
            .help(format!("Configuration key (default: {default:?})"));
        if key == "deterministic" {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn cli() -> Command {
    let list = |id: &'static str, default: &'static str, help: &'static str| {
        Arg::new(id).long(id).value_name("LIST").default_value(default).help(help)
    };
    let num = |id: &'static str, default: &'static str| Arg::new(id).long(id).value_name("N").default_value(default);
    let out = |default: &'static str| {
        Arg::new("out")
            .long("out")
            .value_name("PATH")
            .default_value(default)
            .value_parser(value_parser!(PathBuf))
    };
    let loss_args = |cmd: Command| {
        cmd.arg(num("s", "32"))
            .arg(num("d", "0.9"))
            .arg(num("m1", "4"))
            .arg(num("m2", "0.5"))
            .arg(num("m3", "0.35"))
    };
    let grid_args = |cmd: Command| {
        cmd.arg(num("lo", "-1").allow_hyphen_values(true))
            .arg(num("hi", "1").allow_hyphen_values(true))
            .arg(num("step", "0.01"))
    };

    Command::new("dsoftmax")
        .about("Dissected softmax losses: training, analysis, benchmarks and a weight store")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .args_override_self(true)
        .subcommand(
            config_args(Command::new("train").about("Train on synthetic data; writes metrics.csv and weights.dsps"))
                .arg(out("runs/train").help("Output directory")),
        )
        .subcommand(
            config_args(Command::new("sweep").about("One training run per sampling rate"))
                .arg(list("rates", "1,1/2,1/4,1/8,1/16,1/32,1/64", "Sampling rates"))
                .arg(out("sweep.csv")),
        )
        .subcommand(
            Command::new("bench")
                .about("Time the loss layer (sampling, fetch, activations, loss, chain rule)")
                .arg(list("methods", "D-Softmax,D-Softmax-K,Softmax", "Methods to time"))
                .arg(list("classes", "100000", "Class counts K"))
                .arg(num("batch", "64"))
                .arg(list("rates", "1", "Sampling rates (ignored by full methods)"))
                .arg(num("reps", "5"))
                .arg(num("dim", "64"))
                .arg(num("seed", "1"))
                .arg(Arg::new("parallel").long("parallel").action(ArgAction::SetTrue).help("Parallel activations"))
                .arg(out("bench.csv")),
        )
        .subcommand(grid_args(loss_args(
            Command::new("curves")
                .about("Loss value against one activation with the rest held fixed")
                .arg(Arg::new("kind").long("kind").default_value("Softmax"))
                .arg(Arg::new("family").long("family").default_value("intra").value_parser(["intra", "inter"]))
                .arg(list("log-m", "8,16,24", "log of the fixed negative mass (intra) or M_n (inter)"))
                .arg(num("z-y", "0.5").allow_hyphen_values(true).help("Fixed positive activation (inter)"))
                .arg(out("curves").help("Output directory")),
        )))
        .subcommand(grid_args(loss_args(
            Command::new("termination")
                .about("Inter-class termination point d' against z_y")
                .arg(list("kinds", "Softmax,ArcFace,DSoftmax", "Loss kinds"))
                .arg(list("log-mn", "16", "log of the remaining negative mass M_n"))
                .arg(out("termination").help("Output directory")),
        )))
        .subcommand(
            Command::new("weight-stats")
                .about("Pairwise class-weight cosine statistics")
                .arg(
                    Arg::new("snapshot")
                        .long("snapshot")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .help("Weights snapshot; fresh Gaussian weights when absent"),
                )
                .arg(num("classes", "10000"))
                .arg(num("dim", "256"))
                .arg(num("pairs", "1000000"))
                .arg(num("seed", "1"))
                .arg(out("weight_stats.csv")),
        )
        .subcommand(
            Command::new("ps-serve")
                .about("Serve a sharded weight store over TCP")
                .arg(Arg::new("bind").long("bind").default_value("127.0.0.1:7070"))
                .arg(num("shards", "4"))
                .arg(num("classes", "1000"))
                .arg(num("dim", "64"))
                .arg(num("seed", "1"))
                .arg(
                    Arg::new("snapshot")
                        .long("snapshot")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .help("Load weights from a snapshot instead of initialising them"),
                )
                .arg(num("log-every", "10").help("Seconds between counter log lines")),
        )
        .subcommand(
            Command::new("snapshot-tool")
                .about("Create, inspect and export weight snapshots")
                .subcommand_required(true)
                .subcommand(
                    Command::new("init")
                        .about("Write Gaussian initial weights")
                        .arg(num("classes", "1000"))
                        .arg(num("dim", "64"))
                        .arg(num("seed", "1"))
                        .arg(out("weights.dsps")),
                )
                .subcommand(Command::new("info").about("Print the header and summary statistics").arg(path_arg()))
                .subcommand(
                    Command::new("export")
                        .about("Write class_id, version and weights as CSV")
                        .arg(path_arg())
                        .arg(out("weights.csv")),
                )
                .subcommand(
                    Command::new("remote")
                        .about("Ask a running store server to write a snapshot on its side")
                        .arg(Arg::new("addr").long("addr").required(true))
                        .arg(Arg::new("path").long("path").required(true)),
                ),
        )
}

fn path_arg() -> Arg {
    Arg::new("path").required(true).value_parser(value_parser!(PathBuf))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = cli().get_matches();
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("train", sub)) => cmd_train(sub),
        Some(("sweep", sub)) => cmd_sweep(sub),
        Some(("bench", sub)) => cmd_bench(sub),
        Some(("curves", sub)) => cmd_curves(sub),
        Some(("termination", sub)) => cmd_termination(sub),
        Some(("weight-stats", sub)) => cmd_weight_stats(sub),
        Some(("ps-serve", sub)) => cmd_ps_serve(sub),
        Some(("snapshot-tool", sub)) => cmd_snapshot_tool(sub),
        _ => unreachable!("clap enforces a subcommand"),
    }
}

fn parsed<T: std::str::FromStr>(m: &ArgMatches, id: &str) -> Result<T> {
    let raw = m.get_one::<String>(id).expect("argument has a default");
    raw.trim()
        .parse()
        .map_err(|_| Error::config(id, format!("cannot parse `{raw}`")))
}

fn parsed_list<T: std::str::FromStr>(m: &ArgMatches, id: &str) -> Result<Vec<T>> {
    let raw = m.get_one::<String>(id).expect("argument has a default");
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(id, format!("cannot parse `{s}`")))
        })
        .collect()
}

fn rate_list(m: &ArgMatches, id: &str) -> Result<Vec<f64>> {
    let raw = m.get_one::<String>(id).expect("argument has a default");
    raw.split(',').filter(|s| !s.trim().is_empty()).map(parse_rate).collect()
}

fn out_path(m: &ArgMatches) -> &Path {
    m.get_one::<PathBuf>("out").expect("argument has a default")
}

/// Config file first, then `--set` and dotted flags in command-line order.
fn resolve_config(m: &ArgMatches) -> Result<(ConfigMap, dsoftmax::config::ExperimentConfig)> {
    let mut map = match m.get_one::<PathBuf>("config") {
        Some(p) => ConfigMap::from_file(p)?,
        None => ConfigMap::default(),
    };
    let mut overrides: Vec<(usize, String, String)> = Vec::new();
    if let (Some(vals), Some(idx)) = (m.get_many::<String>("set"), m.indices_of("set")) {
        for (v, i) in vals.zip(idx) {
            let (k, val) = v
                .split_once('=')
                .ok_or_else(|| Error::config("set", format!("expected KEY=VALUE, got `{v}`")))?;
            overrides.push((i, k.trim().to_owned(), val.to_owned()));
        }
    }
    for &(key, _) in DEFAULTS {
        if let (Some(vals), Some(idx)) = (m.get_many::<String>(key), m.indices_of(key)) {
            for (v, i) in vals.zip(idx) {
                overrides.push((i, key.to_owned(), v.clone()));
            }
        }
    }
    overrides.sort_by_key(|o| o.0);
    for (_, k, v) in overrides {
        map.set(&k, &v)?;
    }
    let cfg = map.resolve()?;
    eprintln!("# resolved configuration");
    for (k, v) in map.iter() {
        eprintln!("{k} = {v}");
    }
    eprintln!("# derived: loss.eps = e^(s*d) = {:e}", cfg.train.loss.eps());
    eprintln!("# seed = {}", cfg.train.seed);
    Ok((map, cfg))
}

fn config_comments(map: &ConfigMap, seed: u64) -> Vec<String> {
    let mut c = vec![format!("seed={seed}")];
    c.extend(map.iter().map(|(k, v)| format!("{k}={v}")));
    c
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let (map, cfg) = resolve_config(m)?;
    let out = out_path(m);
    let run = run_experiment(&cfg)?;
    let comments = config_comments(&map, cfg.train.seed);
    let metrics = metrics_csv(&run.run.records, &comments)?;
    let snapshot = ShardedStore::with_versions(&run.final_weights, &run.final_versions, 1)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("metrics.csv"), &metrics)?;
    snapshot.snapshot(&out.join("weights.dsps"))?;
    if let Some(last) = run.run.records.last() {
        println!(
            "step={} mean_intra_cos={:.4} weight_cos_mean={:.4} weight_cos_std={:.4} pair_accuracy={:.4}",
            last.step, last.mean_intra_cos, last.weight_cos_mean, last.weight_cos_std, last.pair_accuracy
        );
    }
    info!("wrote {} and {}", out.join("metrics.csv").display(), out.join("weights.dsps").display());
    Ok(())
}

fn cmd_sweep(m: &ArgMatches) -> Result<()> {
    let (map, cfg) = resolve_config(m)?;
    let rates = rate_list(m, "rates")?;
    let rows = run_sampling_sweep(&cfg, &rates)?;
    let csv = sweep_csv(&rows, &config_comments(&map, cfg.train.seed))?;
    write_atomic(out_path(m), &csv)?;
    for r in &rows {
        println!(
            "rate={} mean_intra_cos={:.4} weight_cos_std={:.4} pair_accuracy={:.4}",
            r.rate, r.last.mean_intra_cos, r.last.weight_cos_std, r.last.pair_accuracy
        );
    }
    Ok(())
}

fn cmd_bench(m: &ArgMatches) -> Result<()> {
    let methods: Vec<Method> = parsed_list(m, "methods")?;
    let classes: Vec<usize> = parsed_list(m, "classes")?;
    let rates = rate_list(m, "rates")?;
    let batch: usize = parsed(m, "batch")?;
    let reps: usize = parsed(m, "reps")?;
    let dim: usize = parsed(m, "dim")?;
    let seed: u64 = parsed(m, "seed")?;
    if reps < MIN_REPS {
        return Err(Error::config("reps", format!("need at least {MIN_REPS}")));
    }
    eprintln!("# seed = {seed}");
    let mut results = Vec::new();
    for &method in &methods {
        for &k in &classes {
            let mut done_full = false;
            for &rate in &rates {
                if method.sampler() == dsoftmax::SamplerKind::FullClasses {
                    if done_full {
                        continue;
                    }
                    done_full = true;
                }
                let spec = BenchSpec {
                    dim,
                    parallel: m.get_flag("parallel"),
                    ..BenchSpec::new(method, k, batch, rate, reps)
                };
                let mut rng = RngState::new(seed);
                let r = bench_loss_layer(&spec, &mut rng)?;
                println!(
                    "{} K={} B={} rate={} min={:.6}s mean={:.6}s median={:.6}s",
                    r.kind,
                    r.num_classes,
                    r.batch,
                    r.rate,
                    r.min_s,
                    r.mean_s,
                    r.median_s.unwrap_or(f64::NAN)
                );
                results.push(r);
            }
        }
    }
    let comments = vec![
        format!("seed={seed}"),
        format!("dim={dim}"),
        format!("parallel={}", m.get_flag("parallel")),
        "loss-layer time only; encoder excluded".to_owned(),
    ];
    write_atomic(out_path(m), &emit_bench_csv(&results, &comments)?)
}

fn loss_config(m: &ArgMatches, kind: LossKind) -> Result<LossConfig> {
    LossConfig::new(kind, parsed(m, "s")?, parsed(m, "d")?)?.with_margins(parsed(m, "m1")?, parsed(m, "m2")?, parsed(m, "m3")?)
}

fn grid(m: &ArgMatches) -> Result<(f64, f64, f64)> {
    Ok((parsed(m, "lo")?, parsed(m, "hi")?, parsed(m, "step")?))
}

fn file_tag(v: f64) -> String {
    v.to_string().replace('-', "m").replace('.', "p")
}

fn cmd_curves(m: &ArgMatches) -> Result<()> {
    let kind: LossKind = parsed(m, "kind")?;
    let cfg = loss_config(m, kind)?;
    let (lo, hi, step) = grid(m)?;
    let logs: Vec<f64> = parsed_list(m, "log-m")?;
    let z_y: f64 = parsed(m, "z-y")?;
    let family = m.get_one::<String>("family").unwrap().as_str();
    let dir = out_path(m);
    let mut files = Vec::new();
    for &lm in &logs {
        let (fam, name) = if family == "intra" {
            (CurveFamily::Intra { log_m: lm }, format!("{kind}_intra_logM{}.csv", file_tag(lm)))
        } else {
            (
                CurveFamily::Inter { z_y, log_mn: lm },
                format!("{kind}_inter_zy{}_logMn{}.csv", file_tag(z_y), file_tag(lm)),
            )
        };
        let trace = trace_loss_curve(&cfg, fam, lo, hi, step)?;
        println!(
            "{fam}: termination {}",
            trace.termination.map_or("none".to_owned(), |t| format!("{t:.6}"))
        );
        files.push((name, trace.to_csv()?));
    }
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}

fn cmd_termination(m: &ArgMatches) -> Result<()> {
    let kinds: Vec<LossKind> = parsed_list(m, "kinds")?;
    let logs: Vec<f64> = parsed_list(m, "log-mn")?;
    let (lo, hi, step) = grid(m)?;
    let dir = out_path(m);
    let mut files = Vec::new();
    for &kind in &kinds {
        let cfg = loss_config(m, kind)?;
        for &lm in &logs {
            let trace = trace_loss_curve(&cfg, CurveFamily::InterTermination { log_mn: lm }, lo, hi, step)?;
            let (mn, mx) = trace
                .y
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            println!("{kind} log_Mn={lm}: d' ranges over [{mn:.4}, {mx:.4}] (grid step {TERMINATION_GRID_STEP})");
            files.push((format!("termination_{kind}_logMn{}.csv", file_tag(lm)), trace.to_csv()?));
        }
    }
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}

fn cmd_weight_stats(m: &ArgMatches) -> Result<()> {
    let seed: u64 = parsed(m, "seed")?;
    let pairs: usize = parsed(m, "pairs")?;
    let (weights, source) = match m.get_one::<PathBuf>("snapshot") {
        Some(p) => (ShardedStore::load(p, 1)?.to_matrix(), format!("snapshot={}", p.display())),
        None => {
            let k: usize = parsed(m, "classes")?;
            let n: usize = parsed(m, "dim")?;
            let mut rng = RngState::with_stream(seed, STREAM_WEIGHTS);
            (seeded_gaussian_matrix(k, n, &mut rng), format!("gaussian K={k} n={n}"))
        }
    };
    eprintln!("# seed = {seed}");
    let stats = pairwise_cosine_stats(&weights, pairs, &mut RngState::new(seed))?;
    println!(
        "K={} n={} pairs={} mean={:.6} std={:.6}",
        weights.rows(),
        weights.cols(),
        stats.pairs,
        stats.mean,
        stats.std
    );
    let csv = stats.to_csv(&[format!("seed={seed}"), source])?;
    write_atomic(out_path(m), &csv)
}

fn cmd_ps_serve(m: &ArgMatches) -> Result<()> {
    let shards: usize = parsed(m, "shards")?;
    let store = match m.get_one::<PathBuf>("snapshot") {
        Some(p) => ShardedStore::load(p, shards)?,
        None => {
            let seed: u64 = parsed(m, "seed")?;
            eprintln!("# seed = {seed}");
            ShardedStore::new(&init_class_weights(seed, parsed(m, "classes")?, parsed(m, "dim")?), shards)?
        }
    };
    let store = Arc::new(store);
    let bind = m.get_one::<String>("bind").unwrap();
    let server = PsServer::bind(bind.as_str(), Arc::clone(&store))?;
    println!(
        "serving K={} n={} shards={} on {}",
        store.num_classes(),
        store.dim(),
        shards,
        server.local_addr()?
    );
    let every: u64 = parsed(m, "log-every")?;
    if every > 0 {
        let s = Arc::clone(&store);
        thread::spawn(move || loop {
            thread::sleep(Duration::from_secs(every));
            info!("{}", s.counters().summary());
        });
    }
    server.serve()
}

fn cmd_snapshot_tool(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("init", sub)) => {
            let seed: u64 = parsed(sub, "seed")?;
            eprintln!("# seed = {seed}");
            let w = init_class_weights(seed, parsed(sub, "classes")?, parsed(sub, "dim")?);
            ShardedStore::new(&w, 1)?.snapshot(out_path(sub))
        }
        Some(("info", sub)) => {
            let store = ShardedStore::load(sub.get_one::<PathBuf>("path").unwrap(), 1)?;
            let versions = store.versions();
            let w = store.to_matrix();
            let norms = NormalizedRows::new(&w, "weight")?.norms;
            let (lo, hi) = norms
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            println!("classes={} dim={}", store.num_classes(), store.dim());
            println!(
                "updates={} max_version={}",
                versions.iter().sum::<u64>(),
                versions.iter().max().copied().unwrap_or(0)
            );
            println!("weight_norm_min={lo:.6} weight_norm_max={hi:.6}");
            Ok(())
        }
        Some(("export", sub)) => {
            let store = ShardedStore::load(sub.get_one::<PathBuf>("path").unwrap(), 1)?;
            write_atomic(out_path(sub), &export_csv(&store.to_matrix(), &store.versions())?)
        }
        Some(("remote", sub)) => {
            let mut client = RemoteStore::connect(sub.get_one::<String>("addr").unwrap().as_str())?;
            client.snapshot(sub.get_one::<String>("path").unwrap())?;
            let info = client.info();
            println!("server wrote a {}x{} snapshot", info.num_classes, info.dim);
            Ok(())
        }
        _ => unreachable!("clap enforces a subcommand"),
    }
}

fn export_csv(w: &Matrix, versions: &[u64]) -> Result<Vec<u8>> {
    let mut header = vec!["class_id".to_owned(), "version".to_owned()];
    header.extend((0..w.cols()).map(|j| format!("w{j}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..w.rows()).map(|i| {
        let mut r = vec![i.to_string(), versions[i].to_string()];
        r.extend(w.row(i).iter().map(f64::to_string));
        r
    });
    csv_bytes(&[], &header_refs, rows)
}
