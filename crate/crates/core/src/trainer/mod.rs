//! Synthetic embedding training used to compare the losses.
//!
//! Raw features come from a [`SyntheticDataset`], pass through an [`Encoder`], and are
//! scored against class weights held by a [`WeightBackend`]. Every step samples the
//! columns for the batch, fetches those weights, computes the loss and its gradients,
//! and pushes momentum-SGD deltas back to the backend.

mod data;
mod encoder;
mod eval;

use std::time::Instant;

use rand::seq::SliceRandom;

pub use data::{generate_synthetic_dataset, SyntheticDataset};
pub use encoder::Encoder;
pub use eval::{best_threshold_accuracy, evaluate_pairs};

use crate::analysis::pairwise_cosine_stats;
use crate::config::{ExperimentConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::io::csv_bytes;
use crate::losses::{chain_normalized, compute_loss, d_softmax_inter, d_softmax_intra, ActivationBatch};
use crate::math::{cosine_from_unit, seeded_gaussian_matrix, Matrix, NormalizedRows, RngState};
use crate::param_server::net::RemoteStore;
use crate::param_server::{DenseWeights, ShardedStore, WeightBackend};
use crate::sampling::{plan_columns, ColumnPlan, SamplerKind};

/// RNG stream ids derived from the experiment seed.
pub const STREAM_DATA: u64 = 0;
pub const STREAM_WEIGHTS: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_SAMPLER: u64 = 3;
pub const STREAM_EVAL: u64 = 4;
pub const STREAM_ENCODER: u64 = 5;

/// Pair budget for the class-weight cosine statistics.
pub const WEIGHT_PAIR_BUDGET: usize = 100_000;

/// Embeddings or weights shorter than this abort training.
pub const MIN_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub intra_loss: f64,
    pub inter_loss: f64,
    pub mean_intra_cos: f64,
    pub weight_cos_mean: f64,
    pub weight_cos_std: f64,
    pub pair_accuracy: f64,
    /// Wall-clock seconds per step since the previous record; blank in deterministic mode.
    pub step_seconds: Option<f64>,
    /// The sampling, fetch, activation, loss and chain-rule part of `step_seconds`.
    pub loss_layer_seconds: Option<f64>,
}

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "epoch",
    "lr",
    "intra_loss",
    "inter_loss",
    "mean_intra_cos",
    "weight_cos_mean",
    "weight_cos_std",
    "pair_accuracy",
    "step_s",
    "loss_layer_s",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.lr.to_string(),
            self.intra_loss.to_string(),
            self.inter_loss.to_string(),
            self.mean_intra_cos.to_string(),
            self.weight_cos_mean.to_string(),
            self.weight_cos_std.to_string(),
            self.pair_accuracy.to_string(),
            opt(self.step_seconds),
            opt(self.loss_layer_seconds),
        ]
    }

    /// The same record without wall-clock fields, for comparisons across runs.
    pub fn without_timing(&self) -> Self {
        Self {
            step_seconds: None,
            loss_layer_seconds: None,
            ..self.clone()
        }
    }
}

pub fn metrics_csv(records: &[MetricsRecord], comments: &[String]) -> Result<Vec<u8>> {
    csv_bytes(comments, &METRICS_HEADER, records.iter().map(MetricsRecord::fields))
}

/// Global diagnostics for the current encoder and class weights.
pub fn evaluate_state(
    cfg: &TrainConfig,
    data: &SyntheticDataset,
    encoder: &Encoder,
    weights: &Matrix,
) -> Result<(f64, f64, f64, f64, f64, f64)> {
    let emb = encoder.forward(&data.features)?;
    let fx = NormalizedRows::new(&emb, "feature")?;
    let fw = NormalizedRows::new(weights, "weight")?;
    let z = cosine_from_unit(&fx.unit, &fw.unit, false)?;
    let n = data.len() as f64;
    let (mut intra, mut inter, mut cos) = (0.0, 0.0, 0.0);
    let mut negs = Vec::with_capacity(z.cols());
    for (i, &y) in data.labels.iter().enumerate() {
        let row = z.row(i);
        cos += row[y];
        intra += d_softmax_intra(row[y], &cfg.loss).0;
        negs.clear();
        negs.extend(row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| v));
        inter += d_softmax_inter(&negs, &cfg.loss).0;
    }
    let mut rng = RngState::with_stream(cfg.seed, STREAM_EVAL);
    let ws = pairwise_cosine_stats(weights, WEIGHT_PAIR_BUDGET, &mut rng)?;
    let acc = evaluate_pairs(&emb, &data.labels, cfg.eval_pairs, &mut rng)?;
    Ok((intra / n, inter / n, cos / n, ws.mean, ws.std, acc))
}

/// Initial class weights: unnormalized standard Gaussians.
pub fn init_class_weights(seed: u64, num_classes: usize, dim: usize) -> Matrix {
    seeded_gaussian_matrix(num_classes, dim, &mut RngState::with_stream(seed, STREAM_WEIGHTS))
}

pub fn dataset_for(cfg: &ExperimentConfig) -> Result<SyntheticDataset> {
    let d = &cfg.data;
    let mut rng = RngState::with_stream(cfg.train.seed, STREAM_DATA);
    generate_synthetic_dataset(d.classes, d.dim, d.per_class, d.noise, &mut rng)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub records: Vec<MetricsRecord>,
    pub encoder: Encoder,
    pub steps: usize,
}

/// Trains for `cfg.epochs` epochs. Class weights are read from and written to `backend`.
pub fn train(cfg: &TrainConfig, data: &SyntheticDataset, backend: &mut dyn WeightBackend) -> Result<TrainRun> {
    cfg.validate()?;
    if backend.num_classes() != data.num_classes() {
        return Err(Error::Shape {
            context: "train",
            expected: format!("{} classes", data.num_classes()),
            got: format!("{} classes in the weight store", backend.num_classes()),
        });
    }
    if backend.dim() != cfg.embed_dim {
        return Err(Error::Dimension { expected: cfg.embed_dim, got: backend.dim() });
    }
    let k = data.num_classes();
    let mut encoder = Encoder::new(
        cfg.encoder,
        data.dim(),
        cfg.embed_dim,
        &mut RngState::with_stream(cfg.seed, STREAM_ENCODER),
    )?;
    let mut shuffle_rng = RngState::with_stream(cfg.seed, STREAM_SHUFFLE);
    let mut sampler_rng = RngState::with_stream(cfg.seed, STREAM_SAMPLER);
    let mut velocity = Matrix::zeros(k, cfg.embed_dim);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut records = Vec::new();
    let mut since = (0usize, 0.0f64, 0.0f64);
    let mut record = |step: usize, epoch: usize, lr: f64, enc: &Encoder, backend: &mut dyn WeightBackend, since: &mut (usize, f64, f64)| -> Result<()> {
        let w = backend.export_all()?;
        let (intra_loss, inter_loss, mean_intra_cos, weight_cos_mean, weight_cos_std, pair_accuracy) =
            evaluate_state(cfg, data, enc, &w)?;
        let timing = |t: f64| (!cfg.deterministic && since.0 > 0).then(|| t / since.0 as f64);
        records.push(MetricsRecord {
            step,
            epoch,
            lr,
            intra_loss,
            inter_loss,
            mean_intra_cos,
            weight_cos_mean,
            weight_cos_std,
            pair_accuracy,
            step_seconds: timing(since.1),
            loss_layer_seconds: timing(since.2),
        });
        *since = (0, 0.0, 0.0);
        Ok(())
    };

    record(0, 0, cfg.lr, &encoder, backend, &mut since)?;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = current_lr(cfg, epoch);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let t_step = Instant::now();
            let x = data.features.gather_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let emb = encoder.forward(&x)?;

            let t_layer = Instant::now();
            let plan = plan_columns(k, &labels, cfg.sampler, cfg.rate, cfg.inter_weight, &mut sampler_rng)?;
            let fetched = backend.fetch_rows(&plan.columns)?;
            let (dx, dw) = loss_layer(cfg, &emb, &fetched.weights, &plan)?;
            let layer_secs = t_layer.elapsed().as_secs_f64();

            let mut delta = Matrix::zeros(plan.columns.len(), cfg.embed_dim);
            for (r, &c) in plan.columns.iter().enumerate() {
                let v = velocity.row_mut(c);
                for ((vj, &g), dj) in v.iter_mut().zip(dw.row(r)).zip(delta.row_mut(r)) {
                    *vj = cfg.momentum * *vj + g;
                    *dj = -lr * *vj;
                }
            }
            let expected = cfg.deterministic.then_some(fetched.versions.as_slice());
            backend.apply_deltas(&plan.columns, &delta, expected)?;
            encoder.step(&x, &dx, lr, cfg.momentum);

            step += 1;
            since.0 += 1;
            since.1 += t_step.elapsed().as_secs_f64();
            since.2 += layer_secs;
            if step % cfg.metrics_every == 0 || step == total_steps {
                record(step, epoch + 1, lr, &encoder, backend, &mut since)?;
            }
        }
    }
    Ok(TrainRun { records, encoder, steps: step })
}

fn current_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    match epoch.checked_div(cfg.lr_step) {
        Some(drops) => cfg.lr * cfg.lr_gamma.powi(drops as i32),
        None => cfg.lr,
    }
}

/// Activations, loss and mean-reduced gradients for one batch: returns the gradients
/// with respect to the embeddings and to the fetched weight rows.
pub fn loss_layer(cfg: &TrainConfig, emb: &Matrix, weights: &Matrix, plan: &ColumnPlan) -> Result<(Matrix, Matrix)> {
    let fx = NormalizedRows::new(emb, "feature")?;
    let fw = NormalizedRows::new(weights, "weight")?;
    if fx.min_norm() < MIN_NORM || fw.min_norm() < MIN_NORM {
        return Err(Error::Degenerate(format!(
            "norm collapsed: feature {:e}, weight {:e}",
            fx.min_norm(),
            fw.min_norm()
        )));
    }
    let z = cosine_from_unit(&fx.unit, &fw.unit, false)?;
    let batch = ActivationBatch::new(z, plan.positive_col.clone())?;
    let out = compute_loss(&batch, &cfg.loss, &plan.inter)?;
    if !out.mean.is_finite() {
        return Err(Error::NonFinite { context: "training loss" });
    }
    let mut dz = out.dz;
    let inv_b = 1.0 / emb.rows() as f64;
    dz.as_mut_slice().iter_mut().for_each(|g| *g *= inv_b);
    chain_normalized(&dz, &fx, &fw)
}

/// Outcome of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub dataset: SyntheticDataset,
    pub run: TrainRun,
    pub final_weights: Matrix,
    pub final_versions: Vec<u64>,
}

/// Builds the dataset and weight backend described by `cfg` and trains.
///
/// `ps.shards = 0` keeps the weights in memory; otherwise they live in an in-process
/// [`ShardedStore`]. With `ps.addr` set the weights already held by that server are used.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let dataset = dataset_for(cfg)?;
    let (k, n) = (cfg.data.classes, cfg.train.embed_dim);
    let (run, final_weights, final_versions) = if let Some(addr) = &cfg.ps.addr {
        let mut remote = RemoteStore::connect(addr.as_str())?;
        let run = train(&cfg.train, &dataset, &mut remote)?;
        let ids: Vec<usize> = (0..remote.info().num_classes).collect();
        let fetched = remote.fetch_rows(&ids)?;
        (run, fetched.weights, fetched.versions)
    } else if cfg.ps.shards > 0 {
        let store = ShardedStore::new(&init_class_weights(cfg.train.seed, k, n), cfg.ps.shards)?;
        let mut backend = &store;
        let run = train(&cfg.train, &dataset, &mut backend)?;
        (run, store.to_matrix(), store.versions())
    } else {
        let mut dense = DenseWeights::new(init_class_weights(cfg.train.seed, k, n));
        let run = train(&cfg.train, &dataset, &mut dense)?;
        let versions = dense.versions().to_vec();
        (run, dense.weights, versions)
    };
    Ok(ExperimentRun { dataset, run, final_weights, final_versions })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rate: f64,
    pub last: MetricsRecord,
    /// Mean loss-layer seconds per step over the whole run; blank in deterministic mode.
    pub loss_layer_seconds: Option<f64>,
}

/// One training run per rate with identical seeds.
pub fn run_sampling_sweep(base: &ExperimentConfig, rates: &[f64]) -> Result<Vec<SweepRow>> {
    if rates.is_empty() {
        return Err(Error::Empty("run_sampling_sweep"));
    }
    if base.train.sampler == SamplerKind::FullClasses {
        return Err(Error::config("sampler.kind", "a sweep needs a sampling sampler kind"));
    }
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mut cfg = base.clone();
        cfg.train.rate = rate;
        let out = run_experiment(&cfg)?;
        let recs = &out.run.records;
        let last = recs.last().cloned().ok_or(Error::Empty("training records"))?;
        let timed: Vec<f64> = recs.iter().filter_map(|r| r.loss_layer_seconds).collect();
        let loss_layer_seconds = (!timed.is_empty()).then(|| timed.iter().sum::<f64>() / timed.len() as f64);
        rows.push(SweepRow { rate, last, loss_layer_seconds });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: [&str; 9] = [
    "rate",
    "step",
    "intra_loss",
    "inter_loss",
    "mean_intra_cos",
    "weight_cos_mean",
    "weight_cos_std",
    "pair_accuracy",
    "loss_layer_s",
];

pub fn sweep_csv(rows: &[SweepRow], comments: &[String]) -> Result<Vec<u8>> {
    csv_bytes(
        comments,
        &SWEEP_HEADER,
        rows.iter().map(|r| {
            vec![
                r.rate.to_string(),
                r.last.step.to_string(),
                r.last.intra_loss.to_string(),
                r.last.inter_loss.to_string(),
                r.last.mean_intra_cos.to_string(),
                r.last.weight_cos_mean.to_string(),
                r.last.weight_cos_std.to_string(),
                r.last.pair_accuracy.to_string(),
                opt(r.loss_layer_seconds),
            ]
        }),
    )
}
