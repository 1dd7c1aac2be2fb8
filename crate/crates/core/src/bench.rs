//! Loss-layer timing.
//!
//! One timed pass covers sampling, fetching the sampled weight rows, cosine
//! activations, the loss forward and backward, and the chain rule back to raw
//! features and weights. The encoder is not part of it.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{csv_bytes, csv_reader};
use crate::losses::{chain_normalized, compute_loss, ActivationBatch, LossConfig, LossKind, DEFAULT_D, DEFAULT_SCALE};
use crate::math::{cosine_from_unit, seeded_gaussian_matrix, NormalizedRows, RngState};
use crate::param_server::{DenseWeights, WeightBackend};
use crate::sampling::{plan_columns, SamplerKind};

pub const MIN_REPS: usize = 5;
pub const DEFAULT_DIM: usize = 64;

/// A loss paired with the way its columns are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Softmax,
    SphereFace,
    CosFace,
    ArcFace,
    DSoftmax,
    DSoftmaxK,
    DSoftmaxB,
    RandSoftmax,
    RandArcFace,
    HybridSoftmaxInter,
    HybridArcInter,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Softmax,
        Method::SphereFace,
        Method::CosFace,
        Method::ArcFace,
        Method::DSoftmax,
        Method::DSoftmaxK,
        Method::DSoftmaxB,
        Method::RandSoftmax,
        Method::RandArcFace,
        Method::HybridSoftmaxInter,
        Method::HybridArcInter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Softmax => "Softmax",
            Method::SphereFace => "SphereFace",
            Method::CosFace => "CosFace",
            Method::ArcFace => "ArcFace",
            Method::DSoftmax => "D-Softmax",
            Method::DSoftmaxK => "D-Softmax-K",
            Method::DSoftmaxB => "D-Softmax-B",
            Method::RandSoftmax => "Rand-Softmax",
            Method::RandArcFace => "Rand-ArcFace",
            Method::HybridSoftmaxInter => "HybridSoftmaxInter",
            Method::HybridArcInter => "HybridArcInter",
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Method::Softmax | Method::RandSoftmax => LossKind::Softmax,
            Method::SphereFace => LossKind::SphereFace,
            Method::CosFace => LossKind::CosFace,
            Method::ArcFace | Method::RandArcFace => LossKind::ArcFace,
            Method::DSoftmax | Method::DSoftmaxK | Method::DSoftmaxB => LossKind::DSoftmax,
            Method::HybridSoftmaxInter => LossKind::HybridSoftmaxInter,
            Method::HybridArcInter => LossKind::HybridArcInter,
        }
    }

    pub fn sampler(self) -> SamplerKind {
        match self {
            Method::DSoftmaxK => SamplerKind::ClassSubset,
            Method::DSoftmaxB => SamplerKind::BatchSubset,
            Method::RandSoftmax | Method::RandArcFace => SamplerKind::RandEntangled,
            _ => SamplerKind::FullClasses,
        }
    }

    fn takes_rate(self) -> bool {
        self.sampler() != SamplerKind::FullClasses
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = |v: &str| v.replace(['-', '_'], "").to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| key(m.name()) == key(s.trim()))
            .ok_or_else(|| Error::config("bench.kind", format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub method: Method,
    pub num_classes: usize,
    pub batch: usize,
    pub rate: f64,
    pub reps: usize,
    pub dim: usize,
    /// Split activation rows across the rayon pool.
    pub parallel: bool,
}

impl BenchSpec {
    pub fn new(method: Method, num_classes: usize, batch: usize, rate: f64, reps: usize) -> Self {
        Self {
            method,
            num_classes,
            batch,
            rate,
            reps,
            dim: DEFAULT_DIM,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub kind: String,
    pub num_classes: usize,
    pub batch: usize,
    pub rate: f64,
    pub reps: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub min_s: f64,
    /// Bytes of class weights fetched per pass.
    pub bytes: u64,
    /// Not part of the CSV; `None` after parsing.
    pub median_s: Option<f64>,
}

/// Times `spec.reps` passes after one discarded warm-up pass. Features, weights and
/// labels are fixed Gaussian draws; only the sampling varies between passes.
pub fn bench_loss_layer(spec: &BenchSpec, rng: &mut RngState) -> Result<BenchResult> {
    if spec.reps < MIN_REPS {
        return Err(Error::config("reps", format!("need at least {MIN_REPS} repetitions")));
    }
    if spec.num_classes < 2 || spec.batch == 0 || spec.dim == 0 {
        return Err(Error::config("bench", "need K >= 2, B >= 1 and dim >= 1"));
    }
    let rate = if spec.method.takes_rate() { spec.rate } else { 1.0 };
    let cfg = LossConfig::new(spec.method.loss(), DEFAULT_SCALE, DEFAULT_D)?;
    let mut store = DenseWeights::new(seeded_gaussian_matrix(spec.num_classes, spec.dim, rng));
    let features = seeded_gaussian_matrix(spec.batch, spec.dim, rng);
    let labels: Vec<usize> = (0..spec.batch).map(|_| rng.random_range(0..spec.num_classes)).collect();

    let mut pass = |rng: &mut RngState| -> Result<u64> {
        let plan = plan_columns(spec.num_classes, &labels, spec.method.sampler(), rate, 1.0, rng)?;
        let fetched = store.fetch_rows(&plan.columns)?;
        let fx = NormalizedRows::new(&features, "feature")?;
        let fw = NormalizedRows::new(&fetched.weights, "weight")?;
        let z = cosine_from_unit(&fx.unit, &fw.unit, spec.parallel)?;
        let batch = ActivationBatch::new(z, plan.positive_col)?;
        let out = compute_loss(&batch, &cfg, &plan.inter)?;
        let (dx, dw) = chain_normalized(&out.dz, &fx, &fw)?;
        std::hint::black_box((dx, dw, out.mean));
        Ok((plan.columns.len() * spec.dim * 8) as u64)
    };

    let bytes = pass(rng)?;
    let mut times = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let t = Instant::now();
        pass(rng)?;
        times.push(t.elapsed().as_secs_f64());
    }
    let (mean_s, std_s, min_s, median_s) = summarize(&times);
    Ok(BenchResult {
        kind: spec.method.name().to_owned(),
        num_classes: spec.num_classes,
        batch: spec.batch,
        rate,
        reps: spec.reps,
        mean_s,
        std_s,
        min_s,
        bytes,
        median_s: Some(median_s),
    })
}

fn summarize(times: &[f64]) -> (f64, f64, f64, f64) {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    (mean, var.sqrt(), sorted[0], median)
}

pub const BENCH_HEADER: [&str; 9] = ["kind", "K", "B", "rate", "reps", "mean_s", "std_s", "min_s", "bytes"];

pub fn emit_bench_csv(results: &[BenchResult], comments: &[String]) -> Result<Vec<u8>> {
    if results.is_empty() {
        return Err(Error::Empty("emit_bench_csv"));
    }
    csv_bytes(
        comments,
        &BENCH_HEADER,
        results.iter().map(|r| {
            vec![
                r.kind.clone(),
                r.num_classes.to_string(),
                r.batch.to_string(),
                r.rate.to_string(),
                r.reps.to_string(),
                r.mean_s.to_string(),
                r.std_s.to_string(),
                r.min_s.to_string(),
                r.bytes.to_string(),
            ]
        }),
    )
}

pub fn parse_bench_csv(bytes: &[u8]) -> Result<Vec<BenchResult>> {
    let mut rdr = csv_reader(bytes);
    let header = rdr.headers()?.clone();
    if header.iter().ne(BENCH_HEADER) {
        return Err(Error::Format(format!("unexpected bench header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Format(format!("bad number `{}` in column {}", field(i), BENCH_HEADER[i])))
        };
        let int = |i: usize| -> Result<u64> {
            field(i)
                .parse()
                .map_err(|_| Error::Format(format!("bad integer `{}` in column {}", field(i), BENCH_HEADER[i])))
        };
        out.push(BenchResult {
            kind: field(0).to_owned(),
            num_classes: int(1)? as usize,
            batch: int(2)? as usize,
            rate: num(3)?,
            reps: int(4)? as usize,
            mean_s: num(5)?,
            std_s: num(6)?,
            min_s: num(7)?,
            bytes: int(8)?,
            median_s: None,
        });
    }
    Ok(out)
}
