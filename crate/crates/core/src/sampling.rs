//! Sampled class and batch-row sets for the light D-Softmax variants and the
//! random-sampling baselines. Sets are redrawn for every mini-batch.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::losses::InterSelection;
use crate::math::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    /// Every class, every row.
    FullClasses,
    /// D-Softmax-K: a uniform subset of the classes absent from the batch.
    ClassSubset,
    /// D-Softmax-B: a uniform subset of batch rows carries the inter term.
    BatchSubset,
    /// Rand-Softmax / Rand-ArcFace: batch labels plus a uniform subset of the rest.
    RandEntangled,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [
        SamplerKind::FullClasses,
        SamplerKind::ClassSubset,
        SamplerKind::BatchSubset,
        SamplerKind::RandEntangled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::FullClasses => "FullClasses",
            SamplerKind::ClassSubset => "ClassSubset",
            SamplerKind::BatchSubset => "BatchSubset",
            SamplerKind::RandEntangled => "RandEntangled",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config("sampler.kind", format!("unknown sampler `{s}`")))
    }
}

/// Result of one sampling draw.
///
/// `class_indices` is sorted and unique. For `ClassSubset` it holds only the sampled
/// negatives (batch labels excluded); for `RandEntangled` it includes every batch
/// label; for `FullClasses` it is `0..K`; `BatchSubset` leaves it empty because the
/// sampled rows see every class. `batch_rows` lists the rows carrying the inter term.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub kind: SamplerKind,
    pub class_indices: Vec<usize>,
    pub batch_rows: Vec<usize>,
    pub rate: f64,
}

/// Round half up: 2.5 -> 3.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Parses a rate written either as a decimal (`0.125`) or a fraction (`1/8`).
pub fn parse_rate(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = || Error::config("sampler.rate", format!("cannot parse rate `{s}`"));
    let rate = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => s.parse().map_err(|_| bad())?,
    };
    check_rate(rate)?;
    Ok(rate)
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("sampler.rate", format!("rate must be in (0, 1], got {rate}")))
    }
}

/// Sorted, deduplicated labels, checked against the class count.
pub fn unique_labels(num_classes: usize, labels: &[usize]) -> Result<Vec<usize>> {
    let mut u = labels.to_vec();
    u.sort_unstable();
    u.dedup();
    if let Some(&bad) = u.last().filter(|&&l| l >= num_classes) {
        return Err(Error::UnknownClass(bad));
    }
    Ok(u)
}

pub fn full_classes(num_classes: usize, batch: usize) -> SampleSet {
    SampleSet {
        kind: SamplerKind::FullClasses,
        class_indices: (0..num_classes).collect(),
        batch_rows: (0..batch).collect(),
        rate: 1.0,
    }
}

/// D-Softmax-K negatives: `round(rate * (K - |labels|))` classes drawn uniformly
/// from those not in the batch.
pub fn sample_classes_k(num_classes: usize, batch_labels: &[usize], rate: f64, rng: &mut RngState) -> Result<SampleSet> {
    check_rate(rate)?;
    let labels = unique_labels(num_classes, batch_labels)?;
    let free = num_classes - labels.len();
    let amount = round_half_up(rate * free as f64).min(free);
    if amount == 0 {
        return Err(Error::Sampling(format!(
            "rate {rate} leaves no negative classes out of {free}; the inter term would vanish"
        )));
    }
    Ok(SampleSet {
        kind: SamplerKind::ClassSubset,
        class_indices: sample_complement(num_classes, &labels, amount, rng),
        batch_rows: (0..batch_labels.len()).collect(),
        rate,
    })
}

/// D-Softmax-B rows: `max(1, round(rate * B))` rows drawn without replacement.
pub fn sample_batch_b(batch: usize, rate: f64, rng: &mut RngState) -> Result<SampleSet> {
    check_rate(rate)?;
    let amount = round_half_up(rate * batch as f64).max(1).min(batch);
    let batch_rows = if amount == batch {
        (0..batch).collect()
    } else {
        let mut rows = index::sample(rng, batch, amount).into_vec();
        rows.sort_unstable();
        rows
    };
    Ok(SampleSet {
        kind: SamplerKind::BatchSubset,
        class_indices: Vec::new(),
        batch_rows,
        rate,
    })
}

/// Rand-Softmax classes: every batch label plus uniformly drawn other classes, for a
/// total of `round(rate * K)` (never fewer than the labels themselves).
pub fn sample_rand_entangled(num_classes: usize, batch_labels: &[usize], rate: f64, rng: &mut RngState) -> Result<SampleSet> {
    check_rate(rate)?;
    let labels = unique_labels(num_classes, batch_labels)?;
    let free = num_classes - labels.len();
    let target = round_half_up(rate * num_classes as f64);
    let extra = target.saturating_sub(labels.len()).min(free);
    if labels.len() + extra < 2 {
        return Err(Error::Sampling(format!(
            "rate {rate} samples fewer than two classes; no row would have a negative"
        )));
    }
    let mut class_indices = sample_complement(num_classes, &labels, extra, rng);
    class_indices.extend_from_slice(&labels);
    class_indices.sort_unstable();
    Ok(SampleSet {
        kind: SamplerKind::RandEntangled,
        class_indices,
        batch_rows: (0..batch_labels.len()).collect(),
        rate,
    })
}

/// `amount` classes drawn uniformly without replacement from `[0, K) \ labels`, sorted.
/// `labels` must be sorted and unique.
fn sample_complement(num_classes: usize, labels: &[usize], amount: usize, rng: &mut RngState) -> Vec<usize> {
    let free = num_classes - labels.len();
    let mut picks: Vec<usize> = if amount >= free {
        (0..free).collect()
    } else {
        index::sample(rng, free, amount).into_vec()
    };
    picks.sort_unstable();
    // Map the t-th free slot to its class id by skipping over labels.
    let mut p = 0;
    for t in picks.iter_mut() {
        while p < labels.len() && labels[p] <= *t + p {
            p += 1;
        }
        *t += p;
    }
    picks
}

/// Columns fetched for one mini-batch and how the loss should use them.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnPlan {
    pub sample: SampleSet,
    /// Class ids in column order.
    pub columns: Vec<usize>,
    /// Column of each row's label inside `columns`.
    pub positive_col: Vec<Option<usize>>,
    pub inter: InterSelection,
}

/// Draws the sample for one batch and lays out its columns.
///
/// * `FullClasses`: columns `0..K`.
/// * `BatchSubset`: columns `0..K`, inter term on the sampled rows only.
/// * `ClassSubset`: the batch labels followed by the sampled negatives; the inter term
///   sees only the sampled negatives, so no batch label acts as a negative.
/// * `RandEntangled`: the sorted sampled set, batch labels included.
pub fn plan_columns(
    num_classes: usize,
    labels: &[usize],
    sampler: SamplerKind,
    rate: f64,
    inter_weight: f64,
    rng: &mut RngState,
) -> Result<ColumnPlan> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::Empty("plan_columns"));
    }
    let (sample, columns, inter) = match sampler {
        SamplerKind::FullClasses => {
            unique_labels(num_classes, labels)?;
            let s = full_classes(num_classes, b);
            let cols = s.class_indices.clone();
            (s, cols, InterSelection::default())
        }
        SamplerKind::BatchSubset => {
            unique_labels(num_classes, labels)?;
            let s = sample_batch_b(b, rate, rng)?;
            let mut rows = vec![false; b];
            for &r in &s.batch_rows {
                rows[r] = true;
            }
            let sel = InterSelection {
                rows: Some(rows),
                ..InterSelection::default()
            };
            (s, (0..num_classes).collect(), sel)
        }
        SamplerKind::ClassSubset => {
            let s = sample_classes_k(num_classes, labels, rate, rng)?;
            let mut cols = unique_labels(num_classes, labels)?;
            let mut mask = vec![false; cols.len()];
            cols.extend_from_slice(&s.class_indices);
            mask.resize(cols.len(), true);
            let sel = InterSelection {
                cols: Some(mask),
                ..InterSelection::default()
            };
            (s, cols, sel)
        }
        SamplerKind::RandEntangled => {
            let s = sample_rand_entangled(num_classes, labels, rate, rng)?;
            let cols = s.class_indices.clone();
            (s, cols, InterSelection::default())
        }
    };
    let positive_col = labels
        .iter()
        .map(|&l| match sampler {
            SamplerKind::FullClasses | SamplerKind::BatchSubset => Some(l),
            SamplerKind::RandEntangled => columns.binary_search(&l).ok(),
            // labels occupy the sorted prefix
            SamplerKind::ClassSubset => columns[..columns.len() - sample.class_indices.len()]
                .binary_search(&l)
                .ok(),
        })
        .collect();
    Ok(ColumnPlan {
        sample,
        columns,
        positive_col,
        inter: InterSelection {
            weight: inter_weight,
            ..inter
        },
    })
}
