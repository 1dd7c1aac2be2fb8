//! Termination points, loss-curve traces and class-weight cosine statistics.
//!
//! Fixed negative masses are passed as logarithms (`log_m = log M`) so that values such
//! as `M = e^{24}` with `s = 32` never leave log space.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::csv_bytes;
use crate::losses::{margin_transform, LossConfig, LossKind};
use crate::math::{lse, sigmoid, softplus, Matrix, NormalizedRows, RngState};

/// A gradient below this fraction of `s` counts as vanished.
pub const TERMINATION_THRESHOLD: f64 = 0.02;
/// Grid step for numerically located termination points.
pub const TERMINATION_GRID_STEP: f64 = 1e-3;
pub const HISTOGRAM_BINS: usize = 200;

/// `d = log(M) / s`.
pub fn intra_termination_point(m: f64, s: f64) -> f64 {
    m.ln() / s
}

/// Same as [`intra_termination_point`] with `M` given as `log M`.
pub fn intra_termination_point_log(log_m: f64, s: f64) -> f64 {
    log_m / s
}

/// `d' = log(e^{s z_y} + M_n) / s`, evaluated in log space.
pub fn inter_termination_point(z_y: f64, m_n: f64, s: f64) -> f64 {
    inter_termination_point_log(z_y, m_n.ln(), s)
}

pub fn inter_termination_point_log(z_y: f64, log_mn: f64, s: f64) -> f64 {
    lse([s * z_y, log_mn].into_iter()) / s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CurveFamily {
    /// Loss against `z_y` with the negative mass `M` held fixed.
    Intra { log_m: f64 },
    /// Loss against one negative activation `z_n` with `z_y` and the remaining mass `M_n` fixed.
    Inter { z_y: f64, log_mn: f64 },
    /// Numerically located inter-class termination point against `z_y`, `M_n` fixed.
    InterTermination { log_mn: f64 },
}

impl fmt::Display for CurveFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurveFamily::Intra { log_m } => write!(f, "intra(log_M={log_m})"),
            CurveFamily::Inter { z_y, log_mn } => write!(f, "inter(z_y={z_y},log_Mn={log_mn})"),
            CurveFamily::InterTermination { log_mn } => write!(f, "termination(log_Mn={log_mn})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveTrace {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub kind: LossKind,
    pub family: CurveFamily,
    pub s: f64,
    /// Location of the termination point where one is defined for the family.
    pub termination: Option<f64>,
}

impl CurveTrace {
    pub fn x_label(&self) -> &'static str {
        match self.family {
            CurveFamily::Intra { .. } | CurveFamily::InterTermination { .. } => "z_y",
            CurveFamily::Inter { .. } => "z_n",
        }
    }

    pub fn y_label(&self) -> &'static str {
        match self.family {
            CurveFamily::InterTermination { .. } => "d_prime",
            _ => "loss",
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut comments = vec![
            format!("kind={}", self.kind),
            format!("family={}", self.family),
            format!("s={}", self.s),
            format!("termination_threshold={}*s", TERMINATION_THRESHOLD),
        ];
        if let Some(t) = self.termination {
            comments.push(format!("termination={t}"));
        }
        let rows = self.x.iter().zip(&self.y).map(|(x, y)| [x.to_string(), y.to_string()]);
        csv_bytes(&comments, &[self.x_label(), self.y_label()], rows)
    }
}

fn check_supported(cfg: &LossConfig) -> Result<()> {
    if cfg.kind().is_hybrid() {
        return Err(Error::config(
            "kind",
            format!("{} has no closed-form curve; trace its constituents instead", cfg.kind()),
        ));
    }
    Ok(())
}

/// Loss value against `z_y` with the negative mass fixed at `e^{log_m}`.
/// D-Softmax ignores `log_m`: its intra term uses `eps` instead.
pub fn intra_curve_value(cfg: &LossConfig, log_m: f64, z_y: f64) -> f64 {
    let s = cfg.s();
    match cfg.kind() {
        LossKind::DSoftmax => softplus(cfg.log_eps() - s * z_y),
        k => {
            let (psi, _) = margin_transform(z_y, k, cfg.m1(), cfg.m2(), cfg.m3());
            softplus(log_m - s * psi)
        }
    }
}

/// `dL/dz_y` of [`intra_curve_value`].
pub fn intra_curve_gradient(cfg: &LossConfig, log_m: f64, z_y: f64) -> f64 {
    let s = cfg.s();
    match cfg.kind() {
        LossKind::DSoftmax => -s * sigmoid(cfg.log_eps() - s * z_y),
        k => {
            let (psi, dpsi) = margin_transform(z_y, k, cfg.m1(), cfg.m2(), cfg.m3());
            -s * dpsi * sigmoid(log_m - s * psi)
        }
    }
}

/// Loss value against one negative activation `z_n`, other negatives fixed at `e^{log_mn}`.
pub fn inter_curve_value(cfg: &LossConfig, z_y: f64, log_mn: f64, z_n: f64) -> f64 {
    let s = cfg.s();
    let l = lse([s * z_n, log_mn].into_iter());
    match cfg.kind() {
        LossKind::DSoftmax => softplus(l),
        k => {
            let (psi, _) = margin_transform(z_y, k, cfg.m1(), cfg.m2(), cfg.m3());
            softplus(l - s * psi)
        }
    }
}

/// `dL/dz_n` of [`inter_curve_value`].
pub fn inter_curve_gradient(cfg: &LossConfig, z_y: f64, log_mn: f64, z_n: f64) -> f64 {
    let s = cfg.s();
    let l = lse([s * z_n, log_mn].into_iter());
    let share = (s * z_n - l).exp();
    match cfg.kind() {
        LossKind::DSoftmax => s * share * sigmoid(l),
        k => {
            let (psi, _) = margin_transform(z_y, k, cfg.m1(), cfg.m2(), cfg.m3());
            s * share * sigmoid(l - s * psi)
        }
    }
}

/// Evenly spaced grid from `lo` to `hi` inclusive; must stay inside [-1, 1].
pub fn activation_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::config("grid", format!("range [{lo}, {hi}] must be increasing and inside [-1, 1]")));
    }
    if !(step > 0.0 && step <= hi - lo) {
        return Err(Error::config("grid.step", format!("step {step} must be in (0, {}]", hi - lo)));
    }
    let n = ((hi - lo) / step).round() as usize;
    let mut g: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).filter(|&x| x <= hi + 1e-12).collect();
    if let Some(last) = g.last_mut() {
        *last = last.min(hi);
    }
    g.dedup();
    Ok(g)
}

/// Smallest grid `z_y` whose intra gradient magnitude is below `0.02 s`.
pub fn numeric_intra_termination(cfg: &LossConfig, log_m: f64, step: f64) -> Result<Option<f64>> {
    let thr = TERMINATION_THRESHOLD * cfg.s();
    Ok(activation_grid(-1.0, 1.0, step)?
        .into_iter()
        .find(|&z| intra_curve_gradient(cfg, log_m, z).abs() < thr))
}

/// Largest grid `z_n` whose inter gradient magnitude is below `0.02 s`: pushing a
/// negative down stops once it falls under this value.
pub fn numeric_inter_termination(cfg: &LossConfig, z_y: f64, log_mn: f64, step: f64) -> Result<Option<f64>> {
    let thr = TERMINATION_THRESHOLD * cfg.s();
    Ok(activation_grid(-1.0, 1.0, step)?
        .into_iter()
        .rev()
        .find(|&z| inter_curve_gradient(cfg, z_y, log_mn, z).abs() < thr))
}

/// Traces one curve of the requested family over `[lo, hi]` with the given step.
pub fn trace_loss_curve(cfg: &LossConfig, family: CurveFamily, lo: f64, hi: f64, step: f64) -> Result<CurveTrace> {
    check_supported(cfg)?;
    let x = activation_grid(lo, hi, step)?;
    let (y, termination) = match family {
        CurveFamily::Intra { log_m } => {
            let y = x.iter().map(|&z| intra_curve_value(cfg, log_m, z)).collect();
            let t = match cfg.kind() {
                LossKind::Softmax => Some(intra_termination_point_log(log_m, cfg.s())),
                LossKind::DSoftmax => Some(cfg.d()),
                _ => numeric_intra_termination(cfg, log_m, TERMINATION_GRID_STEP)?,
            };
            (y, t)
        }
        CurveFamily::Inter { z_y, log_mn } => {
            let y = x.iter().map(|&z| inter_curve_value(cfg, z_y, log_mn, z)).collect();
            let t = match cfg.kind() {
                LossKind::Softmax => Some(inter_termination_point_log(z_y, log_mn, cfg.s())),
                _ => numeric_inter_termination(cfg, z_y, log_mn, TERMINATION_GRID_STEP)?,
            };
            (y, t)
        }
        CurveFamily::InterTermination { log_mn } => {
            let y = x
                .iter()
                .map(|&zy| {
                    numeric_inter_termination(cfg, zy, log_mn, TERMINATION_GRID_STEP)
                        .map(|t| t.unwrap_or(f64::NAN))
                })
                .collect::<Result<Vec<_>>>()?;
            (y, None)
        }
    };
    Ok(CurveTrace {
        x,
        y,
        kind: cfg.kind(),
        family,
        s: cfg.s(),
        termination,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges spanning [-1, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bins: usize) -> Self {
        let edges = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
        Self {
            edges,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let b = (((v + 1.0) / 2.0) * bins as f64).floor();
        let b = (b.max(0.0) as usize).min(bins - 1);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStats {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub histogram: Histogram,
    pub pairs: u64,
}

impl SimilarityStats {
    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Self {
        let mut histogram = Histogram::new(HISTOGRAM_BINS);
        let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
        for v in values {
            // Welford
            n += 1;
            let delta = v - mean;
            mean += delta / n as f64;
            m2 += delta * (v - mean);
            histogram.add(v);
        }
        let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
        Self {
            mean,
            std,
            histogram,
            pairs: n,
        }
    }

    pub fn to_csv(&self, comments: &[String]) -> Result<Vec<u8>> {
        let mut all = comments.to_vec();
        all.push(format!("mean={}", self.mean));
        all.push(format!("std={}", self.std));
        all.push(format!("pairs={}", self.pairs));
        let h = &self.histogram;
        let rows = h
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| [h.edges[i].to_string(), h.edges[i + 1].to_string(), c.to_string()]);
        csv_bytes(&all, &["bin_lo", "bin_hi", "count"], rows)
    }
}

/// Mean, std and histogram of `cos(w_i, w_j)` over distinct class pairs.
///
/// All `K(K-1)/2` pairs are used when that fits in `pair_budget`; otherwise
/// `pair_budget` distinct pairs are drawn uniformly without replacement.
pub fn pairwise_cosine_stats(weights: &Matrix, pair_budget: usize, rng: &mut RngState) -> Result<SimilarityStats> {
    let k = weights.rows();
    if k < 2 {
        return Err(Error::config("weights", format!("need at least 2 classes, got {k}")));
    }
    if pair_budget == 0 {
        return Err(Error::config("pair_budget", "must be at least 1"));
    }
    let unit = NormalizedRows::new(weights, "weight")?.unit;
    let cos = |i: usize, j: usize| crate::math::clamp_cos(crate::math::dot(unit.row(i), unit.row(j)));
    let total_pairs = (k as u128) * (k as u128 - 1) / 2;
    if total_pairs <= pair_budget as u128 {
        let values = (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).map(|(i, j)| cos(i, j));
        return Ok(SimilarityStats::from_values(values));
    }
    let mut seen: HashSet<(u32, u32)> = HashSet::with_capacity(pair_budget);
    let mut values = Vec::with_capacity(pair_budget);
    while values.len() < pair_budget {
        let i = rng.random_range(0..k);
        let j = rng.random_range(0..k);
        if i == j {
            continue;
        }
        let key = (i.min(j) as u32, i.max(j) as u32);
        if seen.insert(key) {
            values.push(cos(key.0 as usize, key.1 as usize));
        }
    }
    Ok(SimilarityStats::from_values(values))
}
