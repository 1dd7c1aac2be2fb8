//! Softmax-family losses and the dissected softmax, with analytic gradients.
//!
//! All losses take a batch of cosine activations `z` (B x S) and return per-row
//! values plus `dz`, where row `i` of `dz` is the gradient of row `i`'s loss. The
//! batch value reported in [`LossOutput::mean`] is the mean over rows; callers that
//! want the summed convention multiply by B.
//!
//! Every exponential sum is kept in log space. `log(1 + e^t)` is evaluated with
//! [`softplus`] so that losses near zero keep their full relative precision.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{lse, sigmoid, softplus, Matrix, NormalizedRows, COS_CLAMP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Softmax,
    SphereFace,
    CosFace,
    ArcFace,
    DSoftmax,
    HybridSoftmaxInter,
    HybridArcInter,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Softmax,
        LossKind::SphereFace,
        LossKind::CosFace,
        LossKind::ArcFace,
        LossKind::DSoftmax,
        LossKind::HybridSoftmaxInter,
        LossKind::HybridArcInter,
    ];

    /// Losses whose intra- and inter-class parts share one normalizer.
    pub fn is_entangled(self) -> bool {
        matches!(
            self,
            LossKind::Softmax | LossKind::SphereFace | LossKind::CosFace | LossKind::ArcFace
        )
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, LossKind::HybridSoftmaxInter | LossKind::HybridArcInter)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "Softmax",
            LossKind::SphereFace => "SphereFace",
            LossKind::CosFace => "CosFace",
            LossKind::ArcFace => "ArcFace",
            LossKind::DSoftmax => "DSoftmax",
            LossKind::HybridSoftmaxInter => "HybridSoftmaxInter",
            LossKind::HybridArcInter => "HybridArcInter",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<_> = LossKind::ALL.iter().map(|k| k.name()).collect();
                Error::config("kind", format!("unknown loss `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

/// Loss kind plus its hyperparameters.
///
/// `eps` is never stored independently: it is `e^{s*d}` and is recomputed from `(s, d)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    kind: LossKind,
    s: f64,
    d: f64,
    m1: u32,
    m2: f64,
    m3: f64,
}

pub const DEFAULT_SCALE: f64 = 32.0;
pub const DEFAULT_D: f64 = 0.9;
pub const DEFAULT_M1: u32 = 4;
pub const DEFAULT_M2: f64 = 0.5;
pub const DEFAULT_M3: f64 = 0.35;

impl LossConfig {
    /// Config with the margins used for SphereFace (m1 = 4), ArcFace (m2 = 0.5) and CosFace (m3 = 0.35).
    pub fn new(kind: LossKind, s: f64, d: f64) -> Result<Self> {
        Self {
            kind,
            s,
            d,
            m1: DEFAULT_M1,
            m2: DEFAULT_M2,
            m3: DEFAULT_M3,
        }
        .validated()
    }

    pub fn with_margins(self, m1: u32, m2: f64, m3: f64) -> Result<Self> {
        Self { m1, m2, m3, ..self }.validated()
    }

    pub fn with_kind(self, kind: LossKind) -> Self {
        Self { kind, ..self }
    }

    pub fn with_scale(self, s: f64) -> Result<Self> {
        Self { s, ..self }.validated()
    }

    pub fn with_d(self, d: f64) -> Result<Self> {
        Self { d, ..self }.validated()
    }

    fn validated(self) -> Result<Self> {
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(Error::config("s", format!("scale must be positive, got {}", self.s)));
        }
        if !(self.d > 0.0 && self.d <= 1.0) {
            return Err(Error::config("d", format!("termination target must be in (0, 1], got {}", self.d)));
        }
        if self.m1 == 0 {
            return Err(Error::config("m1", "must be a positive integer"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.m2) {
            return Err(Error::config("m2", format!("must be in [0, pi/2), got {}", self.m2)));
        }
        if !(0.0..1.0).contains(&self.m3) {
            return Err(Error::config("m3", format!("must be in [0, 1), got {}", self.m3)));
        }
        Ok(self)
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }
    pub fn s(&self) -> f64 {
        self.s
    }
    pub fn d(&self) -> f64 {
        self.d
    }
    pub fn m1(&self) -> u32 {
        self.m1
    }
    pub fn m2(&self) -> f64 {
        self.m2
    }
    pub fn m3(&self) -> f64 {
        self.m3
    }

    /// `eps = e^{s*d}`; may be huge, prefer [`LossConfig::log_eps`] in computations.
    pub fn eps(&self) -> f64 {
        epsilon_from_d(self.d, self.s)
    }

    pub fn log_eps(&self) -> f64 {
        self.s * self.d
    }

    /// Flat key/value pairs (kind, s, d, m1, m2, m3). `eps` is derived and never written.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", self.kind.to_string()),
            ("s", self.s.to_string()),
            ("d", self.d.to_string()),
            ("m1", self.m1.to_string()),
            ("m2", self.m2.to_string()),
            ("m3", self.m3.to_string()),
        ]
    }

    /// Parses the flat key/value form. Missing keys keep their defaults; unknown keys are errors.
    pub fn from_kv<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut cfg = Self {
            kind: LossKind::DSoftmax,
            s: DEFAULT_SCALE,
            d: DEFAULT_D,
            m1: DEFAULT_M1,
            m2: DEFAULT_M2,
            m3: DEFAULT_M3,
        };
        for (k, v) in pairs {
            match k {
                "kind" => cfg.kind = v.parse()?,
                "s" => cfg.s = parse_num(k, v)?,
                "d" => cfg.d = parse_num(k, v)?,
                "m1" => cfg.m1 = parse_num(k, v)?,
                "m2" => cfg.m2 = parse_num(k, v)?,
                "m3" => cfg.m3 = parse_num(k, v)?,
                "eps" => return Err(Error::config("eps", "eps is derived from d and s; set d instead")),
                other => return Err(Error::config(other, "unknown loss key")),
            }
        }
        cfg.validated()
    }
}

pub(crate) fn parse_num<T: FromStr>(field: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse `{v}`")))
}

/// `e^{s*d}`: the constant that replaces the negative mass in the intra term.
pub fn epsilon_from_d(d: f64, s: f64) -> f64 {
    (s * d).exp()
}

/// Margin applied to the positive activation, returned with its derivative.
///
/// SphereFace uses the plain `cos(m1 * acos z)` form, which is not monotone in the
/// angle once `acos z > pi / m1`.
pub fn margin_transform(z_y: f64, kind: LossKind, m1: u32, m2: f64, m3: f64) -> (f64, f64) {
    match kind {
        LossKind::Softmax | LossKind::DSoftmax | LossKind::HybridSoftmaxInter => (z_y, 1.0),
        LossKind::CosFace => (z_y - m3, 1.0),
        LossKind::SphereFace => {
            let z = z_y.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
            let theta = z.acos();
            let m = m1 as f64;
            let psi = (m * theta).cos();
            let dpsi = m * (m * theta).sin() / (1.0 - z * z).sqrt();
            (psi, dpsi)
        }
        LossKind::ArcFace | LossKind::HybridArcInter => {
            let z = z_y.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
            let theta = z.acos();
            let psi = (theta + m2).cos();
            let dpsi = (theta + m2).sin() / (1.0 - z * z).sqrt();
            (psi, dpsi)
        }
    }
}

fn margin_for(cfg: &LossConfig, z_y: f64) -> (f64, f64) {
    margin_transform(z_y, cfg.kind, cfg.m1, cfg.m2, cfg.m3)
}

/// Cosine activations for a batch, with each row's positive column (if sampled).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBatch {
    z: Matrix,
    positive_col: Vec<Option<usize>>,
}

impl ActivationBatch {
    pub fn new(z: Matrix, positive_col: Vec<Option<usize>>) -> Result<Self> {
        if positive_col.len() != z.rows() {
            return Err(Error::Shape {
                context: "ActivationBatch",
                expected: format!("{} positive entries", z.rows()),
                got: format!("{}", positive_col.len()),
            });
        }
        if let Some(&bad) = positive_col.iter().flatten().find(|&&c| c >= z.cols()) {
            return Err(Error::Shape {
                context: "ActivationBatch positive column",
                expected: format!("< {}", z.cols()),
                got: bad.to_string(),
            });
        }
        if z.as_slice().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::config("z", "activations must lie in [-1, 1]"));
        }
        Ok(Self { z, positive_col })
    }

    /// Every row has its positive at the given column.
    pub fn with_labels(z: Matrix, labels: &[usize]) -> Result<Self> {
        Self::new(z, labels.iter().map(|&l| Some(l)).collect())
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn positive_col(&self) -> &[Option<usize>] {
        &self.positive_col
    }

    pub fn rows(&self) -> usize {
        self.z.rows()
    }

    pub fn cols(&self) -> usize {
        self.z.cols()
    }

    fn positive(&self, row: usize, loss: &'static str) -> Result<usize> {
        self.positive_col[row].ok_or(Error::MissingPositive { row, loss })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub per_row: Vec<f64>,
    pub mean: f64,
    pub dz: Matrix,
}

impl LossOutput {
    fn from_rows(per_row: Vec<f64>, dz: Matrix) -> Self {
        let mean = if per_row.is_empty() {
            0.0
        } else {
            per_row.iter().sum::<f64>() / per_row.len() as f64
        };
        Self { per_row, mean, dz }
    }

    pub fn sum(&self) -> f64 {
        self.per_row.iter().sum()
    }
}

/// Which rows and columns take part in the D-Softmax inter term.
///
/// The full loss uses every row and every non-positive column. D-Softmax-B restricts
/// `rows` to the sampled batch subset; D-Softmax-K restricts `cols` to the sampled
/// negative classes. `weight` scales the inter term (0 trains the intra term alone).
#[derive(Clone, Debug, PartialEq)]
pub struct InterSelection {
    pub rows: Option<Vec<bool>>,
    pub cols: Option<Vec<bool>>,
    pub weight: f64,
}

impl Default for InterSelection {
    fn default() -> Self {
        Self {
            rows: None,
            cols: None,
            weight: 1.0,
        }
    }
}

impl InterSelection {
    fn row_on(&self, i: usize) -> bool {
        self.rows.as_ref().is_none_or(|r| r[i])
    }

    fn col_on(&self, j: usize) -> bool {
        self.cols.as_ref().is_none_or(|c| c[j])
    }

    fn check(&self, batch: &ActivationBatch) -> Result<()> {
        let bad = |what: &str, want: usize, got: usize| Error::Shape {
            context: "InterSelection",
            expected: format!("{want} {what}"),
            got: got.to_string(),
        };
        if let Some(r) = &self.rows {
            if r.len() != batch.rows() {
                return Err(bad("rows", batch.rows(), r.len()));
            }
        }
        if let Some(c) = &self.cols {
            if c.len() != batch.cols() {
                return Err(bad("cols", batch.cols(), c.len()));
            }
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::config("inter_weight", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Softmax, SphereFace, CosFace or ArcFace: `log(1 + sum_{k != y} e^{s z_k} / e^{s psi(z_y)})`.
pub fn softmax_family_forward_backward(batch: &ActivationBatch, cfg: &LossConfig) -> Result<LossOutput> {
    if !cfg.kind.is_entangled() {
        return Err(Error::config(
            "kind",
            format!("{} is not an entangled softmax-family loss", cfg.kind),
        ));
    }
    entangled(batch, cfg)
}

fn entangled(batch: &ActivationBatch, cfg: &LossConfig) -> Result<LossOutput> {
    let s = cfg.s;
    let (rows, cols) = (batch.rows(), batch.cols());
    let mut dz = Matrix::zeros(rows, cols);
    let mut per_row = Vec::with_capacity(rows);
    for i in 0..rows {
        let y = batch.positive(i, "entangled softmax losses")?;
        let z = batch.z.row(i);
        let (psi, dpsi) = margin_for(cfg, z[y]);
        let negs = z.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| s * v);
        let lse_neg = lse(negs);
        if lse_neg == f64::NEG_INFINITY {
            per_row.push(0.0);
            continue;
        }
        // t = log(M) - s*psi; loss = log(1 + e^t)
        let t = lse_neg - s * psi;
        per_row.push(softplus(t));
        let neg_mass = sigmoid(t);
        let drow = dz.row_mut(i);
        for (j, &v) in z.iter().enumerate() {
            if j != y {
                drow[j] = s * (s * v - lse_neg).exp() * neg_mass;
            }
        }
        // p_y - 1 = -(sum of negative probabilities)
        drow[y] = -s * neg_mass * dpsi;
    }
    Ok(LossOutput::from_rows(per_row, dz))
}

/// `log(1 + eps / e^{s z_y})` and its derivative.
pub fn d_softmax_intra(z_y: f64, cfg: &LossConfig) -> (f64, f64) {
    let t = cfg.log_eps() - cfg.s * z_y;
    (softplus(t), -cfg.s * sigmoid(t))
}

/// `log(1 + sum_k e^{s z_k})` over the given negative activations, and its gradient.
pub fn d_softmax_inter(z_negs: &[f64], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let s = cfg.s;
    let l = lse(z_negs.iter().map(|&v| s * v));
    if l == f64::NEG_INFINITY {
        return (0.0, Vec::new());
    }
    let mass = sigmoid(l);
    let grads = z_negs.iter().map(|&v| s * (s * v - l).exp() * mass).collect();
    (softplus(l), grads)
}

/// Full D-Softmax: intra term on the positive column plus inter term over all others.
pub fn d_softmax_full(batch: &ActivationBatch, cfg: &LossConfig) -> Result<LossOutput> {
    d_softmax_selected(batch, cfg, &InterSelection::default())
}

/// D-Softmax with the inter term restricted by `sel`.
///
/// The positive column only ever receives the intra gradient, so `dz` at that column
/// does not depend on any negative activation.
pub fn d_softmax_selected(batch: &ActivationBatch, cfg: &LossConfig, sel: &InterSelection) -> Result<LossOutput> {
    sel.check(batch)?;
    let s = cfg.s;
    let (rows, cols) = (batch.rows(), batch.cols());
    let mut dz = Matrix::zeros(rows, cols);
    let mut per_row = Vec::with_capacity(rows);
    for i in 0..rows {
        let y = batch.positive(i, "D-Softmax intra term")?;
        let z = batch.z.row(i);
        let (intra, g_intra) = d_softmax_intra(z[y], cfg);
        let drow = dz.row_mut(i);
        drow[y] = g_intra;
        let mut loss = intra;
        if sel.row_on(i) && sel.weight != 0.0 {
            let negs = z
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y && sel.col_on(j))
                .map(|(_, &v)| s * v);
            let l = lse(negs);
            if l != f64::NEG_INFINITY {
                loss += sel.weight * softplus(l);
                let scale = sel.weight * s * sigmoid(l);
                for (j, &v) in z.iter().enumerate() {
                    if j != y && sel.col_on(j) {
                        drow[j] = scale * (s * v - l).exp();
                    }
                }
            }
        }
        per_row.push(loss);
    }
    Ok(LossOutput::from_rows(per_row, dz))
}

/// Hybrid objective: the forward value is the full Softmax/ArcFace loss plus the
/// D-Softmax intra term; the backward pass keeps only the entangled loss's negative
/// gradients and replaces the positive-column gradient by the intra gradient.
pub fn hybrid_inter_only(batch: &ActivationBatch, cfg: &LossConfig) -> Result<LossOutput> {
    let base = match cfg.kind {
        LossKind::HybridSoftmaxInter => LossKind::Softmax,
        LossKind::HybridArcInter => LossKind::ArcFace,
        other => return Err(Error::config("kind", format!("{other} is not a hybrid loss"))),
    };
    let mut out = entangled(batch, &cfg.with_kind(base))?;
    for i in 0..batch.rows() {
        let y = batch.positive(i, "hybrid losses")?;
        let (intra, g) = d_softmax_intra(batch.z.get(i, y), cfg);
        out.per_row[i] += intra;
        out.dz.set(i, y, g);
    }
    Ok(LossOutput::from_rows(out.per_row, out.dz))
}

/// Dispatches on the configured kind. `sel` only affects D-Softmax.
pub fn compute_loss(batch: &ActivationBatch, cfg: &LossConfig, sel: &InterSelection) -> Result<LossOutput> {
    match cfg.kind {
        k if k.is_entangled() => entangled(batch, cfg),
        LossKind::DSoftmax => d_softmax_selected(batch, cfg, sel),
        _ => hybrid_inter_only(batch, cfg),
    }
}

/// Chains `dz` through `z = cos(x, w)` to raw (unnormalized) features and weights.
///
/// With unit vectors `xh`, `wh`: `dz/dx = (wh - z xh) / |x|` and `dz/dw = (xh - z wh) / |w|`.
pub fn chain_to_parameters(dz: &Matrix, features: &Matrix, weights: &Matrix) -> Result<(Matrix, Matrix)> {
    let fx = NormalizedRows::new(features, "feature")?;
    let fw = NormalizedRows::new(weights, "weight")?;
    chain_normalized(dz, &fx, &fw)
}

pub(crate) fn chain_normalized(dz: &Matrix, fx: &NormalizedRows, fw: &NormalizedRows) -> Result<(Matrix, Matrix)> {
    let (b, s) = (fx.unit.rows(), fw.unit.rows());
    let n = fx.unit.cols();
    if dz.rows() != b || dz.cols() != s || fw.unit.cols() != n {
        return Err(Error::Shape {
            context: "chain_to_parameters",
            expected: format!("dz {b}x{s}, dims {n}"),
            got: format!("dz {}x{}, dims {}", dz.rows(), dz.cols(), fw.unit.cols()),
        });
    }
    let mut dx = Matrix::zeros(b, n);
    let mut dw = Matrix::zeros(s, n);
    let mut x_coef = vec![0.0; b];
    // Class-outer order keeps dx and the current weight row in cache; each sum still
    // accumulates in ascending index order. `dz` is read one transposed block at a time.
    const BLOCK: usize = 256;
    let mut tile = vec![0.0; BLOCK * b];
    for j0 in (0..s).step_by(BLOCK) {
        let width = BLOCK.min(s - j0);
        for i in 0..b {
            for (c, &g) in dz.row(i)[j0..j0 + width].iter().enumerate() {
                tile[c * b + i] = g;
            }
        }
        for c in 0..width {
            let j = j0 + c;
            let wh = fw.unit.row(j);
            let mut w_coef = 0.0;
            let dwj = dw.row_mut(j);
            for (i, &g) in tile[c * b..(c + 1) * b].iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let xh = fx.unit.row(i);
                let z = crate::math::dot(xh, wh);
                x_coef[i] += g * z;
                w_coef += g * z;
                for (a, &w) in dx.row_mut(i).iter_mut().zip(wh) {
                    *a += g * w;
                }
                for (a, &x) in dwj.iter_mut().zip(xh) {
                    *a += g * x;
                }
            }
            let inv = 1.0 / fw.norms[j];
            for (a, &w) in dwj.iter_mut().zip(wh) {
                *a = (*a - w_coef * w) * inv;
            }
        }
    }
    for (i, (&coef, &norm)) in x_coef.iter().zip(&fx.norms).enumerate() {
        let xh = fx.unit.row(i);
        for (a, &x) in dx.row_mut(i).iter_mut().zip(xh) {
            *a = (*a - coef * x) * (1.0 / norm);
        }
    }
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: LossKind, s: f64) -> LossConfig {
        LossConfig::new(kind, s, 0.9).unwrap()
    }

    fn batch(rows: &[Vec<f64>], labels: &[usize]) -> ActivationBatch {
        ActivationBatch::with_labels(Matrix::from_rows(rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon_from_d(0.0, 32.0), 1.0);
        assert!((epsilon_from_d(0.5, 32.0) / 8.886_110_520_507_873e6 - 1.0).abs() < 1e-12);
        // e^28.8 = 3.2187042897020e12 (mpmath)
        assert!((epsilon_from_d(0.9, 32.0) / 3.218_704_289_702_04e12 - 1.0).abs() < 1e-12);
        let c = LossConfig::new(LossKind::DSoftmax, 32.0, 0.9).unwrap();
        assert!((c.eps() / (c.s() * c.d()).exp() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn margin_examples() {
        // cos(pi/3 + 0.5) from mpmath
        let (psi, _) = margin_transform(0.5, LossKind::ArcFace, 4, 0.5, 0.35);
        assert!((psi - 0.023_596_585_290_909_48).abs() < 1e-12);
        let (psi, dpsi) = margin_transform(0.3, LossKind::ArcFace, 4, 0.0, 0.35);
        assert!((psi - 0.3).abs() < 1e-12 && (dpsi - 1.0).abs() < 1e-9);
        let z = (std::f64::consts::PI / 8.0).cos();
        let (psi, _) = margin_transform(z, LossKind::SphereFace, 4, 0.5, 0.35);
        assert!(psi.abs() < 1e-12);
        let (psi, dpsi) = margin_transform(0.8, LossKind::CosFace, 4, 0.5, 0.35);
        assert!((psi - 0.45).abs() < 1e-15 && dpsi == 1.0);
    }

    #[test]
    fn arcface_derivative_finite_at_the_poles() {
        for z in [-1.0, 1.0] {
            let (psi, dpsi) = margin_transform(z, LossKind::ArcFace, 4, 0.5, 0.0);
            assert!(psi.is_finite() && dpsi.is_finite());
            let (psi, dpsi) = margin_transform(z, LossKind::SphereFace, 4, 0.5, 0.0);
            assert!(psi.is_finite() && dpsi.is_finite());
        }
    }

    #[test]
    fn softmax_examples() {
        let out = softmax_family_forward_backward(&batch(&[vec![1.0, 0.0]], &[0]), &cfg(LossKind::Softmax, 1.0)).unwrap();
        assert!((out.per_row[0] - 0.313_261_687_518_222_83).abs() < 1e-15);

        for s in [1.0, 8.0, 32.0] {
            let out = softmax_family_forward_backward(&batch(&[vec![0.3; 5]], &[2]), &cfg(LossKind::Softmax, s)).unwrap();
            assert!((out.per_row[0] - 5f64.ln()).abs() < 1e-12);
        }

        // log(1 + e^-32) from mpmath
        let out = softmax_family_forward_backward(&batch(&[vec![1.0, 0.0]], &[0]), &cfg(LossKind::Softmax, 32.0)).unwrap();
        assert!((out.per_row[0] / 1.266_416_554_909_409_6e-14 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn softmax_requires_positive() {
        let z = Matrix::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let b = ActivationBatch::new(z, vec![None]).unwrap();
        assert!(matches!(
            softmax_family_forward_backward(&b, &cfg(LossKind::Softmax, 32.0)),
            Err(Error::MissingPositive { row: 0, .. })
        ));
        assert!(softmax_family_forward_backward(&batch(&[vec![0.1, 0.2]], &[0]), &cfg(LossKind::DSoftmax, 32.0)).is_err());
    }

    #[test]
    fn intra_examples() {
        let c = LossConfig::new(LossKind::DSoftmax, 32.0, 0.9).unwrap();
        let (l, g) = d_softmax_intra(0.9, &c);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((g + 16.0).abs() < 1e-9);
        let (l, _) = d_softmax_intra(0.5, &c);
        // log(1 + e^12.8) from mpmath
        assert!((l - 12.800_002_760_768_761).abs() < 1e-9);
    }

    #[test]
    fn inter_examples() {
        let c = cfg(LossKind::DSoftmax, 32.0);
        assert_eq!(d_softmax_inter(&[], &c).0, 0.0);
        let (l, g) = d_softmax_inter(&[0.0; 10], &c);
        assert!((l - 11f64.ln()).abs() < 1e-12);
        assert!(g.iter().all(|&v| (v - 32.0 / 11.0).abs() < 1e-12));
        let (l, _) = d_softmax_inter(&[-1.0], &c);
        assert!((l / 1.266_416_554_909_409_6e-14 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn full_examples() {
        let c = cfg(LossKind::DSoftmax, 32.0);
        let out = d_softmax_full(&batch(&[vec![0.9]], &[0]), &c).unwrap();
        assert!((out.per_row[0] - 2f64.ln()).abs() < 1e-12);
        let out = d_softmax_full(&batch(&[vec![0.9, -1.0]], &[0]), &c).unwrap();
        assert!((out.per_row[0] - (2f64.ln() + 1.266_416_554_909_409_6e-14)).abs() < 1e-15);
    }

    #[test]
    fn full_positive_gradient_ignores_negatives() {
        let c = cfg(LossKind::DSoftmax, 32.0);
        let a = d_softmax_full(&batch(&[vec![0.2, 0.5, -0.3, 0.9]], &[1]), &c).unwrap();
        let b = d_softmax_full(&batch(&[vec![-0.7, 0.5, 0.8, 0.1]], &[1]), &c).unwrap();
        assert_eq!(a.dz.get(0, 1), b.dz.get(0, 1));
        let (intra, _) = d_softmax_intra(0.5, &c);
        let (inter_a, _) = d_softmax_inter(&[0.2, -0.3, 0.9], &c);
        assert_eq!(a.per_row[0], intra + inter_a);
    }

    #[test]
    fn selection_masks_rows_and_columns() {
        let c = cfg(LossKind::DSoftmax, 8.0);
        let b = batch(&[vec![0.2, 0.5, -0.3], vec![0.4, 0.1, 0.6]], &[1, 0]);
        let sel = InterSelection {
            rows: Some(vec![true, false]),
            cols: Some(vec![false, true, true]),
            weight: 1.0,
        };
        let out = d_softmax_selected(&b, &c, &sel).unwrap();
        assert_eq!(out.dz.get(0, 0), 0.0);
        assert!(out.dz.get(0, 2) > 0.0);
        assert_eq!(out.dz.get(1, 1), 0.0);
        assert_eq!(out.dz.get(1, 2), 0.0);
        assert_eq!(out.per_row[1], d_softmax_intra(0.4, &c).0);
        let (inter, _) = d_softmax_inter(&[-0.3], &c);
        assert_eq!(out.per_row[0], d_softmax_intra(0.5, &c).0 + inter);

        let intra_only = InterSelection { weight: 0.0, ..Default::default() };
        let out = d_softmax_selected(&b, &c, &intra_only).unwrap();
        assert_eq!(out.dz.get(0, 0), 0.0);
        assert_eq!(out.dz.get(0, 2), 0.0);
    }

    #[test]
    fn hybrid_gradients_by_construction() {
        let b = batch(&[vec![0.2, 0.5, -0.3, 0.7]], &[1]);
        for (kind, base) in [
            (LossKind::HybridSoftmaxInter, LossKind::Softmax),
            (LossKind::HybridArcInter, LossKind::ArcFace),
        ] {
            let c = cfg(kind, 32.0);
            let h = hybrid_inter_only(&b, &c).unwrap();
            let full = softmax_family_forward_backward(&b, &c.with_kind(base)).unwrap();
            let (intra, g) = d_softmax_intra(0.5, &c);
            assert_eq!(h.dz.get(0, 1), g);
            for j in [0, 2, 3] {
                assert_eq!(h.dz.get(0, j), full.dz.get(0, j));
            }
            assert_eq!(h.per_row[0], full.per_row[0] + intra);
        }
    }

    #[test]
    fn chain_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let dz = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let (dx, dw) = chain_to_parameters(&dz, &x, &w).unwrap();
        assert_eq!(dx.row(0), &[0.0, 1.0]);
        assert_eq!(dw.row(0), &[1.0, 0.0]);

        let x = Matrix::from_rows(&[vec![2.0, 1.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![4.0, 2.0]]).unwrap();
        let (dx, _) = chain_to_parameters(&dz, &x, &w).unwrap();
        assert!(dx.row(0).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn loss_config_kv_round_trip() {
        let c = LossConfig::new(LossKind::ArcFace, 16.0, 0.7).unwrap().with_margins(3, 0.4, 0.2).unwrap();
        let kv = c.to_kv();
        assert!(kv.iter().all(|(k, _)| *k != "eps"));
        let back = LossConfig::from_kv(kv.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert!(LossConfig::from_kv([("eps", "3")]).is_err());
        assert!(LossConfig::from_kv([("bogus", "3")]).is_err());
        assert!(LossConfig::from_kv([("s", "-1")]).is_err());
        assert!(LossConfig::from_kv([("kind", "NotALoss")]).is_err());
    }
}
