use crate::error::{Error, Result};
use crate::math::{dot, l2_normalize, Matrix, RngState};

/// Gaussian class prototypes on the unit sphere with noisy unit-norm samples around them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub prototypes: Matrix,
    /// One sample per row, grouped by class.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub noise_sigma: f64,
    /// Mean cosine over all same-class sample pairs, measured at generation time.
    pub within_class_cosine: f64,
}

impl SyntheticDataset {
    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Prototypes are normalized Gaussians; each sample is `normalize(prototype + sigma * g)`.
pub fn generate_synthetic_dataset(
    classes: usize,
    dim: usize,
    per_class: usize,
    noise_sigma: f64,
    rng: &mut RngState,
) -> Result<SyntheticDataset> {
    if classes < 2 {
        return Err(Error::config("data.classes", "need at least two classes"));
    }
    if per_class < 2 {
        return Err(Error::config("data.per_class", "need at least two samples per class"));
    }
    if dim == 0 {
        return Err(Error::config("data.dim", "must be at least 1"));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::config("data.noise", "must be finite and non-negative"));
    }
    let mut protos = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let g: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        protos.extend(l2_normalize(&g)?);
    }
    let prototypes = Matrix::new(classes, dim, protos)?;

    let mut feats = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let p = prototypes.row(c);
        for _ in 0..per_class {
            let noisy: Vec<f64> = p.iter().map(|&v| v + noise_sigma * rng.gaussian()).collect();
            if noise_sigma == 0.0 {
                feats.extend_from_slice(p);
            } else {
                feats.extend(l2_normalize(&noisy)?);
            }
            labels.push(c);
        }
    }
    let features = Matrix::new(labels.len(), dim, feats)?;

    let mut total = 0.0;
    let mut pairs = 0usize;
    for c in 0..classes {
        let base = c * per_class;
        for i in base..base + per_class {
            for j in i + 1..base + per_class {
                total += dot(features.row(i), features.row(j));
                pairs += 1;
            }
        }
    }
    Ok(SyntheticDataset {
        prototypes,
        features,
        labels,
        noise_sigma,
        within_class_cosine: total / pairs as f64,
    })
}
