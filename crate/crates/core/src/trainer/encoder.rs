use crate::config::EncoderKind;
use crate::error::{Error, Result};
use crate::math::{dot, Matrix, RngState};

/// Maps raw features to embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    kind: EncoderKind,
    /// `out x in`; unused for the identity encoder.
    weight: Matrix,
    bias: Vec<f64>,
    vel_weight: Matrix,
    vel_bias: Vec<f64>,
}

impl Encoder {
    /// A square linear encoder starts at the identity; otherwise entries are
    /// `N(0, 1 / in_dim)`.
    pub fn new(kind: EncoderKind, in_dim: usize, out_dim: usize, rng: &mut RngState) -> Result<Self> {
        let weight = match kind {
            EncoderKind::Identity if in_dim != out_dim => {
                return Err(Error::Dimension { expected: in_dim, got: out_dim });
            }
            EncoderKind::Identity => Matrix::zeros(0, 0),
            EncoderKind::Linear if in_dim == out_dim => Matrix::identity(in_dim),
            EncoderKind::Linear => {
                let scale = 1.0 / (in_dim as f64).sqrt();
                let data = (0..in_dim * out_dim).map(|_| scale * rng.gaussian()).collect();
                Matrix::new(out_dim, in_dim, data)?
            }
        };
        let bias_len = if kind == EncoderKind::Linear { out_dim } else { 0 };
        Ok(Self {
            kind,
            vel_weight: Matrix::zeros(weight.rows(), weight.cols()),
            weight,
            bias: vec![0.0; bias_len],
            vel_bias: vec![0.0; bias_len],
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if self.kind == EncoderKind::Identity {
            return Ok(x.clone());
        }
        if x.cols() != self.weight.cols() {
            return Err(Error::Dimension { expected: self.weight.cols(), got: x.cols() });
        }
        let out = self.weight.rows();
        let mut e = Matrix::zeros(x.rows(), out);
        for i in 0..x.rows() {
            let xi = x.row(i);
            for (a, o) in e.row_mut(i).iter_mut().enumerate() {
                *o = dot(self.weight.row(a), xi) + self.bias[a];
            }
        }
        Ok(e)
    }

    /// One momentum SGD step from the embedding gradient `d_emb` of a batch `x`.
    pub fn step(&mut self, x: &Matrix, d_emb: &Matrix, lr: f64, momentum: f64) {
        if self.kind == EncoderKind::Identity {
            return;
        }
        let (out, inp) = (self.weight.rows(), self.weight.cols());
        let mut gw = Matrix::zeros(out, inp);
        let mut gb = vec![0.0; out];
        for i in 0..x.rows() {
            let xi = x.row(i);
            for (a, &g) in d_emb.row(i).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[a] += g;
                for (w, &xv) in gw.row_mut(a).iter_mut().zip(xi) {
                    *w += g * xv;
                }
            }
        }
        for ((w, v), g) in self
            .weight
            .as_mut_slice()
            .iter_mut()
            .zip(self.vel_weight.as_mut_slice())
            .zip(gw.as_slice())
        {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
        for ((b, v), g) in self.bias.iter_mut().zip(&mut self.vel_bias).zip(&gb) {
            *v = momentum * *v + g;
            *b -= lr * *v;
        }
    }
}
