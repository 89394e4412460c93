use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Layer widths of the encoder/decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub feature: usize,
    pub hidden: usize,
    pub latent: usize,
    pub ffn: usize,
}

impl Dims {
    pub fn with_feature(feature: usize) -> Self {
        Self {
            feature,
            ..Self::default()
        }
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            feature: crate::agents::DEFAULT_EMBED_DIM,
            hidden: 64,
            latent: 32,
            ffn: 128,
        }
    }
}

/// Trainable weights: a shared first GCN layer, mean and log-std heads, and
/// the edge-scoring feed-forward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignerParams {
    pub w_shared: Matrix,
    pub w_mu: Matrix,
    pub w_logsigma: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Matrix,
    pub ffn_b2: f64,
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

impl DesignerParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: Dims, rng: &mut Rng) -> Self {
        let w_shared = glorot(dims.feature, dims.hidden, rng);
        let w_mu = glorot(dims.hidden, dims.latent, rng);
        let w_logsigma = glorot(dims.hidden, dims.latent, rng);
        let ffn_w1 = glorot(3 * dims.latent, dims.ffn, rng);
        let ffn_w2 = glorot(dims.ffn, 1, rng);
        Self {
            w_shared,
            w_mu,
            w_logsigma,
            ffn_w1,
            ffn_b1: vec![0.0; dims.ffn],
            ffn_w2,
            ffn_b2: 0.0,
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            w_shared: Matrix::zeros(dims.feature, dims.hidden),
            w_mu: Matrix::zeros(dims.hidden, dims.latent),
            w_logsigma: Matrix::zeros(dims.hidden, dims.latent),
            ffn_w1: Matrix::zeros(3 * dims.latent, dims.ffn),
            ffn_b1: vec![0.0; dims.ffn],
            ffn_w2: Matrix::zeros(dims.ffn, 1),
            ffn_b2: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            feature: self.w_shared.rows(),
            hidden: self.w_shared.cols(),
            latent: self.w_mu.cols(),
            ffn: self.ffn_w1.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let ok = self.w_mu.shape() == (d.hidden, d.latent)
            && self.w_logsigma.shape() == (d.hidden, d.latent)
            && self.ffn_w1.shape() == (3 * d.latent, d.ffn)
            && self.ffn_b1.len() == d.ffn
            && self.ffn_w2.shape() == (d.ffn, 1);
        if !ok {
            return Err(Error::Config("designer parameter shapes are inconsistent".into()));
        }
        if !self.is_finite() {
            return Err(Error::Config("designer parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// Parameter blocks in a fixed order.
    pub fn blocks(&self) -> [&[f64]; 7] {
        [
            self.w_shared.as_slice(),
            self.w_mu.as_slice(),
            self.w_logsigma.as_slice(),
            self.ffn_w1.as_slice(),
            &self.ffn_b1,
            self.ffn_w2.as_slice(),
            std::slice::from_ref(&self.ffn_b2),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w_shared.as_mut_slice(),
            self.w_mu.as_mut_slice(),
            self.w_logsigma.as_mut_slice(),
            self.ffn_w1.as_mut_slice(),
            &mut self.ffn_b1,
            self.ffn_w2.as_mut_slice(),
            std::slice::from_mut(&mut self.ffn_b2),
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for b in self.blocks() {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut i = index;
        for b in self.blocks_mut() {
            if i < b.len() {
                b[i] = value;
                return;
            }
            i -= b.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// `self += scale · other`.
    pub fn axpy(&mut self, scale: f64, other: &DesignerParams) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_respects_glorot_bounds() {
        let dims = Dims::default();
        let p = DesignerParams::init(dims, &mut Rng::new(0));
        p.validate().unwrap();
        let bound = (6.0f64 / (384.0 + 64.0)).sqrt();
        assert!(p.w_shared.max_abs() <= bound);
        assert!(p.ffn_b1.iter().all(|b| *b == 0.0));
        assert_eq!(p.ffn_b2, 0.0);
        assert_eq!(p, DesignerParams::init(dims, &mut Rng::new(0)));
    }

    #[test]
    fn flat_indexing_covers_every_block() {
        let dims = Dims {
            feature: 2,
            hidden: 2,
            latent: 1,
            ffn: 2,
        };
        let mut p = DesignerParams::zeros(dims);
        let n = p.len();
        assert_eq!(n, 4 + 2 + 2 + 6 + 2 + 2 + 1);
        for i in 0..n {
            p.set_flat(i, i as f64);
        }
        assert_eq!(p.flatten(), (0..n).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(p.ffn_b2, (n - 1) as f64);
        assert_eq!(p.get_flat(5), 5.0);
    }
}
