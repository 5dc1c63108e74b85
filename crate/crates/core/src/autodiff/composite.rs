//! Helpers expressed purely in terms of graph primitives.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

impl Graph {
    /// Concatenation along the first axis of 2-D tensors.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            cols.push(self.transpose(p)?);
        }
        let joined = self.concat(&cols)?;
        self.transpose(joined)
    }

    /// Mean over rows of `[r,c]`, giving `[1,c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a)[0];
        let w = self.constant(Tensor::full(&[1, r], 1.0 / r as f64));
        self.matmul(w, a)
    }

    /// Row-wise unit normalization with a stabilizing `eps` added to each norm.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let n = self.l2_norm(a)?;
        let n = self.add_scalar(n, eps)?;
        let inv = self.recip(n)?;
        self.mul_col(a, inv)
    }

    /// Scaled dot-product attention with an optional additive mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let d = self.shape(q)[1];
        if self.shape(k)[1] != d {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let mut scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        if let Some(m) = mask {
            scores = self.add(scores, m)?;
        }
        let weights = self.softmax(scores)?;
        self.matmul(weights, v)
    }
}
