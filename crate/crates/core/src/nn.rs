//! Layer helpers over [`Session`]-bound parameters.

use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::params::Session;

/// `x W + b`, with the bias skipped when `{prefix}.b` does not exist.
pub fn linear(s: &mut Session<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = s.param(&format!("{prefix}.w"))?;
    let y = s.g.matmul(x, w)?;
    let bias = format!("{prefix}.b");
    if s.has_param(&bias) {
        let b = s.param(&bias)?;
        s.g.add_row(y, b)
    } else {
        Ok(y)
    }
}

/// `l2(tanh(l1(x)))`
pub fn mlp(s: &mut Session<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(s, x, &format!("{prefix}.l1"))?;
    let h = s.g.tanh(h)?;
    linear(s, h, &format!("{prefix}.l2"))
}

/// Scale-free row normalization: each row rescaled to norm `sqrt(width)`.
pub fn rms_norm(s: &mut Session<'_>, x: Var) -> Result<Var> {
    let d = s.g.shape(x)[1] as f64;
    let n = s.g.normalize_rows(x, 1e-6)?;
    s.g.scale(n, d.sqrt())
}

/// Additive mask blocking attention from row `i` to any column `j > i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.data_mut()[i * n + j] = -1e9;
        }
    }
    m
}

/// Block upper-triangular `[2t, 2t]` matrix turning per-step `(dx, dy)`
/// offsets laid out in a row into running sums when applied on the right.
pub fn cumsum_pairs(t: usize) -> Tensor {
    let n = 2 * t;
    let mut m = Tensor::zeros(&[n, n]);
    for s in 0..t {
        for u in s..t {
            for c in 0..2 {
                m.data_mut()[(2 * s + c) * n + 2 * u + c] = 1.0;
            }
        }
    }
    m
}
