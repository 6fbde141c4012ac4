//! Factorization-machine output: order-1 term plus all pairwise
//! latent-vector interactions.
//!
//! The pairwise sum over active features uses the identity
//!
//! ```text
//! Σ_{i<j} ⟨v_i, v_j⟩ x_i x_j = ½ Σ_f [ (Σ_i v_{i,f} x_i)² − Σ_i v_{i,f}² x_i² ]
//! ```
//!
//! which costs `O(k · nnz)` instead of `O(k · nnz²)`.

use crate::data::SparseInstance;
use crate::embedding::{linear_backward, linear_term, SharedParameters, SparseGrad};
use crate::error::{Error, Result};

/// Per-instance intermediates kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FmForwardCache {
    /// `s_f = Σ_i v_{i,f} x_i`
    pub s: Vec<f64>,
    /// `q_f = Σ_i v_{i,f}² x_i²`
    pub q: Vec<f64>,
    pub linear: f64,
    pub pairwise: f64,
}

/// Gradients of the shared store `w`, bias and `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedGrads {
    pub w: SparseGrad,
    pub bias: f64,
    pub v: SparseGrad,
}

impl SharedGrads {
    pub fn new(k: usize) -> Self {
        Self {
            w: SparseGrad::new(1),
            bias: 0.0,
            v: SparseGrad::new(k),
        }
    }
}

pub fn fm_forward(x: &SparseInstance, params: &SharedParameters) -> Result<(f64, FmForwardCache)> {
    let linear = linear_term(x, &params.linear)?;
    let k = params.k();
    let mut s = vec![0.0; k];
    let mut q = vec![0.0; k];
    for e in x.entries() {
        if e.index >= params.dim() {
            return Err(Error::IndexOutOfRange {
                index: e.index,
                dim: params.dim(),
            });
        }
        let v = params.table.row(e.index);
        for f in 0..k {
            let t = v[f] * e.value;
            s[f] += t;
            q[f] += t * t;
        }
    }
    let pairwise = 0.5 * s.iter().zip(&q).map(|(s, q)| s * s - q).sum::<f64>();
    Ok((
        linear + pairwise,
        FmForwardCache {
            s,
            q,
            linear,
            pairwise,
        },
    ))
}

/// Accumulate `upstream · ∂y_fm/∂θ` into `grads`:
/// `∂y/∂w_i = x_i`, `∂y/∂v_{i,f} = x_i s_f − v_{i,f} x_i²`.
pub fn fm_backward(
    x: &SparseInstance,
    params: &SharedParameters,
    cache: &FmForwardCache,
    upstream: f64,
    grads: &mut SharedGrads,
) -> Result<()> {
    let k = params.k();
    if cache.s.len() != k || cache.q.len() != k || grads.v.width() != k {
        return Err(Error::DimensionMismatch {
            context: "fm cache",
            expected: k,
            got: cache.s.len(),
        });
    }
    if upstream == 0.0 {
        return Ok(());
    }
    linear_backward(x, upstream, &mut grads.w, &mut grads.bias, params.linear.use_bias);
    for e in x.entries() {
        let v = params.table.row(e.index);
        let xi = e.value;
        let g = grads.v.row_mut(e.index);
        for f in 0..k {
            g[f] += upstream * (xi * cache.s[f] - v[f] * xi * xi);
        }
    }
    Ok(())
}
