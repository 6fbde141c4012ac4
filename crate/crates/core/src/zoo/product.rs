//! PNN product layer.
//!
//! The layer has no parameters of its own. Its output is the raw field
//! embeddings followed by the product features, and the first hidden layer
//! of the tower plays the role of the product-layer weights.
//!
//! Output layout for `m` fields of width `k`:
//!
//! ```text
//! [ e_1 .. e_m | ⟨e_i, e_j⟩ for i < j (inner) | vec(p pᵀ), p = Σ e_i (outer) ]
//! ```

use serde::{Deserialize, Serialize};

use crate::embedding::FieldEmbeddings;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProductKind {
    Inner,
    Outer,
    Both,
}

impl ProductKind {
    fn inner(self) -> bool {
        matches!(self, ProductKind::Inner | ProductKind::Both)
    }

    fn outer(self) -> bool {
        matches!(self, ProductKind::Outer | ProductKind::Both)
    }
}

/// Width of [`product_layer`]'s output.
pub fn product_output_len(m: usize, k: usize, kind: ProductKind) -> usize {
    let mut n = m * k;
    if kind.inner() {
        n += m * m.saturating_sub(1) / 2;
    }
    if kind.outer() {
        n += k * k;
    }
    n
}

fn check_fields(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::config(format!("product layer needs at least 2 fields, got {m}")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn product_layer(e: &FieldEmbeddings, kind: ProductKind) -> Result<Vec<f64>> {
    let (m, k) = (e.num_fields(), e.k);
    check_fields(m)?;
    let mut out = Vec::with_capacity(product_output_len(m, k, kind));
    out.extend_from_slice(&e.values);
    if kind.inner() {
        for i in 0..m {
            for j in i + 1..m {
                out.push(dot(e.field(i), e.field(j)));
            }
        }
    }
    if kind.outer() {
        let p = field_sum(e);
        for a in 0..k {
            for b in 0..k {
                out.push(p[a] * p[b]);
            }
        }
    }
    Ok(out)
}

fn field_sum(e: &FieldEmbeddings) -> Vec<f64> {
    let mut p = vec![0.0; e.k];
    for f in 0..e.num_fields() {
        p.iter_mut().zip(e.field(f)).for_each(|(s, v)| *s += v);
    }
    p
}

/// Map a gradient on the layer output back onto the `m·k` field embeddings.
pub fn product_layer_backward(e: &FieldEmbeddings, kind: ProductKind, upstream: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = (e.num_fields(), e.k);
    check_fields(m)?;
    let expected = product_output_len(m, k, kind);
    if upstream.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "product layer upstream",
            expected,
            got: upstream.len(),
        });
    }
    let mut g = upstream[..m * k].to_vec();
    let mut pos = m * k;
    if kind.inner() {
        for i in 0..m {
            for j in i + 1..m {
                let u = upstream[pos];
                pos += 1;
                if u == 0.0 {
                    continue;
                }
                for f in 0..k {
                    g[i * k + f] += u * e.values[j * k + f];
                    g[j * k + f] += u * e.values[i * k + f];
                }
            }
        }
    }
    if kind.outer() {
        let p = field_sum(e);
        let u = &upstream[pos..pos + k * k];
        // ∂/∂p_a = Σ_b (u_ab + u_ba) p_b, shared by every field
        let gp: Vec<f64> = (0..k).map(|a| (0..k).map(|b| (u[a * k + b] + u[b * k + a]) * p[b]).sum()).collect();
        for f in 0..m {
            g[f * k..(f + 1) * k].iter_mut().zip(&gp).for_each(|(x, y)| *x += y);
        }
    }
    Ok(g)
}
