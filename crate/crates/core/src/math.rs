//! Dense primitives shared by every model: matrices, activations, affine maps,
//! initializers, dropout masks and the logistic loss.
//!
//! Everything is `f64` and computed with plain loops; the loops double as the
//! reference implementation that tests compare against.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Identity,
    ];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation value. `relu'(0)` is 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn apply_activation(kind: Activation, v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| kind.apply(x)).collect()
}

/// `upstream ⊙ σ'(pre_activation)`.
pub fn activation_grad(kind: Activation, pre_activation: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    check_len("activation_grad", pre_activation.len(), upstream.len())?;
    Ok(pre_activation
        .iter()
        .zip(upstream)
        .map(|(&z, &g)| g * kind.derivative(z))
        .collect())
}

/// `W a + b`.
pub fn affine_forward(w: &DenseMatrix, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len("affine_forward input", w.cols, a.len())?;
    check_len("affine_forward bias", w.rows, b.len())?;
    let mut out = b.to_vec();
    affine_accumulate(w.as_slice(), w.cols, a, &mut out);
    Ok(out)
}

/// `out += W a` for a row-major `W` with `cols` columns.
#[inline]
pub(crate) fn affine_accumulate(w: &[f64], cols: usize, a: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = 0.0;
        for (wi, ai) in row.iter().zip(a) {
            acc += wi * ai;
        }
        *o += acc;
    }
}

/// Gradients of `W a + b` given the upstream gradient of its output.
///
/// Returns `(upstream ⊗ aᵀ, upstream, Wᵀ upstream)`.
pub fn affine_backward(
    w: &DenseMatrix,
    a: &[f64],
    upstream: &[f64],
) -> Result<(DenseMatrix, Vec<f64>, Vec<f64>)> {
    check_len("affine_backward input", w.cols, a.len())?;
    check_len("affine_backward upstream", w.rows, upstream.len())?;
    let mut grad_w = DenseMatrix::zeros(w.rows, w.cols);
    let mut grad_a = vec![0.0; w.cols];
    affine_backward_accumulate(w.as_slice(), w.cols, a, upstream, grad_w.as_mut_slice(), &mut grad_a);
    Ok((grad_w, upstream.to_vec(), grad_a))
}

/// Accumulating form of [`affine_backward`]: `grad_w += u aᵀ`, `grad_a += Wᵀ u`.
/// The bias gradient equals `upstream` and is left to the caller.
#[inline]
pub(crate) fn affine_backward_accumulate(
    w: &[f64],
    cols: usize,
    a: &[f64],
    upstream: &[f64],
    grad_w: &mut [f64],
    grad_a: &mut [f64],
) {
    for (r, &u) in upstream.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        let w_row = &w[r * cols..(r + 1) * cols];
        let gw_row = &mut grad_w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            gw_row[c] += u * a[c];
            grad_a[c] += u * w_row[c];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
    Normal { std: f64 },
}

/// Fill `out` from `scheme`, treating it as a `fan_out × fan_in` block.
pub(crate) fn fill_init<R: Rng + ?Sized>(
    out: &mut [f64],
    fan_in: usize,
    fan_out: usize,
    scheme: InitScheme,
    rng: &mut R,
) {
    match scheme {
        InitScheme::GlorotUniform => {
            let bound = glorot_bound(fan_in, fan_out);
            for x in out.iter_mut() {
                *x = rng.random_range(-bound..=bound);
            }
        }
        InitScheme::Normal { std } => {
            if std == 0.0 {
                out.fill(0.0);
                return;
            }
            let normal = Normal::new(0.0, std).expect("std is finite and positive");
            for x in out.iter_mut() {
                *x = normal.sample(rng);
            }
        }
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// A `rows × cols` matrix drawn from `scheme` with a private seeded RNG.
pub fn init_parameters(rows: usize, cols: usize, scheme: InitScheme, seed: u64) -> Result<DenseMatrix> {
    use rand::SeedableRng;
    if rows == 0 || cols == 0 {
        return Err(Error::config(format!("cannot initialize a {rows}x{cols} matrix")));
    }
    if let InitScheme::Normal { std } = scheme {
        if !(std.is_finite() && std >= 0.0) {
            return Err(Error::config(format!("invalid normal std {std}")));
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut m = DenseMatrix::zeros(rows, cols);
    fill_init(m.as_mut_slice(), cols, rows, scheme, &mut rng);
    Ok(m)
}

/// Inverted-dropout mask: each entry is `1/keep_prob` with probability
/// `keep_prob`, else 0.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, keep_prob: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_keep_prob(keep_prob)?;
    if keep_prob == 1.0 {
        return Ok(vec![1.0; len]);
    }
    let scale = 1.0 / keep_prob;
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < keep_prob { scale } else { 0.0 })
        .collect())
}

pub(crate) fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("dropout keep probability {keep_prob} outside (0, 1]")))
    }
}

/// `log(1 + exp(-s·logit))` with `s = ±1` from the label, evaluated without
/// overflow.
#[inline]
pub fn logistic_loss(logit: f64, label: u8) -> f64 {
    let z = if label == 1 { logit } else { -logit };
    // log(1 + e^{-z}) = max(-z, 0) + log(1 + e^{-|z|})
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Derivative of [`logistic_loss`] with respect to the logit.
#[inline]
pub fn logistic_loss_grad(logit: f64, label: u8) -> f64 {
    sigmoid(logit) - f64::from(label)
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

/// SplitMix64 finalizer over `a` and `b`, used to derive independent seeds.
pub(crate) fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn activation_values() {
        assert_eq!(apply_activation(Activation::Relu, &[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(apply_activation(Activation::Sigmoid, &[0.0]), vec![0.5]);
        let t = apply_activation(Activation::Tanh, &[0.0, 40.0]);
        assert_eq!(t[0], 0.0);
        assert!((t[1] - 1.0).abs() < 1e-15);
        assert_eq!(apply_activation(Activation::Identity, &[-3.5, 7.0]), vec![-3.5, 7.0]);
    }

    #[test]
    fn activation_grad_values() {
        let g = activation_grad(Activation::Relu, &[-1.0, 2.0], &[5.0, 5.0]).unwrap();
        assert_eq!(g, vec![0.0, 5.0]);
        let g = activation_grad(Activation::Sigmoid, &[0.0], &[1.0]).unwrap();
        assert_eq!(g, vec![0.25]);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        for kind in Activation::ALL {
            let g = activation_grad(kind, &[-0.3, 0.0, 1.7], &[0.0; 3]).unwrap();
            assert!(g.iter().all(|&x| x == 0.0));
        }
        assert!(activation_grad(Activation::Tanh, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in Activation::ALL {
            for _ in 0..200 {
                let mut x: f64 = rng.random_range(-4.0..4.0);
                if kind == Activation::Relu && x.abs() < 1e-3 {
                    x += 0.01;
                }
                let fd = central_diff(|t| kind.apply(t), x, 1e-6);
                let an = kind.derivative(x);
                if an.abs() < 1e-9 && fd.abs() < 1e-9 {
                    continue;
                }
                assert!(rel_err(an, fd) < 1e-6, "{kind} at {x}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn affine_identity_and_zero() {
        let a = [1.5, -2.0, 3.0];
        assert_eq!(affine_forward(&DenseMatrix::identity(3), &a, &[0.0; 3]).unwrap(), a.to_vec());
        let c = [0.25, -1.0];
        assert_eq!(affine_forward(&DenseMatrix::zeros(2, 3), &a, &c).unwrap(), c.to_vec());
        assert!(affine_forward(&DenseMatrix::zeros(2, 3), &a[..2], &c).is_err());
        assert!(affine_forward(&DenseMatrix::zeros(2, 3), &a, &a).is_err());
    }

    #[test]
    fn affine_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = DenseMatrix::from_vec(3, 2, w.clone()).unwrap();
        let out = affine_forward(&m, &a, &b).unwrap();
        for i in 0..3 {
            let mut naive = b[i];
            for j in 0..2 {
                naive += w[i * 2 + j] * a[j];
            }
            assert!((out[i] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_backward_trivial_cases() {
        let w = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (gw, gb, ga) = affine_backward(&w, &[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert!(gw.as_slice().iter().chain(&gb).chain(&ga).all(|&x| x == 0.0));
        let (gw, gb, _) = affine_backward(&w, &[0.0, 0.0], &[0.5, -2.0]).unwrap();
        assert!(gw.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(gb, vec![0.5, -2.0]);
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, cols) = (4, 3);
        let w = DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        // scalar objective L = u · (W a + b)
        let objective = |w: &DenseMatrix, a: &[f64], b: &[f64]| -> f64 {
            affine_forward(w, a, b).unwrap().iter().zip(&u).map(|(o, g)| o * g).sum()
        };
        let (gw, gb, ga) = affine_backward(&w, &a, &u).unwrap();
        let h = 1e-6;
        for idx in 0..rows * cols {
            let mut wp = w.clone();
            wp.as_mut_slice()[idx] += h;
            let mut wm = w.clone();
            wm.as_mut_slice()[idx] -= h;
            let fd = (objective(&wp, &a, &b) - objective(&wm, &a, &b)) / (2.0 * h);
            assert!(rel_err(gw.as_slice()[idx], fd) < 1e-6);
        }
        for j in 0..cols {
            let mut ap = a.clone();
            ap[j] += h;
            let mut am = a.clone();
            am[j] -= h;
            let fd = (objective(&w, &ap, &b) - objective(&w, &am, &b)) / (2.0 * h);
            assert!(rel_err(ga[j], fd) < 1e-6);
        }
        for i in 0..rows {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (objective(&w, &a, &bp) - objective(&w, &a, &bm)) / (2.0 * h);
            assert!(rel_err(gb[i], fd) < 1e-6);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_parameters(4, 4, InitScheme::GlorotUniform, 9).unwrap();
        let b = init_parameters(4, 4, InitScheme::GlorotUniform, 9).unwrap();
        assert_eq!(
            a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(a.as_slice().iter().all(|x| x.abs() <= bound));
        assert!(init_parameters(0, 4, InitScheme::GlorotUniform, 1).is_err());
    }

    #[test]
    fn glorot_sample_mean_within_standard_error() {
        // 10^5 draws from U(-b, b): sd = b/sqrt(3), so the mean has standard
        // error b/sqrt(3·10^5); allow three of them.
        let m = init_parameters(100, 1000, InitScheme::GlorotUniform, 21).unwrap();
        let bound = glorot_bound(1000, 100);
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * bound / (3.0 * n).sqrt());
    }

    #[test]
    fn dropout_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(dropout_mask(5, 1.0, &mut rng).unwrap(), vec![1.0; 5]);
        assert!(dropout_mask(5, 0.0, &mut rng).is_err());
        assert!(dropout_mask(5, 1.5, &mut rng).is_err());

        let mask = dropout_mask(100_000, 0.5, &mut rng).unwrap();
        let kept = mask.iter().filter(|&&x| x != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() < 0.01);
        assert!(mask.iter().all(|&x| x == 0.0 || x == 2.0));
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for keep in [0.9, 0.7, 0.5, 0.3] {
            let n = 200_000;
            let mask = dropout_mask(n, keep, &mut rng).unwrap();
            let mean = mask.iter().sum::<f64>() / n as f64;
            // entry variance is (1 - keep) / keep
            let se = ((1.0 - keep) / keep / n as f64).sqrt();
            assert!((mean - 1.0).abs() < 3.0 * se, "keep={keep} mean={mean}");
        }
    }

    #[test]
    fn logistic_loss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((logistic_loss(0.0, 1) - ln2).abs() < 1e-15);
        assert!((logistic_loss(0.0, 0) - ln2).abs() < 1e-15);
        let tiny = logistic_loss(40.0, 1);
        assert!(tiny >= 0.0 && tiny < 1e-17);
        assert!(logistic_loss(-800.0, 1).is_finite());
        // log(1 + e^1.5) = 1.7014132779827524 (evaluated at high precision)
        assert!((logistic_loss(1.5, 0) - 1.701_413_277_982_752_4).abs() < 1e-12);
        assert!((logistic_loss_grad(0.0, 1) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn logistic_loss_grad_matches_finite_difference() {
        for label in [0u8, 1] {
            for &x in &[-5.0, -0.7, 0.0, 0.3, 4.2] {
                let fd = central_diff(|t| logistic_loss(t, label), x, 1e-6);
                assert!(rel_err(logistic_loss_grad(x, label), fd) < 1e-6);
            }
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn logistic_loss_is_nonnegative(logit in -1e3f64..1e3, label in 0u8..=1) {
                prop_assert!(logistic_loss(logit, label) >= 0.0);
            }

            #[test]
            fn sigmoid_stays_in_unit_interval(x in -1e3f64..1e3) {
                let s = sigmoid(x);
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
