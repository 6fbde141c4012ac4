//! Feed-forward tower over the concatenated field embeddings:
//! `a⁽ˡ⁺¹⁾ = σ(W⁽ˡ⁾ a⁽ˡ⁾ + b⁽ˡ⁾)` for each hidden layer, then a scalar head.
//!
//! The head is linear and yields a logit. With `literal_sigmoid_head` it is
//! squashed through a sigmoid before being added to the other logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{affine_accumulate, affine_backward_accumulate, check_keep_prob, dropout_mask, fill_init, sigmoid, Activation, DenseMatrix, InitScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    /// Probability that a hidden unit is kept during training.
    pub dropout_keep: f64,
    /// Also drop entries of the tower input.
    pub dropout_on_embedding: bool,
    pub literal_sigmoid_head: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![400, 400, 400],
            activation: Activation::Relu,
            dropout_keep: 0.5,
            dropout_on_embedding: false,
            literal_sigmoid_head: false,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() {
            return Err(Error::config("deep models need at least one hidden layer"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        check_keep_prob(self.dropout_keep)
    }

    fn uses_dropout(&self) -> bool {
        self.dropout_keep < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    pub layers: Vec<DenseLayer>,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

impl MlpParameters {
    /// Glorot-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, config: &MlpConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(input_dim, config)?;
        for l in &mut p.layers {
            let (rows, cols) = (l.weight.rows(), l.weight.cols());
            fill_init(l.weight.as_mut_slice(), cols, rows, InitScheme::GlorotUniform, rng);
        }
        let n = p.head_weight.len();
        fill_init(&mut p.head_weight, n, 1, InitScheme::GlorotUniform, rng);
        Ok(p)
    }

    pub fn zeros(input_dim: usize, config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::config("tower input dimension must be positive"));
        }
        let mut layers = Vec::with_capacity(config.hidden_sizes.len());
        let mut fan_in = input_dim;
        for &width in &config.hidden_sizes {
            layers.push(DenseLayer {
                weight: DenseMatrix::zeros(width, fan_in),
                bias: vec![0.0; width],
            });
            fan_in = width;
        }
        Ok(Self {
            layers,
            head_weight: vec![0.0; fan_in],
            head_bias: 0.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    mode: Mode,
    /// tower input after optional input dropout
    input: Vec<f64>,
    input_mask: Option<Vec<f64>>,
    /// pre-activations per hidden layer
    pre: Vec<Vec<f64>>,
    /// layer outputs after activation and dropout
    post: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    head_pre: f64,
}

impl MlpCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

impl MlpGradients {
    pub fn zeros_like(p: &MlpParameters) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.as_slice().len()], vec![0.0; l.bias.len()]))
                .collect(),
            head_weight: vec![0.0; p.head_weight.len()],
            head_bias: 0.0,
        }
    }

    pub fn add(&mut self, other: &MlpGradients) {
        for ((gw, gb), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            gw.iter_mut().zip(ow).for_each(|(a, b)| *a += b);
            gb.iter_mut().zip(ob).for_each(|(a, b)| *a += b);
        }
        self.head_weight.iter_mut().zip(&other.head_weight).for_each(|(a, b)| *a += b);
        self.head_bias += other.head_bias;
    }

    pub fn scale(&mut self, s: f64) {
        for (gw, gb) in &mut self.layers {
            gw.iter_mut().for_each(|x| *x *= s);
            gb.iter_mut().for_each(|x| *x *= s);
        }
        self.head_weight.iter_mut().for_each(|x| *x *= s);
        self.head_bias *= s;
    }
}

/// Forward pass. Train mode draws dropout masks from `rng`; eval mode never
/// touches it.
pub fn mlp_forward<R: Rng + ?Sized>(
    a0: &[f64],
    params: &MlpParameters,
    config: &MlpConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, MlpCache)> {
    if a0.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "mlp input",
            expected: params.input_dim(),
            got: a0.len(),
        });
    }
    let train_dropout = mode == Mode::Train && config.uses_dropout();
    let mut input = a0.to_vec();
    let input_mask = if train_dropout && config.dropout_on_embedding {
        let mask = dropout_mask(input.len(), config.dropout_keep, rng)?;
        input.iter_mut().zip(&mask).for_each(|(x, m)| *x *= m);
        Some(mask)
    } else {
        None
    };

    let n = params.layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for layer in &params.layers {
        let a = post.last().unwrap_or(&input);
        let mut z = layer.bias.clone();
        affine_accumulate(layer.weight.as_slice(), layer.weight.cols(), a, &mut z);
        let mut h: Vec<f64> = z.iter().map(|&v| config.activation.apply(v)).collect();
        let mask = if train_dropout {
            let mask = dropout_mask(h.len(), config.dropout_keep, rng)?;
            h.iter_mut().zip(&mask).for_each(|(x, m)| *x *= m);
            Some(mask)
        } else {
            None
        };
        pre.push(z);
        post.push(h);
        masks.push(mask);
    }
    let last = post.last().expect("at least one hidden layer");
    let head_pre = params.head_bias + last.iter().zip(&params.head_weight).map(|(a, w)| a * w).sum::<f64>();
    let y = if config.literal_sigmoid_head { sigmoid(head_pre) } else { head_pre };
    Ok((
        y,
        MlpCache {
            mode,
            input,
            input_mask,
            pre,
            post,
            masks,
            head_pre,
        },
    ))
}

/// Accumulate `upstream · ∂y/∂θ` into `grads` and return `∂(upstream·y)/∂a⁽⁰⁾`.
pub fn mlp_backward_accumulate(
    cache: &MlpCache,
    upstream: f64,
    params: &MlpParameters,
    config: &MlpConfig,
    grads: &mut MlpGradients,
) -> Result<Vec<f64>> {
    if cache.mode == Mode::Eval && config.uses_dropout() {
        return Err(Error::MissingDropoutMasks);
    }
    if cache.pre.len() != params.layers.len() || grads.layers.len() != params.layers.len() {
        return Err(Error::DimensionMismatch {
            context: "mlp cache depth",
            expected: params.layers.len(),
            got: cache.pre.len(),
        });
    }
    let mut g_head = upstream;
    if config.literal_sigmoid_head {
        let s = sigmoid(cache.head_pre);
        g_head *= s * (1.0 - s);
    }
    let last = cache.post.last().expect("at least one hidden layer");
    for (g, a) in grads.head_weight.iter_mut().zip(last) {
        *g += g_head * a;
    }
    grads.head_bias += g_head;

    // gradient w.r.t. the (post-dropout) output of the current layer
    let mut g_out: Vec<f64> = params.head_weight.iter().map(|w| w * g_head).collect();
    for l in (0..params.layers.len()).rev() {
        if let Some(mask) = &cache.masks[l] {
            g_out.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        for (g, &z) in g_out.iter_mut().zip(&cache.pre[l]) {
            *g *= config.activation.derivative(z);
        }
        let layer = &params.layers[l];
        let a_prev = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let mut g_prev = vec![0.0; layer.weight.cols()];
        let (gw, gb) = &mut grads.layers[l];
        affine_backward_accumulate(layer.weight.as_slice(), layer.weight.cols(), a_prev, &g_out, gw, &mut g_prev);
        gb.iter_mut().zip(&g_out).for_each(|(b, g)| *b += g);
        g_out = g_prev;
    }
    if let Some(mask) = &cache.input_mask {
        g_out.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
    }
    Ok(g_out)
}

/// Gradients of one forward call, plus the gradient flowing into the input.
pub fn mlp_backward(
    cache: &MlpCache,
    upstream: f64,
    params: &MlpParameters,
    config: &MlpConfig,
) -> Result<(MlpGradients, Vec<f64>)> {
    let mut grads = MlpGradients::zeros_like(params);
    let g_input = mlp_backward_accumulate(cache, upstream, params, config, &mut grads)?;
    Ok((grads, g_input))
}
