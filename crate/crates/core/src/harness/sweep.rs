//! Hyper-parameter grids and the network-shape helper.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Activation;
use crate::zoo::ModelSpec;

pub const DROPOUT_KEEPS: [f64; 6] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5];
pub const NEURONS_PER_LAYER: [usize; 4] = [100, 200, 400, 800];
pub const HIDDEN_LAYERS: [usize; 4] = [1, 3, 5, 7];
pub const ACTIVATIONS: [Activation; 2] = [Activation::Relu, Activation::Tanh];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Constant,
    Increasing,
    Decreasing,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Constant, ShapeKind::Increasing, ShapeKind::Decreasing, ShapeKind::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Constant => "constant",
            ShapeKind::Increasing => "increasing",
            ShapeKind::Decreasing => "decreasing",
            ShapeKind::Diamond => "diamond",
        }
    }

    fn weights(self, layers: usize) -> Vec<usize> {
        (0..layers)
            .map(|i| match self {
                ShapeKind::Constant => 1,
                ShapeKind::Increasing => i + 1,
                ShapeKind::Decreasing => layers - i,
                ShapeKind::Diamond => (i + 1).min(layers - i),
            })
            .collect()
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape `{s}`")))
    }
}

/// Hidden sizes for a `layers`-deep tower with `total` neurons.
///
/// Each layer gets an integer multiple of `total / Σweights` (floored) and the
/// remainder goes to the last layer, so the sizes always sum to `total`.
pub fn shape_axis(layers: usize, total: usize, shape: ShapeKind) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::config("shape axis needs at least one layer"));
    }
    let weights = shape.weights(layers);
    let sum: usize = weights.iter().sum();
    let unit = total / sum;
    if unit == 0 {
        return Err(Error::config(format!("{total} neurons cannot fill a {shape} tower of {layers} layers")));
    }
    let mut sizes: Vec<usize> = weights.iter().map(|w| w * unit).collect();
    let used: usize = sizes.iter().sum();
    *sizes.last_mut().unwrap() += total - used;
    Ok(sizes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Activation,
    Dropout,
    Neurons,
    Layers,
    Shape,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [SweepAxis::Activation, SweepAxis::Dropout, SweepAxis::Neurons, SweepAxis::Layers, SweepAxis::Shape];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Activation => "activation",
            SweepAxis::Dropout => "dropout",
            SweepAxis::Neurons => "neurons",
            SweepAxis::Layers => "layers",
            SweepAxis::Shape => "shape",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(SweepAxis::Activation),
            "dropout" | "dropout_keep" => Ok(SweepAxis::Dropout),
            "neurons" | "neurons_per_layer" => Ok(SweepAxis::Neurons),
            "layers" | "n_layers" => Ok(SweepAxis::Layers),
            "shape" => Ok(SweepAxis::Shape),
            other => Err(Error::config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// One grid point: the axis value as printed and the resulting spec.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub spec: ModelSpec,
}

/// Expand `axis` around `base`. The neurons axis keeps the base depth, the
/// layers axis keeps the base width of the first hidden layer.
pub fn sweep_points(axis: SweepAxis, base: &ModelSpec, layers: usize, total_neurons: usize, shapes: &[ShapeKind]) -> Result<Vec<SweepPoint>> {
    if !base.architecture.has_deep() {
        return Err(Error::config(format!("{} has no deep tower to sweep", base.architecture)));
    }
    let with = |value: String, f: &dyn Fn(&mut ModelSpec)| {
        let mut spec = base.clone();
        f(&mut spec);
        spec.validate().map(|_| SweepPoint { value, spec })
    };
    let depth = base.mlp.hidden_sizes.len();
    let width = base.mlp.hidden_sizes[0];
    match axis {
        SweepAxis::Activation => ACTIVATIONS.iter().map(|&a| with(a.name().into(), &|s| s.mlp.activation = a)).collect(),
        SweepAxis::Dropout => DROPOUT_KEEPS.iter().map(|&p| with(format!("{p:.1}"), &|s| s.mlp.dropout_keep = p)).collect(),
        SweepAxis::Neurons => NEURONS_PER_LAYER
            .iter()
            .map(|&n| with(n.to_string(), &|s| s.mlp.hidden_sizes = vec![n; depth]))
            .collect(),
        SweepAxis::Layers => HIDDEN_LAYERS
            .iter()
            .map(|&l| with(l.to_string(), &|s| s.mlp.hidden_sizes = vec![width; l]))
            .collect(),
        SweepAxis::Shape => {
            let shapes = if shapes.is_empty() { &ShapeKind::ALL[..] } else { shapes };
            shapes
                .iter()
                .map(|&k| {
                    let sizes = shape_axis(layers, total_neurons, k)?;
                    with(k.name().into(), &|s| s.mlp.hidden_sizes = sizes.clone())
                })
                .collect()
        }
    }
}
