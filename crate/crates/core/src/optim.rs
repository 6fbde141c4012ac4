//! Adam and FTRL-Proximal with row-sparse semantics.
//!
//! Both optimizers leave coordinates without a gradient entry untouched.
//! For Adam this is the "lazy" variant: moments of rows that receive no
//! gradient in a step do not decay, while the bias correction still uses the
//! global step count.

use serde::{Deserialize, Serialize};

use crate::embedding::SparseGrad;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FtrlConfig {
    pub alpha: f64,
    pub beta: f64,
    pub l1: f64,
    pub l2: f64,
}

impl Default for FtrlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            l1: 1.0,
            l2: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Ftrl(FtrlConfig),
}

impl OptimizerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Adam(_) => "adam",
            OptimizerConfig::Ftrl(_) => "ftrl",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            OptimizerConfig::Adam(c) => {
                c.lr > 0.0 && (0.0..1.0).contains(&c.beta1) && (0.0..1.0).contains(&c.beta2) && c.eps > 0.0
            }
            OptimizerConfig::Ftrl(c) => c.alpha > 0.0 && c.beta >= 0.0 && c.l1 >= 0.0 && c.l2 >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer hyper-parameters {self:?}")))
        }
    }
}

/// A gradient for one parameter block.
#[derive(Debug, Clone, Copy)]
pub enum GradBlock<'a> {
    Dense(&'a [f64]),
    /// Row-sparse; the parameter block is row-major with the grad's width.
    Sparse(&'a SparseGrad),
}

impl GradBlock<'_> {
    fn check_finite(&self) -> Result<()> {
        let finite = match self {
            GradBlock::Dense(g) => g.iter().all(|x| x.is_finite()),
            GradBlock::Sparse(g) => g.rows().all(|(_, r)| r.iter().all(|x| x.is_finite())),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("gradient (learning rate too high?)".into()))
        }
    }

    fn check_shape(&self, len: usize) -> Result<()> {
        match self {
            GradBlock::Dense(g) if g.len() != len => Err(Error::DimensionMismatch {
                context: "gradient block",
                expected: len,
                got: g.len(),
            }),
            GradBlock::Sparse(g) => match g.touched().last() {
                Some(row) if (row + 1) * g.width() > len => Err(Error::IndexOutOfRange {
                    index: row,
                    dim: len / g.width().max(1),
                }),
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Visit `(offset, gradient)` for every coordinate carried by the block.
    fn for_each(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            GradBlock::Dense(g) => g.iter().enumerate().for_each(|(i, &x)| f(i, x)),
            GradBlock::Sparse(g) => {
                let w = g.width();
                for (row, r) in g.rows() {
                    for (j, &x) in r.iter().enumerate() {
                        f(row * w + j, x);
                    }
                }
            }
        }
    }
}

/// Adam first/second moment stores for one block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam step at global step `t` (1-based).
pub fn adam_update(params: &mut [f64], grad: GradBlock<'_>, moments: &mut Moments, t: u64, cfg: &AdamConfig) -> Result<()> {
    grad.check_shape(params.len())?;
    grad.check_finite()?;
    if moments.m.len() != params.len() {
        moments.m = vec![0.0; params.len()];
        moments.v = vec![0.0; params.len()];
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    grad.for_each(|i, g| {
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        params[i] -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
    });
    Ok(())
}

/// FTRL-Proximal per-coordinate accumulators for one block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FtrlAccumulators {
    pub z: Vec<f64>,
    pub n: Vec<f64>,
}

/// One FTRL-Proximal step. Coordinates with a zero gradient are skipped; a
/// coordinate with `|z| ≤ λ1` is set to exactly 0.
pub fn ftrl_update(weights: &mut [f64], grad: GradBlock<'_>, acc: &mut FtrlAccumulators, cfg: &FtrlConfig) -> Result<()> {
    grad.check_shape(weights.len())?;
    grad.check_finite()?;
    if acc.z.len() != weights.len() {
        acc.z = vec![0.0; weights.len()];
        acc.n = vec![0.0; weights.len()];
    }
    grad.for_each(|i, g| {
        if g == 0.0 {
            return;
        }
        let n_old = acc.n[i];
        let n_new = n_old + g * g;
        let sigma = (n_new.sqrt() - n_old.sqrt()) / cfg.alpha;
        acc.z[i] += g - sigma * weights[i];
        acc.n[i] = n_new;
        let z = acc.z[i];
        weights[i] = if z.abs() <= cfg.l1 {
            0.0
        } else {
            -(z - z.signum() * cfg.l1) / ((cfg.beta + n_new.sqrt()) / cfg.alpha + cfg.l2)
        };
    });
    Ok(())
}

/// Optimizer state over an ordered list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam {
        config: AdamConfig,
        t: u64,
        slots: Vec<Moments>,
    },
    Ftrl {
        config: FtrlConfig,
        slots: Vec<FtrlAccumulators>,
    },
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(match config {
            OptimizerConfig::Adam(config) => Optimizer::Adam {
                config,
                t: 0,
                slots: Vec::new(),
            },
            OptimizerConfig::Ftrl(config) => Optimizer::Ftrl {
                config,
                slots: Vec::new(),
            },
        })
    }

    pub fn config(&self) -> OptimizerConfig {
        match self {
            Optimizer::Adam { config, .. } => OptimizerConfig::Adam(*config),
            Optimizer::Ftrl { config, .. } => OptimizerConfig::Ftrl(*config),
        }
    }

    /// Apply one update to every block. All gradients are checked before any
    /// parameter changes, so a non-finite gradient leaves the model intact.
    pub fn step(&mut self, blocks: &mut [(&mut [f64], GradBlock<'_>)]) -> Result<()> {
        for (p, g) in blocks.iter() {
            g.check_shape(p.len())?;
            g.check_finite()?;
        }
        match self {
            Optimizer::Adam { config, t, slots } => {
                *t += 1;
                slots.resize_with(slots.len().max(blocks.len()), Moments::default);
                for ((p, g), slot) in blocks.iter_mut().zip(slots.iter_mut()) {
                    adam_update(p, *g, slot, *t, config)?;
                }
            }
            Optimizer::Ftrl { config, slots } => {
                slots.resize_with(slots.len().max(blocks.len()), FtrlAccumulators::default);
                for ((p, g), slot) in blocks.iter_mut().zip(slots.iter_mut()) {
                    ftrl_update(p, *g, slot, config)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0, 2.0];
        let before = p.clone();
        let mut mom = Moments::default();
        adam_update(&mut p, GradBlock::Dense(&[0.0; 3]), &mut mom, 1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_value() {
        // t=1: m̂ = g, v̂ = g², step = lr · 1/(1 + 1e-8)
        let mut p = vec![0.0];
        let mut mom = Moments::default();
        adam_update(&mut p, GradBlock::Dense(&[1.0]), &mut mom, 1, &AdamConfig::default()).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18, "{}", p[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.1, 0.2];
            let mut mom = Moments::default();
            for t in 1..=5 {
                adam_update(&mut p, GradBlock::Dense(&[0.3, -0.7]), &mut mom, t, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![0.0, 0.0];
        let mut mom = Moments::default();
        let err = adam_update(&mut p, GradBlock::Dense(&[f64::NAN, 0.0]), &mut mom, 1, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn adam_step_respects_per_step_bound() {
        let cfg = AdamConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = vec![0.0; 4];
        let mut mom = Moments::default();
        for t in 1..=200u64 {
            let g: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let before = p.clone();
            adam_update(&mut p, GradBlock::Dense(&g), &mut mom, t, &cfg).unwrap();
            for i in 0..4 {
                let m_hat = mom.m[i] / (1.0 - cfg.beta1.powi(t as i32));
                let v_hat = mom.v[i] / (1.0 - cfg.beta2.powi(t as i32));
                let bound = cfg.lr * m_hat.abs() / v_hat.sqrt() + cfg.lr * cfg.eps;
                assert!((p[i] - before[i]).abs() <= bound + 1e-15);
            }
        }
    }

    #[test]
    fn sparse_rows_without_gradient_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        for config in [OptimizerConfig::Adam(AdamConfig::default()), OptimizerConfig::Ftrl(FtrlConfig { l1: 0.0, ..Default::default() })] {
            let mut opt = Optimizer::new(config).unwrap();
            let mut p = init.clone();
            for step in 0..10 {
                let mut g = SparseGrad::new(4);
                g.add_scaled(step % 2, 1.0, &[0.1, -0.2, 0.3, 0.4]);
                opt.step(&mut [(&mut p[..], GradBlock::Sparse(&g))]).unwrap();
            }
            // rows 0 and 1 moved, rows 2..5 bitwise identical
            assert_ne!(p[..8], init[..8]);
            for i in 8..20 {
                assert_eq!(p[i].to_bits(), init[i].to_bits(), "{}", config.name());
            }
        }
    }

    #[test]
    fn ftrl_hand_evaluated_step() {
        // λ1 = λ2 = 0, α = β = 1, g = 1 from w = 0:
        // σ = (√1 − √0)/1 = 1, z = 1 − 1·0 = 1, n = 1, w = −z/((β + √n)/α) = −0.5
        let cfg = FtrlConfig { alpha: 1.0, beta: 1.0, l1: 0.0, l2: 0.0 };
        let mut w = vec![0.0];
        let mut acc = FtrlAccumulators::default();
        ftrl_update(&mut w, GradBlock::Dense(&[1.0]), &mut acc, &cfg).unwrap();
        assert_eq!(acc.z[0], 1.0);
        assert_eq!(acc.n[0], 1.0);
        assert_eq!(w[0], -0.5);
        // second step g = 1: σ = (√2 − 1), z = 1 + 1 − σ·(−0.5), n = 2
        ftrl_update(&mut w, GradBlock::Dense(&[1.0]), &mut acc, &cfg).unwrap();
        let sigma = 2f64.sqrt() - 1.0;
        let z = 2.0 + 0.5 * sigma;
        assert!((acc.z[0] - z).abs() < 1e-15);
        assert!((w[0] + z / (1.0 + 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn ftrl_large_l1_zeroes_everything() {
        let cfg = FtrlConfig { l1: 1e6, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = vec![0.3; 8];
        let mut acc = FtrlAccumulators::default();
        for _ in 0..50 {
            let g: Vec<f64> = (0..8).map(|_| rng.random_range(-0.1..0.1)).collect();
            ftrl_update(&mut w, GradBlock::Dense(&g), &mut acc, &cfg).unwrap();
        }
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ftrl_zero_gradient_coordinate_untouched() {
        let mut w = vec![0.7, 0.7];
        let mut acc = FtrlAccumulators::default();
        ftrl_update(&mut w, GradBlock::Dense(&[0.0, 0.5]), &mut acc, &FtrlConfig::default()).unwrap();
        assert_eq!(w[0], 0.7);
        assert_eq!(acc.n[0], 0.0);
    }

    #[test]
    fn ftrl_sparsity_grows_with_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trace: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..200).map(|i| rng.random_range(-1.0..1.0) * 0.05 + (i as f64 - 100.0) * 1e-4).collect())
            .collect();
        let zero_fraction = |l1: f64| {
            let cfg = FtrlConfig { l1, ..Default::default() };
            let mut w = vec![0.0; 200];
            let mut acc = FtrlAccumulators::default();
            for g in &trace {
                ftrl_update(&mut w, GradBlock::Dense(g), &mut acc, &cfg).unwrap();
            }
            w.iter().filter(|&&x| x == 0.0).count() as f64 / 200.0
        };
        let fractions: Vec<f64> = [0.0, 0.1, 0.3, 1.0, 3.0, 10.0].iter().map(|&l| zero_fraction(l)).collect();
        assert!(fractions.windows(2).all(|w| w[0] <= w[1]), "{fractions:?}");
        assert_eq!(*fractions.last().unwrap(), 1.0);
    }

    #[test]
    fn optimizer_step_aborts_before_mutating() {
        let mut opt = Optimizer::new(OptimizerConfig::Adam(AdamConfig::default())).unwrap();
        let mut a = vec![1.0, 2.0];
        let mut b = vec![3.0];
        let res = opt.step(&mut [(&mut a[..], GradBlock::Dense(&[0.5, 0.5])), (&mut b[..], GradBlock::Dense(&[f64::INFINITY]))]);
        assert!(res.is_err());
        assert_eq!(a, vec![1.0, 2.0]);
        assert!(Optimizer::new(OptimizerConfig::Adam(AdamConfig { lr: -1.0, ..Default::default() })).is_err());
    }
}
