//! Minibatch training, FNN pre-training and the epoch loop.

use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Architecture, Model, ModelGrads, ModelSpec};
use crate::data::{Dataset, SparseInstance};
use crate::deep::Mode;
use crate::error::{Error, Result};
use crate::math::{logistic_loss, logistic_loss_grad, mix64};
use crate::optim::{AdamConfig, Optimizer, OptimizerConfig};

/// Instances per gradient work unit. Fixed so results never depend on the
/// number of threads.
const CHUNK: usize = 128;

/// Optimizer state plus the step counter that seeds dropout masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    optimizer: Optimizer,
    seed: u64,
    step: u64,
}

impl Trainer {
    pub fn new(config: OptimizerConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            optimizer: Optimizer::new(config)?,
            seed,
            step: 0,
        })
    }

    /// Uses the optimizer named in the model's spec.
    pub fn for_model(model: &Model, seed: u64) -> Result<Self> {
        Self::new(model.spec().optimizer, seed)
    }

    pub(crate) fn from_parts(optimizer: Optimizer, seed: u64, step: u64) -> Self {
        Self { optimizer, seed, step }
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One forward/backward over `batch`, averaged gradients, one update.
    /// Returns the mean logistic loss before the update.
    pub fn train_step(&mut self, model: &mut Model, batch: &[SparseInstance]) -> Result<f64> {
        let refs: Vec<&SparseInstance> = batch.iter().collect();
        self.train_step_refs(model, &refs)
    }

    fn train_step_refs(&mut self, model: &mut Model, batch: &[&SparseInstance]) -> Result<f64> {
        let (loss, mut grads) = gradients(model, batch, Mode::Train, mix64(self.seed, self.step))?;
        // FTRL's regularizers are on the scale of per-example online updates,
        // so it sees the batch sum rather than the mean.
        if matches!(self.optimizer, Optimizer::Ftrl { .. }) {
            grads.scale(batch.len() as f64);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss {loss} at step {}; the learning rate is probably too high",
                model.architecture(),
                self.step
            )));
        }
        let grad_blocks = grads.blocks();
        let mut params = model.blocks_mut();
        debug_assert_eq!(params.len(), grad_blocks.len());
        let mut pairs: Vec<(&mut [f64], _)> = params.iter_mut().map(|(_, p)| &mut **p).zip(grad_blocks).collect();
        self.optimizer.step(&mut pairs)?;
        self.step += 1;
        model.meta.steps += 1;
        Ok(loss)
    }
}

pub fn train_step(model: &mut Model, batch: &[SparseInstance], trainer: &mut Trainer) -> Result<f64> {
    trainer.train_step(model, batch)
}

/// Mean loss and mean gradients over `batch`. `seed` drives dropout in train
/// mode and is ignored in eval mode.
pub fn batch_gradients(model: &Model, batch: &[SparseInstance], mode: Mode, seed: u64) -> Result<(f64, ModelGrads)> {
    let refs: Vec<&SparseInstance> = batch.iter().collect();
    gradients(model, &refs, mode, seed)
}

fn chunk_gradients(model: &Model, chunk: &[&SparseInstance], mode: Mode, seed: u64, index: usize) -> Result<(f64, ModelGrads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut grads = ModelGrads::zeros(model);
    let mut loss = 0.0;
    for x in chunk {
        let trace = model.forward(x, mode, &mut rng)?;
        loss += logistic_loss(trace.logit, x.label());
        model.backward(x, &trace, logistic_loss_grad(trace.logit, x.label()), &mut grads)?;
    }
    Ok((loss, grads))
}

fn gradients(model: &Model, batch: &[&SparseInstance], mode: Mode, seed: u64) -> Result<(f64, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let parts: Vec<(f64, ModelGrads)> = if batch.len() <= CHUNK {
        vec![chunk_gradients(model, batch, mode, seed, 0)?]
    } else {
        batch
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(i, c)| chunk_gradients(model, c, mode, seed, i))
            .collect::<Result<_>>()?
    };
    let mut parts = parts.into_iter();
    let (mut loss, mut grads) = parts.next().expect("non-empty batch");
    for (l, g) in parts {
        loss += l;
        grads.add(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Forward, backward and update time of this epoch.
    pub seconds: f64,
}

/// Train for up to `opts.epochs` passes over a shuffled `train` set, calling
/// `on_epoch` after each; returning `false` from it stops training. Time
/// spent in the callback is not counted.
pub fn fit<F>(model: &mut Model, trainer: &mut Trainer, train: &Dataset, opts: FitOptions, mut on_epoch: F) -> Result<Vec<EpochStats>>
where
    F: FnMut(&EpochStats, &Model) -> Result<bool>,
{
    if opts.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if train.layout() != model.layout() {
        return Err(Error::DimensionMismatch {
            context: "dataset layout vs model",
            expected: model.dim(),
            got: train.layout().dim(),
        });
    }
    let mut history = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(opts.seed, epoch as u64));
        order.shuffle(&mut rng);
        let start = Instant::now();
        let mut total = 0.0;
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<&SparseInstance> = idx.iter().map(|&i| &train.instances()[i]).collect();
            total += trainer.train_step_refs(model, &batch)? * batch.len() as f64;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: total / train.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        model.meta.epochs += 1;
        debug!("{} epoch {} loss {:.6}", model.architecture(), stats.epoch, stats.train_loss);
        history.push(stats);
        if !on_epoch(&stats, model)? {
            break;
        }
    }
    Ok(history)
}

/// Train a standalone FM on `train` and copy its latent vectors into a fresh
/// FNN's embedding table. With `epochs = 0` the FNN keeps its random init.
pub fn pretrain_fm_then_init(spec: &ModelSpec, train: &Dataset, epochs: usize, batch_size: usize, seed: u64) -> Result<Model> {
    if spec.architecture != Architecture::Fnn {
        return Err(Error::config(format!("FM pre-training applies to FNN, not {}", spec.architecture)));
    }
    let mut fnn = Model::new(spec.clone(), train.layout(), seed)?;
    if epochs == 0 {
        warn!("FNN pre-training disabled; embedding stays at its random init");
        return Ok(fnn);
    }
    let mut fm_spec = ModelSpec::new(Architecture::Fm);
    fm_spec.k = spec.k;
    fm_spec.embedding_init = spec.embedding_init;
    fm_spec.optimizer = match spec.optimizer {
        adam @ OptimizerConfig::Adam(_) => adam,
        OptimizerConfig::Ftrl(_) => OptimizerConfig::Adam(AdamConfig::default()),
    };
    let mut fm = Model::new(fm_spec, train.layout(), seed)?;
    let mut trainer = Trainer::for_model(&fm, seed)?;
    fit(&mut fm, &mut trainer, train, FitOptions { epochs, batch_size, seed }, |_, _| Ok(true))?;
    let table = fm.fm().expect("FM model").table.clone();
    *fnn.deep_table_mut().expect("FNN owns a table") = table;
    Ok(fnn)
}
