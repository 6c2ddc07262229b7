//! Mini-batch training with MSE loss and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::density::DensityMap;
use crate::model::{forward_graph, forward_tensor, ModelError, ModelParams};
use crate::tensor::{self, adam_step, AdamState, Graph, LrSchedule, Tensor};

/// One training pair: a `3×H×W` image in `[0, 1]` and its density label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub target: DensityMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            schedule: LrSchedule::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-step losses of this epoch.
    pub mean_loss: f64,
    pub steps: usize,
}

/// Stacks samples into `N×3×H×W` image and target batches.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Tensor), ModelError> {
    let first = samples.first().ok_or_else(|| ModelError::Length("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let (h, w) = (first.target.height(), first.target.width());
    let mut images = Vec::with_capacity(samples.len() * first.image.len());
    let mut targets = Vec::with_capacity(samples.len() * first.target.data().len());
    for s in samples {
        if s.image.shape() != shape.as_slice() || (s.target.height(), s.target.width()) != (h, w) {
            return Err(ModelError::Length("batch members differ in size".into()));
        }
        images.extend_from_slice(s.image.data());
        targets.extend_from_slice(s.target.data());
    }
    let n = samples.len();
    let image_shape = match shape.as_slice() {
        [3, ih, iw] => vec![n, 3, *ih, *iw],
        _ => return Err(ModelError::InputShape(shape)),
    };
    Ok((Tensor::new(image_shape, images)?, Tensor::new(vec![n, 3, h, w], targets)?))
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(params: ModelParams) -> Self {
        let adam = AdamState::new(&params.tensors);
        Self { params, adam }
    }

    /// One Adam update on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &[&Sample], lr: f64) -> Result<f64, ModelError> {
        let (images, targets) = stack(batch)?;
        let mut g = Graph::new();
        let (vars, out) = forward_graph(&self.params, &mut g, &images)?;
        let t = g.constant(targets);
        let loss = g.mse(out, t)?;
        let value = g.value(loss).data()[0] as f64;
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.take(v).expect("every parameter feeds the loss"))
            .collect();
        drop(g);
        adam_step(&mut self.params.tensors, &grads, &mut self.adam, lr)?;
        Ok(value)
    }

    /// Mean loss over `samples` without updating anything.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<f64, ModelError> {
        mean_loss(&self.params, samples)
    }

    /// Runs `cfg.epochs` passes over `samples`, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        samples: &[Sample],
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::Length("no training samples".into()));
        }
        let bs = cfg.batch_size.max(1);
        let mut logs = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..cfg.epochs {
            if cfg.shuffle {
                order.sort_unstable();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            }
            let lr = cfg.schedule.lr(epoch);
            let mut total = 0.0;
            let mut steps = 0;
            for chunk in order.chunks(bs) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                total += self.step(&batch, lr)?;
                steps += 1;
            }
            let log = EpochLog {
                epoch,
                lr,
                mean_loss: total / steps as f64,
                steps,
            };
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

pub fn mean_loss(params: &ModelParams, samples: &[Sample]) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Length("no samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let out = forward_tensor(params, &s.image)?;
        total += tensor::mse(&out, &s.target.to_tensor())?;
    }
    Ok(total / samples.len() as f64)
}
