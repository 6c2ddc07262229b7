use super::{Real, Result, Tensor, TensorError};

/// Step-decay learning-rate schedule:
/// `lr(epoch) = base_lr · decay_factor^floor(epoch / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            decay_factor: 0.1,
            decay_every: 10,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_every.max(1)) as i32;
        self.base_lr * self.decay_factor.powi(k)
    }
}

/// First/second moment estimates of the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`, default hyperparameters.
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moment tensors",
                n,
                grads.len(),
                state.first_moment.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() || p.shape() != state.second_moment[i].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            });
        }
        g.ensure_finite("adam_step")?;
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.to_f64();
            let mj = b1 * m[j].to_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            *w = T::from_f64(w.to_f64() - update);
        }
    }
    Ok(())
}

/// Total number of scalar parameters.
pub fn count_params<T: Real>(params: &[Tensor<T>]) -> usize {
    params.iter().map(Tensor::len).sum()
}
