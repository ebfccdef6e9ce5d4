//! Adam and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{grads_flat, softmax_xent, Network};
use crate::scalar::Scalar;
use crate::voxel::FeatureMap;

/// Adam hyperparameters. `lr` is the rate actually applied on the next step,
/// so a scheduler adjusts it between epochs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::ZERO; len],
            v: vec![T::ZERO; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let lr = T::from_f64(config.lr);
    let eps = T::from_f64(config.epsilon);
    let corr1 = T::from_f64(1.0 - config.beta1.powi(state.step as i32));
    let corr2 = T::from_f64(1.0 - config.beta2.powi(state.step as i32));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::ONE - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::ONE - b2) * g * g;
        let m_hat = state.m[i] / corr1;
        let v_hat = state.v[i] / corr2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam state for every trainable tensor of a network, in the traversal
/// order of [`Network::trainable_mut`].
pub struct NetworkOptimizer<T> {
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> NetworkOptimizer<T> {
    pub fn new(net: &mut Network<T>) -> Self {
        let states = net
            .trainable_mut()
            .iter()
            .map(|t| AdamState::new(t.len()))
            .collect();
        NetworkOptimizer { states }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &[super::LayerGrads<T>], config: &AdamConfig) {
        let flat = grads_flat(grads);
        let tensors = net.trainable_mut();
        assert_eq!(tensors.len(), flat.len());
        for ((params, grad), state) in tensors.into_iter().zip(flat).zip(&mut self.states) {
            adam_step(params, grad, state, config);
        }
    }
}

/// Full training recipe. Defaults: Adam at 1e-3 stepping down by 1/5 every 5
/// epochs for 25 epochs, batches of 16, multiplicative weight noise with
/// standard deviation 0.1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning-rate multiplier applied every `lr_step_every` epochs.
    pub lr_step_factor: f64,
    pub lr_step_every: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 25,
            batch_size: 16,
            lr_step_factor: 0.2,
            lr_step_every: 5,
            noise_std: 0.1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_step_every == 0 {
            return self.lr;
        }
        self.lr * self.lr_step_factor.powi((epoch / self.lr_step_every) as i32)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub final_lr: f64,
    pub steps: u64,
}

/// Minibatch training with per-epoch shuffling. Epoch `e` of a longer run is
/// bit-identical to epoch `e` of a shorter run with the same seed: shuffle
/// and noise streams are derived from `(seed, epoch)` and `(seed, step)`.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    samples: &[(FeatureMap<T>, usize)],
    config: &TrainConfig,
) -> TrainReport {
    assert!(!samples.is_empty(), "training set must be nonempty");
    let mut optimizer = NetworkOptimizer::new(net);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0u64;
    let mut final_lr = config.lr;
    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        final_lr = lr;
        let adam = AdamConfig {
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<FeatureMap<T>> = chunk.iter().map(|&i| samples[i].0.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].1).collect();
            let noise = if config.noise_std > 0.0 {
                Some((config.noise_std, config.seed.wrapping_add(steps.wrapping_mul(0xD1B5_4A32_D192_ED03))))
            } else {
                None
            };
            let trace = net.forward_train(&batch, noise);
            let batch_len = batch.len();
            let scale = T::from_f64(1.0 / batch_len as f64);
            let mut dlogits = Vec::with_capacity(batch_len);
            for (logits, &label) in trace.logits().iter().zip(&labels) {
                let (loss, mut grad) = softmax_xent(logits, label);
                epoch_loss += loss.to_f64();
                for g in &mut grad {
                    *g *= scale;
                }
                dlogits.push(grad);
            }
            let grads = net.backward(&trace, &dlogits);
            optimizer.step(net, &grads, &adam);
            steps += 1;
            seen += batch_len;
        }
        epoch_losses.push(epoch_loss / seen as f64);
    }
    TrainReport {
        epoch_losses,
        final_lr,
        steps,
    }
}
