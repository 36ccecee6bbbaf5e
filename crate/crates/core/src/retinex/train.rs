//! Minibatch SGD for the decomposition and enhancement networks.

use rayon::prelude::*;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::loss::{decom_loss_node, enhance_loss_node, LossCoefficients, LOW, NORMAL};
use super::nets::{DecomConfig, DecomNet, EnhanceConfig, EnhanceNet};
use super::{decom_forward, ImagePair};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lrf: f64,
    pub momentum: f64,
    /// Momentum at the start of warm-up.
    pub warmup_momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Warm-up length in epochs (may be fractional).
    pub warmup_epochs: f64,
    /// Bias learning rate at the start of warm-up.
    pub warmup_bias_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.0032,
            lrf: 0.12,
            momentum: 0.843,
            warmup_momentum: 0.5,
            batch_size: 16,
            epochs: 100,
            warmup_epochs: 2.0,
            warmup_bias_lr: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(finite_nonneg(self.lr0)
            && finite_nonneg(self.lrf)
            && finite_nonneg(self.warmup_epochs)
            && finite_nonneg(self.warmup_bias_lr))
        {
            return Err(Error::invalid(format!(
                "learning-rate settings must be finite and non-negative: {self:?}"
            )));
        }
        for m in [self.momentum, self.warmup_momentum] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::invalid(format!("momentum must lie in [0, 1), got {m}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    /// Linear decay factor from 1 at epoch 0 to `lrf` at the last epoch.
    fn decay(&self, epoch: usize) -> f64 {
        (1.0 - epoch as f64 / self.epochs as f64) * (1.0 - self.lrf) + self.lrf
    }

    /// Fraction of warm-up completed at global step `step`, or `None` after it.
    fn warmup_progress(&self, step: usize, steps_per_epoch: usize) -> Option<f64> {
        let warmup_steps = (self.warmup_epochs * steps_per_epoch as f64).round() as usize;
        (step < warmup_steps).then(|| step as f64 / warmup_steps as f64)
    }

    /// `(weight_lr, bias_lr)` for global step `step` in `epoch`.
    pub fn learning_rates(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> (f64, f64) {
        let target = self.lr0 * self.decay(epoch);
        match self.warmup_progress(step, steps_per_epoch) {
            Some(t) => (t * target, self.warmup_bias_lr + t * (target - self.warmup_bias_lr)),
            None => (target, target),
        }
    }

    pub fn momentum_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        match self.warmup_progress(step, steps_per_epoch) {
            Some(t) => self.warmup_momentum + t * (self.momentum - self.warmup_momentum),
            None => self.momentum,
        }
    }
}

/// Losses recorded during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean minibatch loss per optimizer step, before the update.
    pub step_losses: Vec<f64>,
    /// Mean per-sample loss in each epoch, each sample evaluated just before its update.
    pub epoch_losses: Vec<f64>,
}

impl TrainHistory {
    /// Trailing moving average over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..self.step_losses.len())
            .map(|k| {
                let lo = (k + 1).saturating_sub(w);
                let s = &self.step_losses[lo..=k];
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect()
    }

    /// `epoch,mean_loss` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{l:.12e}\n", e + 1));
        }
        out
    }
}

/// Runs minibatch SGD over `n_samples` examples.
///
/// `loss_fn(graph, params, sample)` builds one example's loss from the
/// parameter leaves. Per-example gradients may be computed in parallel but
/// are always summed in batch order.
fn sgd<F>(
    params: &mut [Tensor],
    bias_mask: &[bool],
    n_samples: usize,
    config: &TrainConfig,
    rng: &mut Rng,
    loss_fn: F,
) -> Result<TrainHistory>
where
    F: Fn(&mut Graph, &[NodeId], usize) -> Result<NodeId> + Sync,
{
    config.validate()?;
    if n_samples == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    let steps_per_epoch = n_samples.div_ceil(config.batch_size);
    let mut velocity: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut sample_losses = vec![0.0; n_samples];
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let current: &[Tensor] = params;
            let per_sample = batch
                .par_iter()
                .map(|&sample| {
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = current.iter().map(|p| g.leaf(p.clone())).collect();
                    let loss = loss_fn(&mut g, &ids, sample)?;
                    let value = g.value(loss).item();
                    let grads = g.backward(loss)?;
                    Ok((value, ids.iter().map(|&id| grads.get(id)).collect::<Vec<_>>()))
                })
                .collect::<Vec<Result<_>>>();

            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            let mut grad_sum: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            for (&sample, result) in batch.iter().zip(per_sample) {
                let (value, grads) = result.map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!(
                        "epoch {} step {}: {m}",
                        epoch + 1,
                        batch_idx + 1
                    )),
                    other => other,
                })?;
                batch_loss += value;
                sample_losses[sample] = value;
                for (acc, g) in grad_sum.iter_mut().zip(&grads) {
                    for (a, v) in acc.iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {} step {}: loss is {batch_loss}",
                    epoch + 1,
                    batch_idx + 1
                )));
            }

            let (lr_w, lr_b) = config.learning_rates(epoch, step, steps_per_epoch);
            let momentum = config.momentum_at(step, steps_per_epoch);
            for ((p, v), (grad, &is_bias)) in params
                .iter_mut()
                .zip(&mut velocity)
                .zip(grad_sum.iter().zip(bias_mask))
            {
                let lr = if is_bias { lr_b } else { lr_w };
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
                    *vv = momentum * *vv + gv * scale;
                    *pv -= lr * *vv;
                }
            }

            history.step_losses.push(batch_loss);
            step += 1;
        }
        history
            .epoch_losses
            .push(sample_losses.iter().sum::<f64>() / n_samples as f64);
    }
    Ok(history)
}

/// Trains a freshly initialized decomposition net on image pairs.
pub fn train_decom(
    pairs: &[ImagePair],
    arch: DecomConfig,
    coeffs: &LossCoefficients,
    config: &TrainConfig,
    seed: u64,
) -> Result<(DecomNet, TrainHistory)> {
    let root = Rng::new(seed);
    let net = DecomNet::init(arch, &mut root.fork(0))?;
    train_decom_from(net, pairs, coeffs, config, seed)
}

/// Continues training `net`; shuffling is seeded by `seed`.
pub fn train_decom_from(
    net: DecomNet,
    pairs: &[ImagePair],
    coeffs: &LossCoefficients,
    config: &TrainConfig,
    seed: u64,
) -> Result<(DecomNet, TrainHistory)> {
    coeffs.validate()?;
    let mut params = net.param_tensors();
    let mask = net.stack.bias_mask();
    let mut rng = Rng::new(seed).fork(1);
    let history = sgd(&mut params, &mask, pairs.len(), config, &mut rng, |g, p, k| {
        let pair = &pairs[k];
        let s = [g.leaf(pair.low.clone()), g.leaf(pair.normal.clone())];
        let (r_low, i_low) = net.forward_node(g, s[LOW], p)?;
        let (r_normal, i_normal) = net.forward_node(g, s[NORMAL], p)?;
        decom_loss_node(g, [r_low, r_normal], [i_low, i_normal], s, coeffs)
    })?;
    Ok((net.with_params(&params)?, history))
}

/// Trains an enhancement net against a frozen decomposition net.
pub fn train_enhance(
    pairs: &[ImagePair],
    decom: &DecomNet,
    arch: EnhanceConfig,
    lambda_g: f64,
    config: &TrainConfig,
    seed: u64,
) -> Result<(EnhanceNet, TrainHistory)> {
    if pairs.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for p in pairs {
        let (_, h, w) = p.low.dims3()?;
        arch.check_dims(h, w)?;
    }
    let root = Rng::new(seed);
    let net = EnhanceNet::init(arch, &mut root.fork(2))?;
    let mut params = net.param_tensors();
    let mask = net.stack.bias_mask();
    let decomposed = pairs
        .iter()
        .map(|p| decom_forward(&p.low, decom))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = root.fork(3);
    let history = sgd(&mut params, &mask, pairs.len(), config, &mut rng, |g, p, k| {
        let (r_low, i_low) = &decomposed[k];
        let r = g.leaf(r_low.clone());
        let i = g.leaf(i_low.clone());
        let s = g.leaf(pairs[k].normal.clone());
        let i_hat = net.forward_node(g, r, i, p)?;
        enhance_loss_node(g, r, i_hat, s, lambda_g)
    })?;
    Ok((net.with_params(&params)?, history))
}
