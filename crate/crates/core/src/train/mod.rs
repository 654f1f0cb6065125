//! Deep-supervision training.
//!
//! Every LR and HR decoder layer is compared against its ground truth in the
//! image domain, and the sum of the L2 distances is minimized with AdamW under
//! a cosine learning-rate schedule. During the first epochs the HR decoder
//! receives the LR tokens as constants, so HR losses cannot reach the encoder
//! or the LR decoder.

mod optim;
#[cfg(test)]
mod tests;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::PhantomSample;
use crate::error::{Error, Result};
use crate::fourier::{ifft2_centered, ComplexGrid};
use crate::model::{forward_graph, init_params, ForwardVars, ModelConfig, ReconstructionOutputs};
use crate::params::{ParamGrads, ParamStore};
use crate::real::Real;
use crate::sampling::{apply_mask, Mask, MaskSpec, SampledPointSet};
use crate::tensor::Tensor;

pub use optim::{adamw_step, cosine_lr, AdamState, BETA1, BETA2, EPSILON};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    /// Steps until the schedule reaches zero; `None` means the whole run.
    pub cosine_horizon: Option<usize>,
    /// Epochs with the HR gradient stop; `None` means a tenth of `epochs`.
    pub hr_grad_stop_epochs: Option<usize>,
    /// Seeds parameter initialization and the per-epoch sample order.
    pub seed: u64,
    pub mask: MaskSpec,
    pub lr_loss_weight: f64,
    pub hr_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 1,
            lr: 5e-4,
            weight_decay: 1e-4,
            cosine_horizon: None,
            hr_grad_stop_epochs: None,
            seed: 0,
            mask: MaskSpec::default(),
            lr_loss_weight: 1.0,
            hr_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn hr_grad_stop_epochs(&self) -> usize {
        self.hr_grad_stop_epochs.unwrap_or(self.epochs / 10)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.hr_grad_stop_epochs() > self.epochs {
            return bad(format!(
                "hr_grad_stop_epochs = {} exceeds epochs = {}",
                self.hr_grad_stop_epochs(),
                self.epochs
            ));
        }
        if self.weight_decay < 0.0 || self.lr_loss_weight < 0.0 || self.hr_loss_weight < 0.0 {
            return bad("weight decay and loss weights must be non-negative".into());
        }
        Ok(())
    }
}

/// Image-domain ground truths: `[2, H, W]` for HR layers and `[2, h, w]`
/// (inverse transform of the central spectrum crop) for LR layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<T> {
    pub hr: Tensor<T>,
    pub lr: Tensor<T>,
}

impl<T: Real> Targets<T> {
    pub fn new(sample: &PhantomSample, cfg: &ModelConfig) -> Result<Self> {
        let [h, w] = cfg.lr_grid;
        let lr = ifft2_centered(&sample.spectrum.crop_center(h, w)?)?;
        Ok(Targets {
            hr: sample.image.cast::<T>().to_tensor(),
            lr: lr.cast::<T>().to_tensor(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lr: f64,
    pub hr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lr: 1.0, hr: 1.0 }
    }
}

fn norm_sum<T: Real>(g: &mut Graph<T>, terms: &[(Var, &Tensor<T>)], fft_first: bool) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &(v, target) in terms {
        let pred = if fft_first { g.ifft2(v)? } else { v };
        if g.shape(pred) != target.shape() {
            return Err(Error::dim(format!(
                "prediction {:?} vs target {:?}",
                g.shape(pred),
                target.shape()
            )));
        }
        let t = g.constant(target.clone());
        let diff = g.sub(pred, t)?;
        let n = g.l2_norm(diff);
        total = Some(match total {
            Some(acc) => g.add(acc, n)?,
            None => n,
        });
    }
    Ok(total)
}

/// `lr_weight * sum_i ||ifft(LR_i) - gt_lr|| + hr_weight * sum_j ||I_j - gt||`.
/// With `include_hr` false the HR sum is left out of the graph entirely.
pub fn deep_supervision_loss<T: Real>(
    g: &mut Graph<T>,
    vars: &ForwardVars,
    targets: &Targets<T>,
    weights: LossWeights,
    include_hr: bool,
) -> Result<Var> {
    let lr_terms: Vec<_> = vars.lr_spectrograms.iter().map(|&v| (v, &targets.lr)).collect();
    let hr_terms: Vec<_> = vars.hr_images.iter().map(|&v| (v, &targets.hr)).collect();
    let lr = norm_sum(g, &lr_terms, true)?.map(|v| g.scale(v, T::of(weights.lr)));
    let hr = if include_hr {
        norm_sum(g, &hr_terms, false)?.map(|v| g.scale(v, T::of(weights.hr)))
    } else {
        None
    };
    match (lr, hr) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

/// Loss value of already computed outputs (no gradients).
pub fn supervision_loss_value<T: Real>(
    outputs: &ReconstructionOutputs<T>,
    targets: &Targets<T>,
    weights: LossWeights,
) -> Result<f64> {
    let dist = |a: &ComplexGrid<T>, b: &Tensor<T>| -> Result<f64> {
        let b = ComplexGrid::from_tensor(b)?;
        if a.dims() != b.dims() {
            return Err(Error::dim(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        Ok(a.re()
            .iter()
            .chain(a.im())
            .zip(b.re().iter().chain(b.im()))
            .map(|(x, y)| (x.f64() - y.f64()).powi(2))
            .sum::<f64>()
            .sqrt())
    };
    let mut lr = 0.0;
    for s in &outputs.lr_spectrograms {
        lr += dist(&ifft2_centered(s)?, &targets.lr)?;
    }
    let mut hr = 0.0;
    for img in &outputs.hr_images {
        hr += dist(img, &targets.hr)?;
    }
    Ok(weights.lr * lr + weights.hr * hr)
}

/// A training sample with its mask applied and targets precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub points: SampledPointSet<T>,
    pub targets: Targets<T>,
}

impl<T: Real> PreparedSample<T> {
    pub fn new(sample: &PhantomSample, mask: &Mask, cfg: &ModelConfig) -> Result<Self> {
        let (points, _) = apply_mask(&sample.spectrum.cast::<T>(), mask)?;
        Ok(PreparedSample {
            points,
            targets: Targets::new(sample, cfg)?,
        })
    }
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_grads<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    sample: &PreparedSample<T>,
    weights: LossWeights,
    stop_hr_gradient: bool,
    include_hr: bool,
) -> Result<(T, ParamGrads<T>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let vars = forward_graph(&mut g, &bound, cfg, &sample.points, stop_hr_gradient)?;
    let loss = deep_supervision_loss(&mut g, &vars, &sample.targets, weights, include_hr)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    Ok((value, bound.collect_grads(params, &mut grads)?))
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub optimizer: AdamState<T>,
    /// Completed optimizer steps.
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Zero-based index of the step just taken.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub hr_gradient_stopped: bool,
}

pub struct Trainer<T> {
    model: ModelConfig,
    config: TrainConfig,
    samples: Vec<PreparedSample<T>>,
    state: TrainState<T>,
    order: Option<(usize, Vec<usize>)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig, dataset: &[PhantomSample]) -> Result<Self> {
        let params = init_params::<T>(&model, config.seed)?;
        let state = TrainState {
            optimizer: AdamState::new(&params),
            params,
            step: 0,
        };
        Self::resume(model, config, dataset, state)
    }

    pub fn resume(model: ModelConfig, config: TrainConfig, dataset: &[PhantomSample], state: TrainState<T>) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::arg("training needs at least one sample"));
        }
        let [h, w] = model.hr_grid;
        let mask = config.mask.build(h, w)?;
        let samples = dataset
            .iter()
            .map(|s| PreparedSample::new(s, &mask, &model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            model,
            config,
            samples,
            state,
            order: None,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config.steps_per_epoch(self.samples.len())
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.config
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.samples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64 + 1);
            idx.shuffle(&mut rng);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("just set").1
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::arg("training already finished"));
        }
        let step = self.state.step;
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let start = (step % spe) * self.config.batch_size;
        let bs = self.config.batch_size;
        let batch: Vec<usize> = {
            let order = self.epoch_order(epoch);
            order[start..(start + bs).min(order.len())].to_vec()
        };
        let stopped = epoch < self.config.hr_grad_stop_epochs();
        let weights = LossWeights {
            lr: self.config.lr_loss_weight,
            hr: self.config.hr_loss_weight,
        };
        let mut total = 0.0;
        let mut acc: Option<ParamGrads<T>> = None;
        for &i in &batch {
            let (loss, grads) = loss_and_grads(&self.state.params, &self.model, &self.samples[i], weights, stopped, true)?;
            total += loss.f64();
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for (name, g) in grads {
                        a.get_mut(&name).expect("same parameter set").add_assign(&g)?;
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        let mut grads = acc.expect("non-empty batch");
        if batch.len() > 1 {
            let inv = T::of(1.0 / n);
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
        }
        let horizon = self.config.cosine_horizon.unwrap_or(self.total_steps());
        let lr = cosine_lr(self.config.lr, step, horizon);
        adamw_step(&mut self.state.params, &grads, &mut self.state.optimizer, lr, self.config.weight_decay)?;
        self.state.step += 1;
        Ok(StepReport {
            step,
            epoch,
            loss,
            lr,
            hr_gradient_stopped: stopped,
        })
    }
}

/// Parameters and per-step mean batch loss of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    pub history: Vec<f64>,
}

/// Train from scratch, calling `on_step` after every step.
pub fn train_with<T: Real>(
    model: &ModelConfig,
    config: &TrainConfig,
    dataset: &[PhantomSample],
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(model.clone(), config.clone(), dataset)?;
    let mut history = Vec::with_capacity(trainer.total_steps());
    while !trainer.is_done() {
        let report = trainer.step()?;
        on_step(&report);
        history.push(report.loss);
    }
    Ok(TrainOutcome {
        params: trainer.into_state().params,
        history,
    })
}

pub fn train<T: Real>(model: &ModelConfig, config: &TrainConfig, dataset: &[PhantomSample]) -> Result<TrainOutcome<T>> {
    train_with(model, config, dataset, |_| {})
}
