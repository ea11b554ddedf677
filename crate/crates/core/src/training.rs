//! Optimizers, learning-rate schedules and the minibatch training loop.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{select_donor, sequence_noise_inject, spec_augment, switchout, AugmentConfig};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::lattice::LabelSequence;
use crate::model::{Transducer, TransducerMasks};
use crate::numerics::{accumulate, global_norm, scale_params, zeros_like, Array2, Parameterized, RandomStream};
use crate::seq::lstm::sample_dropconnect_mask;
use crate::seq::CharLm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Constant rate, then geometric decay once per epoch after `start_epoch`.
    ConstDecay { base: f64, decay: f64, start_epoch: usize },
    /// Linear warmup from `start` to `peak`, then linear annealing to 0.
    OneCycle { start: f64, peak: f64, warmup_epochs: f64, total_epochs: f64 },
}

impl Schedule {
    pub fn const_decay() -> Self {
        Schedule::ConstDecay {
            base: 0.01,
            decay: 0.7,
            start_epoch: 10,
        }
    }

    pub fn one_cycle() -> Self {
        Schedule::OneCycle {
            start: 5e-5,
            peak: 5e-4,
            warmup_epochs: 6.0,
            total_epochs: 20.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::ConstDecay { .. } => "const_decay",
            Schedule::OneCycle { .. } => "one_cycle",
        }
    }

    /// Stretches a one-cycle schedule to `epochs`, keeping the warmup
    /// fraction. Constant+decay schedules are returned unchanged.
    pub fn rescaled(&self, epochs: usize) -> Self {
        match *self {
            Schedule::OneCycle {
                start,
                peak,
                warmup_epochs,
                total_epochs,
            } => {
                let e = epochs as f64;
                Schedule::OneCycle {
                    start,
                    peak,
                    warmup_epochs: warmup_epochs * e / total_epochs,
                    total_epochs: e,
                }
            }
            other => other,
        }
    }
}

/// Learning rate at `epoch`. Constant+decay uses the 1-based epoch number
/// `ceil(epoch)`; one-cycle is evaluated at the fractional position.
pub fn lr_at(schedule: &Schedule, epoch: f64) -> Result<f64> {
    if !(epoch >= 0.0) {
        return Err(Error::Contract(format!("learning rate requested at epoch {epoch}")));
    }
    match *schedule {
        Schedule::ConstDecay { base, decay, start_epoch } => {
            let n = (epoch.ceil() as usize).max(1);
            let k = n.saturating_sub(start_epoch);
            Ok(round_decimal(base * decay.powi(k as i32)))
        }
        Schedule::OneCycle {
            start,
            peak,
            warmup_epochs,
            total_epochs,
        } => {
            if epoch > total_epochs {
                return Err(Error::Contract(format!("epoch {epoch} is past the schedule end {total_epochs}")));
            }
            if epoch < warmup_epochs {
                Ok(start + (peak - start) * epoch / warmup_epochs)
            } else {
                Ok(peak * ((total_epochs - epoch) / (total_epochs - warmup_epochs)))
            }
        }
    }
}

/// Rounds to 15 significant decimal digits, so that decimal rates such as
/// `0.01 * 0.7` come out as the nearest double to the decimal product.
fn round_decimal(v: f64) -> f64 {
    format!("{v:.14e}").parse().unwrap_or(v)
}

/// Rate for `step` of `steps` within the 0-based `epoch_index`.
pub fn lr_for_step(schedule: &Schedule, epoch_index: usize, step: usize, steps: usize) -> Result<f64> {
    match schedule {
        Schedule::ConstDecay { .. } => lr_at(schedule, (epoch_index + 1) as f64),
        Schedule::OneCycle { .. } => lr_at(schedule, epoch_index as f64 + step as f64 / steps.max(1) as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    MomentumSgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    #[serde(rename = "adamw")]
    AdamW {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.98
}

fn default_eps() -> f64 {
    1e-9
}

fn default_weight_decay() -> f64 {
    0.01
}

impl OptimizerConfig {
    pub fn momentum_sgd() -> Self {
        OptimizerConfig::MomentumSgd {
            momentum: default_momentum(),
        }
    }

    pub fn adamw() -> Self {
        OptimizerConfig::AdamW {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::MomentumSgd { .. } => "momentum_sgd",
            OptimizerConfig::AdamW { .. } => "adamw",
        }
    }
}

/// Per-parameter buffers, in the model's parameter visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Array2>,
    second: Vec<Array2>,
}

/// Name of the first parameter holding a non-finite value, if any.
pub fn first_non_finite<M: Parameterized + ?Sized>(grads: &M) -> Option<String> {
    let mut bad = None;
    grads.visit_params("", &mut |name, a| {
        if bad.is_none() && !a.is_finite() {
            bad = Some(name.to_string());
        }
    });
    bad
}

impl Optimizer {
    pub fn new<M: Parameterized + ?Sized>(config: OptimizerConfig, params: &M) -> Self {
        let mut first = Vec::new();
        params.visit_params("", &mut |_, a| first.push(Array2::zeros(a.rows(), a.cols())));
        let second = match config {
            OptimizerConfig::AdamW { .. } => first.clone(),
            OptimizerConfig::MomentumSgd { .. } => Vec::new(),
        };
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn apply<M: Parameterized + ?Sized>(&mut self, params: &mut M, grads: &M, lr: f64) -> Result<()> {
        if let Some(param) = first_non_finite(grads) {
            return Err(Error::NonFiniteGradient { param, utterance: None });
        }
        let mut g = Vec::with_capacity(self.first.len());
        grads.visit_params("", &mut |_, a| g.push(a.clone()));
        if g.len() != self.first.len() {
            return Err(Error::dim("optimizer parameter tensors", self.first.len(), g.len()));
        }
        self.step += 1;
        let mut i = 0;
        let config = self.config;
        let step = self.step;
        let (first, second) = (&mut self.first, &mut self.second);
        let mut shape_error = None;
        params.visit_params_mut("", &mut |name, p| {
            let gi = &g[i];
            if gi.shape() != p.shape() {
                shape_error.get_or_insert_with(|| Error::dim(name, p.len(), gi.len()));
                i += 1;
                return;
            }
            match config {
                OptimizerConfig::MomentumSgd { momentum } => {
                    let v = &mut first[i];
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gi.data()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
                OptimizerConfig::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let c1 = 1.0 - beta1.powi(step as i32);
                    let c2 = 1.0 - beta2.powi(step as i32);
                    let (m, v) = (&mut first[i], &mut second[i]);
                    for (((pv, mv), vv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(gi.data()) {
                        *pv -= lr * weight_decay * *pv;
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            i += 1;
        });
        match shape_error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<M: Parameterized + ?Sized>(grads: &mut M, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        scale_params(grads, max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    /// Global gradient-norm bound; `None` or a non-positive value disables
    /// clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            optimizer: OptimizerConfig::adamw(),
            schedule: Schedule::one_cycle(),
            clip_norm: Some(10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Rate used for the last step of the epoch.
    pub lr: f64,
    /// Mean negative log-likelihood per utterance.
    pub train_nll: f64,
    pub train_nll_per_label: f64,
    pub dev_wer: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<M> {
    /// Final parameters, or the last finite ones when training aborted.
    pub model: M,
    pub metrics: Vec<EpochMetrics>,
    pub abort: Option<Error>,
}

/// Per-example loss and gradient, as consumed by [`fit`].
pub struct ExampleGradient<M> {
    pub nll: f64,
    pub labels: usize,
    pub grads: M,
}

/// Mean gradient over a batch. Examples are evaluated in parallel and
/// reduced in batch order, so the result does not depend on scheduling.
pub fn batch_gradient<M, E, F>(model: &M, batch: &[E], grad_fn: &F) -> Result<(f64, usize, M)>
where
    M: Parameterized + Clone + Sync + Send,
    E: Sync,
    F: Fn(&M, usize, &E) -> Result<ExampleGradient<M>> + Sync,
{
    let results: Vec<Result<ExampleGradient<M>>> = batch.par_iter().enumerate().map(|(i, e)| grad_fn(model, i, e)).collect();
    let mut total = zeros_like(model);
    let (mut nll, mut labels) = (0.0, 0usize);
    for r in results {
        let r = r?;
        nll += r.nll;
        labels += r.labels;
        accumulate(&mut total, 1.0, &r.grads);
    }
    let n = batch.len().max(1) as f64;
    scale_params(&mut total, 1.0 / n);
    Ok((nll / n, labels, total))
}

/// Minibatch training loop shared by transducers and language models.
///
/// `grad_fn(model, epoch, batch_index, example_index, example)` returns one
/// example's loss and gradient; `evaluate(model, epoch)` optionally yields a
/// development WER.
pub fn fit<M, E, F, V>(mut model: M, examples: &[E], config: &TrainConfig, rng: &RandomStream, grad_fn: F, mut evaluate: V) -> Result<TrainOutcome<M>>
where
    M: Parameterized + Clone + Sync + Send,
    E: Sync,
    F: Fn(&M, usize, usize, usize, &E) -> Result<ExampleGradient<M>> + Sync,
    V: FnMut(&M, usize) -> Result<Option<f64>>,
{
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut optimizer = Optimizer::new(config.optimizer, &model);
    let mut metrics = Vec::with_capacity(config.epochs);
    let steps = examples.len().div_ceil(config.batch_size);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rng.derive_path(&[0x5348_5546, epoch as u64]).shuffle(&mut order);
        let (mut nll_sum, mut label_sum, mut lr) = (0.0, 0usize, 0.0);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(usize, &E)> = chunk.iter().map(|&i| (i, &examples[i])).collect();
            lr = lr_for_step(&config.schedule, epoch, step, steps)?;
            let per_example = |m: &M, _pos: usize, e: &(usize, &E)| grad_fn(m, epoch, step, e.0, e.1);
            let (nll, labels, mut grads) = match batch_gradient(&model, &batch, &per_example) {
                Ok(r) => r,
                Err(e) => {
                    return Ok(TrainOutcome {
                        model,
                        metrics,
                        abort: Some(e),
                    })
                }
            };
            if !nll.is_finite() {
                let e = Error::NonFiniteGradient {
                    param: "loss".into(),
                    utterance: None,
                };
                return Ok(TrainOutcome {
                    model,
                    metrics,
                    abort: Some(e),
                });
            }
            if let Some(max) = config.clip_norm.filter(|m| *m > 0.0) {
                clip_global_norm(&mut grads, max);
            }
            let previous = model.clone();
            if let Err(e) = optimizer.apply(&mut model, &grads, lr) {
                return Ok(TrainOutcome {
                    model: previous,
                    metrics,
                    abort: Some(e),
                });
            }
            nll_sum += nll * batch.len() as f64;
            label_sum += labels;
        }
        let dev_wer = evaluate(&model, epoch + 1)?;
        let n = examples.len().max(1) as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_nll: nll_sum / n,
            train_nll_per_label: nll_sum / label_sum.max(1) as f64,
            dev_wer,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} lr {:.3e} nll {:.4} nll/label {:.4} dev wer {:?}",
            m.epoch,
            m.lr,
            m.train_nll,
            m.train_nll_per_label,
            m.dev_wer
        );
        metrics.push(m);
    }
    Ok(TrainOutcome {
        model,
        metrics,
        abort: None,
    })
}

/// Stream tags for the per-example augmentation randomness.
const AUGMENT_TAG: u64 = 0x4155_474d;
const MASK_TAG: u64 = 0x4d41_534b;

/// Applies the on-the-fly augmentations to one training example.
pub fn augment_example(
    utt: &Utterance,
    index: usize,
    dataset: &[Utterance],
    lengths: &[usize],
    vocab: usize,
    augment: &AugmentConfig,
    rng: &mut RandomStream,
) -> Result<(Array2, LabelSequence)> {
    let mut features = utt.features.clone();
    if let Some(noise) = &augment.noise {
        if let Some(d) = select_donor(lengths, index, noise.length_tolerance, rng) {
            features = sequence_noise_inject(&features, &dataset[d].features, noise, rng)?;
        }
    }
    if let Some(sa) = &augment.spec_augment {
        features = spec_augment(&features, sa, rng)?;
    }
    let labels = match &augment.switchout {
        Some(s) => switchout(&utt.labels, vocab, s, rng)?,
        None => utt.labels.clone(),
    };
    Ok((features, labels))
}

/// Trains a transducer on `train`; `evaluate` is called after every epoch.
pub fn train_transducer<V>(model: Transducer, train: &[Utterance], config: &TrainConfig, augment: &AugmentConfig, rng: &RandomStream, evaluate: V) -> Result<TrainOutcome<Transducer>>
where
    V: FnMut(&Transducer, usize) -> Result<Option<f64>>,
{
    let lengths: Vec<usize> = train.iter().map(Utterance::frames).collect();
    let vocab = model.vocab();
    let masks_for = |m: &Transducer, epoch: usize, step: usize| -> Result<Option<TransducerMasks>> {
        if augment.dropconnect <= 0.0 {
            return Ok(None);
        }
        let mut r = rng.derive_path(&[MASK_TAG, epoch as u64, step as u64]);
        Ok(Some(m.sample_masks(augment.dropconnect, &mut r)?))
    };
    let grad_fn = |m: &Transducer, epoch: usize, step: usize, index: usize, utt: &Utterance| -> Result<ExampleGradient<Transducer>> {
        let mut r = rng.derive_path(&[AUGMENT_TAG, epoch as u64, index as u64]);
        let (features, labels) = augment_example(utt, index, train, &lengths, vocab, augment, &mut r)?;
        // Masks are drawn per batch; every member derives the same ones.
        let masks = masks_for(m, epoch, step)?;
        let mut grads = zeros_like(m);
        let nll = m.loss_and_gradient(&features, utt.aux.as_deref(), &labels, masks.as_ref(), &mut grads)?;
        if let Some(param) = first_non_finite(&grads).or_else(|| (!nll.is_finite()).then(|| "loss".to_string())) {
            return Err(Error::NonFiniteGradient {
                param,
                utterance: Some(utt.id.clone()),
            });
        }
        Ok(ExampleGradient {
            nll,
            labels: labels.len() + 1,
            grads,
        })
    };
    fit(model, train, config, rng, grad_fn, evaluate)
}

/// Trains a character LM on label sequences.
pub fn train_lm(lm: CharLm, texts: &[LabelSequence], config: &TrainConfig, dropconnect: f64, rng: &RandomStream) -> Result<TrainOutcome<CharLm>> {
    let grad_fn = |m: &CharLm, epoch: usize, step: usize, _pos: usize, y: &LabelSequence| -> Result<ExampleGradient<CharLm>> {
        let masks = if dropconnect > 0.0 {
            let mut r = rng.derive_path(&[MASK_TAG, epoch as u64, step as u64]);
            Some(
                m.layers
                    .iter()
                    .map(|l| sample_dropconnect_mask(l.w_hh.rows(), l.w_hh.cols(), dropconnect, &mut r))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let mut grads = zeros_like(m);
        let nll = m.nll_and_gradient(y, masks.as_deref(), &mut grads)?;
        Ok(ExampleGradient {
            nll,
            labels: y.len() + 1,
            grads,
        })
    };
    fit(lm, texts, config, rng, grad_fn, |_, _| Ok(None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joint::JointMode;
    use crate::numerics::join_name;

    #[derive(Debug, Clone, PartialEq)]
    struct Scalar(Array2);

    impl Parameterized for Scalar {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2)) {
            f(&join_name(prefix, "x"), &self.0);
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2)) {
            f(&join_name(prefix, "x"), &mut self.0);
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Array2::from_vec(1, 1, vec![v]).unwrap())
    }

    #[test]
    fn schedule_values() {
        let oc = Schedule::one_cycle();
        assert_eq!(lr_at(&oc, 0.0).unwrap(), 5e-5);
        assert_eq!(lr_at(&oc, 6.0).unwrap(), 5e-4);
        assert_eq!(lr_at(&oc, 20.0).unwrap(), 0.0);
        assert!((lr_at(&oc, 3.0).unwrap() - 2.75e-4).abs() < 1e-18);
        assert!(lr_at(&oc, 20.5).is_err());
        assert!(lr_at(&oc, -0.1).is_err());
        let cd = Schedule::const_decay();
        assert_eq!(lr_at(&cd, 10.0).unwrap(), 0.01);
        assert_eq!(lr_at(&cd, 11.0).unwrap(), 7e-3);
        assert_eq!(lr_at(&cd, 12.0).unwrap(), 4.9e-3);
        assert_eq!(lr_at(&cd, 11.5).unwrap(), 4.9e-3);
        assert_eq!(lr_at(&cd, 15.0).unwrap(), 1.6807e-3);
        assert_eq!(lr_at(&cd, 0.0).unwrap(), 0.01);
    }

    #[test]
    fn one_cycle_is_continuous_and_peaks_at_warmup_end() {
        let oc = Schedule::one_cycle();
        let mut prev = lr_at(&oc, 0.0).unwrap();
        let mut argmax = 0.0;
        let mut max = prev;
        for i in 1..=20_000 {
            let e = i as f64 * 1e-3;
            let v = lr_at(&oc, e).unwrap();
            assert!((v - prev).abs() < 1e-6);
            if v > max {
                max = v;
                argmax = e;
            }
            prev = v;
        }
        assert_eq!(argmax, 6.0);
    }

    #[test]
    fn sgd_first_steps() {
        let mut p = scalar(1.5);
        let mut opt = Optimizer::new(OptimizerConfig::momentum_sgd(), &p);
        opt.apply(&mut p, &scalar(0.0), 0.1).unwrap();
        assert_eq!(p, scalar(1.5));
        opt.apply(&mut p, &scalar(2.0), 0.1).unwrap();
        assert_eq!(p.0.get(0, 0), 1.5 - 0.1 * 2.0);
    }

    #[test]
    fn adamw_first_step_is_sign_scaled() {
        let no_decay = OptimizerConfig::AdamW {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        };
        let mut p = scalar(2.0);
        let mut opt = Optimizer::new(no_decay, &p);
        opt.apply(&mut p, &scalar(0.0), 0.1).unwrap();
        assert_eq!(p, scalar(2.0));
        let mut p = scalar(2.0);
        let mut opt = Optimizer::new(no_decay, &p);
        opt.apply(&mut p, &scalar(-3.0), 0.1).unwrap();
        assert!((p.0.get(0, 0) - 2.1).abs() < 1e-9);
    }

    fn bowl(config: OptimizerConfig, x0: f64) -> usize {
        let mut p = scalar(x0);
        let mut opt = Optimizer::new(config, &p);
        for step in 1..=200 {
            let g = scalar(2.0 * p.0.get(0, 0));
            opt.apply(&mut p, &g, 0.01).unwrap();
            if p.0.get(0, 0).abs() <= 1e-6 {
                let mut q = p.clone();
                let mut o = opt.clone();
                // Must stay converged, not just pass through zero.
                let stays = (0..50).all(|_| {
                    let g = scalar(2.0 * q.0.get(0, 0));
                    o.apply(&mut q, &g, 0.01).unwrap();
                    q.0.get(0, 0).abs() <= 1e-6
                });
                if stays {
                    return step;
                }
            }
        }
        usize::MAX
    }

    #[test]
    fn quadratic_bowl_converges() {
        assert!(bowl(OptimizerConfig::momentum_sgd(), 0.01) <= 200);
        assert!(bowl(OptimizerConfig::adamw(), 0.01) <= 200);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adamw(), &p);
        match opt.apply(&mut p, &scalar(f64::NAN), 0.1) {
            Err(Error::NonFiniteGradient { param, .. }) => assert_eq!(param, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, scalar(1.0));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = scalar(30.0);
        assert_eq!(clip_global_norm(&mut g, 10.0), 30.0);
        assert!((g.0.get(0, 0) - 10.0).abs() < 1e-12);
        let mut small = scalar(3.0);
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small, scalar(3.0));
    }

    fn toy_data(n: usize, seed: u64) -> (Transducer, Vec<Utterance>) {
        let mut rng = RandomStream::new(seed, 0);
        let cfg = crate::model::TransducerConfig {
            vocab: 3,
            encoder: crate::seq::EncoderConfig {
                input_dim: 3,
                aux_dim: 0,
                layers: 1,
                cells: 8,
                bidirectional: true,
                stack: 1,
                skip: 1,
                lookahead: 0,
            },
            prediction_embed: 4,
            prediction_cells: 8,
            joint_mode: JointMode::Multiplicative,
            joint_dim: 8,
            branch_biases: false,
        };
        let model = Transducer::new(cfg, &mut rng).unwrap();
        let data = (0..n)
            .map(|i| {
                let labels: Vec<usize> = (0..1 + rng.below(3)).map(|_| rng.below(3)).collect();
                let mut rows = Vec::new();
                for &l in &labels {
                    for _ in 0..2 {
                        let mut r = vec![0.0; 3];
                        r[l] = 1.0;
                        rows.push(r);
                    }
                }
                Utterance {
                    id: format!("u{i}"),
                    speaker: "s".into(),
                    features: Array2::from_rows(&rows).unwrap(),
                    aux: None,
                    labels: LabelSequence::new(labels, 3).unwrap(),
                }
            })
            .collect();
        (model, data)
    }

    #[test]
    fn batch_gradient_is_mean_of_singles() {
        let (model, data) = toy_data(8, 1);
        let f = |m: &Transducer, _: usize, u: &Utterance| -> Result<ExampleGradient<Transducer>> {
            let mut g = zeros_like(m);
            let nll = m.loss_and_gradient(&u.features, None, &u.labels, None, &mut g)?;
            Ok(ExampleGradient { nll, labels: u.labels.len(), grads: g })
        };
        let (_, _, batch) = batch_gradient(&model, &data, &f).unwrap();
        let mut mean = zeros_like(&model);
        for (i, u) in data.iter().enumerate() {
            accumulate(&mut mean, 1.0 / 8.0, &f(&model, i, u).unwrap().grads);
        }
        let a = crate::numerics::flatten_params(&batch);
        let b = crate::numerics::flatten_params(&mean);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-10));
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let (model, data) = toy_data(4, 2);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_transducer(model.clone(), &data, &cfg, &AugmentConfig::default(), &RandomStream::new(0, 0), |_, _| Ok(None)).unwrap();
        assert_eq!(out.model, model);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (model, data) = toy_data(10, 3);
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 2,
            optimizer: OptimizerConfig::adamw(),
            schedule: Schedule::ConstDecay {
                base: 0.02,
                decay: 0.9,
                start_epoch: 30,
            },
            clip_norm: Some(10.0),
        };
        let aug = AugmentConfig {
            dropconnect: 0.1,
            ..AugmentConfig::default()
        };
        let rng = RandomStream::new(7, 0);
        let a = train_transducer(model.clone(), &data, &cfg, &aug, &rng, |_, _| Ok(None)).unwrap();
        let b = train_transducer(model, &data, &cfg, &aug, &rng, |_, _| Ok(None)).unwrap();
        assert!(a.abort.is_none());
        assert_eq!(a.metrics[0].train_nll, b.metrics[0].train_nll);
        assert_eq!(a.model, b.model);
        let first = a.metrics[0].train_nll_per_label;
        let last = a.metrics.last().unwrap().train_nll_per_label;
        assert!(last < 0.25 * first, "{first} -> {last}");
    }
}
