//! The full transducer: encoder, prediction network and joint network.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint::{JointConfig, JointMode, JointNetwork};
use crate::lattice::{rnnt_loss, LabelSequence, LogitsLattice};
use crate::numerics::{join_name, Array2, Parameterized, RandomStream};
use crate::seq::lstm::sample_dropconnect_mask;
use crate::seq::{Encoder, EncoderConfig, PredictionConfig, PredictionNetwork, PredictionState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransducerConfig {
    /// `|Y|`, blank excluded.
    pub vocab: usize,
    pub encoder: EncoderConfig,
    pub prediction_embed: usize,
    pub prediction_cells: usize,
    pub joint_mode: JointMode,
    pub joint_dim: usize,
    #[serde(default)]
    pub branch_biases: bool,
}

impl TransducerConfig {
    pub fn prediction_config(&self) -> PredictionConfig {
        PredictionConfig {
            vocab: self.vocab,
            embed_dim: self.prediction_embed,
            cells: self.prediction_cells,
        }
    }

    pub fn joint_config(&self) -> JointConfig {
        JointConfig {
            mode: self.joint_mode,
            enc_dim: self.encoder.output_dim(),
            pred_dim: self.prediction_cells,
            joint_dim: self.joint_dim,
            outputs: self.vocab + 1,
            branch_biases: self.branch_biases,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transducer {
    pub config: TransducerConfig,
    pub encoder: Encoder,
    pub prediction: PredictionNetwork,
    pub joint: JointNetwork,
}

/// DropConnect masks for one minibatch: one per encoder LSTM (layer-major,
/// forward before backward) and one for the prediction LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct TransducerMasks {
    pub encoder: Vec<Array2>,
    pub prediction: Array2,
}

impl Transducer {
    pub fn new(config: TransducerConfig, rng: &mut RandomStream) -> Result<Self> {
        let mut enc_rng = rng.derive(1);
        let mut pred_rng = rng.derive(2);
        let mut joint_rng = rng.derive(3);
        let encoder = Encoder::new(config.encoder.clone(), &mut enc_rng)?;
        let prediction = PredictionNetwork::new(config.prediction_config(), &mut pred_rng)?;
        let joint = JointNetwork::new(&config.joint_config(), &mut joint_rng)?;
        Ok(Self {
            config,
            encoder,
            prediction,
            joint,
        })
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn sample_masks(&self, rate: f64, rng: &mut RandomStream) -> Result<TransducerMasks> {
        let encoder = self
            .encoder
            .lstms()
            .map(|l| sample_dropconnect_mask(l.w_hh.rows(), l.w_hh.cols(), rate, rng))
            .collect::<Result<Vec<_>>>()?;
        let w = &self.prediction.lstm.w_hh;
        let prediction = sample_dropconnect_mask(w.rows(), w.cols(), rate, rng)?;
        Ok(TransducerMasks { encoder, prediction })
    }

    /// Output lattice for `(x, y)`.
    pub fn lattice(&self, features: &Array2, aux: Option<&[f64]>, labels: &LabelSequence) -> Result<LogitsLattice> {
        let h = self.encoder.encode(features, aux, None)?;
        let g = self.prediction.embed(labels, None)?;
        Ok(self.joint.forward_lattice(&h, &g)?.0)
    }

    /// `-log p(y|x)`.
    pub fn loss(&self, features: &Array2, aux: Option<&[f64]>, labels: &LabelSequence) -> Result<f64> {
        let lattice = self.lattice(features, aux, labels)?;
        Ok(crate::lattice::rnnt_forward(&lattice, labels)?.0)
    }

    /// `-log p(y|x)` with its gradient accumulated into `grads`.
    pub fn loss_and_gradient(
        &self,
        features: &Array2,
        aux: Option<&[f64]>,
        labels: &LabelSequence,
        masks: Option<&TransducerMasks>,
        grads: &mut Transducer,
    ) -> Result<f64> {
        let enc_masks = masks.map(|m| m.encoder.as_slice());
        let pred_mask = masks.map(|m| &m.prediction);
        let (h, enc_cache) = self.encoder.forward(features, aux, enc_masks)?;
        let (g, pred_cache) = self.prediction.forward(labels, pred_mask)?;
        let (lattice, joint_cache) = self.joint.forward_lattice(&h, &g)?;
        let result = rnnt_loss(&lattice, labels)?;
        let (d_h, d_g) = self
            .joint
            .backward_lattice(&result.grad, &lattice, &joint_cache, &h, &g, &mut grads.joint)?;
        self.encoder.backward(&d_h, &enc_cache, enc_masks, &mut grads.encoder)?;
        self.prediction.backward(&d_g, &pred_cache, pred_mask, &mut grads.prediction)?;
        Ok(result.nll)
    }

    /// Prepares an utterance for step-wise decoding.
    pub fn session(&self, features: &Array2, aux: Option<&[f64]>) -> Result<TransducerSession<'_>> {
        let h = self.encoder.encode(features, aux, None)?;
        let h_tilde = h.matmul_t(&self.joint.w_enc);
        Ok(TransducerSession { model: self, h_tilde })
    }
}

impl Parameterized for Transducer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2)) {
        self.encoder.visit_params(&join_name(prefix, "encoder"), f);
        self.prediction.visit_params(&join_name(prefix, "prediction"), f);
        self.joint.visit_params(&join_name(prefix, "joint"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2)) {
        self.encoder.visit_params_mut(&join_name(prefix, "encoder"), f);
        self.prediction.visit_params_mut(&join_name(prefix, "prediction"), f);
        self.joint.visit_params_mut(&join_name(prefix, "joint"), f);
    }
}

/// Anything that yields the output distribution at lattice node `(t, state)`
/// where the state summarizes the emitted label prefix.
pub trait StepScorer {
    type State: Clone;

    fn frames(&self) -> usize;

    /// `|Y| + 1`.
    fn outputs(&self) -> usize;

    fn initial_state(&self) -> Self::State;

    fn extend(&self, state: &Self::State, label: usize) -> Result<Self::State>;

    /// Log-probabilities over `{blank} ∪ Y` at frame `t`.
    fn log_probs(&self, t: usize, state: &Self::State) -> Vec<f64>;

    /// Materializes the lattice for a fixed label sequence.
    fn lattice_for(&self, labels: &LabelSequence) -> Result<LogitsLattice> {
        let (frames, v) = (self.frames(), self.outputs());
        let mut states = Vec::with_capacity(labels.len() + 1);
        states.push(self.initial_state());
        for &l in labels.labels() {
            let next = self.extend(states.last().expect("non-empty"), l)?;
            states.push(next);
        }
        let mut data = Vec::with_capacity(frames * states.len() * v);
        for t in 0..frames {
            for s in &states {
                data.extend(self.log_probs(t, s));
            }
        }
        let logp = crate::numerics::Array3::from_vec((frames, states.len(), v), data)?;
        Ok(LogitsLattice::from_log_probs_unchecked(logp))
    }
}

pub struct TransducerSession<'a> {
    model: &'a Transducer,
    h_tilde: Array2,
}

/// Prediction-network snapshot together with its projection.
#[derive(Debug, Clone)]
pub struct TransducerState {
    pub prediction: PredictionState,
    g_tilde: Arc<Vec<f64>>,
}

impl StepScorer for TransducerSession<'_> {
    type State = TransducerState;

    fn frames(&self) -> usize {
        self.h_tilde.rows()
    }

    fn outputs(&self) -> usize {
        self.model.vocab() + 1
    }

    fn initial_state(&self) -> TransducerState {
        let prediction = self.model.prediction.initial_state();
        let g_tilde = self.model.joint.w_pred.matvec(prediction.output());
        TransducerState {
            prediction,
            g_tilde: Arc::new(g_tilde),
        }
    }

    fn extend(&self, state: &TransducerState, label: usize) -> Result<TransducerState> {
        let prediction = self.model.prediction.advance(&state.prediction, label, None)?;
        let g_tilde = self.model.joint.w_pred.matvec(prediction.output());
        Ok(TransducerState {
            prediction,
            g_tilde: Arc::new(g_tilde),
        })
    }

    fn log_probs(&self, t: usize, state: &TransducerState) -> Vec<f64> {
        self.model.joint.log_probs_projected(self.h_tilde.row(t), &state.g_tilde)
    }
}

/// A scorer backed by an explicit table, `log_probs[t][u]`, that ignores
/// label identity. Used for constructing decoder test cases.
#[derive(Debug, Clone)]
pub struct TableScorer {
    lattice: LogitsLattice,
}

impl TableScorer {
    pub fn new(lattice: LogitsLattice) -> Self {
        Self { lattice }
    }
}

impl StepScorer for TableScorer {
    type State = usize;

    fn frames(&self) -> usize {
        self.lattice.frames()
    }

    fn outputs(&self) -> usize {
        self.lattice.outputs()
    }

    fn initial_state(&self) -> usize {
        0
    }

    fn extend(&self, state: &usize, label: usize) -> Result<usize> {
        if label + 1 >= self.outputs() {
            return Err(Error::Vocabulary {
                symbol: label,
                vocab: self.outputs() - 1,
            });
        }
        Ok(*state + 1)
    }

    fn log_probs(&self, t: usize, state: &usize) -> Vec<f64> {
        let u = (*state).min(self.lattice.label_positions() - 1);
        self.lattice.node(t, u).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{assign_params, finite_difference_gradient, flatten_params, max_relative_error, zeros_like};

    pub(crate) fn tiny_config(mode: JointMode, bidirectional: bool) -> TransducerConfig {
        TransducerConfig {
            vocab: 3,
            encoder: EncoderConfig {
                input_dim: 2,
                aux_dim: 0,
                layers: 1,
                cells: 3,
                bidirectional,
                stack: 2,
                skip: 2,
                lookahead: if bidirectional { 0 } else { 1 },
            },
            prediction_embed: 2,
            prediction_cells: 3,
            joint_mode: mode,
            joint_dim: 4,
            branch_biases: false,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, mode, bi) in [(0, JointMode::Additive, true), (1, JointMode::Multiplicative, false)] {
            let mut rng = RandomStream::new(seed, 0);
            let m = Transducer::new(tiny_config(mode, bi), &mut rng).unwrap();
            let x = Array2::random_normal(6, 2, 1.0, &mut rng);
            let y = LabelSequence::new(vec![2, 0], 3).unwrap();
            let masks = m.sample_masks(0.25, &mut rng).unwrap();
            let mut grads = zeros_like(&m);
            let nll = m.loss_and_gradient(&x, None, &y, Some(&masks), &mut grads).unwrap();
            assert!(nll.is_finite() && nll > 0.0);
            let mut probe = m.clone();
            let num = finite_difference_gradient(
                |p| {
                    assign_params(&mut probe, p);
                    let mut sink = zeros_like(&probe);
                    probe.loss_and_gradient(&x, None, &y, Some(&masks), &mut sink).unwrap()
                },
                &flatten_params(&m),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&flatten_params(&grads), &num);
            assert!(err <= 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn session_lattice_matches_batch_lattice() {
        let mut rng = RandomStream::new(5, 0);
        let m = Transducer::new(tiny_config(JointMode::Multiplicative, true), &mut rng).unwrap();
        let x = Array2::random_normal(5, 2, 1.0, &mut rng);
        let y = LabelSequence::new(vec![1, 1, 0], 3).unwrap();
        let a = m.lattice(&x, None, &y).unwrap();
        let b = m.session(&x, None).unwrap().lattice_for(&y).unwrap();
        for (p, q) in a.as_array().data().iter().zip(b.as_array().data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_count_follows_encoder_shape() {
        let mut rng = RandomStream::new(6, 0);
        let m = Transducer::new(tiny_config(JointMode::Additive, true), &mut rng).unwrap();
        assert_eq!(m.sample_masks(0.1, &mut rng).unwrap().encoder.len(), 2);
    }
}
