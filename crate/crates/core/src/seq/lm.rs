use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::lstm::{LstmLayer, LstmSequenceCache, LstmState};
use crate::error::{Error, Result};
use crate::lattice::LabelSequence;
use crate::numerics::{join_name, log_softmax_in_place, Array2, Parameterized, RandomStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharLmConfig {
    /// `|Y|`; the model adds one marker symbol used as sentence begin on
    /// the input side and sentence end on the output side.
    pub vocab: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub cells: usize,
}

impl CharLmConfig {
    /// Output vocabulary size, `|Y| + 1`.
    pub fn outputs(&self) -> usize {
        self.vocab + 1
    }

    pub fn marker(&self) -> usize {
        self.vocab
    }
}

/// Character-level LSTM language model.
#[derive(Debug, Clone, PartialEq)]
pub struct CharLm {
    pub config: CharLmConfig,
    /// `(|Y|+1) x embed_dim`, the last row embeds the begin marker.
    pub embedding: Array2,
    pub layers: Vec<LstmLayer>,
    /// `(|Y|+1) x cells`, the last row scores the end marker.
    pub w_out: Array2,
    pub b_out: Array2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmScore {
    pub total: f64,
    /// `log p(y_u | y_<u)` for every symbol, then the end-marker term.
    pub increments: Vec<f64>,
}

/// Immutable scoring state holding the next-symbol distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    layers: Arc<Vec<LstmState>>,
    log_probs: Arc<Vec<f64>>,
}

impl LmState {
    pub fn log_prob(&self, label: usize) -> f64 {
        self.log_probs[label]
    }

    /// Log-probability of ending the sentence here.
    pub fn end_log_prob(&self) -> f64 {
        self.log_probs[self.log_probs.len() - 1]
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

impl CharLm {
    pub fn new(config: CharLmConfig, rng: &mut RandomStream) -> Result<Self> {
        if config.vocab == 0 || config.layers == 0 || config.cells == 0 || config.embed_dim == 0 {
            return Err(Error::Config(format!("degenerate language model {config:?}")));
        }
        let v = config.outputs();
        let embedding = Array2::random_normal(v, config.embed_dim, 1.0, rng);
        let mut layers = Vec::with_capacity(config.layers);
        let mut input = config.embed_dim;
        for _ in 0..config.layers {
            layers.push(LstmLayer::new(input, config.cells, rng));
            input = config.cells;
        }
        let w_out = Array2::random_normal(v, config.cells, 1.0 / (config.cells as f64).sqrt(), rng);
        let b_out = Array2::vector(v);
        Ok(Self {
            config,
            embedding,
            layers,
            w_out,
            b_out,
        })
    }

    fn check(&self, label: usize) -> Result<()> {
        if label >= self.config.vocab {
            return Err(Error::Vocabulary {
                symbol: label,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    fn output_log_probs(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.w_out.matvec(h);
        for (zi, b) in z.iter_mut().zip(self.b_out.data()) {
            *zi += b;
        }
        log_softmax_in_place(&mut z);
        z
    }

    fn consume(&self, layers: &[LstmState], symbol: usize) -> Result<LmState> {
        let mut next = Vec::with_capacity(layers.len());
        let mut x = self.embedding.row(symbol).to_vec();
        for (layer, state) in self.layers.iter().zip(layers) {
            let s = layer.step(&x, state, None)?;
            x.clone_from(&s.h);
            next.push(s);
        }
        let log_probs = self.output_log_probs(&x);
        Ok(LmState {
            layers: Arc::new(next),
            log_probs: Arc::new(log_probs),
        })
    }

    /// State after consuming the begin marker.
    pub fn initial_state(&self) -> LmState {
        let zeros: Vec<LstmState> = (0..self.layers.len()).map(|_| LstmState::zeros(self.config.cells)).collect();
        self.consume(&zeros, self.config.marker())
            .expect("begin marker is always in range")
    }

    pub fn advance(&self, state: &LmState, label: usize) -> Result<LmState> {
        self.check(label)?;
        self.consume(&state.layers, label)
    }

    /// Full-sequence log-probability including the end marker, computed
    /// incrementally.
    pub fn score(&self, sequence: &LabelSequence) -> Result<LmScore> {
        let mut state = self.initial_state();
        let mut increments = Vec::with_capacity(sequence.len() + 1);
        for &l in sequence.labels() {
            self.check(l)?;
            increments.push(state.log_prob(l));
            state = self.advance(&state, l)?;
        }
        increments.push(state.end_log_prob());
        Ok(LmScore {
            total: increments.iter().sum(),
            increments,
        })
    }

    fn sequence_forward(&self, sequence: &LabelSequence, masks: Option<&[Array2]>) -> Result<(Vec<LstmSequenceCache>, Array2, Vec<usize>)> {
        for &l in sequence.labels() {
            self.check(l)?;
        }
        if let Some(m) = masks {
            if m.len() != self.layers.len() {
                return Err(Error::dim("language model DropConnect masks", self.layers.len(), m.len()));
            }
        }
        let n = sequence.len();
        let mut inputs = Vec::with_capacity(n + 1);
        inputs.push(self.config.marker());
        inputs.extend_from_slice(sequence.labels());
        let mut x = Array2::zeros(n + 1, self.config.embed_dim);
        for (i, &s) in inputs.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.embedding.row(s));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let c = layer.forward_sequence(&x, masks.map(|m| &m[i]), false)?;
            x = c.outputs.clone();
            caches.push(c);
        }
        let mut logp = x.matmul_t(&self.w_out);
        for r in 0..logp.rows() {
            let row = logp.row_mut(r);
            for (z, b) in row.iter_mut().zip(self.b_out.data()) {
                *z += b;
            }
            log_softmax_in_place(row);
        }
        Ok((caches, logp, inputs))
    }

    /// Batch (non-incremental) scoring with the same result as [`CharLm::score`].
    pub fn score_batch(&self, sequence: &LabelSequence) -> Result<LmScore> {
        let (_, logp, _) = self.sequence_forward(sequence, None)?;
        let increments: Vec<f64> = targets(sequence, self.config.marker())
            .enumerate()
            .map(|(i, t)| logp.get(i, t))
            .collect();
        Ok(LmScore {
            total: increments.iter().sum(),
            increments,
        })
    }

    /// Negative log-likelihood of the sequence (end marker included);
    /// accumulates its gradient into `grads`.
    pub fn nll_and_gradient(&self, sequence: &LabelSequence, masks: Option<&[Array2]>, grads: &mut CharLm) -> Result<f64> {
        let (caches, logp, inputs) = self.sequence_forward(sequence, masks)?;
        let mut nll = 0.0;
        let mut d_logits = Array2::zeros(logp.rows(), logp.cols());
        for (i, t) in targets(sequence, self.config.marker()).enumerate() {
            nll -= logp.get(i, t);
            let row = d_logits.row_mut(i);
            for (d, lp) in row.iter_mut().zip(logp.row(i)) {
                *d = lp.exp();
            }
            row[t] -= 1.0;
        }
        let top = &caches[caches.len() - 1].outputs;
        grads.w_out.add_t_matmul(&d_logits, top);
        for r in 0..d_logits.rows() {
            for (g, d) in grads.b_out.data_mut().iter_mut().zip(d_logits.row(r)) {
                *g += d;
            }
        }
        let mut d = d_logits.matmul(&self.w_out);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward_sequence(&d, &caches[i], masks.map(|m| &m[i]), &mut grads.layers[i])?;
        }
        for (i, &s) in inputs.iter().enumerate() {
            for (g, v) in grads.embedding.row_mut(s).iter_mut().zip(d.row(i)) {
                *g += v;
            }
        }
        Ok(nll)
    }
}

fn targets(sequence: &LabelSequence, marker: usize) -> impl Iterator<Item = usize> + '_ {
    sequence.labels().iter().copied().chain(std::iter::once(marker))
}

impl Parameterized for CharLm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2)) {
        f(&join_name(prefix, "embedding"), &self.embedding);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join_name(prefix, &format!("layer{i}")), f);
        }
        f(&join_name(prefix, "w_out"), &self.w_out);
        f(&join_name(prefix, "b_out"), &self.b_out);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2)) {
        f(&join_name(prefix, "embedding"), &mut self.embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join_name(prefix, &format!("layer{i}")), f);
        }
        f(&join_name(prefix, "w_out"), &mut self.w_out);
        f(&join_name(prefix, "b_out"), &mut self.b_out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{assign_params, finite_difference_gradient, flatten_params, max_relative_error, zeros_like};

    fn lm(seed: u64, layers: usize) -> CharLm {
        let mut rng = RandomStream::new(seed, 0);
        CharLm::new(
            CharLmConfig {
                vocab: 5,
                embed_dim: 4,
                layers,
                cells: 6,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn random_sequence(rng: &mut RandomStream, vocab: usize) -> LabelSequence {
        let n = rng.below(7);
        LabelSequence::new((0..n).map(|_| rng.below(vocab)).collect(), vocab).unwrap()
    }

    #[test]
    fn uniform_outputs_give_length_penalty() {
        let mut m = lm(0, 1);
        m.w_out.fill(0.0);
        m.b_out.fill(0.0);
        let v = 6.0_f64;
        for n in 0..5 {
            let y = LabelSequence::new(vec![1; n], 5).unwrap();
            let s = m.score(&y).unwrap();
            assert!((s.total + (n as f64 + 1.0) * v.ln()).abs() < 1e-12);
            assert_eq!(s.increments.len(), n + 1);
        }
    }

    #[test]
    fn empty_sequence_is_end_given_begin() {
        let m = lm(1, 2);
        let s = m.score(&LabelSequence::empty()).unwrap();
        assert_eq!(s.total, m.initial_state().end_log_prob());
    }

    #[test]
    fn incremental_matches_batch() {
        let m = lm(2, 2);
        let mut rng = RandomStream::new(9, 0);
        for _ in 0..20 {
            let y = random_sequence(&mut rng, 5);
            let a = m.score(&y).unwrap();
            let b = m.score_batch(&y).unwrap();
            assert!((a.total - b.total).abs() <= 1e-12);
            for (x, z) in a.increments.iter().zip(&b.increments) {
                assert!((x - z).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let m = lm(3, 1);
        let s = m.advance(&m.initial_state(), 2).unwrap();
        let total: f64 = s.log_probs().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let m = lm(4, 1);
        assert!(m.advance(&m.initial_state(), 5).is_err());
        assert!(LabelSequence::new(vec![5], 6).map(|y| m.score(&y)).unwrap().is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, layers) in [(0, 1), (1, 2)] {
            let m = lm(seed, layers);
            let y = LabelSequence::new(vec![0, 3, 3, 1], 5).unwrap();
            let mut grads = zeros_like(&m);
            let nll = m.nll_and_gradient(&y, None, &mut grads).unwrap();
            assert!((nll + m.score(&y).unwrap().total).abs() < 1e-10);
            let mut probe = m.clone();
            let num = finite_difference_gradient(
                |p| {
                    assign_params(&mut probe, p);
                    -probe.score_batch(&y).unwrap().total
                },
                &flatten_params(&m),
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&flatten_params(&grads), &num) <= 1e-4);
        }
    }
}
