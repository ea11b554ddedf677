use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::lstm::{LstmLayer, LstmState};
use crate::error::{Error, Result};
use crate::lattice::LabelSequence;
use crate::numerics::{join_name, Array2, Parameterized, RandomStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionConfig {
    /// `|Y|`, blank excluded.
    pub vocab: usize,
    pub embed_dim: usize,
    pub cells: usize,
}

/// Single-layer LSTM prediction network with a learned label embedding.
/// `g_0` is the zero vector; `g_u` is the LSTM output after consuming
/// `y_1..y_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionNetwork {
    pub config: PredictionConfig,
    /// `|Y| x embed_dim`
    pub embedding: Array2,
    pub lstm: LstmLayer,
}

/// Immutable snapshot of the recursion after some prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionState {
    state: Arc<LstmState>,
}

impl PredictionState {
    /// The current `g_u`.
    pub fn output(&self) -> &[f64] {
        &self.state.h
    }
}

#[derive(Debug, Clone)]
pub struct PredictionCache {
    labels: Vec<usize>,
    lstm: Option<super::lstm::LstmSequenceCache>,
}

impl PredictionNetwork {
    pub fn new(config: PredictionConfig, rng: &mut RandomStream) -> Result<Self> {
        if config.vocab == 0 || config.embed_dim == 0 || config.cells == 0 {
            return Err(Error::Config(format!("degenerate prediction network {config:?}")));
        }
        let embedding = Array2::random_normal(config.vocab, config.embed_dim, 1.0, rng);
        let lstm = LstmLayer::new(config.embed_dim, config.cells, rng);
        Ok(Self { config, embedding, lstm })
    }

    pub fn output_dim(&self) -> usize {
        self.config.cells
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

    pub fn initial_state(&self) -> PredictionState {
        PredictionState {
            state: Arc::new(LstmState::zeros(self.config.cells)),
        }
    }

    /// Extends a cached prefix state by one label.
    pub fn advance(&self, state: &PredictionState, label: usize, mask: Option<&Array2>) -> Result<PredictionState> {
        self.check(label)?;
        let next = self.lstm.step(self.embedding.row(label), &state.state, mask)?;
        Ok(PredictionState { state: Arc::new(next) })
    }

    /// `g_0..g_U` as a `(U+1) x P` array.
    pub fn embed(&self, prefix: &LabelSequence, mask: Option<&Array2>) -> Result<Array2> {
        Ok(self.forward(prefix, mask)?.0)
    }

    pub fn forward(&self, prefix: &LabelSequence, mask: Option<&Array2>) -> Result<(Array2, PredictionCache)> {
        for &l in prefix.labels() {
            self.check(l)?;
        }
        let n = prefix.len();
        let mut out = Array2::zeros(n + 1, self.config.cells);
        if n == 0 {
            return Ok((
                out,
                PredictionCache {
                    labels: Vec::new(),
                    lstm: None,
                },
            ));
        }
        let mut x = Array2::zeros(n, self.config.embed_dim);
        for (u, &l) in prefix.labels().iter().enumerate() {
            x.row_mut(u).copy_from_slice(self.embedding.row(l));
        }
        let cache = self.lstm.forward_sequence(&x, mask, false)?;
        out.data_mut()[self.config.cells..].copy_from_slice(cache.outputs.data());
        Ok((
            out,
            PredictionCache {
                labels: prefix.labels().to_vec(),
                lstm: Some(cache),
            },
        ))
    }

    /// `d_out` is `dL/dg` for `g_0..g_U`; the row for the constant `g_0` is
    /// ignored.
    pub fn backward(&self, d_out: &Array2, cache: &PredictionCache, mask: Option<&Array2>, grads: &mut PredictionNetwork) -> Result<()> {
        let n = cache.labels.len();
        d_out.require_shape("prediction output gradient", n + 1, self.config.cells)?;
        let Some(lstm_cache) = &cache.lstm else {
            return Ok(());
        };
        let d_h = d_out.slice_rows(1, n + 1);
        let dx = self.lstm.backward_sequence(&d_h, lstm_cache, mask, &mut grads.lstm)?;
        for (u, &l) in cache.labels.iter().enumerate() {
            for (g, d) in grads.embedding.row_mut(l).iter_mut().zip(dx.row(u)) {
                *g += d;
            }
        }
        Ok(())
    }
}

impl Parameterized for PredictionNetwork {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2)) {
        f(&join_name(prefix, "embedding"), &self.embedding);
        self.lstm.visit_params(&join_name(prefix, "lstm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2)) {
        f(&join_name(prefix, "embedding"), &mut self.embedding);
        self.lstm.visit_params_mut(&join_name(prefix, "lstm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{assign_params, dot, finite_difference_gradient, flatten_params, max_relative_error, zeros_like};

    fn net(seed: u64) -> PredictionNetwork {
        let mut rng = RandomStream::new(seed, 0);
        PredictionNetwork::new(
            PredictionConfig {
                vocab: 4,
                embed_dim: 3,
                cells: 5,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn empty_prefix_is_zero_vector() {
        let p = net(0);
        let g = p.embed(&LabelSequence::empty(), None).unwrap();
        assert_eq!(g.shape(), (1, 5));
        assert!(g.data().iter().all(|v| *v == 0.0));
        assert!(p.initial_state().output().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn incremental_matches_recompute_bitwise() {
        let p = net(1);
        let y = LabelSequence::new(vec![2, 0, 3, 3, 1], 4).unwrap();
        let full = p.embed(&y, None).unwrap();
        let mut s = p.initial_state();
        for (u, &l) in y.labels().iter().enumerate() {
            s = p.advance(&s, l, None).unwrap();
            assert_eq!(s.output(), full.row(u + 1));
        }
        let again = p.embed(&LabelSequence::new(vec![2], 4).unwrap(), None).unwrap();
        assert_eq!(again.row(1), full.row(1));
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let p = net(2);
        assert!(matches!(p.advance(&p.initial_state(), 4, None), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn gradient_check_length_four() {
        for seed in 0..3 {
            let p = net(seed);
            let y = LabelSequence::new(vec![1, 3, 1, 0], 4).unwrap();
            let mut rng = RandomStream::new(seed, 1);
            let w = Array2::random_normal(5, 5, 1.0, &mut rng);
            let (_, cache) = p.forward(&y, None).unwrap();
            let mut grads = zeros_like(&p);
            p.backward(&w, &cache, None, &mut grads).unwrap();
            let mut probe = p.clone();
            let num = finite_difference_gradient(
                |x| {
                    assign_params(&mut probe, x);
                    dot(probe.embed(&y, None).unwrap().data(), w.data())
                },
                &flatten_params(&p),
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&flatten_params(&grads), &num) <= 1e-4);
        }
    }
}
