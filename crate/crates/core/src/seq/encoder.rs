use serde::{Deserialize, Serialize};

use super::lstm::{LstmLayer, LstmSequenceCache};
use crate::error::{Error, Result};
use crate::numerics::{join_name, Array2, Parameterized, RandomStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Raw per-frame feature dimension, before the auxiliary vector.
    pub input_dim: usize,
    /// Per-utterance auxiliary (speaker) vector appended to every frame;
    /// zero disables it.
    #[serde(default)]
    pub aux_dim: usize,
    pub layers: usize,
    /// Cells per layer per direction.
    pub cells: usize,
    pub bidirectional: bool,
    #[serde(default = "default_two")]
    pub stack: usize,
    #[serde(default = "default_two")]
    pub skip: usize,
    /// Output delay in encoder frames; unidirectional encoders only.
    #[serde(default)]
    pub lookahead: usize,
}

fn default_two() -> usize {
    2
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bidirectional && self.lookahead != 0 {
            return Err(Error::Config("lookahead is only meaningful for unidirectional encoders".into()));
        }
        if self.stack == 0 || self.skip == 0 {
            return Err(Error::Config("frame stacking and skipping factors must be >= 1".into()));
        }
        if self.layers == 0 || self.cells == 0 || self.input_dim == 0 {
            return Err(Error::Config(format!("degenerate encoder {self:?}")));
        }
        Ok(())
    }

    /// Width of each stacked input frame.
    pub fn stacked_dim(&self) -> usize {
        self.stack * (self.input_dim + self.aux_dim)
    }

    /// Width of each output frame (`E`).
    pub fn output_dim(&self) -> usize {
        self.cells * self.directions()
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }
}

/// Concatenates `stack` consecutive frames starting at every `skip`-th
/// frame. Frames past the end are filled by repeating the last frame, so the
/// output has `ceil(T / skip)` rows.
pub fn stack_and_skip(features: &Array2, stack: usize, skip: usize) -> Result<Array2> {
    let (frames, dim) = features.shape();
    if frames == 0 {
        return Err(Error::Contract("cannot stack an empty feature sequence".into()));
    }
    if stack == 0 || skip == 0 {
        return Err(Error::Config("frame stacking and skipping factors must be >= 1".into()));
    }
    let out_frames = frames.div_ceil(skip);
    let mut out = Array2::zeros(out_frames, stack * dim);
    for i in 0..out_frames {
        let row = out.row_mut(i);
        for j in 0..stack {
            let src = (i * skip + j).min(frames - 1);
            row[j * dim..(j + 1) * dim].copy_from_slice(features.row(src));
        }
    }
    Ok(out)
}

/// Appends `aux` to every row of `frames`.
pub fn append_aux(frames: &Array2, aux: &[f64]) -> Array2 {
    let mut out = Array2::zeros(frames.rows(), frames.cols() + aux.len());
    for t in 0..frames.rows() {
        let row = out.row_mut(t);
        row[..frames.cols()].copy_from_slice(frames.row(t));
        row[frames.cols()..].copy_from_slice(aux);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub forward: LstmLayer,
    pub backward: Option<LstmLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    forward: LstmSequenceCache,
    backward: Option<LstmSequenceCache>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    layers: Vec<LayerCache>,
    /// Number of real (unpadded) encoder frames.
    frames: usize,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        let mut input = config.stacked_dim();
        for _ in 0..config.layers {
            let forward = LstmLayer::new(input, config.cells, rng);
            let backward = config.bidirectional.then(|| LstmLayer::new(input, config.cells, rng));
            layers.push(EncoderLayer { forward, backward });
            input = config.output_dim();
        }
        Ok(Self { config, layers })
    }

    /// Number of LSTMs, i.e. DropConnect masks expected by [`Encoder::encode`].
    pub fn lstm_count(&self) -> usize {
        self.config.layers * self.config.directions()
    }

    pub fn lstms(&self) -> impl Iterator<Item = &LstmLayer> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.forward).chain(l.backward.as_ref()))
    }

    /// Aux append, then stacking/skipping, then lookahead padding.
    pub fn prepare_input(&self, features: &Array2, aux: Option<&[f64]>) -> Result<Array2> {
        let cfg = &self.config;
        if features.cols() != cfg.input_dim {
            return Err(Error::dim("encoder feature dimension", cfg.input_dim, features.cols()));
        }
        let with_aux = match (cfg.aux_dim, aux) {
            (0, None) => features.clone(),
            (0, Some(a)) => return Err(Error::dim("auxiliary vector", 0, a.len())),
            (d, Some(a)) if a.len() == d => append_aux(features, a),
            (d, a) => return Err(Error::dim("auxiliary vector", d, a.map_or(0, <[f64]>::len))),
        };
        let stacked = stack_and_skip(&with_aux, cfg.stack, cfg.skip)?;
        if cfg.lookahead == 0 {
            return Ok(stacked);
        }
        let mut padded = Array2::zeros(stacked.rows() + cfg.lookahead, stacked.cols());
        padded.data_mut()[..stacked.len()].copy_from_slice(stacked.data());
        Ok(padded)
    }

    /// Encoder output `h`, `T' x E`.
    pub fn encode(&self, features: &Array2, aux: Option<&[f64]>, masks: Option<&[Array2]>) -> Result<Array2> {
        Ok(self.forward(features, aux, masks)?.0)
    }

    pub fn forward(&self, features: &Array2, aux: Option<&[f64]>, masks: Option<&[Array2]>) -> Result<(Array2, EncoderCache)> {
        if let Some(m) = masks {
            if m.len() != self.lstm_count() {
                return Err(Error::dim("encoder DropConnect masks", self.lstm_count(), m.len()));
            }
        }
        let mask = |i: usize| masks.map(|m| &m[i]);
        let mut x = self.prepare_input(features, aux)?;
        let frames = x.rows() - self.config.lookahead;
        let mut caches = Vec::with_capacity(self.layers.len());
        let dirs = self.config.directions();
        for (l, layer) in self.layers.iter().enumerate() {
            let fwd = layer.forward.forward_sequence(&x, mask(l * dirs), false)?;
            let bwd = match &layer.backward {
                Some(b) => Some(b.forward_sequence(&x, mask(l * dirs + 1), true)?),
                None => None,
            };
            x = match &bwd {
                Some(b) => fwd.outputs.hconcat(&b.outputs)?,
                None => fwd.outputs.clone(),
            };
            caches.push(LayerCache { forward: fwd, backward: bwd });
        }
        let out = x.slice_rows(self.config.lookahead, self.config.lookahead + frames);
        Ok((out, EncoderCache { layers: caches, frames }))
    }

    /// Accumulates parameter gradients given `dL/dh` (`T' x E`) and returns
    /// the gradient with respect to the prepared (stacked, padded) input.
    pub fn backward(&self, d_out: &Array2, cache: &EncoderCache, masks: Option<&[Array2]>, grads: &mut Encoder) -> Result<Array2> {
        d_out.require_shape("encoder output gradient", cache.frames, self.config.output_dim())?;
        let mask = |i: usize| masks.map(|m| &m[i]);
        let la = self.config.lookahead;
        let mut d = Array2::zeros(cache.frames + la, self.config.output_dim());
        d.data_mut()[la * d_out.cols()..].copy_from_slice(d_out.data());
        let dirs = self.config.directions();
        let cells = self.config.cells;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let c = &cache.layers[l];
            let g = &mut grads.layers[l];
            d = match (&layer.backward, &c.backward, &mut g.backward) {
                (Some(b), Some(bc), Some(bg)) => {
                    let d_f = d.slice_cols(0, cells);
                    let d_b = d.slice_cols(cells, 2 * cells);
                    let mut dx = layer.forward.backward_sequence(&d_f, &c.forward, mask(l * dirs), &mut g.forward)?;
                    let dx_b = b.backward_sequence(&d_b, bc, mask(l * dirs + 1), bg)?;
                    dx.axpy(1.0, &dx_b);
                    dx
                }
                _ => layer.forward.backward_sequence(&d, &c.forward, mask(l * dirs), &mut g.forward)?,
            };
        }
        Ok(d)
    }
}

impl Parameterized for Encoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.forward.visit_params(&join_name(prefix, &format!("layer{i}.fwd")), f);
            if let Some(b) = &l.backward {
                b.visit_params(&join_name(prefix, &format!("layer{i}.bwd")), f);
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.forward.visit_params_mut(&join_name(prefix, &format!("layer{i}.fwd")), f);
            if let Some(b) = &mut l.backward {
                b.visit_params_mut(&join_name(prefix, &format!("layer{i}.bwd")), f);
            }
        }
    }
}
