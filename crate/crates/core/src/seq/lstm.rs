use crate::error::{Error, Result};
use crate::numerics::{join_name, Array2, Parameterized, RandomStream};

/// One LSTM layer. Gate rows are laid out as `[input, forget, cell, output]`,
/// each `H` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4H x I`
    pub w_ih: Array2,
    /// `4H x H`, the DropConnect target.
    pub w_hh: Array2,
    /// `4H x 1`
    pub bias: Array2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(cells: usize) -> Self {
        Self {
            h: vec![0.0; cells],
            c: vec![0.0; cells],
        }
    }
}

/// Everything the backward pass needs from a sequence forward pass.
#[derive(Debug, Clone)]
pub struct LstmSequenceCache {
    input: Array2,
    /// Post-nonlinearity gates per frame, `T x 4H`.
    gates: Array2,
    cells: Array2,
    tanh_cells: Array2,
    /// Hidden outputs, `T x H`, in input order.
    pub outputs: Array2,
    reverse: bool,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies the nonlinearities in place to the pre-activation `a` (length
/// `4H`) and returns the new state.
fn activate(a: &mut [f64], c_prev: &[f64], tanh_c: &mut [f64]) -> LstmState {
    let n = c_prev.len();
    for i in 0..n {
        a[i] = sigmoid(a[i]);
        a[n + i] = sigmoid(a[n + i]);
        a[2 * n + i] = a[2 * n + i].tanh();
        a[3 * n + i] = sigmoid(a[3 * n + i]);
    }
    let mut c = vec![0.0; n];
    let mut h = vec![0.0; n];
    for i in 0..n {
        c[i] = a[n + i] * c_prev[i] + a[i] * a[2 * n + i];
        tanh_c[i] = c[i].tanh();
        h[i] = a[3 * n + i] * tanh_c[i];
    }
    LstmState { h, c }
}

impl LstmLayer {
    /// Uniform `±1/sqrt(H)` weights, zero biases except a forget-gate bias of
    /// one.
    pub fn new(input_dim: usize, cells: usize, rng: &mut RandomStream) -> Self {
        let bound = 1.0 / (cells as f64).sqrt();
        let mut bias = Array2::vector(4 * cells);
        for i in cells..2 * cells {
            bias.data_mut()[i] = 1.0;
        }
        Self {
            w_ih: Array2::random_uniform(4 * cells, input_dim, bound, rng),
            w_hh: Array2::random_uniform(4 * cells, cells, bound, rng),
            bias,
        }
    }

    pub fn zeros(input_dim: usize, cells: usize) -> Self {
        Self {
            w_ih: Array2::zeros(4 * cells, input_dim),
            w_hh: Array2::zeros(4 * cells, cells),
            bias: Array2::vector(4 * cells),
        }
    }

    pub fn cells(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    fn check_mask(&self, mask: Option<&Array2>) -> Result<()> {
        if let Some(m) = mask {
            m.require_shape("DropConnect mask", self.w_hh.rows(), self.w_hh.cols())?;
        }
        Ok(())
    }

    fn recurrent_matrix(&self, mask: Option<&Array2>) -> std::borrow::Cow<'_, Array2> {
        match mask {
            Some(m) => std::borrow::Cow::Owned(self.w_hh.hadamard(m)),
            None => std::borrow::Cow::Borrowed(&self.w_hh),
        }
    }

    /// One recursion step. When `hh_mask` is given the hidden-to-hidden
    /// matrix is replaced by `w_hh ⊙ mask` for this step. The layer output is
    /// the returned state's `h`.
    pub fn step(&self, x: &[f64], state: &LstmState, hh_mask: Option<&Array2>) -> Result<LstmState> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("LSTM input", self.input_dim(), x.len()));
        }
        if state.h.len() != self.cells() || state.c.len() != self.cells() {
            return Err(Error::dim("LSTM state", self.cells(), state.h.len()));
        }
        self.check_mask(hh_mask)?;
        let w_hh = self.recurrent_matrix(hh_mask);
        let mut a = self.w_ih.matvec(x);
        for (ai, bi) in a.iter_mut().zip(self.bias.data()) {
            *ai += bi;
        }
        let rec = w_hh.matvec(&state.h);
        for (ai, ri) in a.iter_mut().zip(&rec) {
            *ai += ri;
        }
        let mut tanh_c = vec![0.0; self.cells()];
        Ok(activate(&mut a, &state.c, &mut tanh_c))
    }

    /// Runs the layer over every row of `input` from a zero state, in
    /// reverse row order when `reverse` is set. Outputs stay in input order.
    pub fn forward_sequence(&self, input: &Array2, hh_mask: Option<&Array2>, reverse: bool) -> Result<LstmSequenceCache> {
        if input.cols() != self.input_dim() {
            return Err(Error::dim("LSTM input", self.input_dim(), input.cols()));
        }
        self.check_mask(hh_mask)?;
        let w_hh = self.recurrent_matrix(hh_mask);
        let (frames, n) = (input.rows(), self.cells());
        let mut gates = input.matmul_t(&self.w_ih);
        for t in 0..frames {
            for (ai, bi) in gates.row_mut(t).iter_mut().zip(self.bias.data()) {
                *ai += bi;
            }
        }
        let mut cells = Array2::zeros(frames, n);
        let mut tanh_cells = Array2::zeros(frames, n);
        let mut outputs = Array2::zeros(frames, n);
        let mut state = LstmState::zeros(n);
        let mut rec = vec![0.0; 4 * n];
        for step in 0..frames {
            let t = if reverse { frames - 1 - step } else { step };
            w_hh.matvec_into(&state.h, &mut rec);
            let a = gates.row_mut(t);
            for (ai, ri) in a.iter_mut().zip(&rec) {
                *ai += ri;
            }
            state = activate(a, &state.c, tanh_cells.row_mut(t));
            cells.row_mut(t).copy_from_slice(&state.c);
            outputs.row_mut(t).copy_from_slice(&state.h);
        }
        Ok(LstmSequenceCache {
            input: input.clone(),
            gates,
            cells,
            tanh_cells,
            outputs,
            reverse,
        })
    }

    /// Backpropagation through time. `d_outputs` is `dL/d outputs`; parameter
    /// gradients are accumulated into `grads` and `dL/d input` is returned.
    pub fn backward_sequence(&self, d_outputs: &Array2, cache: &LstmSequenceCache, hh_mask: Option<&Array2>, grads: &mut LstmLayer) -> Result<Array2> {
        let (frames, n) = (cache.outputs.rows(), self.cells());
        d_outputs.require_shape("LSTM output gradient", frames, n)?;
        self.check_mask(hh_mask)?;
        let w_hh = self.recurrent_matrix(hh_mask);
        let mut d_pre = Array2::zeros(frames, 4 * n);
        let mut d_rec_w = Array2::zeros(4 * n, n);
        let mut dh_next = vec![0.0; n];
        let mut dc_next = vec![0.0; n];
        let zeros = vec![0.0; n];
        for step in (0..frames).rev() {
            let t = if cache.reverse { frames - 1 - step } else { step };
            let prev = if step == 0 {
                None
            } else if cache.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let (h_prev, c_prev) = match prev {
                Some(p) => (cache.outputs.row(p), cache.cells.row(p)),
                None => (&zeros[..], &zeros[..]),
            };
            let g = cache.gates.row(t);
            let tc = cache.tanh_cells.row(t);
            let da = d_pre.row_mut(t);
            for i in 0..n {
                let dh = d_outputs.get(t, i) + dh_next[i];
                let (ig, fg, cg, og) = (g[i], g[n + i], g[2 * n + i], g[3 * n + i]);
                let d_o = dh * tc[i];
                let dc = dh * og * (1.0 - tc[i] * tc[i]) + dc_next[i];
                da[i] = dc * cg * ig * (1.0 - ig);
                da[n + i] = dc * c_prev[i] * fg * (1.0 - fg);
                da[2 * n + i] = dc * ig * (1.0 - cg * cg);
                da[3 * n + i] = d_o * og * (1.0 - og);
                dc_next[i] = dc * fg;
            }
            dh_next.iter_mut().for_each(|x| *x = 0.0);
            w_hh.matvec_t_acc(d_pre.row(t), &mut dh_next);
            if prev.is_some() {
                d_rec_w.add_outer(d_pre.row(t), h_prev);
            }
        }
        if let Some(m) = hh_mask {
            d_rec_w = d_rec_w.hadamard(m);
        }
        grads.w_hh.axpy(1.0, &d_rec_w);
        grads.w_ih.add_t_matmul(&d_pre, &cache.input);
        for t in 0..frames {
            for (b, d) in grads.bias.data_mut().iter_mut().zip(d_pre.row(t)) {
                *b += d;
            }
        }
        Ok(d_pre.matmul(&self.w_ih))
    }
}

impl Parameterized for LstmLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2)) {
        f(&join_name(prefix, "w_ih"), &self.w_ih);
        f(&join_name(prefix, "w_hh"), &self.w_hh);
        f(&join_name(prefix, "b"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2)) {
        f(&join_name(prefix, "w_ih"), &mut self.w_ih);
        f(&join_name(prefix, "w_hh"), &mut self.w_hh);
        f(&join_name(prefix, "b"), &mut self.bias);
    }
}

/// DropConnect mask: independent Bernoulli(1 - rate) keeps, survivors scaled
/// by `1 / (1 - rate)` so evaluation can use the unmasked weights. A rate of
/// one yields the zero matrix.
pub fn sample_dropconnect_mask(rows: usize, cols: usize, rate: f64, rng: &mut RandomStream) -> Result<Array2> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("DropConnect rate {rate} outside [0, 1]")));
    }
    let mut mask = Array2::zeros(rows, cols);
    if rate == 0.0 {
        mask.fill(1.0);
        return Ok(mask);
    }
    if rate == 1.0 {
        return Ok(mask);
    }
    let keep = 1.0 / (1.0 - rate);
    for v in mask.data_mut() {
        if rng.uniform() >= rate {
            *v = keep;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{assign_params, dot, finite_difference_gradient, flatten_params, max_relative_error, zeros_like};

    #[test]
    fn zero_weights_give_zero_state() {
        let layer = LstmLayer::zeros(3, 4);
        let s = layer.step(&[1.0, -2.0, 0.5], &LstmState::zeros(4), None).unwrap();
        assert_eq!(s.c, vec![0.0; 4]);
        assert_eq!(s.h, vec![0.0; 4]);
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let mut rng = RandomStream::new(1, 0);
        let layer = LstmLayer::new(3, 4, &mut rng);
        let state = LstmState {
            h: vec![0.1, -0.2, 0.3, 0.0],
            c: vec![0.5, 0.5, -1.0, 0.2],
        };
        let ones = sample_dropconnect_mask(16, 4, 0.0, &mut rng).unwrap();
        let a = layer.step(&[0.3, 0.1, -0.7], &state, None).unwrap();
        let b = layer.step(&[0.3, 0.1, -0.7], &state, Some(&ones)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_and_sequence_agree_bitwise() {
        let mut rng = RandomStream::new(2, 0);
        let layer = LstmLayer::new(3, 5, &mut rng);
        let xs = Array2::random_normal(6, 3, 1.0, &mut rng);
        let cache = layer.forward_sequence(&xs, None, false).unwrap();
        let mut s = LstmState::zeros(5);
        for t in 0..6 {
            s = layer.step(xs.row(t), &s, None).unwrap();
            assert_eq!(s.h.as_slice(), cache.outputs.row(t));
        }
    }

    #[test]
    fn mask_shape_is_checked() {
        let mut rng = RandomStream::new(2, 0);
        let layer = LstmLayer::new(3, 5, &mut rng);
        let bad = Array2::zeros(5, 5);
        assert!(layer.step(&[0.0; 3], &LstmState::zeros(5), Some(&bad)).is_err());
        assert!(layer.step(&[0.0; 2], &LstmState::zeros(5), None).is_err());
    }

    fn sequence_gradient_check(reverse: bool, masked: bool, seed: u64) {
        let mut rng = RandomStream::new(seed, 0);
        let layer = LstmLayer::new(3, 4, &mut rng);
        let xs = Array2::random_normal(5, 3, 1.0, &mut rng);
        let w = Array2::random_normal(5, 4, 1.0, &mut rng);
        let mask = masked.then(|| sample_dropconnect_mask(16, 4, 0.3, &mut rng).unwrap());
        let loss = |l: &LstmLayer, x: &Array2| {
            let c = l.forward_sequence(x, mask.as_ref(), reverse).unwrap();
            dot(c.outputs.data(), w.data())
        };
        let cache = layer.forward_sequence(&xs, mask.as_ref(), reverse).unwrap();
        let mut grads = zeros_like(&layer);
        let dx = layer.backward_sequence(&w, &cache, mask.as_ref(), &mut grads).unwrap();

        let mut probe = layer.clone();
        let num = finite_difference_gradient(
            |p| {
                assign_params(&mut probe, p);
                loss(&probe, &xs)
            },
            &flatten_params(&layer),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&flatten_params(&grads), &num) <= 1e-4);
        let num_x = finite_difference_gradient(
            |x| loss(&layer, &Array2::from_vec(5, 3, x.to_vec()).unwrap()),
            xs.data(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(dx.data(), &num_x) <= 1e-4);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3 {
            sequence_gradient_check(false, false, seed);
            sequence_gradient_check(true, false, seed);
            sequence_gradient_check(false, true, seed);
        }
    }

    #[test]
    fn dropconnect_masks() {
        let mut rng = RandomStream::new(5, 0);
        let zero = sample_dropconnect_mask(3, 3, 1.0, &mut rng).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
        let m = sample_dropconnect_mask(10, 10, 0.5, &mut rng).unwrap();
        assert!(m.data().iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!(sample_dropconnect_mask(2, 2, 1.5, &mut rng).is_err());
        assert!(sample_dropconnect_mask(2, 2, -0.1, &mut rng).is_err());
        let a = sample_dropconnect_mask(8, 8, 0.25, &mut RandomStream::new(9, 1)).unwrap();
        let b = sample_dropconnect_mask(8, 8, 0.25, &mut RandomStream::new(9, 1)).unwrap();
        assert_eq!(a, b);
    }
}
