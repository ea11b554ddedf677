//! Single-layer joint network fusing an encoder frame `h_t` with a
//! prediction-network vector `g_u`:
//!
//! * additive:        `log_softmax(W_out tanh(W_enc h + W_pred g + b))`
//! * multiplicative:  `log_softmax(W_out tanh((W_enc h) ⊙ (W_pred g) + b))`
//!
//! In multiplicative mode optional per-branch biases turn the product into
//! `(W_enc h + b_enc) ⊙ (W_pred g + b_pred)`. There is no output bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LogitsLattice;
use crate::numerics::{dot, join_name, log_softmax_backward, log_softmax_in_place, param_count, Array2, Array3, Parameterized, RandomStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointMode {
    Additive,
    Multiplicative,
}

impl JointMode {
    pub fn name(self) -> &'static str {
        match self {
            JointMode::Additive => "additive",
            JointMode::Multiplicative => "multiplicative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub mode: JointMode,
    pub enc_dim: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    /// `|Y| + 1`.
    pub outputs: usize,
    #[serde(default)]
    pub branch_biases: bool,
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branch_biases && self.mode == JointMode::Additive {
            return Err(Error::Config("per-branch biases are only defined for the multiplicative joint".into()));
        }
        if self.enc_dim == 0 || self.pred_dim == 0 || self.joint_dim == 0 || self.outputs < 2 {
            return Err(Error::Config(format!("degenerate joint dimensions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchBiases {
    pub enc: Array2,
    pub pred: Array2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointNetwork {
    pub mode: JointMode,
    /// `J x E`
    pub w_enc: Array2,
    /// `J x P`
    pub w_pred: Array2,
    /// `J x 1`
    pub bias: Array2,
    /// `|Ybar| x J`
    pub w_out: Array2,
    pub branch: Option<BranchBiases>,
}

/// Cached quantities from one node's forward pass.
#[derive(Debug, Clone)]
pub struct JointActivations {
    pub h_tilde: Vec<f64>,
    pub g_tilde: Vec<f64>,
    /// Output of the combination node (`h̃ + g̃` or `h̃ ⊙ g̃`).
    pub combined: Vec<f64>,
    /// `tanh(combined + b)`
    pub hidden: Vec<f64>,
    pub log_probs: Vec<f64>,
}

/// Gradients flowing out of one node's backward pass.
#[derive(Debug, Clone)]
pub struct JointNodeGrads {
    /// `dL / d combined`, the upstream gradient at the combination node.
    pub d_combined: Vec<f64>,
    pub d_h_tilde: Vec<f64>,
    pub d_g_tilde: Vec<f64>,
}

/// The combination node. Branch biases, when present, are added before the
/// product.
pub fn combine(mode: JointMode, h_tilde: &[f64], g_tilde: &[f64], branch: Option<&BranchBiases>) -> Vec<f64> {
    match mode {
        JointMode::Additive => h_tilde.iter().zip(g_tilde).map(|(a, b)| a + b).collect(),
        JointMode::Multiplicative => match branch {
            None => h_tilde.iter().zip(g_tilde).map(|(a, b)| a * b).collect(),
            Some(bb) => h_tilde
                .iter()
                .zip(g_tilde)
                .zip(bb.enc.data().iter().zip(bb.pred.data()))
                .map(|((a, b), (be, bp))| (a + be) * (b + bp))
                .collect(),
        },
    }
}

/// Backward through [`combine`]: in multiplicative mode each branch's
/// gradient is the upstream gradient gated by the other branch.
pub fn combine_backward(
    mode: JointMode,
    h_tilde: &[f64],
    g_tilde: &[f64],
    branch: Option<&BranchBiases>,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    match mode {
        JointMode::Additive => (upstream.to_vec(), upstream.to_vec()),
        JointMode::Multiplicative => {
            let (be, bp): (&[f64], &[f64]) = match branch {
                Some(bb) => (bb.enc.data(), bb.pred.data()),
                None => (&[], &[]),
            };
            let j = upstream.len();
            let mut dh = vec![0.0; j];
            let mut dg = vec![0.0; j];
            for i in 0..j {
                let gi = g_tilde[i] + bp.get(i).copied().unwrap_or(0.0);
                let hi = h_tilde[i] + be.get(i).copied().unwrap_or(0.0);
                dh[i] = gi * upstream[i];
                dg[i] = hi * upstream[i];
            }
            (dh, dg)
        }
    }
}

/// Cache for a whole lattice evaluation.
#[derive(Debug, Clone)]
pub struct JointLatticeCache {
    h_tilde: Array2,
    g_tilde: Array2,
    /// `T x (U+1) x J`
    hidden: Array3,
}

impl JointNetwork {
    pub fn new(config: &JointConfig, rng: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        let j = config.joint_dim;
        let enc_scale = (1.0 / config.enc_dim as f64).sqrt();
        let pred_scale = (1.0 / config.pred_dim as f64).sqrt();
        let out_scale = (1.0 / j as f64).sqrt();
        let mut w_enc = Array2::random_uniform(j, config.enc_dim, enc_scale * 3f64.sqrt(), rng);
        let mut w_pred = Array2::random_uniform(j, config.pred_dim, pred_scale * 3f64.sqrt(), rng);
        if config.mode == JointMode::Multiplicative {
            // Keep the product's variance comparable to the additive sum.
            w_enc.scale(2f64.sqrt());
            w_pred.scale(2f64.sqrt());
        }
        let w_out = Array2::random_uniform(config.outputs, j, out_scale * 3f64.sqrt(), rng);
        // Unit branch biases start the product at h̃⊙g̃ + h̃ + g̃ + 1, so the
        // encoder is visible even where the prediction output is zero.
        let branch = config.branch_biases.then(|| BranchBiases {
            enc: Array2::filled(j, 1, 1.0),
            pred: Array2::filled(j, 1, 1.0),
        });
        Ok(Self {
            mode: config.mode,
            w_enc,
            w_pred,
            bias: Array2::vector(j),
            w_out,
            branch,
        })
    }

    pub fn joint_dim(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn enc_dim(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn pred_dim(&self) -> usize {
        self.w_pred.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w_out.rows()
    }

    pub fn count_parameters(&self) -> usize {
        param_count(self)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_dim();
        self.w_pred.require_shape("W_pred", j, self.pred_dim())?;
        self.bias.require_shape("b", j, 1)?;
        self.w_out.require_shape("W_out", self.outputs(), j)?;
        if let Some(bb) = &self.branch {
            if self.mode == JointMode::Additive {
                return Err(Error::Config("additive joint cannot carry per-branch biases".into()));
            }
            bb.enc.require_shape("b_enc", j, 1)?;
            bb.pred.require_shape("b_pred", j, 1)?;
        }
        Ok(())
    }

    pub fn project_encoder(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.enc_dim() {
            return Err(Error::dim("W_enc input (E)", self.enc_dim(), h.len()));
        }
        Ok(self.w_enc.matvec(h))
    }

    pub fn project_prediction(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.pred_dim() {
            return Err(Error::dim("W_pred input (P)", self.pred_dim(), g.len()));
        }
        Ok(self.w_pred.matvec(g))
    }

    /// Log-probabilities over the augmented vocabulary for one `(h_t, g_u)`.
    pub fn forward(&self, h: &[f64], g: &[f64]) -> Result<JointActivations> {
        let h_tilde = self.project_encoder(h)?;
        let g_tilde = self.project_prediction(g)?;
        Ok(self.forward_projected(h_tilde, g_tilde))
    }

    pub fn forward_projected(&self, h_tilde: Vec<f64>, g_tilde: Vec<f64>) -> JointActivations {
        let combined = combine(self.mode, &h_tilde, &g_tilde, self.branch.as_ref());
        let hidden: Vec<f64> = combined
            .iter()
            .zip(self.bias.data())
            .map(|(c, b)| (c + b).tanh())
            .collect();
        let mut log_probs = self.w_out.matvec(&hidden);
        log_softmax_in_place(&mut log_probs);
        JointActivations {
            h_tilde,
            g_tilde,
            combined,
            hidden,
            log_probs,
        }
    }

    /// Log-probabilities only, from projected inputs; used in decoding.
    pub fn log_probs_projected(&self, h_tilde: &[f64], g_tilde: &[f64]) -> Vec<f64> {
        let combined = combine(self.mode, h_tilde, g_tilde, self.branch.as_ref());
        let hidden: Vec<f64> = combined
            .iter()
            .zip(self.bias.data())
            .map(|(c, b)| (c + b).tanh())
            .collect();
        let mut lp = self.w_out.matvec(&hidden);
        log_softmax_in_place(&mut lp);
        lp
    }

    /// Backward for one node given `dL / d log_probs`. Parameter gradients
    /// for `W_out`, `b` and the branch biases are accumulated into `grads`;
    /// the projection gradients are returned so callers can batch them.
    pub fn backward_node(&self, grad_logp: &[f64], act: &JointActivations, grads: &mut JointNetwork) -> Result<JointNodeGrads> {
        if act.log_probs.len() != self.outputs() || act.hidden.len() != self.joint_dim() {
            return Err(Error::Contract("joint backward called with activations from a different network".into()));
        }
        let mut d_logits = vec![0.0; self.outputs()];
        log_softmax_backward(grad_logp, &act.log_probs, &mut d_logits);
        Ok(self.backward_from_logits(&d_logits, &act.hidden, &act.h_tilde, &act.g_tilde, grads))
    }

    fn backward_from_logits(&self, d_logits: &[f64], hidden: &[f64], h_tilde: &[f64], g_tilde: &[f64], grads: &mut JointNetwork) -> JointNodeGrads {
        let j = self.joint_dim();
        grads.w_out.add_outer(d_logits, hidden);
        let mut d_hidden = vec![0.0; j];
        self.w_out.matvec_t_acc(d_logits, &mut d_hidden);
        let d_combined: Vec<f64> = d_hidden
            .iter()
            .zip(hidden)
            .map(|(d, z)| d * (1.0 - z * z))
            .collect();
        for (b, d) in grads.bias.data_mut().iter_mut().zip(&d_combined) {
            *b += d;
        }
        let (d_h_tilde, d_g_tilde) = combine_backward(self.mode, h_tilde, g_tilde, self.branch.as_ref(), &d_combined);
        if let (Some(gb), Some(_)) = (grads.branch.as_mut(), self.branch.as_ref()) {
            // d/d b_enc equals d/d h̃, and likewise for the prediction branch.
            for (b, d) in gb.enc.data_mut().iter_mut().zip(&d_h_tilde) {
                *b += d;
            }
            for (b, d) in gb.pred.data_mut().iter_mut().zip(&d_g_tilde) {
                *b += d;
            }
        }
        JointNodeGrads {
            d_combined,
            d_h_tilde,
            d_g_tilde,
        }
    }

    /// Full single-node backward: returns `(dL/dh, dL/dg)` and accumulates
    /// every parameter gradient.
    pub fn backward(&self, grad_logp: &[f64], act: &JointActivations, h: &[f64], g: &[f64], grads: &mut JointNetwork) -> Result<(Vec<f64>, Vec<f64>)> {
        let node = self.backward_node(grad_logp, act, grads)?;
        grads.w_enc.add_outer(&node.d_h_tilde, h);
        grads.w_pred.add_outer(&node.d_g_tilde, g);
        let mut dh = vec![0.0; self.enc_dim()];
        let mut dg = vec![0.0; self.pred_dim()];
        self.w_enc.matvec_t_acc(&node.d_h_tilde, &mut dh);
        self.w_pred.matvec_t_acc(&node.d_g_tilde, &mut dg);
        Ok((dh, dg))
    }

    /// Evaluates the joint at every lattice node. `enc` is `T x E`, `pred`
    /// is `(U+1) x P`.
    pub fn forward_lattice(&self, enc: &Array2, pred: &Array2) -> Result<(LogitsLattice, JointLatticeCache)> {
        if enc.cols() != self.enc_dim() {
            return Err(Error::dim("W_enc input (E)", self.enc_dim(), enc.cols()));
        }
        if pred.cols() != self.pred_dim() {
            return Err(Error::dim("W_pred input (P)", self.pred_dim(), pred.cols()));
        }
        let (frames, positions, j, v) = (enc.rows(), pred.rows(), self.joint_dim(), self.outputs());
        let h_tilde = enc.matmul_t(&self.w_enc);
        let g_tilde = pred.matmul_t(&self.w_pred);
        let mut hidden = Array3::zeros(frames, positions, j);
        let mut logp = Array3::zeros(frames, positions, v);
        for t in 0..frames {
            for u in 0..positions {
                let c = combine(self.mode, h_tilde.row(t), g_tilde.row(u), self.branch.as_ref());
                let z = hidden.slice_mut(t, u);
                for ((zi, ci), bi) in z.iter_mut().zip(&c).zip(self.bias.data()) {
                    *zi = (ci + bi).tanh();
                }
                let out = logp.slice_mut(t, u);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = dot(self.w_out.row(k), hidden.slice(t, u));
                }
                log_softmax_in_place(out);
            }
        }
        let lattice = LogitsLattice::from_log_probs_unchecked(logp);
        Ok((lattice, JointLatticeCache { h_tilde, g_tilde, hidden }))
    }

    /// Backward over the whole lattice given `dL / d lattice`. Returns
    /// `(dL/d enc, dL/d pred)`.
    pub fn backward_lattice(
        &self,
        grad_logp: &Array3,
        lattice: &LogitsLattice,
        cache: &JointLatticeCache,
        enc: &Array2,
        pred: &Array2,
        grads: &mut JointNetwork,
    ) -> Result<(Array2, Array2)> {
        let (frames, positions, v) = grad_logp.dims();
        if (frames, positions) != (enc.rows(), pred.rows()) || v != self.outputs() {
            return Err(Error::Contract("joint lattice backward called with a stale cache".into()));
        }
        let j = self.joint_dim();
        let mut d_h_tilde = Array2::zeros(frames, j);
        let mut d_g_tilde = Array2::zeros(positions, j);
        let mut d_logits = vec![0.0; v];
        for t in 0..frames {
            for u in 0..positions {
                let g = grad_logp.slice(t, u);
                if g.iter().all(|x| *x == 0.0) {
                    continue;
                }
                log_softmax_backward(g, lattice.node(t, u), &mut d_logits);
                let node = self.backward_from_logits(&d_logits, cache.hidden.slice(t, u), cache.h_tilde.row(t), cache.g_tilde.row(u), grads);
                for (a, b) in d_h_tilde.row_mut(t).iter_mut().zip(&node.d_h_tilde) {
                    *a += b;
                }
                for (a, b) in d_g_tilde.row_mut(u).iter_mut().zip(&node.d_g_tilde) {
                    *a += b;
                }
            }
        }
        grads.w_enc.add_t_matmul(&d_h_tilde, enc);
        grads.w_pred.add_t_matmul(&d_g_tilde, pred);
        Ok((d_h_tilde.matmul(&self.w_enc), d_g_tilde.matmul(&self.w_pred)))
    }
}

impl Parameterized for JointNetwork {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2)) {
        f(&join_name(prefix, "w_enc"), &self.w_enc);
        f(&join_name(prefix, "w_pred"), &self.w_pred);
        f(&join_name(prefix, "b"), &self.bias);
        f(&join_name(prefix, "w_out"), &self.w_out);
        if let Some(bb) = &self.branch {
            f(&join_name(prefix, "b_enc"), &bb.enc);
            f(&join_name(prefix, "b_pred"), &bb.pred);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2)) {
        f(&join_name(prefix, "w_enc"), &mut self.w_enc);
        f(&join_name(prefix, "w_pred"), &mut self.w_pred);
        f(&join_name(prefix, "b"), &mut self.bias);
        f(&join_name(prefix, "w_out"), &mut self.w_out);
        if let Some(bb) = &mut self.branch {
            f(&join_name(prefix, "b_enc"), &mut bb.enc);
            f(&join_name(prefix, "b_pred"), &mut bb.pred);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{assign_params, finite_difference_gradient, flatten_params, max_relative_error, zeros_like};

    fn config(mode: JointMode, e: usize, p: usize, j: usize, v: usize, branch: bool) -> JointConfig {
        JointConfig {
            mode,
            enc_dim: e,
            pred_dim: p,
            joint_dim: j,
            outputs: v,
            branch_biases: branch,
        }
    }

    #[test]
    fn multiplicative_zero_encoder_projection_ignores_prediction() {
        let mut rng = RandomStream::new(1, 0);
        let net = JointNetwork::new(&config(JointMode::Multiplicative, 3, 4, 5, 3, false), &mut rng).unwrap();
        let a = net.forward_projected(vec![0.0; 5], vec![0.3, -1.0, 2.0, 0.1, 0.7]);
        let b = net.forward_projected(vec![0.0; 5], vec![-4.0, 1.0, 0.0, 9.0, -0.2]);
        assert_eq!(a.log_probs, b.log_probs);
        assert_eq!(a.combined, vec![0.0; 5]);
    }

    #[test]
    fn additive_zero_prediction_is_tanh_of_encoder() {
        let mut rng = RandomStream::new(2, 0);
        let net = JointNetwork::new(&config(JointMode::Additive, 3, 4, 5, 3, false), &mut rng).unwrap();
        let h = vec![0.5, -1.5, 2.0, 0.0, 0.25];
        let act = net.forward_projected(h.clone(), vec![0.0; 5]);
        for (z, x) in act.hidden.iter().zip(&h) {
            assert_eq!(*z, x.tanh());
        }
    }

    #[test]
    fn bias_expansion_scalar() {
        let bb = BranchBiases {
            enc: Array2::column(&[1.0]),
            pred: Array2::column(&[-1.0]),
        };
        let c = combine(JointMode::Multiplicative, &[2.0], &[3.0], Some(&bb));
        assert_eq!(c, vec![6.0]);
        assert_eq!(c[0], 2.0 * 3.0 + 1.0 * 3.0 + (-1.0) * 2.0 + 1.0 * -1.0);
    }

    #[test]
    fn gating_with_unit_upstream() {
        let h = [0.3, -2.0, 1.5];
        let g = [4.0, 0.5, -1.0];
        let (dh, dg) = combine_backward(JointMode::Multiplicative, &h, &g, None, &[1.0; 3]);
        assert_eq!(dh, g.to_vec());
        assert_eq!(dg, h.to_vec());
        let (dh, _) = combine_backward(JointMode::Multiplicative, &h, &[0.0; 3], None, &[0.7, -0.2, 3.0]);
        assert_eq!(dh, vec![0.0; 3]);
    }

    #[test]
    fn parameter_counts() {
        let mut rng = RandomStream::new(3, 0);
        let add = JointNetwork::new(&config(JointMode::Additive, 4, 4, 4, 3, false), &mut rng).unwrap();
        let mul = JointNetwork::new(&config(JointMode::Multiplicative, 4, 4, 4, 3, false), &mut rng).unwrap();
        let mulb = JointNetwork::new(&config(JointMode::Multiplicative, 4, 4, 4, 3, true), &mut rng).unwrap();
        assert_eq!(add.count_parameters(), 4 * 4 + 4 * 4 + 4 + 3 * 4);
        assert_eq!(add.count_parameters(), 48);
        assert_eq!(mul.count_parameters(), add.count_parameters());
        assert_eq!(mulb.count_parameters(), add.count_parameters() + 2 * 4);
    }

    #[test]
    fn additive_with_branch_biases_is_rejected() {
        let mut rng = RandomStream::new(3, 0);
        assert!(JointNetwork::new(&config(JointMode::Additive, 2, 2, 2, 2, true), &mut rng).is_err());
    }

    #[test]
    fn dimension_errors_name_the_matrix() {
        let mut rng = RandomStream::new(4, 0);
        let net = JointNetwork::new(&config(JointMode::Additive, 3, 2, 4, 3, false), &mut rng).unwrap();
        let err = net.forward(&[0.0; 2], &[0.0; 2]).unwrap_err().to_string();
        assert!(err.contains("W_enc"), "{err}");
        let err = net.forward(&[0.0; 3], &[0.0; 5]).unwrap_err().to_string();
        assert!(err.contains("W_pred"), "{err}");
    }

    fn check_node_gradients(mode: JointMode, branch: bool, seed: u64) {
        let mut rng = RandomStream::new(seed, 0);
        let (e, p, j, v) = (5, 4, 8, 4);
        let mut net = JointNetwork::new(&config(mode, e, p, j, v, branch), &mut rng).unwrap();
        if let Some(bb) = &mut net.branch {
            bb.enc = Array2::random_normal(j, 1, 0.5, &mut rng);
            bb.pred = Array2::random_normal(j, 1, 0.5, &mut rng);
        }
        net.bias = Array2::random_normal(j, 1, 0.3, &mut rng);
        let h: Vec<f64> = (0..e).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..v).map(|_| rng.normal()).collect();
        let loss = |n: &JointNetwork, h: &[f64], g: &[f64]| dot(&n.forward(h, g).unwrap().log_probs, &w);

        let act = net.forward(&h, &g).unwrap();
        let mut grads = zeros_like(&net);
        let (dh, dg) = net.backward(&w, &act, &h, &g, &mut grads).unwrap();

        let theta = flatten_params(&net);
        let mut probe = net.clone();
        let num = finite_difference_gradient(
            |x| {
                assign_params(&mut probe, x);
                loss(&probe, &h, &g)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        let e = max_relative_error(&flatten_params(&grads), &num);
        assert!(e <= 1e-6, "{mode:?} {branch} {e}");
        let num_h = finite_difference_gradient(|x| loss(&net, x, &g), &h, 1e-5).unwrap();
        let num_g = finite_difference_gradient(|x| loss(&net, &h, x), &g, 1e-5).unwrap();
        assert!(max_relative_error(&dh, &num_h) <= 1e-6);
        assert!(max_relative_error(&dg, &num_g) <= 1e-6);
    }

    #[test]
    fn node_gradients_match_finite_differences() {
        for seed in 0..4 {
            check_node_gradients(JointMode::Additive, false, seed);
            check_node_gradients(JointMode::Multiplicative, false, seed);
            check_node_gradients(JointMode::Multiplicative, true, seed);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = RandomStream::new(9, 0);
        let net = JointNetwork::new(&config(JointMode::Multiplicative, 3, 3, 4, 3, false), &mut rng).unwrap();
        let a = net.forward(&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5]).unwrap();
        let b = net.forward(&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(a.log_probs, b.log_probs);
        let enc = Array2::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let pred = Array2::from_rows(&[vec![1.0, -1.0, 0.5]]).unwrap();
        let (lat, _) = net.forward_lattice(&enc, &pred).unwrap();
        for (x, y) in lat.node(0, 0).iter().zip(&a.log_probs) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
