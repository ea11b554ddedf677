//! RNN-T negative log-likelihood over the `T x (U+1)` output lattice.
//!
//! Node `(t, u)` means `t` frames consumed (blanks emitted) and `u` labels
//! emitted. From a node with `t < T`, a blank moves to `(t+1, u)` and the
//! next label `y_{u+1}` moves to `(t, u+1)`; both use the distribution
//! `lattice[t][u]`. Nodes on row `T` have no frame left and emit nothing, so
//! every complete path ends with the blank that consumes the last frame and
//! terminates at `(T, U)`.

use crate::error::{Error, Result};
use crate::numerics::{log_add, log_softmax_backward, log_softmax_in_place, log_sum_exp_unchecked, Array2, Array3};

/// Index of the blank symbol in the augmented output vocabulary.
pub const BLANK: usize = 0;

/// Largest `T + U` that [`enumerate_alignments`] accepts by default.
pub const DEFAULT_ENUMERATION_CAP: usize = 22;

/// Output-vocabulary index of label `l` (blank occupies index 0).
#[inline]
pub fn output_index(label: usize) -> usize {
    label + 1
}

/// A transcript over the label alphabet `Y` (ids `0..|Y|`, blank excluded).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab_size) {
            return Err(Error::Vocabulary {
                symbol: bad,
                vocab: vocab_size,
            });
        }
        Ok(Self(labels))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Wraps labels without a vocabulary check; consumers validate on use.
    pub(crate) fn from_trusted(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn extended(&self, label: usize) -> Self {
        let mut v = self.0.clone();
        v.push(label);
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentSymbol {
    Blank,
    Label(usize),
}

/// A length `T+U` sequence over `Y ∪ {blank}` with exactly `T` blanks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment(Vec<AlignmentSymbol>);

impl Alignment {
    pub fn symbols(&self) -> &[AlignmentSymbol] {
        &self.0
    }

    pub fn blank_count(&self) -> usize {
        self.0.iter().filter(|s| **s == AlignmentSymbol::Blank).count()
    }

    /// The collapsing map: drop blanks.
    pub fn collapse(&self) -> Vec<usize> {
        self.0
            .iter()
            .filter_map(|s| match s {
                AlignmentSymbol::Label(l) => Some(*l),
                AlignmentSymbol::Blank => None,
            })
            .collect()
    }

    /// Log-probability of this alignment under `lattice`. Emitting a label
    /// after the last frame has been consumed is impossible (`-inf`).
    pub fn log_prob(&self, lattice: &LogitsLattice) -> f64 {
        let frames = lattice.frames();
        let (mut t, mut u) = (0usize, 0usize);
        let mut lp = 0.0;
        for sym in &self.0 {
            if t >= frames {
                return f64::NEG_INFINITY;
            }
            match sym {
                AlignmentSymbol::Blank => {
                    lp += lattice.log_prob(t, u, BLANK);
                    t += 1;
                }
                AlignmentSymbol::Label(l) => {
                    lp += lattice.log_prob(t, u, output_index(*l));
                    u += 1;
                }
            }
        }
        lp
    }
}

/// `lattice[t][u][k] = log p(k | h_t, g_u)` for `t < T`, `u <= U`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsLattice {
    logp: Array3,
}

impl LogitsLattice {
    pub const NORMALIZATION_TOLERANCE: f64 = 1e-10;

    /// Wraps log-probabilities, checking that every node's slice is
    /// normalized.
    pub fn from_log_probs(logp: Array3) -> Result<Self> {
        let (t, u1, v) = logp.dims();
        if t == 0 || u1 == 0 || v < 2 {
            return Err(Error::dim("lattice shape", "T>=1, U+1>=1, |Ybar|>=2", format!("{t}x{u1}x{v}")));
        }
        for i in 0..t {
            for j in 0..u1 {
                let s = logp.slice(i, j);
                if s.iter().any(|x| x.is_nan() || *x > 1e-12) {
                    return Err(Error::Contract(format!("lattice node ({i},{j}) holds an invalid log-probability")));
                }
                let mass: f64 = s.iter().map(|x| x.exp()).sum();
                if (mass - 1.0).abs() > Self::NORMALIZATION_TOLERANCE {
                    return Err(Error::Contract(format!("lattice node ({i},{j}) sums to {mass}")));
                }
            }
        }
        Ok(Self { logp })
    }

    /// Applies a log-softmax to every node of a raw logit array.
    pub fn from_logits(mut logits: Array3) -> Result<Self> {
        let (t, u1, v) = logits.dims();
        if t == 0 || u1 == 0 || v < 2 {
            return Err(Error::dim("lattice shape", "T>=1, U+1>=1, |Ybar|>=2", format!("{t}x{u1}x{v}")));
        }
        if logits.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract("lattice logits must be finite".into()));
        }
        for i in 0..t {
            for j in 0..u1 {
                log_softmax_in_place(logits.slice_mut(i, j));
            }
        }
        Ok(Self { logp: logits })
    }

    /// Wraps values that came straight out of a log-softmax.
    pub(crate) fn from_log_probs_unchecked(logp: Array3) -> Self {
        debug_assert!(logp.dims().0 > 0 && logp.dims().2 >= 2);
        Self { logp }
    }

    pub fn uniform(frames: usize, labels: usize, outputs: usize) -> Self {
        Self {
            logp: Array3::filled(frames, labels + 1, outputs, -(outputs as f64).ln()),
        }
    }

    pub fn frames(&self) -> usize {
        self.logp.dims().0
    }

    /// `U + 1`.
    pub fn label_positions(&self) -> usize {
        self.logp.dims().1
    }

    pub fn outputs(&self) -> usize {
        self.logp.dims().2
    }

    #[inline]
    pub fn log_prob(&self, t: usize, u: usize, k: usize) -> f64 {
        self.logp.get(t, u, k)
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        self.logp.slice(t, u)
    }

    pub fn as_array(&self) -> &Array3 {
        &self.logp
    }

    fn check_labels(&self, y: &LabelSequence) -> Result<()> {
        if self.label_positions() != y.len() + 1 {
            return Err(Error::dim("lattice label axis (U+1)", y.len() + 1, self.label_positions()));
        }
        if let Some(&bad) = y.labels().iter().find(|&&l| output_index(l) >= self.outputs()) {
            return Err(Error::Vocabulary {
                symbol: bad,
                vocab: self.outputs() - 1,
            });
        }
        Ok(())
    }
}

/// Loss, both DP grids and the gradient with respect to every lattice entry.
#[derive(Debug, Clone)]
pub struct LatticeResult {
    pub nll: f64,
    /// `(T+1) x (U+1)`, log-domain forward variables.
    pub alpha: Array2,
    /// `(T+1) x (U+1)`, log-domain backward variables.
    pub beta: Array2,
    /// `d nll / d lattice[t][u][k]`, same shape as the lattice.
    pub grad: Array3,
}

impl LatticeResult {
    /// Composes `grad` with the log-softmax backward, giving the gradient with
    /// respect to the pre-softmax logits that produced `lattice`.
    pub fn logit_gradient(&self, lattice: &LogitsLattice) -> Array3 {
        let (t, u1, v) = self.grad.dims();
        let mut out = Array3::zeros(t, u1, v);
        for i in 0..t {
            for j in 0..u1 {
                log_softmax_backward(self.grad.slice(i, j), lattice.node(i, j), out.slice_mut(i, j));
            }
        }
        out
    }
}

/// Forward pass: returns `-log p(y|x)` and the alpha grid.
pub fn rnnt_forward(lattice: &LogitsLattice, y: &LabelSequence) -> Result<(f64, Array2)> {
    lattice.check_labels(y)?;
    let frames = lattice.frames();
    let n = y.len();
    let labels = y.labels();
    let mut alpha = Array2::zeros(frames + 1, n + 1);
    alpha.fill(f64::NEG_INFINITY);
    alpha.set(0, 0, 0.0);
    for t in 0..=frames {
        for u in 0..=n {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = alpha.get(t - 1, u) + lattice.log_prob(t - 1, u, BLANK);
            }
            if u > 0 && t < frames {
                acc = log_add(acc, alpha.get(t, u - 1) + lattice.log_prob(t, u - 1, output_index(labels[u - 1])));
            }
            alpha.set(t, u, acc);
        }
    }
    Ok((-alpha.get(frames, n), alpha))
}

/// Backward pass: beta grid and `d nll / d lattice`.
pub fn rnnt_backward(lattice: &LogitsLattice, y: &LabelSequence, alpha: &Array2) -> Result<(Array2, Array3)> {
    lattice.check_labels(y)?;
    let frames = lattice.frames();
    let n = y.len();
    alpha.require_shape("alpha grid", frames + 1, n + 1)?;
    let labels = y.labels();

    let mut beta = Array2::zeros(frames + 1, n + 1);
    beta.fill(f64::NEG_INFINITY);
    beta.set(frames, n, 0.0);
    for t in (0..frames).rev() {
        for u in (0..=n).rev() {
            let mut acc = beta.get(t + 1, u) + lattice.log_prob(t, u, BLANK);
            if u < n {
                acc = log_add(acc, beta.get(t, u + 1) + lattice.log_prob(t, u, output_index(labels[u])));
            }
            beta.set(t, u, acc);
        }
    }

    let log_like = alpha.get(frames, n);
    if log_like == f64::NEG_INFINITY {
        return Err(Error::Contract("gradient undefined: transcript has zero likelihood".into()));
    }
    let mut grad = Array3::zeros(frames, n + 1, lattice.outputs());
    for t in 0..frames {
        for u in 0..=n {
            let a = alpha.get(t, u);
            if a == f64::NEG_INFINITY {
                continue;
            }
            let blank = a + lattice.log_prob(t, u, BLANK) + beta.get(t + 1, u) - log_like;
            grad.set(t, u, BLANK, -blank.exp());
            if u < n {
                let k = output_index(labels[u]);
                let emit = a + lattice.log_prob(t, u, k) + beta.get(t, u + 1) - log_like;
                grad.set(t, u, k, -emit.exp());
            }
        }
    }
    Ok((beta, grad))
}

pub fn rnnt_loss(lattice: &LogitsLattice, y: &LabelSequence) -> Result<LatticeResult> {
    let (nll, alpha) = rnnt_forward(lattice, y)?;
    let (beta, grad) = rnnt_backward(lattice, y, &alpha)?;
    Ok(LatticeResult { nll, alpha, beta, grad })
}

/// Every length-`(T+U)` sequence with `T` blanks collapsing to `y`, ordered
/// lexicographically by label positions (all labels first comes first).
pub fn enumerate_alignments(frames: usize, label_count: usize, y: &LabelSequence) -> Result<Vec<Alignment>> {
    enumerate_alignments_capped(frames, label_count, y, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_alignments_capped(frames: usize, label_count: usize, y: &LabelSequence, cap: usize) -> Result<Vec<Alignment>> {
    if label_count != y.len() {
        return Err(Error::dim("label count U", y.len(), label_count));
    }
    let total = frames + label_count;
    if total == 0 {
        return Err(Error::Contract("alignment enumeration needs T + U >= 1".into()));
    }
    if total > cap {
        return Err(Error::Refused(format!("T + U = {total} exceeds the enumeration cap {cap}")));
    }
    let mut out = Vec::new();
    let mut positions: Vec<usize> = (0..label_count).collect();
    loop {
        let mut symbols = vec![AlignmentSymbol::Blank; total];
        for (i, &p) in positions.iter().enumerate() {
            symbols[p] = AlignmentSymbol::Label(y.labels()[i]);
        }
        out.push(Alignment(symbols));
        // Next combination in lexicographic order.
        let mut i = label_count;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            if positions[i] < total - label_count + i {
                break;
            }
            if i == 0 {
                return Ok(out);
            }
        }
        positions[i] += 1;
        for j in i + 1..label_count {
            positions[j] = positions[j - 1] + 1;
        }
    }
}

/// `-log` of the sum over every enumerated alignment of its path probability.
pub fn brute_force_nll(lattice: &LogitsLattice, y: &LabelSequence) -> Result<f64> {
    lattice.check_labels(y)?;
    let alignments = enumerate_alignments(lattice.frames(), y.len(), y)?;
    let scores: Vec<f64> = alignments.iter().map(|a| a.log_prob(lattice)).collect();
    Ok(-log_sum_exp_unchecked(&scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_relative_error, RandomStream};

    pub(crate) fn random_logits(frames: usize, labels: usize, outputs: usize, rng: &mut RandomStream) -> Array3 {
        let data = (0..frames * (labels + 1) * outputs).map(|_| 1.5 * rng.normal()).collect();
        Array3::from_vec((frames, labels + 1, outputs), data).unwrap()
    }

    fn seq(v: &[usize], vocab: usize) -> LabelSequence {
        LabelSequence::new(v.to_vec(), vocab).unwrap()
    }

    #[test]
    fn uniform_two_frames_one_label() {
        // Only (y, φ, φ) and (φ, y, φ) end on a blank: 2 * (1/2)^3.
        let lattice = LogitsLattice::uniform(2, 1, 2);
        let y = seq(&[0], 1);
        let (nll, _) = rnnt_forward(&lattice, &y).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12);
        assert!((brute_force_nll(&lattice, &y).unwrap() - nll).abs() < 1e-12);
    }

    #[test]
    fn single_frame_empty_transcript() {
        let lattice = LogitsLattice::uniform(1, 0, 2);
        let (nll, _) = rnnt_forward(&lattice, &LabelSequence::empty()).unwrap();
        assert!((nll - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_enumeration_on_random_lattice() {
        let mut rng = RandomStream::new(11, 0);
        let lattice = LogitsLattice::from_logits(random_logits(4, 3, 4, &mut rng)).unwrap();
        let y = seq(&[2, 0, 2], 3);
        let (nll, _) = rnnt_forward(&lattice, &y).unwrap();
        assert!((nll - brute_force_nll(&lattice, &y).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let lattice = LogitsLattice::uniform(2, 2, 3);
        let err = rnnt_forward(&lattice, &seq(&[1], 2)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let (_, alpha) = rnnt_forward(&lattice, &seq(&[1, 0], 2)).unwrap();
        let err = rnnt_backward(&lattice, &seq(&[1, 0], 2), &alpha.slice_rows(0, 2)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn uniform_case_logit_gradient_matches_finite_differences() {
        let y = seq(&[0], 1);
        let logits = Array3::zeros(2, 2, 2);
        let lattice = LogitsLattice::from_logits(logits.clone()).unwrap();
        let res = rnnt_loss(&lattice, &y).unwrap();
        let analytic = res.logit_gradient(&lattice);
        let f = |x: &[f64]| {
            let l = LogitsLattice::from_logits(Array3::from_vec((2, 2, 2), x.to_vec()).unwrap()).unwrap();
            rnnt_forward(&l, &y).unwrap().0
        };
        let numeric = finite_difference_gradient(f, logits.data(), 1e-5).unwrap();
        assert!(max_relative_error(analytic.data(), &numeric) <= 1e-4);
    }

    #[test]
    fn empty_transcript_gradient_only_on_blank() {
        let mut rng = RandomStream::new(3, 0);
        let lattice = LogitsLattice::from_logits(random_logits(3, 0, 4, &mut rng)).unwrap();
        let res = rnnt_loss(&lattice, &LabelSequence::empty()).unwrap();
        for t in 0..3 {
            let g = res.grad.slice(t, 0);
            assert!(g[BLANK] != 0.0);
            assert!(g[1..].iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn occupancy_consistent_with_grids() {
        let mut rng = RandomStream::new(5, 0);
        let lattice = LogitsLattice::from_logits(random_logits(3, 2, 3, &mut rng)).unwrap();
        let y = seq(&[1, 1], 2);
        let res = rnnt_loss(&lattice, &y).unwrap();
        // Node occupancy = total outgoing flow = -sum_k grad.
        for t in 0..3 {
            for u in 0..=2 {
                let from_grad: f64 = -res.grad.slice(t, u).iter().sum::<f64>();
                let from_grids = (res.alpha.get(t, u) + res.beta.get(t, u) + res.nll).exp();
                assert!((from_grad - from_grids).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn enumeration_examples() {
        // C, A, T with four frames.
        let y = seq(&[2, 0, 19], 26);
        let all = enumerate_alignments(4, 3, &y).unwrap();
        assert_eq!(all.len(), 35);
        use AlignmentSymbol::{Blank as B, Label as L};
        let expect = [
            vec![B, L(2), B, L(0), B, L(19), B],
            vec![B, B, B, B, L(2), L(0), L(19)],
            vec![L(2), L(0), L(19), B, B, B, B],
        ];
        for e in expect {
            assert!(all.iter().any(|a| a.symbols() == e.as_slice()));
        }
        assert_eq!(all[0].symbols(), &[L(2), L(0), L(19), B, B, B, B]);
        for a in &all {
            assert_eq!(a.blank_count(), 4);
            assert_eq!(a.collapse(), y.labels());
        }

        let y1 = seq(&[0], 1);
        let two = enumerate_alignments(1, 1, &y1).unwrap();
        assert_eq!(two[0].symbols(), &[L(0), B]);
        assert_eq!(two[1].symbols(), &[B, L(0)]);
    }

    #[test]
    fn enumeration_cap_and_arguments() {
        let y = LabelSequence::new(vec![0; 11], 1).unwrap();
        assert!(matches!(enumerate_alignments(12, 11, &y), Err(Error::Refused(_))));
        assert!(enumerate_alignments(11, 11, &y).is_ok());
        assert!(matches!(enumerate_alignments(3, 2, &y), Err(Error::Dimension { .. })));
        assert!(enumerate_alignments(0, 0, &LabelSequence::empty()).is_err());
    }

    #[test]
    fn impossible_label_gives_infinite_nll() {
        let mut logp = Array3::filled(2, 2, 3, f64::NEG_INFINITY);
        for t in 0..2 {
            for u in 0..2 {
                logp.set(t, u, BLANK, 0.0);
            }
        }
        let lattice = LogitsLattice::from_log_probs(logp).unwrap();
        let y = seq(&[1], 2);
        assert_eq!(brute_force_nll(&lattice, &y).unwrap(), f64::INFINITY);
        assert_eq!(rnnt_forward(&lattice, &y).unwrap().0, f64::INFINITY);
        assert!(rnnt_loss(&lattice, &y).is_err());
    }

    #[test]
    fn unnormalized_lattice_rejected() {
        let logp = Array3::filled(1, 1, 2, -0.1);
        assert!(LogitsLattice::from_log_probs(logp).is_err());
    }
}
