//! External language-model fusion and two-model n-best combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LabelSequence;
use crate::seq::CharLm;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionWeights {
    /// Source-LM subtraction weight.
    pub mu: f64,
    /// External-LM weight.
    pub lambda: f64,
    /// Label length reward.
    pub rho: f64,
}

impl FusionWeights {
    pub fn shallow(lambda: f64, rho: f64) -> Self {
        Self { mu: 0.0, lambda, rho }
    }

    pub fn is_zero(&self) -> bool {
        self.mu == 0.0 && self.lambda == 0.0 && self.rho == 0.0
    }

    fn l1(&self) -> f64 {
        self.mu.abs() + self.lambda.abs() + self.rho.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinationWeights {
    pub alpha: f64,
    pub beta: f64,
    #[serde(flatten)]
    pub fusion: FusionWeights,
}

impl CombinationWeights {
    /// Single-model rescoring with the given fusion weights.
    pub fn single(fusion: FusionWeights) -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            fusion,
        }
    }

    fn l1(&self) -> f64 {
        self.alpha.abs() + self.beta.abs() + self.fusion.l1()
    }
}

/// Log-domain score terms of one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreComponents {
    /// `log p(y|x)`
    pub transducer: f64,
    /// `log p_src(y)`
    pub source_lm: f64,
    /// `log p_ext(y)`
    pub external_lm: f64,
    /// `|y|`, non-blank symbols without sentence markers.
    pub length: usize,
}

/// `log p(y|x) - mu log p_src(y) + lambda log p_ext(y) + rho |y|`.
pub fn density_ratio_score(c: &ScoreComponents, w: &FusionWeights) -> f64 {
    c.transducer + fusion_offset(c.source_lm, c.external_lm, c.length, w)
}

/// `log p(y|x) + lambda log p_ext(y) + rho |y|`.
pub fn shallow_fusion_score(c: &ScoreComponents, lambda: f64, rho: f64) -> f64 {
    density_ratio_score(c, &FusionWeights::shallow(lambda, rho))
}

/// The LM and length terms on their own.
pub fn fusion_offset(source_lm: f64, external_lm: f64, length: usize, w: &FusionWeights) -> f64 {
    let mut s = 0.0;
    if w.mu != 0.0 {
        s -= w.mu * source_lm;
    }
    if w.lambda != 0.0 {
        s += w.lambda * external_lm;
    }
    s + w.rho * length as f64
}

/// Scores of one hypothesis under both models and both LMs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CombinedComponents {
    pub model_a: f64,
    pub model_b: f64,
    pub source_lm: f64,
    pub external_lm: f64,
    pub length: usize,
}

impl CombinedComponents {
    pub fn score(&self, w: &CombinationWeights) -> f64 {
        let mut s = 0.0;
        if w.alpha != 0.0 {
            s += w.alpha * self.model_a;
        }
        if w.beta != 0.0 {
            s += w.beta * self.model_b;
        }
        s + fusion_offset(self.source_lm, self.external_lm, self.length, &w.fusion)
    }
}

/// Log-probability of a complete label sequence under some model.
pub trait SequenceScorer {
    fn log_prob(&self, labels: &LabelSequence) -> Result<f64>;
}

impl<F: Fn(&LabelSequence) -> Result<f64>> SequenceScorer for F {
    fn log_prob(&self, labels: &LabelSequence) -> Result<f64> {
        self(labels)
    }
}

impl SequenceScorer for CharLm {
    fn log_prob(&self, labels: &LabelSequence) -> Result<f64> {
        Ok(self.score(labels)?.total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescoredHypothesis {
    pub labels: Vec<usize>,
    pub score: f64,
    pub components: CombinedComponents,
}

/// Scorers used to cross-score an n-best union; a missing LM contributes 0.
pub struct RescoreModels<'a> {
    pub model_a: &'a dyn SequenceScorer,
    pub model_b: &'a dyn SequenceScorer,
    pub source_lm: Option<&'a dyn SequenceScorer>,
    pub external_lm: Option<&'a dyn SequenceScorer>,
}

/// Deduplicated union of two hypothesis lists, in first-seen order.
pub fn hypothesis_union<'a>(a: impl IntoIterator<Item = &'a [usize]>, b: impl IntoIterator<Item = &'a [usize]>) -> Vec<Vec<usize>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for y in a.into_iter().chain(b) {
        if seen.insert(y.to_vec()) {
            out.push(y.to_vec());
        }
    }
    out
}

/// Cross-scores every hypothesis of the union with both models and the LMs.
/// Scorers whose weight is zero are not evaluated. Hypotheses that a model
/// refuses are dropped with a warning.
pub fn cross_score(union: &[Vec<usize>], models: &RescoreModels<'_>, w: &CombinationWeights) -> Vec<(Vec<usize>, CombinedComponents)> {
    let mut out = Vec::with_capacity(union.len());
    for y in union {
        let seq = LabelSequence::from_trusted(y.clone());
        let eval = |s: Option<&dyn SequenceScorer>, weight: f64| -> Result<f64> {
            match s {
                Some(s) if weight != 0.0 => s.log_prob(&seq),
                _ => Ok(0.0),
            }
        };
        let scored = (|| -> Result<CombinedComponents> {
            Ok(CombinedComponents {
                model_a: eval(Some(models.model_a), w.alpha)?,
                model_b: eval(Some(models.model_b), w.beta)?,
                source_lm: eval(models.source_lm, w.fusion.mu)?,
                external_lm: eval(models.external_lm, w.fusion.lambda)?,
                length: y.len(),
            })
        })();
        match scored {
            Ok(c) => out.push((y.clone(), c)),
            Err(e) => log::warn!("excluding hypothesis {y:?} from rescoring: {e}"),
        }
    }
    out
}

/// Ranks already-scored candidates: descending score, ties by label order.
pub fn rank(candidates: &[(Vec<usize>, CombinedComponents)], w: &CombinationWeights) -> Vec<RescoredHypothesis> {
    let mut out: Vec<RescoredHypothesis> = candidates
        .iter()
        .map(|(labels, c)| RescoredHypothesis {
            labels: labels.clone(),
            score: c.score(w),
            components: *c,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.labels.cmp(&b.labels)));
    out
}

/// Log-linear rescoring of the union of two n-best lists.
pub fn combine_rescore<'a>(
    nbest_a: impl IntoIterator<Item = &'a [usize]>,
    nbest_b: impl IntoIterator<Item = &'a [usize]>,
    w: &CombinationWeights,
    models: &RescoreModels<'_>,
) -> Vec<RescoredHypothesis> {
    let union = hypothesis_union(nbest_a, nbest_b);
    rank(&cross_score(&union, models, w), w)
}

/// One development utterance with cached candidate scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneUtterance {
    pub candidates: Vec<(Vec<usize>, CombinedComponents)>,
    pub reference: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
}

fn steps(hi: f64, step: f64) -> Vec<f64> {
    let n = (hi / step).round() as usize;
    (0..=n).map(|i| i as f64 * step).map(|v| (v * 1e9).round() / 1e9).collect()
}

impl WeightGrid {
    /// Single-model density-ratio grid.
    pub fn density_ratio() -> Self {
        Self {
            alpha: vec![1.0],
            beta: vec![0.0],
            mu: steps(1.0, 0.1),
            lambda: steps(1.0, 0.1),
            rho: steps(0.5, 0.1),
        }
    }

    /// Single-model shallow-fusion grid.
    pub fn shallow() -> Self {
        Self {
            mu: vec![0.0],
            ..Self::density_ratio()
        }
    }

    /// Two-model grid with fixed equal model weights.
    pub fn combination() -> Self {
        Self {
            alpha: vec![0.5],
            beta: vec![0.5],
            ..Self::density_ratio()
        }
    }

    pub fn cells(&self) -> Vec<CombinationWeights> {
        let mut out = Vec::new();
        for &alpha in &self.alpha {
            for &beta in &self.beta {
                for &mu in &self.mu {
                    for &lambda in &self.lambda {
                        for &rho in &self.rho {
                            out.push(CombinationWeights {
                                alpha,
                                beta,
                                fusion: FusionWeights { mu, lambda, rho },
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub weights: CombinationWeights,
    pub error_rate: f64,
}

/// Error rate of the top-ranked candidates under `w`. `errors` returns
/// `(edit errors, reference length)` for a hypothesis/reference pair.
pub fn error_rate<E>(dev: &[TuneUtterance], w: &CombinationWeights, errors: &E) -> f64
where
    E: Fn(&[usize], &[usize]) -> (usize, usize),
{
    let (mut err, mut total) = (0usize, 0usize);
    for utt in dev {
        let best = utt
            .candidates
            .iter()
            .map(|(y, c)| (c.score(w), y))
            .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(a.1)));
        let hyp: &[usize] = best.map_or(&[], |(_, y)| y.as_slice());
        let (e, n) = errors(hyp, &utt.reference);
        err += e;
        total += n;
    }
    if total == 0 {
        0.0
    } else {
        err as f64 / total as f64
    }
}

/// Exhaustive grid search for the weights minimizing the dev error rate;
/// ties go to the smaller L1 norm, then to grid order.
pub fn tune_weights<E>(dev: &[TuneUtterance], grid: &WeightGrid, errors: E) -> Result<TuneResult>
where
    E: Fn(&[usize], &[usize]) -> (usize, usize),
{
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("empty fusion weight grid".into()));
    }
    let mut best: Option<TuneResult> = None;
    for w in cells {
        let rate = error_rate(dev, &w, &errors);
        let better = match &best {
            None => true,
            Some(b) => rate < b.error_rate || (rate == b.error_rate && w.l1() < b.weights.l1()),
        };
        if better {
            best = Some(TuneResult { weights: w, error_rate: rate });
        }
    }
    Ok(best.expect("grid is non-empty"))
}
