//! Greedy decoding, alignment-length synchronous beam search and an
//! exhaustive oracle for tiny instances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionWeights, ScoreComponents};
use crate::lattice::{rnnt_forward, LabelSequence, BLANK};
use crate::model::StepScorer;
use crate::numerics::log_add;
use crate::seq::{CharLm, LmState};

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutput {
    pub labels: LabelSequence,
    /// Sum of the chosen step log-probabilities.
    pub score: f64,
    /// Set when the label cap stopped decoding before the last frame.
    pub truncated: bool,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Takes the most likely output at every node: labels advance `u`, blank
/// advances `t`.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_labels: usize) -> GreedyOutput {
    let mut state = scorer.initial_state();
    let mut labels = Vec::new();
    let mut score = 0.0;
    let mut t = 0;
    while t < scorer.frames() {
        let lp = scorer.log_probs(t, &state);
        let k = argmax(&lp);
        if k == BLANK {
            score += lp[k];
            t += 1;
            continue;
        }
        if labels.len() == max_labels {
            return GreedyOutput {
                labels: LabelSequence::from_trusted(labels),
                score,
                truncated: true,
            };
        }
        score += lp[k];
        labels.push(k - 1);
        state = scorer.extend(&state, k - 1).expect("argmax label is in the vocabulary");
    }
    GreedyOutput {
        labels: LabelSequence::from_trusted(labels),
        score,
        truncated: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Marginalize over alignments.
    #[default]
    LogSumExp,
    /// Keep the best alignment only.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub n_best: usize,
    /// Maximum alignment length; defaults to `3T`.
    #[serde(default)]
    pub expansion_cap: Option<usize>,
    #[serde(default)]
    pub merge: MergeMode,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 8,
            n_best: 8,
            expansion_cap: None,
            merge: MergeMode::LogSumExp,
        }
    }
}

/// LMs and weights applied per emitted symbol during search.
#[derive(Clone, Copy)]
pub struct SearchFusion<'a> {
    pub source: Option<&'a CharLm>,
    pub external: Option<&'a CharLm>,
    pub weights: FusionWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub alignment_length: usize,
    /// Total search score, the density-ratio combination of `components`.
    pub score: f64,
    pub components: ScoreComponents,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }

    pub fn label_lists(&self) -> impl Iterator<Item = &[usize]> {
        self.hypotheses.iter().map(|h| h.labels.as_slice())
    }
}

/// Per-iteration record of the live beam.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeamTrace {
    /// `(min, max)` of `frames consumed + labels emitted` over the live beam
    /// after each expansion step.
    pub alignment_spread: Vec<(usize, usize)>,
}

#[derive(Clone)]
struct Live<S> {
    labels: Vec<usize>,
    frames: usize,
    transducer: f64,
    source: f64,
    external: f64,
    state: S,
    source_state: Option<LmState>,
    external_state: Option<LmState>,
}

impl<S> Live<S> {
    fn score(&self, w: &FusionWeights) -> f64 {
        self.transducer + crate::fusion::fusion_offset(self.source, self.external, self.labels.len(), w)
    }
}

fn merge_into<S: Clone>(pool: &mut BTreeMap<Vec<usize>, Live<S>>, h: Live<S>, mode: MergeMode) {
    match pool.get_mut(&h.labels) {
        None => {
            pool.insert(h.labels.clone(), h);
        }
        Some(existing) => {
            debug_assert_eq!(existing.frames, h.frames);
            existing.transducer = match mode {
                MergeMode::LogSumExp => log_add(existing.transducer, h.transducer),
                MergeMode::Max => existing.transducer.max(h.transducer),
            };
        }
    }
}

fn ranked<S: Clone>(pool: BTreeMap<Vec<usize>, Live<S>>, w: &FusionWeights) -> Vec<Live<S>> {
    let mut v: Vec<Live<S>> = pool.into_values().collect();
    // BTreeMap iteration is in label order, so a stable sort breaks score
    // ties lexicographically.
    v.sort_by(|a, b| b.score(w).total_cmp(&a.score(w)));
    v
}

/// Alignment-length synchronous beam search. At iteration `i` every live
/// hypothesis has consumed exactly `i` alignment symbols; a hypothesis is
/// complete once a blank consumes the last frame.
pub fn alsd_beam<S: StepScorer>(scorer: &S, config: &BeamConfig, fusion: Option<SearchFusion<'_>>) -> Result<NBestList> {
    Ok(alsd_beam_traced(scorer, config, fusion)?.0)
}

pub fn alsd_beam_traced<S: StepScorer>(scorer: &S, config: &BeamConfig, fusion: Option<SearchFusion<'_>>) -> Result<(NBestList, BeamTrace)> {
    let frames = scorer.frames();
    let cap = config.expansion_cap.unwrap_or(3 * frames);
    if config.beam_width == 0 || config.n_best == 0 {
        return Err(Error::Config("beam width and n-best size must be >= 1".into()));
    }
    if cap < frames {
        return Err(Error::Config(format!("expansion cap {cap} is below the frame count {frames}")));
    }
    let weights = fusion.map(|f| f.weights).unwrap_or_default();
    let source_lm = fusion.and_then(|f| f.source).filter(|_| weights.mu != 0.0);
    let external_lm = fusion.and_then(|f| f.external).filter(|_| weights.lambda != 0.0);
    let vocab = scorer.outputs() - 1;

    let mut beam = vec![Live {
        labels: Vec::new(),
        frames: 0,
        transducer: 0.0,
        source: 0.0,
        external: 0.0,
        state: scorer.initial_state(),
        source_state: source_lm.map(CharLm::initial_state),
        external_state: external_lm.map(CharLm::initial_state),
    }];
    let mut finished: BTreeMap<Vec<usize>, Live<S::State>> = BTreeMap::new();
    let mut trace = BeamTrace::default();

    for _ in 1..=cap {
        if beam.is_empty() {
            break;
        }
        let mut pool: BTreeMap<Vec<usize>, Live<S::State>> = BTreeMap::new();
        let mut completed: BTreeMap<Vec<usize>, Live<S::State>> = BTreeMap::new();
        for hyp in &beam {
            let t = hyp.frames;
            let lp = scorer.log_probs(t, &hyp.state);
            let mut blank = hyp.clone();
            blank.transducer += lp[BLANK];
            blank.frames += 1;
            if blank.frames == frames {
                if let Some(s) = &blank.source_state {
                    blank.source += s.end_log_prob();
                }
                if let Some(s) = &blank.external_state {
                    blank.external += s.end_log_prob();
                }
                merge_into(&mut completed, blank, config.merge);
            } else {
                merge_into(&mut pool, blank, config.merge);
            }
            for k in 0..vocab {
                let mut labels = hyp.labels.clone();
                labels.push(k);
                let (mut source, mut external) = (hyp.source, hyp.external);
                let source_state = match &hyp.source_state {
                    Some(s) => {
                        source += s.log_prob(k);
                        Some(source_lm.expect("state implies model").advance(s, k)?)
                    }
                    None => None,
                };
                let external_state = match &hyp.external_state {
                    Some(s) => {
                        external += s.log_prob(k);
                        Some(external_lm.expect("state implies model").advance(s, k)?)
                    }
                    None => None,
                };
                let child = Live {
                    labels,
                    frames: t,
                    transducer: hyp.transducer + lp[k + 1],
                    source,
                    external,
                    state: scorer.extend(&hyp.state, k)?,
                    source_state,
                    external_state,
                };
                merge_into(&mut pool, child, config.merge);
            }
        }
        for (_, h) in completed {
            merge_into(&mut finished, h, config.merge);
        }
        beam = ranked(pool, &weights);
        beam.truncate(config.beam_width);
        let lengths = beam.iter().map(|h| h.frames + h.labels.len());
        let spread = lengths.fold(None, |acc: Option<(usize, usize)>, l| match acc {
            None => Some((l, l)),
            Some((lo, hi)) => Some((lo.min(l), hi.max(l))),
        });
        if let Some(s) = spread {
            debug_assert_eq!(s.0, s.1, "alignment lengths diverged within the beam");
            trace.alignment_spread.push(s);
        }
    }

    if finished.is_empty() {
        return Err(Error::NoCompleteHypothesis {
            cap,
            best_partial: beam.first().map(|h| h.labels.clone()),
        });
    }
    let hypotheses = ranked(finished, &weights)
        .into_iter()
        .take(config.n_best)
        .map(|h| Hypothesis {
            score: h.score(&weights),
            alignment_length: h.frames + h.labels.len(),
            components: ScoreComponents {
                transducer: h.transducer,
                source_lm: h.source,
                external_lm: h.external,
                length: h.labels.len(),
            },
            labels: h.labels,
        })
        .collect();
    Ok((NBestList { hypotheses }, trace))
}

/// Exact `log p(y|x)` for one label sequence.
pub fn sequence_log_prob<S: StepScorer>(scorer: &S, labels: &LabelSequence) -> Result<f64> {
    let lattice = scorer.lattice_for(labels)?;
    Ok(-rnnt_forward(&lattice, labels)?.0)
}

/// Default work budget for [`exhaustive_decode`], in lattice nodes.
pub const DEFAULT_EXHAUSTIVE_BUDGET: f64 = 5e6;

/// Scores every label sequence with at most `max_labels` symbols exactly and
/// ranks them by `log p(y|x)`, ties in label order.
pub fn exhaustive_decode<S: StepScorer>(scorer: &S, max_labels: usize, budget: f64) -> Result<Vec<(LabelSequence, f64)>> {
    let vocab = scorer.outputs() - 1;
    let frames = scorer.frames();
    let mut binom = 1.0_f64;
    for k in 1..=max_labels {
        binom = binom * (frames + k) as f64 / k as f64;
    }
    let work = (vocab as f64).powi(max_labels as i32) * binom;
    if work > budget {
        return Err(Error::Refused(format!(
            "exhaustive decode needs about {work:.3e} units, budget is {budget:.3e}"
        )));
    }
    let mut out = Vec::new();
    let mut layer: Vec<Vec<usize>> = vec![Vec::new()];
    for u in 0..=max_labels {
        for y in &layer {
            let seq = LabelSequence::from_trusted(y.clone());
            let lp = sequence_log_prob(scorer, &seq)?;
            out.push((seq, lp));
        }
        if u < max_labels {
            layer = layer
                .iter()
                .flat_map(|y| {
                    (0..vocab).map(move |k| {
                        let mut v = y.clone();
                        v.push(k);
                        v
                    })
                })
                .collect();
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}
