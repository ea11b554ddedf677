//! Utterances, vocabularies and word error rate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LabelSequence;
use crate::numerics::Array2;

/// Symbol separating words in character transcripts.
pub const WORD_SEPARATOR: char = '_';

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    /// `T x D` acoustic features.
    pub features: Array2,
    /// Per-utterance auxiliary vector appended to every frame.
    pub aux: Option<Vec<f64>>,
    pub labels: LabelSequence,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Character inventory. Label id `i` is the `i`-th symbol; blank has no
/// symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Sorted set of the characters occurring in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<char> = texts.into_iter().flat_map(str::chars).collect();
        set.sort_unstable();
        set.dedup();
        Self::new(set).expect("deduplicated")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        let ids = text
            .chars()
            .map(|c| self.id(c).ok_or_else(|| Error::Ingest(format!("symbol {c:?} is not in the vocabulary"))))
            .collect::<Result<Vec<_>>>()?;
        LabelSequence::new(ids, self.len())
    }

    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().map(|&l| self.symbols.get(l).copied().unwrap_or('?')).collect()
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindexed(self) -> Result<Self> {
        Self::new(self.symbols)
    }
}

/// Splits a character transcript into words on [`WORD_SEPARATOR`], dropping
/// empty words.
pub fn words(text: &str) -> Vec<&str> {
    text.split(WORD_SEPARATOR).filter(|w| !w.is_empty()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / max(1, N)`.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_length.max(1) as f64
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_length += other.reference_length;
    }
}

/// Levenshtein alignment of `hyp` against `reference` with a backtrace
/// classifying each edit.
pub fn align_counts<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        reference_length: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            if reference[i - 1] != hyp[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Word-level edit counts between two character transcripts.
pub fn word_errors(hyp: &str, reference: &str) -> EditCounts {
    align_counts(&words(hyp), &words(reference))
}

/// Corpus word error rate over `(hypothesis, reference)` pairs.
pub fn compute_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> EditCounts {
    let mut total = EditCounts::default();
    for (h, r) in pairs {
        total.add(&word_errors(h, r));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wer_examples() {
        assert_eq!(word_errors("the_cat", "the_cat").errors(), 0);
        let c = word_errors("the_bat", "the_cat");
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
        let c = word_errors("the", "the_cat");
        assert_eq!((c.deletions, c.rate()), (1, 0.5));
        let c = word_errors("the_cat_sat", "the_cat");
        assert_eq!(c.insertions, 1);
        assert_eq!(word_errors("", "").rate(), 0.0);
        assert_eq!(word_errors("a_b", "").rate(), 2.0);
        let c = word_errors("a_x_c", "a_b_c");
        assert_eq!(c.substitutions, 1);
        assert!((c.rate() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(words("_a__b_"), vec!["a", "b"]);
    }

    #[test]
    fn vocabulary_round_trip() {
        let v = Vocabulary::from_texts(["ab_c", "cab"]);
        assert_eq!(v.symbols(), &['_', 'a', 'b', 'c']);
        let y = v.encode("cab_").unwrap();
        assert_eq!(v.decode(y.labels()), "cab_");
        assert!(v.encode("z").is_err());
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.reindexed().unwrap().id('c'), Some(3));
    }

    fn dp_distance(a: &[u8], b: &[u8]) -> usize {
        // Two-row formulation, independent of the backtrace code.
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1; b.len() + 1];
            for (j, y) in b.iter().enumerate() {
                cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    proptest! {
        #[test]
        fn backtrace_matches_edit_distance(h in prop::collection::vec(0u8..4, 0..12), r in prop::collection::vec(0u8..4, 0..12)) {
            let c = align_counts(&h, &r);
            prop_assert_eq!(c.errors(), dp_distance(&r, &h));
            prop_assert_eq!(c.reference_length, r.len());
            prop_assert_eq!(r.len() + c.insertions - c.deletions, h.len());
        }
    }
}
