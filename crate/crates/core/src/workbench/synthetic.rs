//! Synthetic speech-like tasks: template features over a character alphabet.

use serde::{Deserialize, Serialize};

use crate::data::{Utterance, Vocabulary, WORD_SEPARATOR};
use crate::error::{Error, Result};
use crate::numerics::{Array2, RandomStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskConfig {
    /// `|Y|`, word separator included.
    pub alphabet: usize,
    pub feature_dim: usize,
    pub frames_per_symbol: (usize, usize),
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Scale of the shared vector added on the first frame of every symbol.
    pub onset: f64,
    pub length: (usize, usize),
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Number of pseudo-speakers; each gets its own feature offset.
    pub speakers: usize,
    /// Standard deviation of the per-speaker offsets.
    pub speaker_shift: f64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            alphabet: 8,
            feature_dim: 12,
            frames_per_symbol: (3, 5),
            noise: 0.3,
            onset: 1.0,
            length: (3, 8),
            train: 500,
            dev: 100,
            test: 100,
            speakers: 10,
            speaker_shift: 0.0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet == 0 {
            return Err(Error::Config("synthetic alphabet is empty".into()));
        }
        if self.alphabet > 26 {
            return Err(Error::Config(format!("synthetic alphabet is limited to 26 symbols, got {}", self.alphabet)));
        }
        if !(self.noise >= 0.0) || !(self.speaker_shift >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        let (a, b) = self.frames_per_symbol;
        let (c, d) = self.length;
        if a == 0 || a > b || c > d || self.feature_dim == 0 {
            return Err(Error::Config(format!("inconsistent synthetic task ranges {self:?}")));
        }
        Ok(())
    }

    /// Separator plus the first `alphabet - 1` letters.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut symbols = vec![WORD_SEPARATOR];
        symbols.extend((b'a'..).take(self.alphabet - 1).map(char::from));
        Vocabulary::new(symbols).expect("distinct symbols")
    }
}

/// First-order Markov text source over label ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextModel {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

impl TextModel {
    pub fn uniform(symbols: usize) -> Self {
        Self {
            initial: vec![1.0; symbols],
            transitions: vec![vec![1.0; symbols]; symbols],
        }
    }

    /// A peaked chain: each row puts most of its mass on a few successors.
    /// The separator never starts or doubles.
    pub fn random_peaked(symbols: usize, sharpness: f64, rng: &mut RandomStream) -> Self {
        let mut initial = vec![1.0; symbols];
        initial[0] = 0.0;
        let transitions = (0..symbols)
            .map(|from| {
                let mut row: Vec<f64> = (0..symbols).map(|_| (sharpness * rng.normal()).exp()).collect();
                if from == 0 {
                    row[0] = 0.0;
                }
                row
            })
            .collect();
        Self { initial, transitions }
    }

    pub fn sample(&self, length: usize, rng: &mut RandomStream) -> Vec<usize> {
        let mut out = Vec::with_capacity(length);
        for i in 0..length {
            let weights = if i == 0 { &self.initial } else { &self.transitions[out[i - 1]] };
            out.push(rng.categorical(weights));
        }
        out
    }
}

/// Acoustic side of a task: one template per symbol plus an onset marker.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    pub templates: Array2,
    pub onset: Vec<f64>,
    pub speaker_offsets: Array2,
}

impl AcousticModel {
    pub fn new(config: &SyntheticTaskConfig, rng: &mut RandomStream) -> Self {
        let templates = Array2::random_normal(config.alphabet, config.feature_dim, 1.0, rng);
        let onset = (0..config.feature_dim).map(|_| config.onset * rng.normal()).collect();
        let speaker_offsets = Array2::random_normal(config.speakers.max(1), config.feature_dim, config.speaker_shift, rng);
        Self {
            templates,
            onset,
            speaker_offsets,
        }
    }

    /// Blends the first template of each pair toward the second, so context
    /// is needed to tell them apart.
    pub fn tie_templates(&mut self, pairs: &[(usize, usize)], blend: f64) {
        for &(a, b) in pairs {
            let tb = self.templates.row(b).to_vec();
            for (x, y) in self.templates.row_mut(a).iter_mut().zip(&tb) {
                *x = (1.0 - blend) * *x + blend * y;
            }
        }
    }

    /// Renders a transcript. Features are rounded to `f32` so they survive
    /// the feature container unchanged.
    pub fn render(&self, labels: &[usize], speaker: usize, config: &SyntheticTaskConfig, rng: &mut RandomStream) -> Array2 {
        let (lo, hi) = config.frames_per_symbol;
        let durations: Vec<usize> = labels.iter().map(|_| rng.range_inclusive(lo, hi)).collect();
        let frames: usize = durations.iter().sum::<usize>().max(1);
        let d = config.feature_dim;
        let mut x = Array2::zeros(frames, d);
        let mut t = 0;
        for (&l, &dur) in labels.iter().zip(&durations) {
            for k in 0..dur {
                let row = x.row_mut(t);
                row.copy_from_slice(self.templates.row(l));
                if k == 0 {
                    for (r, o) in row.iter_mut().zip(&self.onset) {
                        *r += o;
                    }
                }
                t += 1;
            }
        }
        let offset = self.speaker_offsets.row(speaker % self.speaker_offsets.rows()).to_vec();
        for t in 0..frames {
            for (v, o) in x.row_mut(t).iter_mut().zip(&offset) {
                *v = ((*v + o + config.noise * rng.normal()) as f32) as f64;
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub vocabulary: Vocabulary,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn make_split(
    name: &str,
    count: usize,
    text: &TextModel,
    acoustic: &AcousticModel,
    config: &SyntheticTaskConfig,
    vocab: &Vocabulary,
    rng: &mut RandomStream,
) -> Result<Vec<Utterance>> {
    (0..count)
        .map(|i| {
            let len = rng.range_inclusive(config.length.0, config.length.1);
            let labels = text.sample(len, rng);
            let speaker = rng.below(config.speakers.max(1));
            let features = acoustic.render(&labels, speaker, config, rng);
            Ok(Utterance {
                id: format!("{name}-{i:05}"),
                speaker: format!("spk{speaker:02}"),
                features,
                aux: None,
                labels: crate::lattice::LabelSequence::new(labels, vocab.len())?,
            })
        })
        .collect()
}

/// Random transcripts rendered through random templates; deterministic in
/// the stream.
pub fn generate_synthetic_task(config: &SyntheticTaskConfig, rng: &RandomStream) -> Result<SyntheticDataset> {
    config.validate()?;
    let vocabulary = config.vocabulary();
    let acoustic = AcousticModel::new(config, &mut rng.derive(1));
    let text = TextModel::uniform(config.alphabet);
    let train = make_split("train", config.train, &text, &acoustic, config, &vocabulary, &mut rng.derive(2))?;
    let dev = make_split("dev", config.dev, &text, &acoustic, config, &vocabulary, &mut rng.derive(3))?;
    let test = make_split("test", config.test, &text, &acoustic, config, &vocabulary, &mut rng.derive(4))?;
    Ok(SyntheticDataset {
        vocabulary,
        train,
        dev,
        test,
    })
}

/// Settings that turn a synthetic task into a domain-shift task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftConfig {
    /// Ratio of external-LM text to source transcripts.
    pub text_ratio: usize,
    /// How strongly the domain chains prefer particular successors.
    pub sharpness: f64,
    /// Number of symbol pairs whose templates are blended together.
    pub confusable_pairs: usize,
    /// Blend weight toward the partner template.
    pub blend: f64,
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        Self {
            text_ratio: 10,
            sharpness: 2.0,
            confusable_pairs: 3,
            blend: 0.8,
        }
    }
}

/// Domain-shift task: the transducer trains on source-domain text, dev and
/// test are target-domain, and external-LM text is drawn from the target
/// domain.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionDataset {
    pub data: SyntheticDataset,
    /// Target-domain text for the external LM.
    pub external_text: Vec<crate::lattice::LabelSequence>,
}

pub fn generate_fusion_task(base: &SyntheticTaskConfig, config: &DomainShiftConfig, rng: &RandomStream) -> Result<FusionDataset> {
    base.validate()?;
    if !(config.sharpness >= 0.0) || !(0.0..=1.0).contains(&config.blend) {
        return Err(Error::Config(format!("invalid domain-shift settings {config:?}")));
    }
    let vocabulary = base.vocabulary();
    let mut acoustic = AcousticModel::new(base, &mut rng.derive(1));
    let pairs: Vec<(usize, usize)> = (0..config.confusable_pairs)
        .map(|i| (1 + 2 * i, 2 + 2 * i))
        .filter(|&(a, b)| a < base.alphabet && b < base.alphabet)
        .collect();
    acoustic.tie_templates(&pairs, config.blend);
    let source = TextModel::random_peaked(base.alphabet, config.sharpness, &mut rng.derive(5));
    let target = TextModel::random_peaked(base.alphabet, config.sharpness, &mut rng.derive(6));
    let train = make_split("train", base.train, &source, &acoustic, base, &vocabulary, &mut rng.derive(2))?;
    let dev = make_split("dev", base.dev, &target, &acoustic, base, &vocabulary, &mut rng.derive(3))?;
    let test = make_split("test", base.test, &target, &acoustic, base, &vocabulary, &mut rng.derive(4))?;
    let mut text_rng = rng.derive(7);
    let external_text = (0..base.train * config.text_ratio)
        .map(|_| {
            let len = text_rng.range_inclusive(base.length.0, base.length.1);
            crate::lattice::LabelSequence::new(target.sample(len, &mut text_rng), base.alphabet)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FusionDataset {
        data: SyntheticDataset {
            vocabulary,
            train,
            dev,
            test,
        },
        external_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_features_are_template_concatenation() {
        let cfg = SyntheticTaskConfig {
            noise: 0.0,
            onset: 0.0,
            frames_per_symbol: (2, 2),
            train: 3,
            dev: 1,
            test: 1,
            ..SyntheticTaskConfig::default()
        };
        let rng = RandomStream::new(4, 0);
        let data = generate_synthetic_task(&cfg, &rng).unwrap();
        let acoustic = AcousticModel::new(&cfg, &mut rng.derive(1));
        for u in &data.train {
            assert_eq!(u.frames(), 2 * u.labels.len());
            for (i, &l) in u.labels.labels().iter().enumerate() {
                for k in 0..2 {
                    let expect: Vec<f64> = acoustic.templates.row(l).iter().map(|v| (*v as f32) as f64).collect();
                    assert_eq!(u.features.row(2 * i + k), expect.as_slice());
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let cfg = SyntheticTaskConfig {
            train: 20,
            dev: 5,
            test: 5,
            ..SyntheticTaskConfig::default()
        };
        let a = generate_synthetic_task(&cfg, &RandomStream::new(1, 0)).unwrap();
        let b = generate_synthetic_task(&cfg, &RandomStream::new(1, 0)).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<&str> = a.train.iter().chain(&a.dev).chain(&a.test).map(|u| u.id.as_str()).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        let c = generate_synthetic_task(&cfg, &RandomStream::new(2, 0)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_alphabet_is_rejected() {
        let cfg = SyntheticTaskConfig {
            alphabet: 0,
            ..SyntheticTaskConfig::default()
        };
        assert!(generate_synthetic_task(&cfg, &RandomStream::new(0, 0)).is_err());
    }

    #[test]
    fn fusion_task_shapes() {
        let base = SyntheticTaskConfig {
            train: 10,
            dev: 4,
            test: 4,
            ..SyntheticTaskConfig::default()
        };
        let f = generate_fusion_task(&base, &DomainShiftConfig::default(), &RandomStream::new(3, 0)).unwrap();
        assert_eq!(f.external_text.len(), 100);
        assert_eq!(f.data.train.len(), 10);
        assert!(f.data.dev.iter().all(|u| u.labels.labels().first() != Some(&0)));
    }
}
