//! Training-time data perturbations.

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::lattice::LabelSequence;
use crate::numerics::{Array2, RandomStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Speed,
    Tempo,
}

impl PerturbKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Speed => "speed",
            PerturbKind::Tempo => "tempo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub kind: PerturbKind,
    pub factor: f64,
}

impl Perturbation {
    /// The four replicas: speed and tempo at 0.9 and 1.1.
    pub fn standard_set() -> Vec<Perturbation> {
        let mut v = Vec::new();
        for kind in [PerturbKind::Speed, PerturbKind::Tempo] {
            for factor in [0.9, 1.1] {
                v.push(Perturbation { kind, factor });
            }
        }
        v
    }

    pub fn tag(&self) -> String {
        format!("{}{}", self.kind.name(), self.factor)
    }
}

/// Number of output frames for `frames` input frames at `factor`.
pub fn perturbed_length(frames: usize, factor: f64) -> usize {
    ((frames - 1) as f64 / factor + 1e-9).floor() as usize + 1
}

/// Resamples the time axis by linear interpolation at positions `i * factor`.
pub fn speed_tempo_perturb(features: &Array2, factor: f64) -> Result<Array2> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Config(format!("perturbation factor must be positive, got {factor}")));
    }
    let (frames, dim) = features.shape();
    if frames == 0 {
        return Ok(features.clone());
    }
    let out_frames = perturbed_length(frames, factor);
    let mut out = Array2::zeros(out_frames, dim);
    for i in 0..out_frames {
        let pos = i as f64 * factor;
        let lo = (pos.floor() as usize).min(frames - 1);
        let frac = (pos - lo as f64).clamp(0.0, 1.0);
        let hi = (lo + 1).min(frames - 1);
        let row = out.row_mut(i);
        if frac == 0.0 || hi == lo {
            row.copy_from_slice(features.row(lo));
        } else {
            for ((o, a), b) in row.iter_mut().zip(features.row(lo)).zip(features.row(hi)) {
                *o = a + frac * (b - a);
            }
        }
    }
    Ok(out)
}

/// Dataset size multiplier for a replica set.
pub fn expansion_factor(perturbations: &[Perturbation]) -> usize {
    1 + perturbations.len()
}

/// Original data followed by one perturbed copy per setting. Each replica is
/// a distinct pseudo-speaker.
pub fn replica_expand(dataset: &[Utterance], perturbations: &[Perturbation]) -> Result<Vec<Utterance>> {
    let mut out = dataset.to_vec();
    for p in perturbations {
        let tag = p.tag();
        for u in dataset {
            out.push(Utterance {
                id: format!("{}-{tag}", u.id),
                speaker: format!("{}-{tag}", u.speaker),
                features: speed_tempo_perturb(&u.features, p.factor)?,
                aux: u.aux.clone(),
                labels: u.labels.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseInjectConfig {
    pub probability: f64,
    pub scale: f64,
    /// Relative length tolerance for donor selection.
    pub length_tolerance: f64,
}

impl Default for NoiseInjectConfig {
    fn default() -> Self {
        Self {
            probability: 0.8,
            scale: 0.4,
            length_tolerance: 0.2,
        }
    }
}

impl NoiseInjectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) || self.scale < 0.0 || self.length_tolerance < 0.0 {
            return Err(Error::Config(format!("invalid noise injection settings {self:?}")));
        }
        Ok(())
    }
}

/// Uniform choice among the utterances (other than `target`) whose length
/// lies within the tolerance of the target's length.
pub fn select_donor(lengths: &[usize], target: usize, tolerance: f64, rng: &mut RandomStream) -> Option<usize> {
    let len = lengths[target] as f64;
    let candidates: Vec<usize> = (0..lengths.len())
        .filter(|&i| i != target && (lengths[i] as f64 - len).abs() <= tolerance * len)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.below(candidates.len())])
}

/// With the configured probability adds `scale * donor` over the overlapping
/// frames. One uniform draw is consumed whether or not noise is added.
pub fn sequence_noise_inject(spectrum: &Array2, donor: &Array2, config: &NoiseInjectConfig, rng: &mut RandomStream) -> Result<Array2> {
    if donor.cols() != spectrum.cols() {
        return Err(Error::dim("noise donor feature dimension", spectrum.cols(), donor.cols()));
    }
    let draw = rng.uniform();
    let mut out = spectrum.clone();
    if draw < config.probability {
        let overlap = spectrum.rows().min(donor.rows()) * spectrum.cols();
        for (o, d) in out.data_mut()[..overlap].iter_mut().zip(&donor.data()[..overlap]) {
            *o += config.scale * d;
        }
    }
    Ok(out)
}

/// Bounds for one family of masks; counts and widths are drawn uniformly
/// from the inclusive ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub count_min: usize,
    pub count_max: usize,
    pub width_min: usize,
    pub width_max: usize,
}

impl MaskSpec {
    pub fn none() -> Self {
        Self {
            count_min: 0,
            count_max: 0,
            width_min: 0,
            width_max: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub frequency: MaskSpec,
    pub time: MaskSpec,
    /// Upper bound on the masked fraction of frames.
    pub max_time_ratio: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            frequency: MaskSpec {
                count_min: 2,
                count_max: 2,
                width_min: 0,
                width_max: 15,
            },
            time: MaskSpec {
                count_min: 2,
                count_max: 2,
                width_min: 0,
                width_max: 70,
            },
            max_time_ratio: 0.2,
        }
    }
}

impl SpecAugmentConfig {
    pub fn off() -> Self {
        Self {
            frequency: MaskSpec::none(),
            time: MaskSpec::none(),
            max_time_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("frequency", &self.frequency), ("time", &self.time)] {
            if m.count_min > m.count_max || m.width_min > m.width_max {
                return Err(Error::Config(format!("{name} mask bounds are inverted: {m:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.max_time_ratio) {
            return Err(Error::Config(format!("time mask ratio {} is outside [0, 1]", self.max_time_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRegion {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Uniform draw from `{lo..=hi}`.
pub fn sample_mask_width(lo: usize, hi: usize, rng: &mut RandomStream) -> usize {
    rng.range_inclusive(lo, hi)
}

/// Frequency and time masking; masked cells take the utterance mean.
pub fn spec_augment(features: &Array2, config: &SpecAugmentConfig, rng: &mut RandomStream) -> Result<Array2> {
    Ok(spec_augment_regions(features, config, rng)?.0)
}

pub fn spec_augment_regions(features: &Array2, config: &SpecAugmentConfig, rng: &mut RandomStream) -> Result<(Array2, Vec<MaskRegion>)> {
    config.validate()?;
    let (frames, dim) = features.shape();
    let fill = features.mean();
    let mut out = features.clone();
    let mut regions = Vec::new();

    let n_freq = rng.range_inclusive(config.frequency.count_min, config.frequency.count_max);
    for _ in 0..n_freq {
        let hi = config.frequency.width_max.min(dim);
        let width = sample_mask_width(config.frequency.width_min.min(hi), hi, rng);
        let start = rng.range_inclusive(0, dim - width);
        for t in 0..frames {
            out.row_mut(t)[start..start + width].fill(fill);
        }
        regions.push(MaskRegion {
            axis: MaskAxis::Frequency,
            start,
            width,
        });
    }

    let n_time = rng.range_inclusive(config.time.count_min, config.time.count_max);
    if n_time > 0 {
        let ratio_cap = (config.max_time_ratio * frames as f64 / n_time as f64).floor() as usize;
        let hi = config.time.width_max.min(ratio_cap).min(frames);
        for _ in 0..n_time {
            let width = sample_mask_width(config.time.width_min.min(hi), hi, rng);
            let start = rng.range_inclusive(0, frames - width);
            for t in start..start + width {
                out.row_mut(t).fill(fill);
            }
            regions.push(MaskRegion {
                axis: MaskAxis::Time,
                start,
                width,
            });
        }
    }
    Ok((out, regions))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchoutConfig {
    /// The zero-temperature limit (no replacement) is realized by disabling.
    pub enabled: bool,
    pub temperature: f64,
}

impl Default for SwitchoutConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            temperature: 10.0,
        }
    }
}

/// `p(n) ∝ exp(-n / tau)` for `n = 0..=U`.
pub fn switchout_distribution(length: usize, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("switchout temperature must be positive, got {temperature}")));
    }
    let w: Vec<f64> = (0..=length).map(|n| (-(n as f64) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Draws `n̂` and replaces each position with probability `n̂ / U` by a
/// symbol drawn uniformly from the whole vocabulary (the original symbol
/// included). Returns the new sequence and `n̂`.
pub fn switchout_with_count(labels: &LabelSequence, vocab: usize, config: &SwitchoutConfig, rng: &mut RandomStream) -> Result<(LabelSequence, usize)> {
    let u = labels.len();
    if !config.enabled || u == 0 {
        return Ok((labels.clone(), 0));
    }
    let p = switchout_distribution(u, config.temperature)?;
    let n_hat = rng.categorical(&p);
    let rate = n_hat as f64 / u as f64;
    let out = labels
        .labels()
        .iter()
        .map(|&l| if rng.uniform() < rate { rng.below(vocab) } else { l })
        .collect();
    Ok((LabelSequence::new(out, vocab)?, n_hat))
}

pub fn switchout(labels: &LabelSequence, vocab: usize, config: &SwitchoutConfig, rng: &mut RandomStream) -> Result<LabelSequence> {
    Ok(switchout_with_count(labels, vocab, config, rng)?.0)
}

/// Everything applied to a training example on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Replica settings applied once to the training set.
    pub perturbations: Vec<Perturbation>,
    pub noise: Option<NoiseInjectConfig>,
    pub spec_augment: Option<SpecAugmentConfig>,
    pub switchout: Option<SwitchoutConfig>,
    /// Hidden-to-hidden DropConnect rate; 0 disables.
    pub dropconnect: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            perturbations: Vec::new(),
            noise: None,
            spec_augment: None,
            switchout: None,
            dropconnect: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn chi_square_passes(observed: &[usize], probs: &[f64]) -> bool {
        let n: usize = observed.iter().sum();
        let stat: f64 = observed
            .iter()
            .zip(probs)
            .map(|(&o, &p)| {
                let e = p * n as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        let critical = ChiSquared::new((probs.len() - 1) as f64).unwrap().inverse_cdf(0.99);
        stat < critical
    }

    #[test]
    fn perturbation_examples() {
        let mut rng = RandomStream::new(0, 0);
        let x = Array2::random_normal(100, 4, 1.0, &mut rng);
        assert_eq!(speed_tempo_perturb(&x, 1.0).unwrap(), x);
        assert_eq!(speed_tempo_perturb(&x, 1.1).unwrap().rows(), 91);
        assert_eq!(speed_tempo_perturb(&x, 0.9).unwrap().rows(), 111);
        let c = Array2::from_vec(5, 2, vec![3.25; 10]).unwrap();
        for f in [0.9, 1.0, 1.1, 0.37] {
            let y = speed_tempo_perturb(&c, f).unwrap();
            assert!(y.data().iter().all(|v| *v == 3.25));
        }
        assert!(speed_tempo_perturb(&x, 0.0).is_err());
        assert!(speed_tempo_perturb(&x, -1.0).is_err());
    }

    #[test]
    fn interpolation_is_linear() {
        let x = Array2::from_rows(&[vec![0.0], vec![10.0], vec![20.0]]).unwrap();
        let y = speed_tempo_perturb(&x, 0.5).unwrap();
        assert_eq!(y.data(), &[0.0, 5.0, 10.0, 15.0, 20.0]);
    }

    fn utt(id: &str, frames: usize) -> Utterance {
        Utterance {
            id: id.into(),
            speaker: format!("spk-{id}"),
            features: Array2::zeros(frames, 2),
            aux: None,
            labels: LabelSequence::empty(),
        }
    }

    #[test]
    fn replica_counts() {
        let data = vec![utt("a", 10), utt("b", 12)];
        assert_eq!(replica_expand(&data, &[]).unwrap(), data);
        let two = [
            Perturbation {
                kind: PerturbKind::Speed,
                factor: 0.9,
            },
            Perturbation {
                kind: PerturbKind::Tempo,
                factor: 1.1,
            },
        ];
        let out = replica_expand(&data, &two).unwrap();
        assert_eq!(out.len(), 6);
        let mut speakers: Vec<&str> = out.iter().map(|u| u.speaker.as_str()).collect();
        speakers.sort_unstable();
        speakers.dedup();
        assert_eq!(speakers.len(), 6);
        assert_eq!(300 * expansion_factor(&Perturbation::standard_set()), 1500);
    }

    #[test]
    fn noise_injection() {
        let mut rng = RandomStream::new(1, 0);
        let x = Array2::random_normal(10, 3, 1.0, &mut rng);
        let donor = Array2::random_normal(7, 3, 1.0, &mut rng);
        let always = NoiseInjectConfig {
            probability: 1.0,
            ..NoiseInjectConfig::default()
        };
        let y = sequence_noise_inject(&x, &donor, &always, &mut rng).unwrap();
        for t in 0..10 {
            for d in 0..3 {
                let expect = if t < 7 { x.get(t, d) + 0.4 * donor.get(t, d) } else { x.get(t, d) };
                assert_eq!(y.get(t, d), expect);
            }
        }
        let never = NoiseInjectConfig {
            probability: 0.0,
            ..always
        };
        let mut a = RandomStream::new(5, 0);
        let mut b = RandomStream::new(5, 0);
        assert_eq!(sequence_noise_inject(&x, &donor, &never, &mut a).unwrap(), x);
        b.uniform();
        assert_eq!(a.uniform(), b.uniform());
        let silent = NoiseInjectConfig { scale: 0.0, ..always };
        assert_eq!(sequence_noise_inject(&x, &donor, &silent, &mut rng).unwrap(), x);
    }

    #[test]
    fn donor_selection_respects_tolerance() {
        let lengths = [100, 50, 115, 121, 85, 79];
        let mut rng = RandomStream::new(2, 0);
        let mut seen = [0usize; 6];
        for _ in 0..1000 {
            seen[select_donor(&lengths, 0, 0.2, &mut rng).unwrap()] += 1;
        }
        assert_eq!(seen[0] + seen[1] + seen[3] + seen[5], 0);
        assert!(seen[2] > 400 && seen[4] > 400);
        assert_eq!(select_donor(&[10, 100], 0, 0.2, &mut rng), None);
    }

    #[test]
    fn spec_augment_examples() {
        let mut rng = RandomStream::new(3, 0);
        let x = Array2::random_normal(40, 8, 1.0, &mut rng);
        assert_eq!(spec_augment(&x, &SpecAugmentConfig::off(), &mut rng).unwrap(), x);
        let full = SpecAugmentConfig {
            frequency: MaskSpec {
                count_min: 1,
                count_max: 1,
                width_min: 8,
                width_max: 8,
            },
            ..SpecAugmentConfig::off()
        };
        let y = spec_augment(&x, &full, &mut rng).unwrap();
        assert!(y.data().iter().all(|v| *v == x.mean()));
        for _ in 0..200 {
            let (y, regions) = spec_augment_regions(&x, &SpecAugmentConfig::default(), &mut rng).unwrap();
            assert_eq!(y.shape(), x.shape());
            let time: usize = regions.iter().filter(|r| r.axis == MaskAxis::Time).map(|r| r.width).sum();
            assert!(time as f64 <= 0.2 * 40.0);
            assert!(regions.iter().filter(|r| r.axis == MaskAxis::Frequency).all(|r| r.start + r.width <= 8));
        }
    }

    #[test]
    fn mask_widths_are_uniform() {
        let mut rng = RandomStream::new(4, 0);
        let w = 6;
        let mut hist = vec![0usize; w + 1];
        for _ in 0..10_000 {
            hist[sample_mask_width(0, w, &mut rng)] += 1;
        }
        assert!(chi_square_passes(&hist, &vec![1.0 / (w + 1) as f64; w + 1]));
    }

    #[test]
    fn switchout_distribution_values() {
        let p = switchout_distribution(2, 10.0).unwrap();
        let z = 1.0 + (-0.1f64).exp() + (-0.2f64).exp();
        assert!((z - 2.723568).abs() < 1e-6);
        assert!((p[0] - 1.0 / z).abs() < 1e-15);
        assert!((p[0] - 0.3672).abs() < 1e-4);
        let cold = switchout_distribution(5, 1e-3).unwrap();
        assert!(cold[0] > 1.0 - 1e-12);
        assert!(switchout_distribution(3, 0.0).is_err());
    }

    #[test]
    fn switchout_behaviour() {
        let mut rng = RandomStream::new(5, 0);
        let y = LabelSequence::new(vec![0, 1, 2, 3, 4, 0], 5).unwrap();
        let off = SwitchoutConfig {
            enabled: false,
            ..SwitchoutConfig::default()
        };
        assert_eq!(switchout(&y, 5, &off, &mut rng).unwrap(), y);
        let cfg = SwitchoutConfig::default();
        assert_eq!(switchout(&LabelSequence::empty(), 5, &cfg, &mut rng).unwrap(), LabelSequence::empty());
        let mut changed = 0;
        for _ in 0..500 {
            let z = switchout(&y, 5, &cfg, &mut rng).unwrap();
            assert_eq!(z.len(), y.len());
            assert!(z.labels().iter().all(|&l| l < 5));
            changed += usize::from(z != y);
        }
        assert!(changed > 100);
        let mut a = RandomStream::new(9, 1);
        let mut b = RandomStream::new(9, 1);
        assert_eq!(switchout(&y, 5, &cfg, &mut a).unwrap(), switchout(&y, 5, &cfg, &mut b).unwrap());
    }

    #[test]
    fn switchout_count_histogram() {
        let mut rng = RandomStream::new(6, 0);
        let y = LabelSequence::new(vec![1, 2, 3], 4).unwrap();
        let cfg = SwitchoutConfig::default();
        let mut hist = [0usize; 4];
        for _ in 0..20_000 {
            hist[switchout_with_count(&y, 4, &cfg, &mut rng).unwrap().1] += 1;
        }
        assert!(chi_square_passes(&hist, &switchout_distribution(3, 10.0).unwrap()));
    }
}
