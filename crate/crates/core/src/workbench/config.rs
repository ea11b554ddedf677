//! Experiment configuration, read from TOML. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Perturbation};
use crate::decoder::BeamConfig;
use crate::error::{Error, Result};
use crate::fusion::WeightGrid;
use crate::joint::JointMode;
use crate::model::TransducerConfig;
use crate::seq::{CharLmConfig, EncoderConfig};
use crate::training::{OptimizerConfig, Schedule, TrainConfig};
use crate::workbench::synthetic::{DomainShiftConfig, SyntheticTaskConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "reference".into(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// One transducer is trained per entry.
    pub joints: Vec<JointMode>,
    pub encoder_layers: usize,
    pub encoder_cells: usize,
    pub bidirectional: bool,
    pub stack: usize,
    pub skip: usize,
    pub lookahead: usize,
    pub prediction_embed: usize,
    pub prediction_cells: usize,
    pub joint_dim: usize,
    /// Per-branch biases for multiplicative joints.
    pub branch_biases: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            joints: vec![JointMode::Additive, JointMode::Multiplicative],
            encoder_layers: 2,
            encoder_cells: 64,
            bidirectional: true,
            stack: 2,
            skip: 2,
            lookahead: 0,
            prediction_embed: 16,
            prediction_cells: 48,
            joint_dim: 64,
            branch_biases: true,
        }
    }
}

impl ModelSection {
    pub fn transducer(&self, joint: JointMode, task: &SyntheticTaskConfig) -> TransducerConfig {
        TransducerConfig {
            vocab: task.alphabet,
            encoder: EncoderConfig {
                input_dim: task.feature_dim,
                aux_dim: 0,
                layers: self.encoder_layers,
                cells: self.encoder_cells,
                bidirectional: self.bidirectional,
                stack: self.stack,
                skip: self.skip,
                lookahead: self.lookahead,
            },
            prediction_embed: self.prediction_embed,
            prediction_cells: self.prediction_cells,
            joint_mode: joint,
            joint_dim: self.joint_dim,
            branch_biases: self.branch_biases && joint == JointMode::Multiplicative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub shallow: WeightGrid,
    pub density_ratio: WeightGrid,
    pub combination: WeightGrid,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            shallow: WeightGrid::shallow(),
            density_ratio: WeightGrid::density_ratio(),
            combination: WeightGrid::combination(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub embed_dim: usize,
    pub layers: usize,
    pub cells: usize,
    pub dropconnect: f64,
    pub train: TrainConfig,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            layers: 1,
            cells: 64,
            dropconnect: 0.0,
            train: TrainConfig {
                epochs: 8,
                batch_size: 16,
                optimizer: OptimizerConfig::adamw(),
                schedule: desk_one_cycle(8),
                clip_norm: Some(10.0),
            },
        }
    }
}

impl LmSection {
    pub fn lm_config(&self, vocab: usize) -> CharLmConfig {
        CharLmConfig {
            vocab,
            embed_dim: self.embed_dim,
            layers: self.layers,
            cells: self.cells,
        }
    }
}

/// A training-recipe variant; unset toggles keep the base recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub name: String,
    #[serde(default)]
    pub perturbations: Option<bool>,
    #[serde(default)]
    pub noise: Option<bool>,
    #[serde(default)]
    pub spec_augment: Option<bool>,
    #[serde(default)]
    pub switchout: Option<bool>,
    #[serde(default)]
    pub dropconnect: Option<f64>,
}

impl Ablation {
    pub fn apply(&self, base: &AugmentConfig) -> AugmentConfig {
        let mut a = base.clone();
        if let Some(on) = self.perturbations {
            a.perturbations = if on {
                if base.perturbations.is_empty() {
                    Perturbation::standard_set()
                } else {
                    base.perturbations.clone()
                }
            } else {
                Vec::new()
            };
        }
        if let Some(on) = self.noise {
            a.noise = on.then(|| base.noise.unwrap_or_default());
        }
        if let Some(on) = self.spec_augment {
            a.spec_augment = on.then(|| base.spec_augment.unwrap_or_default());
        }
        if let Some(on) = self.switchout {
            a.switchout = on.then(|| base.switchout.unwrap_or_default());
        }
        if let Some(rate) = self.dropconnect {
            a.dropconnect = rate;
        }
        a
    }
}

/// Optimizer x schedule grid trained with one joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub joint: JointMode,
    pub optimizers: Vec<OptimizerConfig>,
    pub schedules: Vec<Schedule>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            joint: JointMode::Additive,
            optimizers: vec![OptimizerConfig::momentum_sgd(), OptimizerConfig::adamw()],
            schedules: vec![desk_const_decay(30), desk_one_cycle(30)],
        }
    }
}

/// One-cycle shaped like the reference recipe (warmup over 30% of training,
/// start at a tenth of the peak) with the desk-scale peak rate.
pub fn desk_one_cycle(epochs: usize) -> Schedule {
    let e = epochs.max(1) as f64;
    Schedule::OneCycle {
        start: 5e-4,
        peak: 5e-3,
        warmup_epochs: 0.3 * e,
        total_epochs: e,
    }
}

/// Constant rate for the first half of training, then decay by 0.7 per
/// epoch.
pub fn desk_const_decay(epochs: usize) -> Schedule {
    Schedule::ConstDecay {
        base: 5e-3,
        decay: 0.7,
        start_epoch: epochs / 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub task: SyntheticTaskConfig,
    /// Present for domain-shift experiments with external-LM fusion.
    pub domain_shift: Option<DomainShiftConfig>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub decode: BeamConfig,
    pub fusion: FusionSection,
    pub lm: LmSection,
    pub ablations: Vec<Ablation>,
    pub optimizer_sweep: Option<SweepSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentSection::default(),
            task: SyntheticTaskConfig::default(),
            domain_shift: None,
            model: ModelSection::default(),
            train: TrainConfig {
                epochs: 30,
                batch_size: 8,
                optimizer: OptimizerConfig::adamw(),
                schedule: desk_one_cycle(30),
                clip_norm: Some(10.0),
            },
            augment: AugmentConfig::default(),
            decode: BeamConfig::default(),
            fusion: FusionSection::default(),
            lm: LmSection::default(),
            ablations: Vec::new(),
            optimizer_sweep: None,
        }
    }
}

impl ExperimentConfig {
    /// Domain-shift variant of the reference experiment: noisier features,
    /// confusable symbol pairs, target-domain external text.
    pub fn fusion_reference() -> Self {
        let mut c = Self::default();
        c.experiment.name = "fusion".into();
        c.task.noise = 0.5;
        c.domain_shift = Some(DomainShiftConfig::default());
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.model.joints.is_empty() {
            return Err(Error::Config("model.joints is empty".into()));
        }
        for (i, a) in self.model.joints.iter().enumerate() {
            if self.model.joints[..i].contains(a) {
                return Err(Error::Config(format!("model.joints lists {a:?} twice")));
            }
            self.model.transducer(*a, &self.task).encoder.validate()?;
        }
        if self.decode.beam_width == 0 || self.decode.n_best == 0 {
            return Err(Error::Config("decode.beam_width and decode.n_best must be >= 1".into()));
        }
        if self.train.batch_size == 0 || self.lm.train.batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if let Some(n) = &self.augment.noise {
            n.validate()?;
        }
        if let Some(s) = &self.augment.spec_augment {
            s.validate()?;
        }
        if !(0.0..1.0).contains(&self.augment.dropconnect) || !(0.0..1.0).contains(&self.lm.dropconnect) {
            return Err(Error::Config("dropconnect rates must lie in [0, 1)".into()));
        }
        let mut names: Vec<&str> = self.ablations.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')) {
            return Err(Error::Config("ablation names must be unique and use [A-Za-z0-9_-]".into()));
        }
        if let Some(s) = &self.optimizer_sweep {
            if s.optimizers.is_empty() || s.schedules.is_empty() {
                return Err(Error::Config("optimizer_sweep needs at least one optimizer and one schedule".into()));
            }
        }
        Ok(())
    }

    /// Whether external-LM conditions are part of the experiment.
    pub fn has_lms(&self) -> bool {
        self.domain_shift.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::NoiseInjectConfig;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig {
            ablations: vec![Ablation {
                name: "no_seq_noise".into(),
                perturbations: None,
                noise: Some(false),
                spec_augment: None,
                switchout: None,
                dropconnect: None,
            }],
            optimizer_sweep: Some(SweepSection::default()),
            ..ExperimentConfig::fusion_reference()
        };
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[train]\nepoch = 3\n").unwrap_err().to_string();
        assert!(err.contains("epoch"), "{err}");
        assert!(ExperimentConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn partial_sections_take_defaults() {
        let c = ExperimentConfig::from_toml(
            "[experiment]\nseed = 7\n[train]\nepochs = 2\n[train.optimizer]\nkind = \"momentum_sgd\"\n[augment.noise]\nprobability = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.experiment.seed, 7);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.optimizer, OptimizerConfig::momentum_sgd());
        assert_eq!(c.augment.noise.unwrap().probability, 0.5);
        assert_eq!(c.augment.noise.unwrap().scale, 0.4);
    }

    #[test]
    fn ablation_toggles() {
        let base = AugmentConfig {
            noise: Some(NoiseInjectConfig::default()),
            ..AugmentConfig::default()
        };
        let a = Ablation {
            name: "x".into(),
            perturbations: None,
            noise: Some(false),
            spec_augment: Some(true),
            switchout: None,
            dropconnect: Some(0.1),
        };
        let out = a.apply(&base);
        assert!(out.noise.is_none());
        assert!(out.spec_augment.is_some());
        assert_eq!(out.dropconnect, 0.1);
    }
}
