//! End-to-end experiment runner. Each stage reads its inputs from the run
//! directory and writes its outputs there, so any stage can be re-run alone:
//!
//! ```text
//! <run>/config.toml
//! <run>/data/{vocab.json, train|dev|test.feats, train|dev|test.txt, external.txt}
//! <run>/models/{manifest.json, <model>.ckpt}
//! <run>/metrics/<model>.jsonl
//! <run>/nbest/<model>.<split>.raw.tsv      beam output, no LM
//! <run>/nbest/<condition>.<split>.tsv      rescored under tuned weights
//! <run>/tuning.json
//! <run>/report.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{replica_expand, AugmentConfig};
use crate::data::{compute_wer, word_errors, EditCounts, Utterance, Vocabulary};
use crate::decoder::{alsd_beam, greedy_decode, BeamConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::fusion::{cross_score, rank, CombinationWeights, CombinedComponents, FusionWeights, RescoreModels, SequenceScorer, TuneUtterance, WeightGrid};
use crate::joint::JointMode;
use crate::lattice::LabelSequence;
use crate::model::{StepScorer, Transducer, TransducerSession};
use crate::numerics::RandomStream;
use crate::seq::CharLm;
use crate::training::{train_lm, train_transducer, EpochMetrics, TrainConfig};
use crate::workbench::checkpoint::{fingerprint, load_checkpoint, save_checkpoint, Checkpointable};
use crate::workbench::config::ExperimentConfig;
use crate::workbench::container::{read_split, read_text, read_transcripts, write_split, write_text};
use crate::workbench::nbest::{read_nbest, write_nbest, NBestRecord};
use crate::workbench::synthetic::{generate_fusion_task, generate_synthetic_task};

pub const SPLITS: [&str; 2] = ["dev", "test"];

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vocabulary(&self) -> PathBuf {
        self.data().join("vocab.json")
    }

    pub fn external_text(&self) -> PathBuf {
        self.data().join("external.txt")
    }

    pub fn transcripts(&self, split: &str) -> PathBuf {
        self.data().join(format!("{split}.txt"))
    }

    pub fn checkpoint(&self, model: &str) -> PathBuf {
        self.root.join("models").join(format!("{model}.ckpt"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("models").join("manifest.json")
    }

    pub fn metrics(&self, model: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{model}.jsonl"))
    }

    pub fn raw_nbest(&self, model: &str, split: &str) -> PathBuf {
        self.root.join("nbest").join(format!("{model}.{split}.raw.tsv"))
    }

    pub fn nbest(&self, condition: &str, split: &str) -> PathBuf {
        self.root.join("nbest").join(format!("{condition}.{split}.tsv"))
    }

    pub fn tuning(&self) -> PathBuf {
        self.root.join("tuning.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn create(&self) -> Result<()> {
        for d in ["data", "models", "metrics", "nbest"] {
            fs::create_dir_all(self.root.join(d))?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Ingest(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Main,
    Ablation,
    Sweep,
    SourceLm,
    ExternalLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub role: ModelRole,
    pub joint: Option<JointMode>,
    pub ablation: Option<String>,
    pub optimizer: Option<String>,
    pub schedule: Option<String>,
    /// Training stopped early; the checkpoint holds the last finite model.
    pub aborted: Option<String>,
}

impl ModelEntry {
    pub fn is_transducer(&self) -> bool {
        matches!(self.role, ModelRole::Main | ModelRole::Ablation | ModelRole::Sweep)
    }
}

struct Planned {
    entry: ModelEntry,
    train: TrainConfig,
    augment: AugmentConfig,
    init: [u64; 2],
    stream: [u64; 2],
}

fn joint_name(j: JointMode) -> &'static str {
    match j {
        JointMode::Additive => "additive",
        JointMode::Multiplicative => "multiplicative",
    }
}

fn plan_transducers(cfg: &ExperimentConfig) -> Vec<Planned> {
    let entry = |name: String, role, joint| ModelEntry {
        name,
        role,
        joint: Some(joint),
        ablation: None,
        optimizer: Some(cfg.train.optimizer.name().into()),
        schedule: Some(cfg.train.schedule.name().into()),
        aborted: None,
    };
    let mut out = Vec::new();
    for (i, &j) in cfg.model.joints.iter().enumerate() {
        out.push(Planned {
            entry: entry(joint_name(j).into(), ModelRole::Main, j),
            train: cfg.train.clone(),
            augment: cfg.augment.clone(),
            init: [2, i as u64],
            stream: [3, i as u64],
        });
    }
    let first = cfg.model.joints[0];
    for (k, a) in cfg.ablations.iter().enumerate() {
        let mut e = entry(format!("ablation-{}", a.name), ModelRole::Ablation, first);
        e.ablation = Some(a.name.clone());
        out.push(Planned {
            entry: e,
            train: cfg.train.clone(),
            augment: a.apply(&cfg.augment),
            init: [2, 0],
            stream: [6, k as u64],
        });
    }
    if let Some(sweep) = &cfg.optimizer_sweep {
        let init_index = cfg.model.joints.iter().position(|&j| j == sweep.joint).unwrap_or(cfg.model.joints.len()) as u64;
        let mut c = 0u64;
        for opt in &sweep.optimizers {
            for sched in &sweep.schedules {
                let mut e = entry(format!("sweep-{}-{}", opt.name(), sched.name()), ModelRole::Sweep, sweep.joint);
                e.optimizer = Some(opt.name().into());
                e.schedule = Some(sched.name().into());
                out.push(Planned {
                    entry: e,
                    train: TrainConfig {
                        optimizer: *opt,
                        schedule: sched.rescaled(cfg.train.epochs),
                        ..cfg.train.clone()
                    },
                    augment: cfg.augment.clone(),
                    init: [2, init_index],
                    stream: [7, c],
                });
                c += 1;
            }
        }
    }
    out
}

/// Dataset as stored in a run directory.
#[derive(Debug, Clone)]
pub struct RunData {
    pub vocabulary: Vocabulary,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub external_text: Option<Vec<LabelSequence>>,
}

impl RunData {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split {name}"))),
        }
    }
}

fn root_stream(cfg: &ExperimentConfig) -> RandomStream {
    RandomStream::new(cfg.experiment.seed, 0)
}

/// Generates the synthetic task and writes it into the run directory.
pub fn stage_generate(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<()> {
    layout.create()?;
    let rng = root_stream(cfg).derive(1);
    let (data, external) = match &cfg.domain_shift {
        Some(shift) => {
            let f = generate_fusion_task(&cfg.task, shift, &rng)?;
            (f.data, Some(f.external_text))
        }
        None => (generate_synthetic_task(&cfg.task, &rng)?, None),
    };
    write_json(&layout.vocabulary(), &data.vocabulary)?;
    for (name, utts) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        write_split(&layout.data(), name, utts, &data.vocabulary)?;
    }
    match external {
        Some(text) => write_text(&layout.external_text(), &text, &data.vocabulary)?,
        None => {
            if layout.external_text().exists() {
                fs::remove_file(layout.external_text())?;
            }
        }
    }
    Ok(())
}

pub fn load_data(layout: &RunLayout) -> Result<RunData> {
    let vocabulary: Vocabulary = read_json::<Vocabulary>(&layout.vocabulary())?.reindexed()?;
    let dir = layout.data();
    let external_text = if layout.external_text().exists() {
        Some(read_text(&layout.external_text(), &vocabulary)?)
    } else {
        None
    };
    Ok(RunData {
        train: read_split(&dir, "train", &vocabulary)?,
        dev: read_split(&dir, "dev", &vocabulary)?,
        test: read_split(&dir, "test", &vocabulary)?,
        vocabulary,
        external_text,
    })
}

/// Greedy word error rate, used for per-epoch monitoring.
pub fn greedy_wer(model: &Transducer, utts: &[Utterance], vocab: &Vocabulary) -> Result<EditCounts> {
    let hyps = utts
        .par_iter()
        .map(|u| {
            let s = model.session(&u.features, u.aux.as_deref())?;
            let out = greedy_decode(&s, u.frames().max(1));
            Ok(vocab.decode(out.labels.labels()))
        })
        .collect::<Result<Vec<String>>>()?;
    let refs: Vec<String> = utts.iter().map(|u| vocab.decode(u.labels.labels())).collect();
    Ok(compute_wer(hyps.iter().map(String::as_str).zip(refs.iter().map(String::as_str))))
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for m in metrics {
        let line = serde_json::to_string(m).map_err(|e| Error::Ingest(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Ingest(format!("{}: {e}", path.display()))))
        .collect()
}

/// Loads an existing checkpoint when training is disabled, otherwise trains
/// with `train` from a fresh model.
fn train_or_load<M: Checkpointable>(layout: &RunLayout, entry: &mut ModelEntry, epochs: usize, fresh: impl FnOnce() -> Result<(M, Vec<EpochMetrics>, Option<Error>)>) -> Result<()> {
    let ckpt = layout.checkpoint(&entry.name);
    if epochs == 0 && ckpt.exists() {
        load_checkpoint::<M>(&ckpt)?;
        log::info!("{}: epochs = 0, keeping existing checkpoint", entry.name);
        return Ok(());
    }
    let (model, metrics, abort) = fresh()?;
    if let Some(e) = &abort {
        log::warn!("{}: training aborted: {e}", entry.name);
    }
    entry.aborted = abort.map(|e| e.to_string());
    save_checkpoint(&ckpt, &model)?;
    write_metrics(&layout.metrics(&entry.name), &metrics)
}

/// Trains every transducer of the experiment and, for domain-shift runs,
/// the source and external LMs.
pub fn stage_train(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Vec<ModelEntry>> {
    layout.create()?;
    let data = load_data(layout)?;
    let root = root_stream(cfg);
    let mut manifest = Vec::new();
    let mut replicas: BTreeMap<String, Vec<Utterance>> = BTreeMap::new();
    for plan in plan_transducers(cfg) {
        let mut entry = plan.entry.clone();
        let key = serde_json::to_string(&plan.augment.perturbations).map_err(|e| Error::Config(e.to_string()))?;
        if !replicas.contains_key(&key) {
            replicas.insert(key.clone(), replica_expand(&data.train, &plan.augment.perturbations)?);
        }
        let train = &replicas[&key];
        let joint = entry.joint.expect("transducers have a joint");
        train_or_load::<Transducer>(layout, &mut entry, plan.train.epochs, || {
            log::info!("training {} on {} utterances", plan.entry.name, train.len());
            let model = Transducer::new(cfg.model.transducer(joint, &cfg.task), &mut root.derive_path(&plan.init))?;
            let out = train_transducer(model, train, &plan.train, &plan.augment, &root.derive_path(&plan.stream), |m, _| {
                Ok(Some(greedy_wer(m, &data.dev, &data.vocabulary)?.rate()))
            })?;
            Ok((out.model, out.metrics, out.abort))
        })?;
        manifest.push(entry);
    }
    if cfg.has_lms() {
        let external = data
            .external_text
            .as_ref()
            .ok_or_else(|| Error::Ingest("domain-shift run without external text; run generate first".into()))?;
        let source: Vec<LabelSequence> = data.train.iter().map(|u| u.labels.clone()).collect();
        for (i, (name, role, texts)) in [("source_lm", ModelRole::SourceLm, &source), ("external_lm", ModelRole::ExternalLm, external)].into_iter().enumerate() {
            let mut entry = ModelEntry {
                name: name.into(),
                role,
                joint: None,
                ablation: None,
                optimizer: Some(cfg.lm.train.optimizer.name().into()),
                schedule: Some(cfg.lm.train.schedule.name().into()),
                aborted: None,
            };
            train_or_load::<CharLm>(layout, &mut entry, cfg.lm.train.epochs, || {
                log::info!("training {name} on {} sentences", texts.len());
                let lm = CharLm::new(cfg.lm.lm_config(data.vocabulary.len()), &mut root.derive_path(&[4, i as u64]))?;
                let out = train_lm(lm, texts, &cfg.lm.train, cfg.lm.dropconnect, &root.derive_path(&[5, i as u64]))?;
                Ok((out.model, out.metrics, out.abort))
            })?;
            manifest.push(entry);
        }
    }
    write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(layout: &RunLayout) -> Result<Vec<ModelEntry>> {
    read_json(&layout.manifest())
}

fn beam_records(model: &Transducer, utts: &[Utterance], beam: &BeamConfig, vocab: &Vocabulary) -> Result<Vec<NBestRecord>> {
    let lists = utts
        .par_iter()
        .map(|u| -> Result<Vec<Hypothesis>> {
            let s = model.session(&u.features, u.aux.as_deref())?;
            match alsd_beam(&s, beam, None) {
                Ok(n) => Ok(n.hypotheses),
                Err(Error::NoCompleteHypothesis { .. }) => {
                    log::warn!("{}: beam search found no complete hypothesis, using greedy output", u.id);
                    let g = greedy_decode(&s, u.frames().max(1));
                    Ok(vec![Hypothesis {
                        alignment_length: s.frames() + g.labels.len(),
                        labels: g.labels.labels().to_vec(),
                        score: g.score,
                        components: Default::default(),
                    }])
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (u, list) in utts.iter().zip(lists) {
        for (r, h) in list.into_iter().enumerate() {
            out.push(NBestRecord {
                utt_id: u.id.clone(),
                rank: r + 1,
                text: vocab.decode(&h.labels),
                alignment_length: h.alignment_length,
                transducer: h.components.transducer,
                source_lm: h.components.source_lm,
                external_lm: h.components.external_lm,
                score: h.score,
            });
        }
    }
    Ok(out)
}

/// Beam-decodes dev and test with every trained transducer, without LMs.
pub fn stage_decode(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<()> {
    let data = load_data(layout)?;
    for entry in read_manifest(layout)?.iter().filter(|e| e.is_transducer()) {
        let model: Transducer = load_checkpoint(&layout.checkpoint(&entry.name))?;
        for split in SPLITS {
            let records = beam_records(&model, data.split(split)?, &cfg.decode, &data.vocabulary)?;
            write_nbest(&layout.raw_nbest(&entry.name, split), &records)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    NoLm,
    ShallowFusion,
    DensityRatio,
    Combination,
    CombinationDensityRatio,
}

impl ConditionKind {
    pub fn label(self) -> &'static str {
        match self {
            ConditionKind::NoLm => "No external LM",
            ConditionKind::ShallowFusion => "Shallow fusion",
            ConditionKind::DensityRatio => "Density ratio fusion",
            ConditionKind::Combination => "Comb.",
            ConditionKind::CombinationDensityRatio => "Comb. + density ratio",
        }
    }
}

/// A decode condition with the weights chosen on dev.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub name: String,
    pub kind: ConditionKind,
    pub models: Vec<String>,
    pub weights: CombinationWeights,
    pub dev_tuning_wer: f64,
}

fn candidate_lists(records: &[NBestRecord], utts: &[Utterance], vocab: &Vocabulary) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut by_id: BTreeMap<&str, Vec<(usize, Vec<usize>)>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.utt_id.as_str()).or_default().push((r.rank, vocab.encode(&r.text)?.labels().to_vec()));
    }
    Ok(utts
        .iter()
        .map(|u| {
            let mut v = by_id.remove(u.id.as_str()).unwrap_or_default();
            v.sort_by_key(|(r, _)| *r);
            v.into_iter().map(|(_, y)| y).collect()
        })
        .collect())
}

struct Scorers<'a> {
    session_a: Vec<TransducerSession<'a>>,
    session_b: Option<Vec<TransducerSession<'a>>>,
}

fn sessions<'a>(model: &'a Transducer, utts: &[Utterance]) -> Result<Vec<TransducerSession<'a>>> {
    utts.par_iter().map(|u| model.session(&u.features, u.aux.as_deref())).collect()
}

/// Scores every candidate with all models and LMs so that tuning can reuse
/// the cached components.
fn score_candidates(
    scorers: &Scorers<'_>,
    lists_a: &[Vec<Vec<usize>>],
    lists_b: Option<&[Vec<Vec<usize>>]>,
    lms: (Option<&CharLm>, Option<&CharLm>),
    utts: &[Utterance],
) -> Vec<TuneUtterance> {
    (0..utts.len())
        .into_par_iter()
        .map(|i| {
            let sa = &scorers.session_a[i];
            let fa = |y: &LabelSequence| crate::decoder::sequence_log_prob(sa, y);
            let none = |_: &LabelSequence| -> Result<f64> { Ok(0.0) };
            let sb = scorers.session_b.as_ref().map(|s| &s[i]);
            let fb = |y: &LabelSequence| match sb {
                Some(s) => crate::decoder::sequence_log_prob(s, y),
                None => Ok(0.0),
            };
            let models = RescoreModels {
                model_a: &fa,
                model_b: if sb.is_some() { &fb } else { &none },
                source_lm: lms.0.map(|m| m as &dyn SequenceScorer),
                external_lm: lms.1.map(|m| m as &dyn SequenceScorer),
            };
            let all = CombinationWeights {
                alpha: 1.0,
                beta: if sb.is_some() { 1.0 } else { 0.0 },
                fusion: FusionWeights { mu: 1.0, lambda: 1.0, rho: 1.0 },
            };
            let union = crate::fusion::hypothesis_union(
                lists_a[i].iter().map(Vec::as_slice),
                lists_b.map(|b| b[i].iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap_or_default(),
            );
            TuneUtterance {
                candidates: cross_score(&union, &models, &all),
                reference: utts[i].labels.labels().to_vec(),
            }
        })
        .collect()
}

/// `frames[i]` is utterance `i`'s encoder length; a completed alignment
/// holds one blank per encoder frame plus one symbol per label.
fn ranked_records(utts: &[Utterance], scored: &[TuneUtterance], frames: &[usize], w: &CombinationWeights, vocab: &Vocabulary) -> Vec<NBestRecord> {
    let mut out = Vec::new();
    for ((u, t), &f) in utts.iter().zip(scored).zip(frames) {
        for (r, h) in rank(&t.candidates, w).into_iter().enumerate() {
            let c: CombinedComponents = h.components;
            let transducer = w.alpha * c.model_a + if w.beta != 0.0 { w.beta * c.model_b } else { 0.0 };
            out.push(NBestRecord {
                utt_id: u.id.clone(),
                rank: r + 1,
                text: vocab.decode(&h.labels),
                alignment_length: f + h.labels.len(),
                transducer,
                source_lm: c.source_lm,
                external_lm: c.external_lm,
                score: h.score,
            });
        }
    }
    out
}

fn word_error_fn(vocab: &Vocabulary) -> impl Fn(&[usize], &[usize]) -> (usize, usize) + '_ {
    move |h, r| {
        let c = word_errors(&vocab.decode(h), &vocab.decode(r));
        (c.errors(), c.reference_length)
    }
}

fn zero_grid(alpha: f64, beta: f64) -> WeightGrid {
    WeightGrid {
        alpha: vec![alpha],
        beta: vec![beta],
        mu: vec![0.0],
        lambda: vec![0.0],
        rho: vec![0.0],
    }
}

/// Tunes every decode condition on dev and writes rescored dev and test
/// n-best lists.
pub fn stage_rescore(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Vec<ConditionSpec>> {
    let data = load_data(layout)?;
    let manifest = read_manifest(layout)?;
    let load_lm = |role: ModelRole| -> Result<Option<CharLm>> {
        match manifest.iter().find(|e| e.role == role) {
            Some(e) => Ok(Some(load_checkpoint(&layout.checkpoint(&e.name))?)),
            None => Ok(None),
        }
    };
    let (source_lm, external_lm) = (load_lm(ModelRole::SourceLm)?, load_lm(ModelRole::ExternalLm)?);
    let with_lms = cfg.has_lms() && source_lm.is_some() && external_lm.is_some();
    let transducers: Vec<&ModelEntry> = manifest.iter().filter(|e| e.is_transducer()).collect();
    let models: BTreeMap<&str, Transducer> =
        transducers.iter().map(|e| Ok((e.name.as_str(), load_checkpoint(&layout.checkpoint(&e.name))?))).collect::<Result<_>>()?;
    let errors = word_error_fn(&data.vocabulary);

    let mut plans: Vec<(String, ConditionKind, Vec<String>, WeightGrid)> = Vec::new();
    for e in &transducers {
        plans.push((format!("{}.no_lm", e.name), ConditionKind::NoLm, vec![e.name.clone()], zero_grid(1.0, 0.0)));
        if e.role == ModelRole::Main && with_lms {
            plans.push((format!("{}.shallow", e.name), ConditionKind::ShallowFusion, vec![e.name.clone()], cfg.fusion.shallow.clone()));
            plans.push((format!("{}.density_ratio", e.name), ConditionKind::DensityRatio, vec![e.name.clone()], cfg.fusion.density_ratio.clone()));
        }
    }
    let mains: Vec<String> = transducers.iter().filter(|e| e.role == ModelRole::Main).map(|e| e.name.clone()).collect();
    if mains.len() >= 2 {
        let pair = vec![mains[0].clone(), mains[1].clone()];
        let g = &cfg.fusion.combination;
        plans.push(("combination.no_lm".into(), ConditionKind::Combination, pair.clone(), WeightGrid { mu: vec![0.0], lambda: vec![0.0], rho: vec![0.0], ..g.clone() }));
        if with_lms {
            plans.push(("combination.density_ratio".into(), ConditionKind::CombinationDensityRatio, pair, g.clone()));
        }
    }

    let mut specs = Vec::new();
    // Cached components per (model set, split).
    let mut cache: BTreeMap<(Vec<String>, &str), (Vec<TuneUtterance>, Vec<usize>)> = BTreeMap::new();
    for (name, kind, names, grid) in plans {
        for split in SPLITS {
            let key = (names.clone(), split);
            if cache.contains_key(&key) {
                continue;
            }
            let utts = data.split(split)?;
            let raw_a = read_nbest(&layout.raw_nbest(&names[0], split))?;
            let lists_a = candidate_lists(&raw_a, utts, &data.vocabulary)?;
            let lists_b = match names.get(1) {
                Some(b) => Some(candidate_lists(&read_nbest(&layout.raw_nbest(b, split))?, utts, &data.vocabulary)?),
                None => None,
            };
            let scorers = Scorers {
                session_a: sessions(&models[names[0].as_str()], utts)?,
                session_b: match names.get(1) {
                    Some(b) => Some(sessions(&models[b.as_str()], utts)?),
                    None => None,
                },
            };
            let lms = if with_lms { (source_lm.as_ref(), external_lm.as_ref()) } else { (None, None) };
            let scored = score_candidates(&scorers, &lists_a, lists_b.as_deref(), lms, utts);
            let frames = scorers.session_a.iter().map(StepScorer::frames).collect();
            cache.insert(key, (scored, frames));
        }
        let dev = &cache[&(names.clone(), "dev")].0;
        let tuned = crate::fusion::tune_weights(dev, &grid, &errors)?;
        log::info!("{name}: weights {:?}, dev WER {:.4}", tuned.weights, tuned.error_rate);
        for split in SPLITS {
            let (scored, frames) = &cache[&(names.clone(), split)];
            let records = ranked_records(data.split(split)?, scored, frames, &tuned.weights, &data.vocabulary);
            write_nbest(&layout.nbest(&name, split), &records)?;
        }
        specs.push(ConditionSpec {
            name,
            kind,
            models: names,
            weights: tuned.weights,
            dev_tuning_wer: tuned.error_rate,
        });
    }
    write_json(&layout.tuning(), &specs)?;
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerRecord {
    /// Relative to the run directory.
    pub nbest_file: String,
    pub counts: EditCounts,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub spec: ConditionSpec,
    pub dev: WerRecord,
    pub test: WerRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub entry: ModelEntry,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub model: String,
    pub dev_wer: f64,
    pub test_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub optimizer: String,
    pub schedule: String,
    pub model: String,
    pub dev_wer: f64,
    pub test_wer: f64,
    pub final_train_nll_per_label: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub models: Vec<ModelRecord>,
    pub conditions: Vec<ConditionResult>,
    pub ablations: Vec<AblationRow>,
    pub sweep: Vec<SweepRow>,
}

impl ExperimentReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.spec.name == name)
    }

    pub fn model(&self, name: &str) -> Option<&ModelRecord> {
        self.models.iter().find(|m| m.entry.name == name)
    }
}

/// Word errors of the rank-1 hypotheses in an n-best file against a
/// transcript file. Utterances without a hypothesis count as empty output.
pub fn score_nbest_file(nbest: &Path, transcripts: &Path) -> Result<EditCounts> {
    let records = read_nbest(nbest)?;
    let refs = read_transcripts(transcripts)?;
    let hyps: BTreeMap<&str, &str> = crate::workbench::nbest::one_best(&records).into_iter().collect();
    Ok(compute_wer(refs.iter().map(|(id, r)| (hyps.get(id.as_str()).copied().unwrap_or(""), r.as_str()))))
}

fn wer_record(layout: &RunLayout, condition: &str, split: &str) -> Result<WerRecord> {
    let path = layout.nbest(condition, split);
    let counts = score_nbest_file(&path, &layout.transcripts(split))?;
    let rel = path.strip_prefix(layout.root()).unwrap_or(&path).to_string_lossy().into_owned();
    Ok(WerRecord {
        nbest_file: rel,
        wer: counts.rate(),
        counts,
    })
}

fn model_records(layout: &RunLayout) -> Vec<ModelRecord> {
    read_manifest(layout)
        .unwrap_or_default()
        .into_iter()
        .map(|entry| ModelRecord {
            metrics: read_metrics(&layout.metrics(&entry.name)).unwrap_or_default(),
            entry,
        })
        .collect()
}

fn empty_report(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(ExperimentReport {
        name: cfg.experiment.name.clone(),
        seed: cfg.experiment.seed,
        config_fingerprint: fingerprint(cfg)?,
        status: RunStatus::Completed,
        failed_stage: None,
        error: None,
        models: Vec::new(),
        conditions: Vec::new(),
        ablations: Vec::new(),
        sweep: Vec::new(),
    })
}

/// Scores every tuned condition from the stored files and writes the report.
pub fn stage_score(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<ExperimentReport> {
    let specs: Vec<ConditionSpec> = read_json(&layout.tuning())?;
    let mut report = empty_report(cfg)?;
    report.models = model_records(layout);
    for spec in specs {
        let dev = wer_record(layout, &spec.name, "dev")?;
        let test = wer_record(layout, &spec.name, "test")?;
        report.conditions.push(ConditionResult { spec, dev, test });
    }
    let no_lm = |model: &str| report.condition(&format!("{model}.no_lm")).map(|c| (c.dev.wer, c.test.wer));
    let mut ablations = Vec::new();
    if !cfg.ablations.is_empty() {
        let base = joint_name(cfg.model.joints[0]);
        if let Some((d, t)) = no_lm(base) {
            ablations.push(AblationRow {
                name: "baseline".into(),
                model: base.into(),
                dev_wer: d,
                test_wer: t,
            });
        }
    }
    let mut sweep = Vec::new();
    for m in &report.models {
        match m.entry.role {
            ModelRole::Ablation => {
                if let Some((d, t)) = no_lm(&m.entry.name) {
                    ablations.push(AblationRow {
                        name: m.entry.ablation.clone().unwrap_or_default(),
                        model: m.entry.name.clone(),
                        dev_wer: d,
                        test_wer: t,
                    });
                }
            }
            ModelRole::Sweep => {
                if let Some((d, t)) = no_lm(&m.entry.name) {
                    sweep.push(SweepRow {
                        optimizer: m.entry.optimizer.clone().unwrap_or_default(),
                        schedule: m.entry.schedule.clone().unwrap_or_default(),
                        model: m.entry.name.clone(),
                        dev_wer: d,
                        test_wer: t,
                        final_train_nll_per_label: m.metrics.last().map(|x| x.train_nll_per_label),
                    });
                }
            }
            _ => {}
        }
    }
    report.ablations = ablations;
    report.sweep = sweep;
    write_json(&layout.report(), &report)?;
    Ok(report)
}

pub fn read_report(layout: &RunLayout) -> Result<ExperimentReport> {
    read_json(&layout.report())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub checked: usize,
    pub mismatches: Vec<String>,
}

/// Recomputes every WER in the report from the stored n-best and transcript
/// files.
pub fn verify(layout: &RunLayout) -> Result<VerifyOutcome> {
    let report = read_report(layout)?;
    let mut out = VerifyOutcome {
        checked: 0,
        mismatches: Vec::new(),
    };
    for c in &report.conditions {
        for (split, rec) in [("dev", &c.dev), ("test", &c.test)] {
            let counts = score_nbest_file(&layout.root().join(&rec.nbest_file), &layout.transcripts(split))?;
            out.checked += 1;
            if counts != rec.counts || counts.rate() != rec.wer {
                out.mismatches.push(format!("{} {split}: report {:?} ({}), recomputed {:?} ({})", c.spec.name, rec.counts, rec.wer, counts, counts.rate()));
            }
        }
    }
    Ok(out)
}

pub const STAGES: [&str; 5] = ["generate", "train", "decode", "rescore", "score"];

/// Runs every stage. A failing stage yields a report with `status = failed`
/// naming the stage; configuration errors are returned directly.
pub fn run_experiment(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<ExperimentReport> {
    cfg.validate()?;
    layout.create()?;
    fs::write(layout.config(), cfg.to_toml()?)?;
    let result = (|| -> std::result::Result<ExperimentReport, (&'static str, Error)> {
        stage_generate(cfg, layout).map_err(|e| ("generate", e))?;
        stage_train(cfg, layout).map_err(|e| ("train", e))?;
        stage_decode(cfg, layout).map_err(|e| ("decode", e))?;
        stage_rescore(cfg, layout).map_err(|e| ("rescore", e))?;
        stage_score(cfg, layout).map_err(|e| ("score", e))
    })();
    match result {
        Ok(r) => Ok(r),
        Err((stage, e)) => {
            log::error!("stage {stage} failed: {e}");
            let mut report = empty_report(cfg)?;
            report.status = RunStatus::Failed;
            report.failed_stage = Some(stage.into());
            report.error = Some(e.to_string());
            report.models = model_records(layout);
            write_json(&layout.report(), &report)?;
            Ok(report)
        }
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Plain-text result tables, one per report section.
pub fn render_report(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let w = &mut s;
    use std::fmt::Write as _;
    let _ = writeln!(w, "experiment {} (seed {}, config {})", r.name, r.seed, &r.config_fingerprint[..12.min(r.config_fingerprint.len())]);
    if r.status == RunStatus::Failed {
        let _ = writeln!(w, "FAILED in stage {}: {}", r.failed_stage.as_deref().unwrap_or("?"), r.error.as_deref().unwrap_or(""));
    }
    let _ = writeln!(w, "\nTraining");
    let _ = writeln!(w, "{:<36} {:>6} {:>12} {:>10} {:>10}", "model", "epochs", "nll/label", "best dev", "final dev");
    for m in &r.models {
        let best = m.metrics.iter().filter_map(|x| x.dev_wer).fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.min(v))));
        let last = m.metrics.last();
        let _ = writeln!(
            w,
            "{:<36} {:>6} {:>12} {:>10} {:>10}{}",
            m.entry.name,
            m.metrics.len(),
            last.map_or("-".into(), |x| format!("{:.4}", x.train_nll_per_label)),
            best.map_or("-".into(), pct),
            last.and_then(|x| x.dev_wer).map_or("-".into(), pct),
            m.entry.aborted.as_ref().map_or(String::new(), |a| format!("  aborted: {a}"))
        );
    }
    if !r.conditions.is_empty() {
        let _ = writeln!(w, "\nDecoding (WER %)");
        let _ = writeln!(w, "{:<36} {:<24} {:>8} {:>8}  weights", "condition", "", "dev", "test");
        for c in &r.conditions {
            let k = &c.spec.weights;
            let _ = writeln!(
                w,
                "{:<36} {:<24} {:>8} {:>8}  alpha={} beta={} mu={} lambda={} rho={}",
                c.spec.name,
                c.spec.kind.label(),
                pct(c.dev.wer),
                pct(c.test.wer),
                k.alpha,
                k.beta,
                k.fusion.mu,
                k.fusion.lambda,
                k.fusion.rho
            );
        }
    }
    if !r.ablations.is_empty() {
        let _ = writeln!(w, "\nAblations (WER %)");
        for a in &r.ablations {
            let _ = writeln!(w, "{:<36} {:>8} {:>8}", a.name, pct(a.dev_wer), pct(a.test_wer));
        }
    }
    if !r.sweep.is_empty() {
        let _ = writeln!(w, "\nOptimizer sweep (WER %)");
        let _ = writeln!(w, "{:<14} {:<12} {:>8} {:>8}", "optimizer", "schedule", "dev", "test");
        for x in &r.sweep {
            let _ = writeln!(w, "{:<14} {:<12} {:>8} {:>8}", x.optimizer, x.schedule, pct(x.dev_wer), pct(x.test_wer));
        }
    }
    s
}
