use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{CorpusEntry, ImageCorpus};
use super::metrics::{ImageScore, MetricsReport, Phase};
use super::synth::{synth_corpus, SynthProfile};
use super::transform_images;
use crate::detector::{train_detector, BlackBoxScorer, DetectorModel, Variant};
use crate::image::{to_batch, PixelImage};
use crate::losses::{perceptual_distance, PerceptualNet};
use crate::model::{ArchSpec, HNetParams};
use crate::training::{StepMetrics, TrainConfig, Trainer};
use crate::Label;

pub const AFTER_NOTE: &str = "accuracy over natural and transformed-CG images";
pub const BEFORE_NOTE: &str = "accuracy over natural and original CG images";
/// Minimum drop in detection rate, in absolute terms, expected without a flag.
pub const EVASION_MARGIN: f64 = 0.20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub tag: String,
    pub hnet_corpus: u32,
    pub detector_corpus: u32,
    pub eval_corpus: u32,
}

impl ScenarioSpec {
    /// Attacker knows the detector's training data.
    pub fn scenario1() -> Self {
        ScenarioSpec { tag: "1".into(), hnet_corpus: 1, detector_corpus: 1, eval_corpus: 1 }
    }

    /// H-Net and detector trained on different corpora.
    pub fn scenario2_1() -> Self {
        ScenarioSpec { tag: "2.1".into(), hnet_corpus: 2, detector_corpus: 1, eval_corpus: 1 }
    }

    /// Scenario 2.1 with the corpora swapped.
    pub fn scenario2_2() -> Self {
        ScenarioSpec { tag: "2.2".into(), hnet_corpus: 1, detector_corpus: 2, eval_corpus: 2 }
    }

    pub fn by_tag(tag: &str) -> Option<Self> {
        match tag {
            "1" => Some(Self::scenario1()),
            "2.1" => Some(Self::scenario2_1()),
            "2.2" => Some(Self::scenario2_2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let shared = self.hnet_corpus == self.detector_corpus;
        match (self.tag.as_str(), shared) {
            ("1", false) => Err(ScenarioError::new("spec", "scenario 1 trains H-Net and detector on the same corpus")),
            ("1", true) | (_, false) => Ok(()),
            (_, true) => Err(ScenarioError::new("spec", "scenario 2 needs disjoint H-Net and detector corpora")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub train: TrainConfig,
    pub train_per_class: usize,
    pub detector_per_class: usize,
    pub eval_per_class: usize,
    pub corpus_seed: u64,
    pub detector_seed: u64,
    pub perceptual_seed: u64,
    /// Detector H-Net trains against.
    pub adversary: Variant,
    /// Detectors reported before and after. The first is the headline one and
    /// defaults to the adversary; the rest measure transfer.
    pub evaluators: Vec<Variant>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            train: TrainConfig::default(),
            train_per_class: 400,
            detector_per_class: 400,
            eval_per_class: 100,
            corpus_seed: 2024,
            detector_seed: 11,
            perceptual_seed: 7,
            adversary: Variant::Mlp,
            evaluators: vec![Variant::Mlp, Variant::Flda],
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("scenario stage {stage}: {message}")]
pub struct ScenarioError {
    pub stage: &'static str,
    pub message: String,
}

impl ScenarioError {
    fn new(stage: &'static str, message: impl ToString) -> Self {
        ScenarioError { stage, message: message.to_string() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Natural and CG images of one synthetic dataset split. Image `i` depends only
/// on `(id, split, label, i)`, so smaller counts give prefixes of larger ones.
pub fn dataset_split(id: u32, split: Split, per_class: usize, size: usize, base_seed: u64) -> ImageCorpus {
    let profile = SynthProfile::dataset(id);
    let seed = base_seed ^ ((id as u64) << 32) ^ if split == Split::Eval { 0x5EED_0E7A } else { 0x5EED_7A11 };
    synth_corpus(&profile, Label::Natural, per_class, size, seed).merge(synth_corpus(
        &profile,
        Label::Cg,
        per_class,
        size,
        seed,
    ))
}

/// Mean perceptual distance of each transform to its source, and between
/// random distinct pairs of source images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityProxy {
    pub transform_distance: f64,
    pub random_pair_distance: f64,
}

pub struct ScenarioOutcome {
    pub spec: ScenarioSpec,
    pub reports: Vec<MetricsReport>,
    pub params: HNetParams<f32>,
    pub log: Vec<StepMetrics>,
    pub transformed: Vec<CorpusEntry>,
    pub proxy: IdentityProxy,
    pub flags: Vec<String>,
    pub adversary_hash_before: String,
    pub adversary_hash_after: String,
}

impl ScenarioOutcome {
    pub fn report(&self, detector: Variant, phase: Phase) -> Option<&MetricsReport> {
        let name = detector.to_string();
        self.reports.iter().find(|r| r.detector == name && r.phase == phase)
    }
}

fn score_all(
    detector: &DetectorModel,
    items: impl IntoIterator<Item = (String, Label, PixelImage)>,
) -> Result<Vec<ImageScore>, ScenarioError> {
    items
        .into_iter()
        .map(|(id, label, image)| {
            let score = detector.score(&image).map_err(|e| ScenarioError::new("evaluate", e))?;
            Ok(ImageScore { id, label, score, predicted: detector.decide(score) })
        })
        .collect()
}

fn hash_bytes(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

fn identity_proxy(
    net: &PerceptualNet<f32>,
    sources: &[PixelImage],
    outputs: &[PixelImage],
    seed: u64,
) -> Result<IdentityProxy, ScenarioError> {
    let err = |e| ScenarioError::new("identity-proxy", e);
    let dist = |a: &PixelImage, b: &PixelImage| -> Result<f64, ScenarioError> {
        perceptual_distance(net, &to_batch::<f32>(&[a]).map_err(err)?, &to_batch::<f32>(&[b]).map_err(err)?)
            .map_err(err)
    };
    let n = sources.len();
    let mut transform = 0.0;
    for (s, o) in sources.iter().zip(outputs) {
        transform += dist(s, o)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = 100;
    let mut random = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        random += dist(&sources[i], &sources[j])?;
    }
    Ok(IdentityProxy { transform_distance: transform / n as f64, random_pair_distance: random / pairs as f64 })
}

/// Train the detectors, train H-Net against the adversary, then score the
/// held-out CG images before and after transformation.
pub fn run_scenario(
    spec: &ScenarioSpec,
    config: &ScenarioConfig,
    mut on_metrics: impl FnMut(&StepMetrics),
) -> Result<ScenarioOutcome, ScenarioError> {
    spec.validate()?;
    let size = config.train.input_size;
    if config.eval_per_class < 2 || config.train_per_class == 0 || config.detector_per_class == 0 {
        return Err(ScenarioError::new(
            "spec",
            "corpus sizes must be positive (evaluation needs at least 2 per class)",
        ));
    }
    let det_corpus =
        dataset_split(spec.detector_corpus, Split::Train, config.detector_per_class, size, config.corpus_seed);
    let hnet_corpus = dataset_split(spec.hnet_corpus, Split::Train, config.train_per_class, size, config.corpus_seed);
    let eval_corpus = dataset_split(spec.eval_corpus, Split::Eval, config.eval_per_class, size, config.corpus_seed);

    let train_det = |v: Variant| {
        train_detector(v, &det_corpus.images(Label::Natural), &det_corpus.images(Label::Cg), config.detector_seed)
            .map_err(|e| ScenarioError::new("train-detector", e))
    };
    let adversary = train_det(config.adversary)?;
    let adversary_hash_before = hash_bytes(&adversary.to_bytes());
    let mut evaluators = Vec::new();
    for &v in &config.evaluators {
        evaluators.push(if v == config.adversary { adversary.clone() } else { train_det(v)? });
    }

    let perceptual = PerceptualNet::seeded(config.perceptual_seed);
    let arch = ArchSpec::with_size(size);
    let params = HNetParams::init(&arch, config.train.seed).map_err(|e| ScenarioError::new("init", e))?;
    let mut trainer = Trainer::new(
        params,
        config.train.clone(),
        hnet_corpus.images(Label::Natural),
        hnet_corpus.images(Label::Cg),
        &adversary,
        &perceptual,
    )
    .map_err(|e| ScenarioError::new("train-hnet", e))?;
    let mut log = Vec::new();
    let total = config.train.total_iterations();
    trainer
        .run(None, None, |m| {
            if m.step == 4 && (m.iteration + 1) % 50 == 0 {
                log::info!(
                    "scenario {}: iteration {}/{total}, step-4 L_VGG {:.4} L_Adv {:.3}",
                    spec.tag,
                    m.iteration + 1,
                    m.l_vgg.unwrap_or(f64::NAN),
                    m.l_adv.unwrap_or(f64::NAN)
                );
            }
            on_metrics(m);
            log.push(m.clone());
            Ok(())
        })
        .map_err(|e| ScenarioError::new("train-hnet", e))?;
    let params = trainer.params;
    let adversary_hash_after = hash_bytes(&adversary.to_bytes());

    let cg: Vec<&CorpusEntry> = eval_corpus.entries.iter().filter(|e| e.label == Label::Cg).collect();
    let natural: Vec<&CorpusEntry> = eval_corpus.entries.iter().filter(|e| e.label == Label::Natural).collect();
    let cg_images: Vec<PixelImage> = cg.iter().map(|e| e.image.clone()).collect();
    let outputs = transform_images(&params, &cg_images).map_err(|e| ScenarioError::new("transform", e))?;
    let transformed: Vec<CorpusEntry> = cg
        .iter()
        .zip(&outputs)
        .map(|(e, o)| CorpusEntry { id: e.id.clone(), label: Label::Cg, image: o.clone() })
        .collect();

    let mut reports = Vec::new();
    let mut flags = Vec::new();
    for det in &evaluators {
        let name = det.variant().to_string();
        let nat = score_all(det, natural.iter().map(|e| (e.id.clone(), e.label, e.image.clone())))?;
        let before_cg = score_all(det, cg.iter().map(|e| (e.id.clone(), e.label, e.image.clone())))?;
        let after_cg = score_all(det, transformed.iter().map(|e| (e.id.clone(), e.label, e.image.clone())))?;
        let report = |phase, note, cg_scores: Vec<ImageScore>| {
            MetricsReport::from_scores(&spec.tag, phase, &name, note, nat.iter().cloned().chain(cg_scores).collect())
                .map_err(|e| ScenarioError::new("metrics", e))
        };
        let before = report(Phase::Before, BEFORE_NOTE, before_cg)?;
        let after = report(Phase::After, AFTER_NOTE, after_cg)?;
        if spec.tag != "1" && before.detection_rate - after.detection_rate < EVASION_MARGIN {
            let kind =
                if after.detection_rate > before.detection_rate { "detection_rose" } else { "evasion_shortfall" };
            let flag = format!(
                "{kind}: {name} detection rate {:.4} before, {:.4} after",
                before.detection_rate, after.detection_rate
            );
            log::warn!("scenario {}: {flag}", spec.tag);
            flags.push(flag);
        }
        reports.push(before);
        reports.push(after);
    }
    let proxy = identity_proxy(&perceptual, &cg_images, &outputs, config.corpus_seed)?;
    Ok(ScenarioOutcome {
        spec: spec.clone(),
        reports,
        params,
        log,
        transformed,
        proxy,
        flags,
        adversary_hash_before,
        adversary_hash_after,
    })
}
