//! Score-only natural-vs-CG detectors on differential-histogram features.

mod features;
mod flda;
mod mlp;

use std::path::Path;

use naturalize_autodiff::{Tensor, TensorError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{FormatError, Reader, Writer};
use crate::image::PixelImage;
use crate::Label;

pub use features::{difference_histogram, extract_features, DiffHistFeatures, Direction, CENTRAL_BINS, FEATURE_LEN};
pub use flda::{Flda, RIDGE};
pub use mlp::{Mlp, HIDDEN, MAX_EPOCHS, PATIENCE};

pub const DTCT_MAGIC: &[u8; 4] = b"DTCT";
pub const DTCT_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("image {width}x{height} is smaller than 2x2")]
    ImageTooSmall { width: usize, height: usize },
    #[error("cannot train a detector without {0} images")]
    EmptyCorpus(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Opaque detector handle: a naturalness probability and nothing else.
pub trait BlackBoxScorer: Sync {
    fn score(&self, image: &PixelImage) -> Result<f64, DetectorError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mlp,
    Flda,
}

impl Variant {
    fn tag(self) -> u8 {
        match self {
            Variant::Mlp => 0,
            Variant::Flda => 1,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Mlp => "mlp",
            Variant::Flda => "flda",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlp" => Ok(Variant::Mlp),
            "flda" => Ok(Variant::Flda),
            other => Err(format!("unknown detector variant {other:?} (expected mlp or flda)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Classifier {
    Mlp(Mlp),
    Flda(Flda),
}

/// A trained, frozen detector. Instances only come from training or loading.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    mean: Vec<f64>,
    std: Vec<f64>,
    threshold: f64,
    classifier: Classifier,
}

impl DetectorModel {
    pub fn variant(&self) -> Variant {
        match self.classifier {
            Classifier::Mlp(_) => Variant::Mlp,
            Classifier::Flda(_) => Variant::Flda,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn flda(&self) -> Option<&Flda> {
        match &self.classifier {
            Classifier::Flda(f) => Some(f),
            Classifier::Mlp(_) => None,
        }
    }

    fn standardize(&self, f: &DiffHistFeatures) -> Vec<f64> {
        f.as_slice().iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn score_features(&self, f: &DiffHistFeatures) -> f64 {
        let z = self.standardize(f);
        match &self.classifier {
            Classifier::Mlp(m) => m.score(&z),
            Classifier::Flda(f) => f.score(&z),
        }
    }

    /// Natural iff `score >= threshold`.
    pub fn decide(&self, score: f64) -> Label {
        if score >= self.threshold {
            Label::Natural
        } else {
            Label::Cg
        }
    }

    pub fn classify(&self, image: &PixelImage) -> Result<Label, DetectorError> {
        Ok(self.decide(self.score(image)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DTCT_MAGIC, DTCT_VERSION);
        w.u8(self.variant().tag());
        w.f64(self.threshold);
        let vec = |v: &[f64]| Tensor::new([v.len()], v.to_vec()).expect("1-d tensor");
        let mut tensors = vec![vec(&self.mean), vec(&self.std)];
        match &self.classifier {
            Classifier::Mlp(m) => tensors.extend(m.params().into_iter().cloned()),
            Classifier::Flda(f) => {
                w.f64(f.midpoint);
                w.f64(f.slope);
                tensors.push(vec(&f.projection));
            }
        }
        w.tensors(&tensors);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(bytes, DTCT_MAGIC, DTCT_VERSION)?;
        let tag = r.u8()?;
        let threshold = r.f64()?;
        let flda_header = if tag == Variant::Flda.tag() { Some((r.f64()?, r.f64()?)) } else { None };
        if tag > 1 {
            return Err(FormatError::Malformed(format!("unknown detector variant byte {tag}")));
        }
        let tensors: Vec<Tensor<f64>> = r.tensors()?;
        r.finish()?;
        let expect = |i: usize, shape: &[usize]| -> Result<&Tensor<f64>, FormatError> {
            tensors
                .get(i)
                .filter(|t| t.shape() == shape)
                .ok_or_else(|| FormatError::Malformed(format!("tensor {i} missing or not shaped {shape:?}")))
        };
        let mean = expect(0, &[FEATURE_LEN])?.data().to_vec();
        let std = expect(1, &[FEATURE_LEN])?.data().to_vec();
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(FormatError::Malformed("feature scales must be positive".into()));
        }
        let (classifier, count) = match flda_header {
            Some((midpoint, slope)) => {
                let projection = expect(2, &[FEATURE_LEN])?.data().to_vec();
                (Classifier::Flda(Flda { projection, midpoint, slope }), 3)
            }
            None => {
                let m = Mlp {
                    w1: expect(2, &[HIDDEN, FEATURE_LEN])?.clone(),
                    b1: expect(3, &[HIDDEN])?.clone(),
                    w2: expect(4, &[1, HIDDEN])?.clone(),
                    b2: expect(5, &[1])?.clone(),
                };
                (Classifier::Mlp(m), 6)
            }
        };
        if tensors.len() != count {
            return Err(FormatError::Malformed(format!("expected {count} tensors, found {}", tensors.len())));
        }
        Ok(DetectorModel { mean, std, threshold, classifier })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl BlackBoxScorer for DetectorModel {
    fn score(&self, image: &PixelImage) -> Result<f64, DetectorError> {
        Ok(self.score_features(&extract_features(image)?))
    }
}

/// Features for many images, in input order.
pub fn extract_all(images: &[PixelImage]) -> Result<Vec<DiffHistFeatures>, DetectorError> {
    images.par_iter().map(extract_features).collect()
}

pub fn train_detector(
    variant: Variant,
    natural: &[PixelImage],
    cg: &[PixelImage],
    seed: u64,
) -> Result<DetectorModel, DetectorError> {
    train_on_features(variant, &extract_all(natural)?, &extract_all(cg)?, seed)
}

/// Standardizes with pooled statistics, then fits the chosen classifier.
/// Stored quantities are rounded to `f32` so checkpoints reload bit-exactly.
pub fn train_on_features(
    variant: Variant,
    natural: &[DiffHistFeatures],
    cg: &[DiffHistFeatures],
    seed: u64,
) -> Result<DetectorModel, DetectorError> {
    if natural.is_empty() {
        return Err(DetectorError::EmptyCorpus("natural"));
    }
    if cg.is_empty() {
        return Err(DetectorError::EmptyCorpus("CG"));
    }
    let all: Vec<&DiffHistFeatures> = natural.iter().chain(cg).collect();
    let n = all.len() as f64;
    let round = |v: f64| v as f32 as f64;
    let mean: Vec<f64> = (0..FEATURE_LEN).map(|i| round(all.iter().map(|f| f.0[i]).sum::<f64>() / n)).collect();
    let std: Vec<f64> = (0..FEATURE_LEN)
        .map(|i| {
            let var = all.iter().map(|f| (f.0[i] - mean[i]).powi(2)).sum::<f64>() / n;
            let s = round(var.sqrt());
            if s > 1e-12 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    let mut model =
        DetectorModel { mean, std, threshold: DEFAULT_THRESHOLD, classifier: Classifier::Flda(Flda::fit(&[], &[])) };
    let zn: Vec<Vec<f64>> = natural.iter().map(|f| model.standardize(f)).collect();
    let zc: Vec<Vec<f64>> = cg.iter().map(|f| model.standardize(f)).collect();
    model.classifier = match variant {
        Variant::Mlp => Classifier::Mlp(Mlp::train(&zn, &zc, seed)?),
        Variant::Flda => Classifier::Flda(Flda::fit(&zn, &zc)),
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(rng: &mut ChaCha8Rng, sigma: i32) -> PixelImage {
        PixelImage::from_fn(12, 12, |x, _| [(100 + x as i32 + rng.random_range(-sigma..=sigma)) as u8; 3])
    }

    fn corpora() -> (Vec<PixelImage>, Vec<PixelImage>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ((0..30).map(|_| noisy(&mut rng, 8)).collect(), (0..30).map(|_| noisy(&mut rng, 0)).collect())
    }

    #[test]
    fn both_variants_separate_noise_from_smooth() {
        let (nat, cg) = corpora();
        for v in [Variant::Mlp, Variant::Flda] {
            let m = train_detector(v, &nat, &cg, 1).unwrap();
            assert_eq!(m.variant(), v);
            assert!(nat.iter().all(|im| m.classify(im).unwrap() == Label::Natural), "{v}");
            assert!(cg.iter().all(|im| m.classify(im).unwrap() == Label::Cg), "{v}");
        }
    }

    #[test]
    fn checkpoints_round_trip_exactly() {
        let (nat, cg) = corpora();
        for v in [Variant::Mlp, Variant::Flda] {
            let m = train_detector(v, &nat, &cg, 2).unwrap().with_threshold(0.25);
            let back = DetectorModel::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back, m);
            assert_eq!(&back.to_bytes()[..4], b"DTCT");
        }
    }

    #[test]
    fn decision_ties_go_to_natural() {
        let (nat, cg) = corpora();
        let m = train_detector(Variant::Flda, &nat, &cg, 0).unwrap();
        assert_eq!(m.decide(0.5), Label::Natural);
        assert_eq!(m.decide(0.9), Label::Natural);
        let strict = m.with_threshold(1.0);
        assert_eq!(strict.decide(0.999_999), Label::Cg);
        assert_eq!(strict.decide(1.0), Label::Natural);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let (nat, _) = corpora();
        assert!(matches!(train_detector(Variant::Flda, &nat, &[], 0), Err(DetectorError::EmptyCorpus(_))));
    }

    #[test]
    fn bad_variant_byte_is_malformed() {
        let (nat, cg) = corpora();
        let mut bytes = train_detector(Variant::Flda, &nat, &cg, 0).unwrap().to_bytes();
        bytes[8] = 7;
        assert!(DetectorModel::from_bytes(&bytes).is_err());
    }
}
