//! Transformation endpoint, metrics, corpora and the scenario runner.

mod corpus;
mod metrics;
mod scenario;
mod synth;

use naturalize_autodiff::TensorError;

use crate::image::{from_batch, to_batch, PixelImage};
use crate::model::HNetParams;

pub use corpus::{
    load_corpus, parse_manifest, CorpusEntry, CorpusError, CorpusMeta, ImageCorpus, LoadedCorpus, ManifestEntry,
    SkippedFile, MANIFEST_FILE,
};
pub use metrics::{reports_csv, Confusion, ImageScore, MetricError, MetricsReport, Phase, CSV_HEADER};
pub use scenario::{
    dataset_split, run_scenario, IdentityProxy, ScenarioConfig, ScenarioError, ScenarioOutcome, ScenarioSpec, Split,
};
pub use synth::{cg_like, natural_like, synth_corpus, SynthProfile, SENSOR_NOISE_SIGMA};

const TRANSFORM_CHUNK: usize = 8;

/// Normalize, run the CG-to-natural path, clamp and denormalize.
/// Each image is processed independently of its batch neighbours.
pub fn transform_images(params: &HNetParams<f32>, images: &[PixelImage]) -> Result<Vec<PixelImage>, TensorError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(TRANSFORM_CHUNK) {
        let refs: Vec<&PixelImage> = chunk.iter().collect();
        out.extend(from_batch(&params.transform(&to_batch::<f32>(&refs)?)?)?);
    }
    Ok(out)
}

pub fn transform_image(params: &HNetParams<f32>, image: &PixelImage) -> Result<PixelImage, TensorError> {
    Ok(transform_images(params, std::slice::from_ref(image))?.remove(0))
}
