//! The four alternating H-Net optimization steps and the loop that drives them.
//!
//! Step 1 trains the natural autoencoder (perceptual + adversarial), step 2
//! the CG autoencoder (perceptual only), step 3 the latent transformer on
//! natural images, and step 4 the CG-to-natural path end to end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use naturalize_autodiff::{AdamConfig, AdamState, Mode, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detector::{BlackBoxScorer, DetectorError};
use crate::format::{FormatError, Reader, Writer};
use crate::image::{from_batch, to_batch, PixelImage};
use crate::losses::{
    adversarial_loss, blackbox_scaled_gradient, perceptual_loss, total_loss, LossWeights, PerceptualNet,
};
use crate::model::{save_checkpoint, Binder, HNetParams, Part};
use crate::Label;

pub const STATE_MAGIC: &[u8; 4] = b"HSTA";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at iteration {iteration}, step {step}")]
    NonFinite { iteration: u64, step: u8, what: &'static str, diagnostic: Option<PathBuf> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub input_size: usize,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: crate::losses::DEFAULT_ALPHA,
            lr: 1e-4,
            batch_size: 8,
            iterations_per_epoch: 100,
            epochs: 10,
            seed: 0,
            input_size: 64,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<LossWeights, TrainError> {
        let w = LossWeights::new(self.alpha)
            .ok_or_else(|| TrainError::Config(format!("alpha {} outside [0, 1)", self.alpha)))?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(TrainError::Config(format!("input size {} must be a positive multiple of 8", self.input_size)));
        }
        Ok(w)
    }

    pub fn total_iterations(&self) -> u64 {
        (self.epochs * self.iterations_per_epoch) as u64
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// One record of the metrics log. Absent losses serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub step: u8,
    pub l_vgg: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_tol: Option<f64>,
    pub l_latent: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub fn losses_finite(&self) -> bool {
        [self.l_vgg, self.l_adv, self.l_tol, self.l_latent].iter().flatten().all(|v| v.is_finite())
            && self.grad_norm.is_finite()
    }
}

/// SHA-256 of the log with timing removed, so equal runs hash equal.
pub fn canonical_log_hash(log: &[StepMetrics]) -> String {
    let mut h = Sha256::new();
    for m in log {
        let timeless = StepMetrics { wall_ms: 0.0, ..m.clone() };
        h.update(serde_json::to_vec(&timeless).expect("metrics serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// The frozen collaborators every step may use.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub detector: &'a dyn BlackBoxScorer,
    pub perceptual: &'a PerceptualNet<f32>,
    pub weights: LossWeights,
}

/// One Adam state per parameter group, shared by every step that updates it.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSet {
    states: Vec<AdamState<f32>>,
}

impl AdamSet {
    pub fn new(params: &HNetParams<f32>, config: AdamConfig) -> Self {
        AdamSet { states: Part::ALL.iter().map(|&p| AdamState::new(config, params.part(p).params())).collect() }
    }

    pub fn get(&self, part: Part) -> &AdamState<f32> {
        &self.states[part as usize]
    }

    fn get_mut(&mut self, part: Part) -> &mut AdamState<f32> {
        &mut self.states[part as usize]
    }
}

/// Gradients computed by one step, before they are applied.
#[derive(Clone, Debug)]
pub struct Update {
    pub step: u8,
    /// Gradients of the differentiable loss (perceptual or latent MSE).
    pub raw: Vec<(Part, Vec<Tensor<f32>>)>,
    /// What the optimizer receives: `raw` times `scale`.
    pub applied: Vec<(Part, Vec<Tensor<f32>>)>,
    pub scale: f64,
    pub metrics: StepMetrics,
}

pub fn parts_updated_by(step: u8) -> &'static [Part] {
    match step {
        1 => &[Part::EncNatural, Part::DecNatural],
        2 => &[Part::EncCg, Part::DecCg],
        3 => &[Part::Transformer],
        4 => &[Part::EncCg, Part::Transformer, Part::DecNatural],
        _ => &[],
    }
}

fn scalar(v: naturalize_autodiff::Var<'_, f32>) -> f64 {
    v.value().data()[0] as f64
}

/// Mean adversarial loss of a generated batch, targeting "natural".
fn adversarial_batch_loss(detector: &dyn BlackBoxScorer, out: &Tensor<f32>) -> Result<f64, TrainError> {
    let images = from_batch(out)?;
    let scores = images.par_iter().map(|im| detector.score(im)).collect::<Result<Vec<f64>, _>>()?;
    Ok(scores.iter().map(|&s| adversarial_loss(s, Label::Natural)).sum::<f64>() / scores.len() as f64)
}

/// Forward and backward for `step` (1-4) on `batch`, updating BN running
/// statistics of the networks trained in that step but no weights.
pub fn compute_step(
    step: u8,
    params: &mut HNetParams<f32>,
    batch: &Tensor<f32>,
    ctx: StepContext,
) -> Result<Update, TrainError> {
    let start = Instant::now();
    let parts = parts_updated_by(step);
    let (l, raw, generated) = {
        let tape = Tape::new();
        let mut train = Binder::trainable(&tape);
        let mut frozen = Binder::frozen(&tape);
        let x = tape.constant(batch.clone());
        let HNetParams { enc_natural, dec_natural, enc_cg, dec_cg, transformer, .. } = params;
        let (loss, generated) = match step {
            1 => {
                let z = enc_natural.forward(&mut train, x, Mode::Train)?;
                let o = dec_natural.forward(&mut train, z, Mode::Train)?;
                (perceptual_loss(ctx.perceptual, o, x)?, Some(o.value()))
            }
            2 => {
                let z = enc_cg.forward(&mut train, x, Mode::Train)?;
                let o = dec_cg.forward(&mut train, z, Mode::Train)?;
                (perceptual_loss(ctx.perceptual, o, x)?, None)
            }
            3 => {
                let target = enc_natural.forward(&mut frozen, x, Mode::Eval)?;
                let source = enc_cg.forward(&mut frozen, x, Mode::Eval)?;
                (transformer.forward(&mut train, source, Mode::Train)?.mse_loss(target)?, None)
            }
            4 => {
                let z = enc_cg.forward(&mut train, x, Mode::Train)?;
                let z = transformer.forward(&mut train, z, Mode::Train)?;
                let o = dec_natural.forward(&mut train, z, Mode::Train)?;
                (perceptual_loss(ctx.perceptual, o, x)?, Some(o.value()))
            }
            _ => return Err(TrainError::Config(format!("no training step {step}"))),
        };
        let l = scalar(loss);
        tape.backward(loss)?;
        let raw: Vec<(Part, Vec<Tensor<f32>>)> =
            parts.iter().map(|&p| (p, train.grads(&params.part(p).params()))).collect();
        (l, raw, generated)
    };

    let mut metrics = StepMetrics {
        iteration: 0,
        step,
        l_vgg: None,
        l_adv: None,
        l_tol: None,
        l_latent: None,
        grad_norm: 0.0,
        wall_ms: 0.0,
    };
    let mut applied = raw.clone();
    let mut scale = 1.0;
    match generated {
        Some(out) => {
            let l_adv = adversarial_batch_loss(ctx.detector, &out)?;
            let mut flat: Vec<Tensor<f32>> = applied.iter_mut().flat_map(|(_, g)| g.drain(..)).collect();
            scale = blackbox_scaled_gradient(l, l_adv, &mut flat, ctx.weights);
            let mut it = flat.into_iter();
            for (part, g) in applied.iter_mut() {
                g.extend(it.by_ref().take(params.part(*part).params().len()));
            }
            (metrics.l_vgg, metrics.l_adv, metrics.l_tol) =
                (Some(l), Some(l_adv), Some(total_loss(l, l_adv, ctx.weights)));
        }
        None if step == 3 => metrics.l_latent = Some(l),
        None => metrics.l_vgg = Some(l),
    }
    metrics.grad_norm = applied
        .iter()
        .flat_map(|(_, g)| g)
        .map(|t| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    metrics.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Update { step, raw, applied, scale, metrics })
}

fn apply_update(params: &mut HNetParams<f32>, adam: &mut AdamSet, update: &Update) -> Result<(), TrainError> {
    for (part, grads) in &update.applied {
        adam.get_mut(*part).step(&mut params.part_mut(*part).params_mut(), grads)?;
    }
    Ok(())
}

/// Runs one step to completion. Nothing is updated if any loss or gradient is
/// non-finite.
pub fn run_step(
    step: u8,
    params: &mut HNetParams<f32>,
    adam: &mut AdamSet,
    batch: &Tensor<f32>,
    ctx: StepContext,
    iteration: u64,
) -> Result<StepMetrics, TrainError> {
    let before = params.clone();
    let mut update = compute_step(step, params, batch, ctx)?;
    update.metrics.iteration = iteration;
    let grads_finite = update.applied.iter().flat_map(|(_, g)| g).all(Tensor::all_finite);
    if !update.metrics.losses_finite() || !grads_finite {
        *params = before;
        let what = if grads_finite { "loss" } else { "gradient" };
        return Err(TrainError::NonFinite { iteration, step, what, diagnostic: None });
    }
    // Release the shared buffers first so the optimizer updates in place.
    drop(before);
    apply_update(params, adam, &update)?;
    Ok(update.metrics)
}

/// Seeded, position-addressable mini-batch order: the corpus is reshuffled on
/// every pass, so batch `i` depends only on `(seed, stream, i)`.
#[derive(Clone, Debug)]
pub struct BatchStream {
    len: usize,
    batch: usize,
    seed: u64,
}

impl BatchStream {
    pub fn new(len: usize, batch: usize, seed: u64, stream: u64) -> Self {
        BatchStream { len, batch, seed: seed ^ stream.wrapping_mul(0xA076_1D64_78BD_642F) }
    }

    fn permutation(&self, pass: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(pass.wrapping_mul(0xE703_7ED1_A0B4_28DB)));
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn indices(&self, iteration: u64) -> Vec<usize> {
        let start = iteration * self.batch as u64;
        let mut out = Vec::with_capacity(self.batch);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for p in start..start + self.batch as u64 {
            let pass = p / self.len as u64;
            if cached.as_ref().is_none_or(|(c, _)| *c != pass) {
                cached = Some((pass, self.permutation(pass)));
            }
            out.push(cached.as_ref().unwrap().1[(p % self.len as u64) as usize]);
        }
        out
    }
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer<'a> {
    pub params: HNetParams<f32>,
    pub adam: AdamSet,
    pub iteration: u64,
    config: TrainConfig,
    ctx: StepContext<'a>,
    natural: Vec<PixelImage>,
    cg: Vec<PixelImage>,
    streams: [BatchStream; 4],
}

impl<'a> Trainer<'a> {
    pub fn new(
        params: HNetParams<f32>,
        config: TrainConfig,
        natural: Vec<PixelImage>,
        cg: Vec<PixelImage>,
        detector: &'a dyn BlackBoxScorer,
        perceptual: &'a PerceptualNet<f32>,
    ) -> Result<Self, TrainError> {
        let weights = config.validate()?;
        if natural.is_empty() || cg.is_empty() {
            return Err(TrainError::Config("both training corpora must be non-empty".into()));
        }
        let s = params.arch.input_size;
        if let Some(bad) = natural.iter().chain(&cg).find(|im| im.width() != s || im.height() != s) {
            return Err(TrainError::Config(format!(
                "image {}x{} does not match input size {s}",
                bad.width(),
                bad.height()
            )));
        }
        let b = config.batch_size;
        let streams = [
            BatchStream::new(natural.len(), b, config.seed, 1),
            BatchStream::new(cg.len(), b, config.seed, 2),
            BatchStream::new(natural.len(), b, config.seed, 3),
            BatchStream::new(cg.len(), b, config.seed, 4),
        ];
        Ok(Trainer {
            adam: AdamSet::new(&params, config.adam()),
            params,
            iteration: 0,
            config,
            ctx: StepContext { detector, perceptual, weights },
            natural,
            cg,
            streams,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn batch(&self, step: usize) -> Result<Tensor<f32>, TrainError> {
        let pool = if step % 2 == 0 { &self.natural } else { &self.cg };
        let images: Vec<&PixelImage> =
            self.streams[step].indices(self.iteration).into_iter().map(|i| &pool[i]).collect();
        Ok(to_batch(&images)?)
    }

    /// Steps 1 to 4, each on its own fresh mini-batch.
    pub fn run_iteration(&mut self) -> Result<Vec<StepMetrics>, TrainError> {
        let mut out = Vec::with_capacity(4);
        for k in 0..4 {
            let batch = self.batch(k)?;
            out.push(run_step(k as u8 + 1, &mut self.params, &mut self.adam, &batch, self.ctx, self.iteration)?);
        }
        self.iteration += 1;
        Ok(out)
    }

    /// Trains until `stop_at` (capped at the configured total). `checkpoint`
    /// receives periodic and final saves; a non-finite value halts the run after
    /// writing a diagnostic checkpoint next to it.
    pub fn run(
        &mut self,
        stop_at: Option<u64>,
        checkpoint: Option<&Path>,
        mut on_metrics: impl FnMut(&StepMetrics) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        let total = self.config.total_iterations();
        let end = stop_at.map_or(total, |s| s.min(total));
        while self.iteration < end {
            match self.run_iteration() {
                Ok(metrics) => metrics.iter().try_for_each(&mut on_metrics)?,
                Err(TrainError::NonFinite { iteration, step, what, .. }) => {
                    let diag = checkpoint.map_or_else(
                        || std::env::temp_dir().join("naturalize-nan.hnet"),
                        |p| p.with_extension("nan.hnet"),
                    );
                    save_checkpoint(&self.params, &diag)?;
                    log::error!(
                        "halting: non-finite {what} at iteration {iteration}, step {step}; diagnostic checkpoint {}",
                        diag.display()
                    );
                    return Err(TrainError::NonFinite { iteration, step, what, diagnostic: Some(diag) });
                }
                Err(e) => return Err(e),
            }
            let every = self.config.checkpoint_every as u64;
            if let Some(path) = checkpoint {
                if every > 0 && self.iteration % every == 0 && self.iteration < end {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(())
    }

    /// Writes the H-Net checkpoint and its optimizer state alongside it.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_checkpoint(&self.params, path)?;
        std::fs::write(state_path(path), self.state_bytes())?;
        Ok(())
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(STATE_MAGIC, STATE_VERSION);
        w.u64(self.iteration);
        for s in &self.adam.states {
            w.u64(s.step);
            w.tensors(&s.m);
            w.tensors(&s.v);
        }
        w.finish()
    }

    /// Restores iteration count and optimizer moments written by [`Trainer::save`].
    pub fn restore_state(&mut self, bytes: &[u8]) -> Result<(), TrainError> {
        let mut r = Reader::open(bytes, STATE_MAGIC, STATE_VERSION)?;
        let iteration = r.u64()?;
        let mut adam = self.adam.clone();
        for s in &mut adam.states {
            s.step = r.u64()?;
            let (m, v) = (r.tensors()?, r.tensors()?);
            crate::format::assign_all(s.m.iter_mut().collect(), m, "optimizer first moments")?;
            crate::format::assign_all(s.v.iter_mut().collect(), v, "optimizer second moments")?;
        }
        r.finish()?;
        self.adam = adam;
        self.iteration = iteration;
        Ok(())
    }
}

pub fn state_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

/// Appends NDJSON metric records to a writer.
pub struct MetricsLog<W: std::io::Write> {
    out: W,
}

impl<W: std::io::Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        MetricsLog { out }
    }

    pub fn write(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_metrics_log(text: &str) -> Result<Vec<StepMetrics>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_stream_covers_each_pass_and_is_addressable() {
        let s = BatchStream::new(10, 3, 5, 1);
        let first_pass: Vec<usize> =
            (0..3).flat_map(|i| s.indices(i)).chain(s.indices(3).into_iter().take(1)).collect();
        let mut sorted = first_pass.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(s.indices(7), BatchStream::new(10, 3, 5, 1).indices(7));
        assert_ne!(s.indices(0), BatchStream::new(10, 3, 5, 2).indices(0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { alpha: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { input_size: 30, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn log_hash_ignores_wall_time() {
        let m = StepMetrics {
            iteration: 1,
            step: 2,
            l_vgg: Some(0.5),
            l_adv: None,
            l_tol: None,
            l_latent: None,
            grad_norm: 1.0,
            wall_ms: 3.0,
        };
        let n = StepMetrics { wall_ms: 99.0, ..m.clone() };
        assert_eq!(canonical_log_hash(std::slice::from_ref(&m)), canonical_log_hash(&[n]));
        let mut buf = MetricsLog::new(Vec::new());
        buf.write(&m).unwrap();
        let text = String::from_utf8(buf.into_inner()).unwrap();
        assert!(text.contains("\"l_adv\":null"));
        assert_eq!(read_metrics_log(&text).unwrap(), vec![m]);
    }
}
