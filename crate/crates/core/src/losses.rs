//! Perceptual, adversarial and combined losses, and the scaled-gradient
//! approximation that lets a score-only detector steer training.

use std::path::Path;

use naturalize_autodiff::{Float, Result as TensorResult, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::format::{FormatError, Reader, Writer};
use crate::model::{Binder, Conv, Module};
use crate::Label;

pub const PNET_MAGIC: &[u8; 4] = b"PNET";
pub const PNET_VERSION: u32 = 1;
pub const DEFAULT_ALPHA: f64 = 5e-3;
pub const SCORE_CLAMP: f64 = 1e-7;
/// Below this perceptual loss the gradient is left unscaled.
pub const L_VGG_FLOOR: f64 = 1e-8;

const PERCEPTUAL_CHANNELS: [usize; 5] = [3, 16, 32, 64, 64];

/// Fixed feature extractor: 3x3 stride-2 convolutions, each followed by ELU.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet<T: Float = f32> {
    stages: Vec<Conv<T>>,
}

impl<T: Float> PerceptualNet<T> {
    /// Seeded He-initialized weights with channels 3-16-32-64-64.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = PERCEPTUAL_CHANNELS.windows(2).map(|c| Conv::new(&mut rng, c[0], c[1], 3, 2)).collect();
        PerceptualNet { stages }
    }

    pub fn weights(&self) -> Vec<&Tensor<T>> {
        self.stages.iter().flat_map(Module::params).collect()
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(3, Conv::out_channels)
    }

    /// Final-stage feature map; the weights enter the tape as constants.
    pub fn features<'t>(&self, x: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let mut b = Binder::frozen(x.tape());
        self.stages.iter().try_fold(x, |h, conv| Ok(conv.forward(&mut b, h)?.elu()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(PNET_MAGIC, PNET_VERSION);
        w.tensors(self.weights());
        w.finish()
    }

    /// Accepts any chain of odd square stride-2 kernels starting from 3 channels,
    /// stored as alternating weight `[Cout,Cin,k,k]` and bias `[Cout]` tensors.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(bytes, PNET_MAGIC, PNET_VERSION)?;
        let tensors: Vec<Tensor<T>> = r.tensors()?;
        r.finish()?;
        if tensors.is_empty() || tensors.len() % 2 != 0 {
            return Err(FormatError::Malformed(format!("expected weight/bias pairs, found {} tensors", tensors.len())));
        }
        let mut cin = 3;
        let mut stages = Vec::new();
        for pair in tensors.chunks_exact(2) {
            let (weight, bias) = (&pair[0], &pair[1]);
            let ok = matches!(weight.shape(), &[co, ci, k, k2] if ci == cin && k == k2 && k % 2 == 1 && co > 0)
                && bias.shape() == [weight.shape()[0]];
            if !ok {
                return Err(FormatError::Malformed(format!(
                    "stage {}: weight {:?} / bias {:?} do not continue a {cin}-channel chain",
                    stages.len(),
                    weight.shape(),
                    bias.shape()
                )));
            }
            cin = weight.shape()[0];
            let k = weight.shape()[2];
            stages.push(Conv {
                weight: weight.clone(),
                bias: bias.clone(),
                stride: 2,
                padding: k / 2,
                transposed: false,
            });
        }
        Ok(PerceptualNet { stages })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }
}

/// Weight of the adversarial term in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: DEFAULT_ALPHA }
    }
}

impl LossWeights {
    /// `alpha` must lie in `[0, 1)`; zero gives pure perceptual training.
    pub fn new(alpha: f64) -> Option<Self> {
        (0.0..1.0).contains(&alpha).then_some(LossWeights { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// MSE between the final feature maps of two image batches.
pub fn perceptual_loss<'t, T: Float>(net: &PerceptualNet<T>, a: Var<'t, T>, b: Var<'t, T>) -> TensorResult<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op: "perceptual_loss",
            detail: format!("image shapes {:?} and {:?} differ", a.shape(), b.shape()),
        });
    }
    net.features(a)?.mse_loss(net.features(b)?)
}

/// Perceptual loss of plain tensors, without gradients.
pub fn perceptual_distance<T: Float>(net: &PerceptualNet<T>, a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<f64> {
    let tape = Tape::new();
    let l = perceptual_loss(net, tape.constant(a.clone()), tape.constant(b.clone()))?;
    Ok(l.value().data()[0].to_f64_lossy())
}

/// Binary cross-entropy of a detector probability against `target`.
pub fn adversarial_loss(score: f64, target: Label) -> f64 {
    let s = if score.is_nan() { 0.5 } else { score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP) };
    match target {
        Label::Natural => -s.ln(),
        Label::Cg => -(1.0 - s).ln(),
    }
}

pub fn total_loss(l_vgg: f64, l_adv: f64, w: LossWeights) -> f64 {
    (1.0 - w.alpha) * l_vgg + w.alpha * l_adv
}

/// `((1-a) L_VGG + a L_Adv) / L_VGG`, or `None` when `L_VGG` is below the floor.
pub fn gradient_scale(l_vgg: f64, l_adv: f64, w: LossWeights) -> Option<f64> {
    (l_vgg >= L_VGG_FLOOR).then(|| total_loss(l_vgg, l_adv, w) / l_vgg)
}

/// Rescales perceptual-loss gradients in place so they stand in for the gradient
/// of the total loss. Returns the factor applied (1 when skipped).
pub fn blackbox_scaled_gradient<T: Float>(l_vgg: f64, l_adv: f64, grads: &mut [Tensor<T>], w: LossWeights) -> f64 {
    let Some(scale) = gradient_scale(l_vgg, l_adv, w) else {
        log::warn!("perceptual loss {l_vgg:e} below {L_VGG_FLOOR:e}; adversarial scaling skipped");
        return 1.0;
    };
    let s = T::from_f64_lossy(scale);
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v = *v * s);
    }
    scale
}
