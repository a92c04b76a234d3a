use naturalize_autodiff::{Float, Mode, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{compose_module, BatchNorm, Binder, Conv, Module};
use super::{ArchSpec, ModelError};

type NetResult<T> = Result<T, TensorError>;

fn shape_error(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage<T: Float = f32> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
    pub pool: bool,
}
compose_module!(EncoderStage, [conv, bn]);

/// conv3x3-BN-ELU stages; the first three end in a 2x2 average pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Float = f32> {
    pub stages: Vec<EncoderStage<T>>,
}
compose_module!(Encoder, [stages]);

impl<T: Float> Encoder<T> {
    pub fn new(arch: &ArchSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 3;
        let stages = arch
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let stage =
                    EncoderStage { conv: Conv::new(rng, cin, cout, 3, 1), bn: BatchNorm::new(cout), pool: i < 3 };
                cin = cout;
                stage
            })
            .collect();
        Encoder { stages }
    }

    /// `[N,3,S,S] -> [N,C_lat,S/8,S/8]`.
    pub fn forward<'t>(&mut self, b: &mut Binder<'t, T>, x: Var<'t, T>, mode: Mode) -> NetResult<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % 8 != 0 || shape[3] % 8 != 0 {
            return Err(shape_error("encode", format!("expected [N,3,S,S] with S divisible by 8, got {shape:?}")));
        }
        let mut h = x;
        for stage in &mut self.stages {
            h = stage.conv.forward(b, h)?;
            h = stage.bn.forward(b, h, mode)?.elu();
            if stage.pool {
                h = h.avg_pool2()?;
            }
        }
        Ok(h)
    }
}

/// Transposed-conv upsampler, two sub-pixel stages and a linear 3-channel head.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T: Float = f32> {
    pub up: Conv<T>,
    pub up_bn: BatchNorm<T>,
    pub sub1: Conv<T>,
    pub sub1_bn: BatchNorm<T>,
    pub sub2: Conv<T>,
    pub head: Conv<T>,
    latent_channels: usize,
}
compose_module!(Decoder, [up, up_bn, sub1, sub1_bn, sub2, head]);

impl<T: Float> Decoder<T> {
    pub fn new(arch: &ArchSpec, rng: &mut ChaCha8Rng) -> Self {
        let lat = arch.latent_channels();
        let (c1, c2) = (arch.channels[0], arch.channels[1]);
        Decoder {
            up: Conv::transposed(rng, lat, lat, 3, 2),
            up_bn: BatchNorm::new(lat),
            sub1: Conv::new(rng, lat, 4 * c2, 3, 1),
            sub1_bn: BatchNorm::new(c2),
            sub2: Conv::new(rng, c2, 4 * c1, 3, 1),
            head: Conv::new(rng, c1, 3, 3, 1),
            latent_channels: lat,
        }
    }

    /// `[N,C_lat,s,s] -> [N,3,8s,8s]`, unbounded output (no squashing).
    pub fn forward<'t>(&mut self, b: &mut Binder<'t, T>, z: Var<'t, T>, mode: Mode) -> NetResult<Var<'t, T>> {
        let shape = z.shape();
        if shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(shape_error(
                "decode",
                format!("expected latent [N,{},s,s], got {shape:?}", self.latent_channels),
            ));
        }
        let h = self.up.forward(b, z)?;
        let h = self.up_bn.forward(b, h, mode)?.elu();
        let h = self.sub1.forward(b, h)?.pixel_shuffle(2)?;
        let h = self.sub1_bn.forward(b, h, mode)?.elu();
        let h = self.sub2.forward(b, h)?.pixel_shuffle(2)?.elu();
        self.head.forward(b, h)
    }
}

/// 1x1 reduce, 3x3, 1x1 expand (each with BN) plus an identity skip.
/// No activation follows the addition, so a zero branch is an exact identity.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckBlock<T: Float = f32> {
    pub reduce: Conv<T>,
    pub reduce_bn: BatchNorm<T>,
    pub mid: Conv<T>,
    pub mid_bn: BatchNorm<T>,
    pub expand: Conv<T>,
    pub expand_bn: BatchNorm<T>,
}
compose_module!(BottleneckBlock, [reduce, reduce_bn, mid, mid_bn, expand, expand_bn]);

impl<T: Float> BottleneckBlock<T> {
    pub fn new(channels: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        BottleneckBlock {
            reduce: Conv::new(rng, channels, width, 1, 1),
            reduce_bn: BatchNorm::new(width),
            mid: Conv::new(rng, width, width, 3, 1),
            mid_bn: BatchNorm::new(width),
            expand: Conv::new(rng, width, channels, 1, 1),
            expand_bn: BatchNorm::new(channels),
        }
    }

    pub fn forward<'t>(&mut self, b: &mut Binder<'t, T>, x: Var<'t, T>, mode: Mode) -> NetResult<Var<'t, T>> {
        let h = self.reduce.forward(b, x)?;
        let h = self.reduce_bn.forward(b, h, mode)?.elu();
        let h = self.mid.forward(b, h)?;
        let h = self.mid_bn.forward(b, h, mode)?.elu();
        let h = self.expand.forward(b, h)?;
        let h = self.expand_bn.forward(b, h, mode)?;
        x.add(h)
    }

    /// Zeroes the residual branch output, making the block the identity.
    pub fn zero_branch(&mut self) {
        self.expand_bn.gamma = Tensor::zeros(self.expand_bn.gamma.shape().to_vec());
        self.expand_bn.beta = Tensor::zeros(self.expand_bn.beta.shape().to_vec());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T: Float = f32> {
    pub blocks: Vec<BottleneckBlock<T>>,
}
compose_module!(Transformer, [blocks]);

impl<T: Float> Transformer<T> {
    pub fn new(arch: &ArchSpec, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..arch.transformer_blocks)
            .map(|_| BottleneckBlock::new(arch.latent_channels(), arch.bottleneck_width(), rng))
            .collect();
        Transformer { blocks }
    }

    pub fn forward<'t>(&mut self, b: &mut Binder<'t, T>, z: Var<'t, T>, mode: Mode) -> NetResult<Var<'t, T>> {
        let channels = self.blocks.first().map(|blk| blk.expand.out_channels());
        let shape = z.shape();
        if shape.len() != 4 || Some(shape[1]) != channels.or(Some(shape[1])) {
            return Err(shape_error(
                "transform_latent",
                format!("expected latent [N,{channels:?},s,s], got {shape:?}"),
            ));
        }
        let mut h = z;
        for block in &mut self.blocks {
            h = block.forward(b, h, mode)?;
        }
        Ok(h)
    }

    pub fn set_identity(&mut self) {
        self.blocks.iter_mut().for_each(BottleneckBlock::zero_branch);
    }
}

/// The five H-Net parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    EncNatural,
    DecNatural,
    EncCg,
    DecCg,
    Transformer,
}

impl Part {
    pub const ALL: [Part; 5] = [Part::EncNatural, Part::DecNatural, Part::EncCg, Part::DecCg, Part::Transformer];
}

/// All learnable H-Net weights plus the architecture they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct HNetParams<T: Float = f32> {
    pub arch: ArchSpec,
    pub enc_natural: Encoder<T>,
    pub dec_natural: Decoder<T>,
    pub enc_cg: Encoder<T>,
    pub dec_cg: Decoder<T>,
    pub transformer: Transformer<T>,
}

impl<T: Float> HNetParams<T> {
    /// Seeded He initialization; each group draws from its own stream.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let rng = |part: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(part));
        Ok(HNetParams {
            arch: arch.clone(),
            enc_natural: Encoder::new(arch, &mut rng(0)),
            dec_natural: Decoder::new(arch, &mut rng(1)),
            enc_cg: Encoder::new(arch, &mut rng(2)),
            dec_cg: Decoder::new(arch, &mut rng(3)),
            transformer: Transformer::new(arch, &mut rng(4)),
        })
    }

    pub fn part(&self, part: Part) -> &dyn Module<T> {
        match part {
            Part::EncNatural => &self.enc_natural,
            Part::DecNatural => &self.dec_natural,
            Part::EncCg => &self.enc_cg,
            Part::DecCg => &self.dec_cg,
            Part::Transformer => &self.transformer,
        }
    }

    pub fn part_mut(&mut self, part: Part) -> &mut dyn Module<T> {
        match part {
            Part::EncNatural => &mut self.enc_natural,
            Part::DecNatural => &mut self.dec_natural,
            Part::EncCg => &mut self.enc_cg,
            Part::DecCg => &mut self.dec_cg,
            Part::Transformer => &mut self.transformer,
        }
    }

    pub fn param_count(&self) -> usize {
        Part::ALL.iter().flat_map(|&p| self.part(p).params()).map(Tensor::len).sum()
    }

    /// Every tensor (parameters and BN buffers) in checkpoint order.
    pub fn state(&self) -> Vec<&Tensor<T>> {
        Part::ALL.iter().flat_map(|&p| self.part(p).state()).collect()
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let HNetParams { enc_natural, dec_natural, enc_cg, dec_cg, transformer, .. } = self;
        let mut v = enc_natural.state_mut();
        v.extend(dec_natural.state_mut());
        v.extend(enc_cg.state_mut());
        v.extend(dec_cg.state_mut());
        v.extend(transformer.state_mut());
        v
    }

    fn check_batch(&self, x: &Tensor<T>) -> NetResult<()> {
        let s = self.arch.input_size;
        match x.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(shape_error("hnet", format!("expected [N,3,{s},{s}], got {other:?}"))),
        }
    }

    /// Eval-mode `dec_natural(transformer(enc_cg(x)))`, raw (unclamped).
    pub fn transform(&self, x: &Tensor<T>) -> NetResult<Tensor<T>> {
        self.check_batch(x)?;
        let mut net = self.clone();
        let tape = Tape::new();
        let mut b = Binder::frozen(&tape);
        let z = net.enc_cg.forward(&mut b, tape.constant(x.clone()), Mode::Eval)?;
        let z = net.transformer.forward(&mut b, z, Mode::Eval)?;
        Ok(net.dec_natural.forward(&mut b, z, Mode::Eval)?.value())
    }

    /// Eval-mode reconstruction through the natural (`natural = true`) or CG autoencoder.
    pub fn reconstruct(&self, x: &Tensor<T>, natural: bool) -> NetResult<Tensor<T>> {
        self.check_batch(x)?;
        let mut net = self.clone();
        let tape = Tape::new();
        let mut b = Binder::frozen(&tape);
        let xv = tape.constant(x.clone());
        let out = if natural {
            let z = net.enc_natural.forward(&mut b, xv, Mode::Eval)?;
            net.dec_natural.forward(&mut b, z, Mode::Eval)?
        } else {
            let z = net.enc_cg.forward(&mut b, xv, Mode::Eval)?;
            net.dec_cg.forward(&mut b, z, Mode::Eval)?
        };
        Ok(out.value())
    }

    /// Eval-mode latent of one encoder.
    pub fn encode(&self, x: &Tensor<T>, natural: bool) -> NetResult<Tensor<T>> {
        self.check_batch(x)?;
        let mut enc = if natural { self.enc_natural.clone() } else { self.enc_cg.clone() };
        let tape = Tape::new();
        let mut b = Binder::frozen(&tape);
        Ok(enc.forward(&mut b, tape.constant(x.clone()), Mode::Eval)?.value())
    }
}
