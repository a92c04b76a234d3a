use naturalize_autodiff::{Float, Mode, Result, RunningStats, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Records parameters on a tape and maps gradients back to them.
///
/// A trainable binder records leaves; a frozen one records constants, so no
/// gradient flows into those weights.
pub struct Binder<'t, T: Float> {
    tape: &'t Tape<T>,
    trainable: bool,
    bound: Vec<(Tensor<T>, Var<'t, T>)>,
}

impl<'t, T: Float> Binder<'t, T> {
    pub fn trainable(tape: &'t Tape<T>) -> Self {
        Binder { tape, trainable: true, bound: Vec::new() }
    }

    pub fn frozen(tape: &'t Tape<T>) -> Self {
        Binder { tape, trainable: false, bound: Vec::new() }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn bind(&mut self, t: &Tensor<T>) -> Var<'t, T> {
        if let Some((_, v)) = self.bound.iter().find(|(b, _)| b.same_storage(t)) {
            return *v;
        }
        let v = if self.trainable { self.tape.leaf(t.clone()) } else { self.tape.constant(t.clone()) };
        self.bound.push((t.clone(), v));
        v
    }

    /// Gradients for `params` in order; zeros for anything never bound.
    pub fn grads(&self, params: &[&Tensor<T>]) -> Vec<Tensor<T>> {
        params
            .iter()
            .map(|p| {
                self.bound
                    .iter()
                    .find(|(b, _)| b.same_storage(p))
                    .and_then(|(_, v)| v.grad())
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect()
    }
}

/// Parameter and buffer enumeration in a fixed declaration order.
pub trait Module<T: Float> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    /// Learnable parameters followed by non-learnable buffers.
    fn state(&self) -> Vec<&Tensor<T>> {
        self.params()
    }
    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params_mut()
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero bias.
pub(crate) fn he_tensor<T: Float>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal) * std))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T: Float = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl<T: Float> Conv<T> {
    /// `k x k` convolution with "same" padding at stride 1.
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv {
            weight: he_tensor(rng, &[cout, cin, k, k], cin * k * k),
            bias: Tensor::zeros([cout]),
            stride,
            padding: k / 2,
            transposed: false,
        }
    }

    /// Transposed `k x k` convolution multiplying the spatial side by `stride`.
    pub fn transposed(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        Conv {
            weight: he_tensor(rng, &[cin, cout, k, k], fan_in),
            bias: Tensor::zeros([cout]),
            stride,
            padding: k / 2,
            transposed: true,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[if self.transposed { 1 } else { 0 }]
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (w, bias) = (b.bind(&self.weight), b.bind(&self.bias));
        if self.transposed {
            x.conv2d_transpose(w, bias, self.stride, self.padding, self.stride - 1)
        } else {
            x.conv2d(w, bias, self.stride, self.padding)
        }
    }
}

impl<T: Float> Module<T> for Conv<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Float = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full([channels], T::one()),
            beta: Tensor::zeros([channels]),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward<'t>(&mut self, b: &mut Binder<'t, T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let (g, bt) = (b.bind(&self.gamma), b.bind(&self.beta));
        x.batch_norm(g, bt, &mut self.stats, mode)
    }
}

impl<T: Float> Module<T> for BatchNorm<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn state(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta, &self.stats.mean, &self.stats.var]
    }
    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta, &mut self.stats.mean, &mut self.stats.var]
    }
}

/// Implements [`Module`] by concatenating the listed fields in order.
macro_rules! compose_module {
    ($ty:ident, [$($field:ident),* $(,)?]) => {
        impl<T: naturalize_autodiff::Float> $crate::model::Module<T> for $ty<T> {
            fn params(&self) -> Vec<&naturalize_autodiff::Tensor<T>> {
                let mut v = Vec::new();
                $( v.extend($crate::model::Module::params(&self.$field)); )*
                v
            }
            fn params_mut(&mut self) -> Vec<&mut naturalize_autodiff::Tensor<T>> {
                let mut v = Vec::new();
                $( v.extend($crate::model::Module::params_mut(&mut self.$field)); )*
                v
            }
            fn state(&self) -> Vec<&naturalize_autodiff::Tensor<T>> {
                let mut v = Vec::new();
                $( v.extend($crate::model::Module::state(&self.$field)); )*
                v
            }
            fn state_mut(&mut self) -> Vec<&mut naturalize_autodiff::Tensor<T>> {
                let mut v = Vec::new();
                $( v.extend($crate::model::Module::state_mut(&mut self.$field)); )*
                v
            }
        }
    };
}
pub(crate) use compose_module;

impl<T: Float, M: Module<T>> Module<T> for Vec<M> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.iter().flat_map(|m| m.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
    fn state(&self) -> Vec<&Tensor<T>> {
        self.iter().flat_map(|m| m.state()).collect()
    }
    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.iter_mut().flat_map(|m| m.state_mut()).collect()
    }
}
