use crate::error::{dim_err, Result, TensorError};
use crate::{Float, Tensor, Var};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Float = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: Tensor::zeros([channels]), var: Tensor::full([channels], T::one()) }
    }
}

impl<'t, T: Float> Var<'t, T> {
    /// Batch normalization over the `N`, `H` and `W` axes of `self [N,C,H,W]`.
    pub fn batch_norm(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        const OP: &str = "batch_norm";
        self.same_tape(&gamma, OP)?;
        self.same_tape(&beta, OP)?;
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let [n, c, h, w] = x.dims4(OP)?;
        for (name, t) in [("gamma", &gm), ("beta", &bt), ("running mean", &stats.mean), ("running var", &stats.var)] {
            if t.shape() != [c] {
                return dim_err(OP, format!("{name} shape {:?} vs channels (axis 1) {c}", t.shape()));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let eps = T::from_f64_lossy(BN_EPSILON);
        let xd = x.data();
        let channel = move |ch: usize| (0..n).flat_map(move |b| ((b * c + ch) * plane)..((b * c + ch + 1) * plane));

        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(TensorError::DegenerateBatch { count });
                }
                let m = T::from_usize(count).unwrap();
                let stats_per: Vec<(T, T)> = (0..c)
                    .map(|ch| {
                        let mu = channel(ch).map(|i| xd[i]).sum::<T>() / m;
                        let v = channel(ch).map(|i| (xd[i] - mu) * (xd[i] - mu)).sum::<T>() / m;
                        (mu, v)
                    })
                    .collect();
                let mom = T::from_f64_lossy(BN_MOMENTUM);
                let unbias = m / (m - T::one());
                let rm = stats.mean.data_mut();
                for (r, &(mu, _)) in rm.iter_mut().zip(&stats_per) {
                    *r = (T::one() - mom) * *r + mom * mu;
                }
                let rv = stats.var.data_mut();
                for (r, &(_, v)) in rv.iter_mut().zip(&stats_per) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
                stats_per.into_iter().unzip()
            }
            Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let (g, b) = (gm.data()[ch], bt.data()[ch]);
            for i in channel(ch) {
                let v = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                out[i] = g * v + b;
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        Ok(self.tape().record(out, &[*self, gamma, beta], move |grad| {
            let gd = grad.data();
            let m = T::from_usize(count).unwrap();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                let sum_g: T = channel(ch).map(|i| gd[i]).sum();
                let sum_gx: T = channel(ch).map(|i| gd[i] * xhat[i]).sum();
                dbeta[ch] = sum_g;
                dgamma[ch] = sum_gx;
                let k = gm.data()[ch] * inv_std[ch];
                match mode {
                    Mode::Train => {
                        let (mg, mgx) = (sum_g / m, sum_gx / m);
                        for i in channel(ch) {
                            dx[i] = k * (gd[i] - mg - xhat[i] * mgx);
                        }
                    }
                    Mode::Eval => {
                        for i in channel(ch) {
                            dx[i] = k * gd[i];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(shape, dx)),
                Some(Tensor::from_parts(vec![c], dgamma)),
                Some(Tensor::from_parts(vec![c], dbeta)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn batch() -> Tensor<f64> {
        Tensor::from_fn([4, 2, 3, 3], |i| ((i * 37 % 11) as f64) * 0.7 - 2.0)
    }

    #[test]
    fn train_output_is_standardized() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(batch());
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let mut stats = RunningStats::new(2);
        let y = x.batch_norm(g, b, &mut stats, Mode::Train).unwrap().value();
        for ch in 0..2 {
            let vals: Vec<f64> =
                (0..4).flat_map(|n| y.data()[(n * 2 + ch) * 9..(n * 2 + ch + 1) * 9].to_vec()).collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
            assert!(mu.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_ne!(stats, RunningStats::new(2));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(batch());
        let g = tape.constant(Tensor::zeros([2]));
        let b = tape.constant(Tensor::full([2], 5.0));
        for mode in [Mode::Train, Mode::Eval] {
            let y = x.batch_norm(g, b, &mut RunningStats::new(2), mode).unwrap().value();
            assert!(y.data().iter().all(|&v| v == 5.0));
        }
    }

    #[test]
    fn single_value_batch_is_degenerate() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 1, 1]));
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let err = x.batch_norm(g, b, &mut RunningStats::new(2), Mode::Train).unwrap_err();
        assert_eq!(err, TensorError::DegenerateBatch { count: 1 });
        assert!(x.batch_norm(g, b, &mut RunningStats::new(2), Mode::Eval).is_ok());
    }
}
