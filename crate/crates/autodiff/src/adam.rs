use crate::error::{dim_err, Result};
use crate::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for one ordered group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Float = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState { config, step: 0, v: m.clone(), m }
    }

    /// Applies one update in place. `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return dim_err(
                "adam_step",
                format!("{} moment buffers, {} params, {} grads", self.m.len(), params.len(), grads.len()),
            );
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return dim_err(
                    "adam_step",
                    format!("slot {i}: param {:?}, grad {:?}, moments {:?}", p.shape(), g.shape(), self.m[i].shape()),
                );
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((pv, &gv), mv), vv) in pd.iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::new([3], vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        adam.step(&mut [&mut p], &[Tensor::zeros([3])]).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::<f64>::new([2], vec![0.0, 0.0]).unwrap();
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut adam = AdamState::new(cfg, [&p]);
        adam.step(&mut [&mut p], &[Tensor::new([2], vec![3.0, -0.5]).unwrap()]).unwrap();
        // m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        assert!((p.data()[0] + 0.01).abs() < 1e-9);
        assert!((p.data()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut w = Tensor::<f64>::scalar(0.0);
        let mut adam = AdamState::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, [&w]);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * (w.data()[0] - 3.0));
            adam.step(&mut [&mut w], &[g]).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 0.05, "w = {}", w.data()[0]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = Tensor::<f64>::zeros([2]);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        assert!(adam.step(&mut [&mut p], &[Tensor::zeros([3])]).is_err());
        assert_eq!(adam.step, 0);
    }
}
