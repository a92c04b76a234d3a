use naturalize_autodiff::{AdamConfig, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::FEATURE_LEN;
use super::DetectorError;
use crate::model::Binder;

pub const HIDDEN: usize = 32;
pub const MAX_EPOCHS: usize = 200;
pub const PATIENCE: usize = 10;
pub const BATCH: usize = 32;
pub const LEARNING_RATE: f64 = 1e-3;

/// `features -> 32 (ELU) -> 1 (sigmoid)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
}

impl Mlp {
    fn init(rng: &mut ChaCha8Rng) -> Mlp {
        Mlp {
            w1: crate::model::he_tensor(rng, &[HIDDEN, FEATURE_LEN], FEATURE_LEN),
            b1: Tensor::zeros([HIDDEN]),
            w2: crate::model::he_tensor(rng, &[1, HIDDEN], 2 * HIDDEN),
            b2: Tensor::zeros([1]),
        }
    }

    pub fn params(&self) -> [&Tensor<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> [&mut Tensor<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn logit(&self, z: &[f64]) -> f64 {
        let (w1, b1, w2) = (self.w1.data(), self.b1.data(), self.w2.data());
        let mut out = self.b2.data()[0];
        for j in 0..HIDDEN {
            let pre = b1[j] + w1[j * FEATURE_LEN..(j + 1) * FEATURE_LEN].iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
            out += w2[j] * naturalize_autodiff::elu(pre);
        }
        out
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        naturalize_autodiff::sigmoid(self.logit(z))
    }

    fn bce(&self, rows: &[(&[f64], f64)]) -> f64 {
        let total: f64 = rows
            .iter()
            .map(|&(z, t)| {
                let l = self.logit(z);
                l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
            })
            .sum();
        total / rows.len() as f64
    }

    fn step(&mut self, adam: &mut AdamState<f64>, rows: &[(&[f64], f64)]) -> Result<(), DetectorError> {
        let x = Tensor::new([rows.len(), FEATURE_LEN], rows.iter().flat_map(|r| r.0.iter().copied()).collect())?;
        let targets: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let tape = Tape::new();
        let mut b = Binder::trainable(&tape);
        let (w1, b1, w2, b2) = (b.bind(&self.w1), b.bind(&self.b1), b.bind(&self.w2), b.bind(&self.b2));
        let logits = tape.constant(x).linear(w1, b1)?.elu().linear(w2, b2)?;
        let loss = logits.bce_with_logits(&targets)?;
        tape.backward(loss)?;
        let grads = b.grads(&self.params());
        adam.step(&mut self.params_mut(), &grads)?;
        Ok(())
    }

    /// Adam on mini-batches with a stratified 20% validation split; stops after
    /// `PATIENCE` epochs without validation improvement and keeps the best weights.
    pub fn train(natural: &[Vec<f64>], cg: &[Vec<f64>], seed: u64) -> Result<Mlp, DetectorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train: Vec<(&[f64], f64)> = Vec::new();
        let mut val: Vec<(&[f64], f64)> = Vec::new();
        for (rows, t) in [(natural, 1.0), (cg, 0.0)] {
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.shuffle(&mut rng);
            let n_val = if rows.len() >= 2 { (rows.len() / 5).max(1) } else { 0 };
            for (k, &i) in idx.iter().enumerate() {
                let row = (rows[i].as_slice(), t);
                if k < n_val {
                    val.push(row)
                } else {
                    train.push(row)
                }
            }
        }
        if val.is_empty() {
            val = train.clone();
        }
        let mut mlp = Mlp::init(&mut rng);
        let mut adam = AdamState::new(AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() }, mlp.params());
        let (mut best, mut best_loss, mut stale) = (mlp.clone(), mlp.bce(&val), 0);
        for epoch in 0..MAX_EPOCHS {
            train.shuffle(&mut rng);
            for chunk in train.chunks(BATCH) {
                mlp.step(&mut adam, chunk)?;
            }
            let loss = mlp.bce(&val);
            if loss < best_loss {
                (best, best_loss, stale) = (mlp.clone(), loss, 0);
            } else {
                stale += 1;
                if stale >= PATIENCE {
                    log::debug!("detector MLP stopped after {} epochs (validation BCE {best_loss:.4})", epoch + 1);
                    break;
                }
            }
        }
        for p in best.params_mut() {
            *p = p.map(|v| v as f32 as f64);
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learns_a_threshold_on_one_feature() {
        let row = |v: f64| {
            let mut r = vec![0.0; FEATURE_LEN];
            r[7] = v;
            r
        };
        let natural: Vec<_> = (0..40).map(|i| row(1.0 + i as f64 / 40.0)).collect();
        let cg: Vec<_> = (0..40).map(|i| row(-1.0 - i as f64 / 40.0)).collect();
        let m = Mlp::train(&natural, &cg, 3).unwrap();
        assert!(natural.iter().all(|r| m.score(r) > 0.5));
        assert!(cg.iter().all(|r| m.score(r) < 0.5));
        assert_eq!(m, Mlp::train(&natural, &cg, 3).unwrap());
    }
}
