use naturalize_autodiff::{Tape, Tensor};
use naturalize_core::losses::{
    adversarial_loss, blackbox_scaled_gradient, gradient_scale, perceptual_loss, LossWeights, PerceptualNet,
    L_VGG_FLOOR,
};
use naturalize_core::Label;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grads(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| Tensor::from_fn(s.to_vec(), |_| rng.random_range(-5.0..5.0))).collect()
}

fn check_scaled(l_vgg: f64, l_adv: f64, alpha: f64, seed: u64) {
    let w = LossWeights::new(alpha).unwrap();
    let original = grads(seed, &[&[3, 2, 3, 3], &[7], &[1]]);
    let mut scaled = original.clone();
    let factor = blackbox_scaled_gradient(l_vgg, l_adv, &mut scaled, w);
    let expected_factor = ((1.0 - alpha) * l_vgg + alpha * l_adv) / l_vgg;
    assert!((factor - expected_factor).abs() <= 1e-12 * expected_factor.max(1.0));
    for (g, s) in original.iter().zip(&scaled) {
        for (&g, &s) in g.data().iter().zip(s.data()) {
            let want = expected_factor * g;
            assert!((s - want).abs() <= 1e-12 * want.abs().max(1.0), "{s} vs {want}");
        }
    }
}

#[test]
fn degenerate_cases() {
    check_scaled(2.0, 1.0, 0.005, 1);
    check_scaled(0.7, 3.0, 0.0, 2);
    check_scaled(0.7, 0.0, 0.005, 3);
    check_scaled(0.7, 0.0, 0.0, 4);
    let mut g = grads(5, &[&[4]]);
    let before = g.clone();
    assert_eq!(blackbox_scaled_gradient(0.7, 5.0, &mut g, LossWeights::new(0.0).unwrap()), 1.0);
    assert!(g.iter().zip(&before).all(|(a, b)| a.bit_eq(b)));
}

proptest! {
    #[test]
    fn scaled_gradient_matches_closed_form(
        l_vgg in 1e-6f64..50.0,
        l_adv in 0.0f64..20.0,
        alpha in 0.0f64..0.999,
        seed in any::<u64>(),
    ) {
        check_scaled(l_vgg, l_adv, alpha, seed);
    }

    #[test]
    fn scale_exceeds_one_iff_adversarial_loss_dominates(
        l_vgg in 1e-3f64..50.0,
        l_adv in 1e-3f64..50.0,
        alpha in 1e-3f64..0.999,
    ) {
        let s = gradient_scale(l_vgg, l_adv, LossWeights::new(alpha).unwrap()).unwrap();
        prop_assert!(s > 0.0);
        if l_adv > l_vgg * (1.0 + 1e-12) {
            prop_assert!(s > 1.0);
        } else if l_adv < l_vgg * (1.0 - 1e-12) {
            prop_assert!(s < 1.0);
        }
        let equal = gradient_scale(l_vgg, l_vgg, LossWeights::new(alpha).unwrap()).unwrap();
        prop_assert!((equal - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adversarial_loss_is_finite_and_non_negative(s in -0.5f64..1.5) {
        for t in [Label::Natural, Label::Cg] {
            let l = adversarial_loss(s, t);
            prop_assert!(l.is_finite() && l >= 0.0);
        }
    }
}

#[test]
fn floor_skips_scaling() {
    let w = LossWeights::default();
    assert!(gradient_scale(L_VGG_FLOOR, 1.0, w).is_some());
    assert!(gradient_scale(L_VGG_FLOOR * 0.5, 1.0, w).is_none());
}

#[test]
fn perceptual_gradient_matches_finite_differences() {
    let net = PerceptualNet::<f64>::seeded(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..3 {
        let a = Tensor::<f64>::from_fn([1, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn([1, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let loss = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let l = perceptual_loss(&net, tape.constant(x.clone()), tape.constant(b.clone())).unwrap();
            l.value().data()[0]
        };
        let tape = Tape::new();
        let x = tape.leaf(a.clone());
        let l = perceptual_loss(&net, x, tape.constant(b.clone())).unwrap();
        tape.backward(l).unwrap();
        let analytic = x.grad().unwrap();
        let h = 1e-6;
        for i in (0..a.len()).step_by(7) {
            let (mut plus, mut minus) = (a.clone(), a.clone());
            plus.data_mut()[i] += h;
            minus.data_mut()[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = analytic.data()[i];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "case {case} element {i}: autodiff {an} vs numeric {numeric}");
        }
    }
}
