//! Autodiff gradients against central finite differences (f64).

use naturalize_autodiff::{pixel_shuffle, pixel_unshuffle, Mode, RunningStats, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Largest elementwise deviation between autodiff and central differences,
/// relative to the largest numerical gradient magnitude.
fn max_rel_error(inputs: &[Tensor<f64>], loss: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let l = loss(&tape, &vars);
    tape.backward(l).unwrap();
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))).collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        loss(&tape, &vars).item().unwrap()
    };
    let (mut worst, mut scale) = (0.0f64, 1e-8f64);
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max((numeric - analytic[k].data()[i]).abs());
            scale = scale.max(numeric.abs());
        }
    }
    worst / scale
}

/// `sum(f(x) * r)` for a fixed random `r`, so every output element matters.
fn weighted<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random(&mut rng, &out.shape()));
    out.mul(r).unwrap().sum()
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&mut rng, &[1, 2, 4, 4]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3])];
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let err = max_rel_error(&inputs, |t, v| weighted(t, v[0].conv2d(v[1], v[2], stride, pad).unwrap(), 9));
        assert!(err < TOL, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn conv2d_transpose_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&mut rng, &[2, 3, 3, 3]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[2])];
    let err = max_rel_error(&inputs, |t, v| weighted(t, v[0].conv2d_transpose(v[1], v[2], 2, 1, 1).unwrap(), 3));
    assert!(err < TOL, "{err}");
}

#[test]
fn pool_shuffle_elu_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = [random(&mut rng, &[2, 8, 2, 2])];
    assert!(max_rel_error(&x, |t, v| weighted(t, v[0].avg_pool2().unwrap(), 4)) < TOL);
    assert!(max_rel_error(&x, |t, v| weighted(t, v[0].pixel_shuffle(2).unwrap(), 5)) < TOL);
    assert!(max_rel_error(&x, |t, v| weighted(t, v[0].elu(), 6)) < TOL);
}

#[test]
fn batch_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&mut rng, &[3, 2, 2, 2]), random(&mut rng, &[2]), random(&mut rng, &[2])];
    for mode in [Mode::Train, Mode::Eval] {
        let err = max_rel_error(&inputs, |t, v| {
            let mut stats = RunningStats::new(2);
            stats.var = Tensor::new([2], vec![0.7, 1.3]).unwrap();
            weighted(t, v[0].batch_norm(v[1], v[2], &mut stats, mode).unwrap(), 7)
        });
        assert!(err < TOL, "{mode:?}: {err}");
    }
}

#[test]
fn composite_elu_of_linear_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&mut rng, &[4, 5]), random(&mut rng, &[3, 5]), random(&mut rng, &[3])];
    let err = max_rel_error(&inputs, |_, v| v[0].linear(v[1], v[2]).unwrap().elu().sum());
    assert!(err < TOL, "{err}");
    let err = max_rel_error(&inputs[..1], |t, v| {
        let target = t.constant(Tensor::full([4, 5], 0.25));
        v[0].sigmoid().mse_loss(target).unwrap()
    });
    assert!(err < TOL, "{err}");
    let err = max_rel_error(&[inputs[2].clone()], |_, v| v[0].bce_with_logits(&[1.0, 0.0, 1.0]).unwrap());
    assert!(err < TOL, "{err}");
}

#[test]
fn transpose_forward_equals_conv_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[1, 2, 6, 6]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let tape = Tape::new();
    let xv = tape.leaf(x);
    let wv = tape.constant(w.clone());
    let b = tape.constant(Tensor::zeros([3]));
    let y = xv.conv2d(wv, b, 2, 1).unwrap();
    let g = random(&mut rng, &y.shape());
    let loss = y.mul(tape.constant(g.clone())).unwrap().sum();
    tape.backward(loss).unwrap();

    let tape2 = Tape::new();
    let gv = tape2.constant(g);
    let z = gv.conv2d_transpose(tape2.constant(w), tape2.constant(Tensor::zeros([2])), 2, 1, 1).unwrap().value();
    let dx = xv.grad().unwrap();
    for (a, b) in z.data().iter().zip(dx.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn conv_pair(x: &Tensor<f64>, y: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> (f64, f64) {
    let tape = Tape::new();
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let wv = tape.constant(w.clone());
    let cx = tape.constant(x.clone()).conv2d(wv, tape.constant(Tensor::zeros([cout])), stride, 1).unwrap();
    let ty = tape
        .constant(y.clone())
        .conv2d_transpose(wv, tape.constant(Tensor::zeros([cin])), stride, 1, stride - 1)
        .unwrap();
    (cx.value().dot(y).unwrap(), x.dot(&ty.value()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transpose_is_adjoint_of_conv(seed in any::<u64>(), stride in 1usize..=2, side in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = side * 2;
        let x = random(&mut rng, &[1, 2, s, s]);
        let y = random(&mut rng, &[1, 3, s / stride, s / stride]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let (lhs, rhs) = conv_pair(&x, &y, &w, stride);
        prop_assert!((lhs - rhs).abs() < 1e-6, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn pixel_shuffle_is_a_bijection(vals in proptest::collection::vec(-1e6f32..1e6, 2 * 8 * 3 * 2), r in 1usize..=2) {
        let t = Tensor::new([2, 8, 3, 2], vals).unwrap();
        let back = pixel_unshuffle(&pixel_shuffle(&t, r).unwrap(), r).unwrap();
        prop_assert!(back.bit_eq(&t));
    }

    #[test]
    fn forward_ops_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 4, 4, 4]);
        let w = random(&mut rng, &[4, 4, 3, 3]);
        let run = || {
            let tape = Tape::new();
            let y = tape.constant(x.clone())
                .conv2d(tape.constant(w.clone()), tape.constant(Tensor::zeros([4])), 1, 1).unwrap()
                .batch_norm(tape.constant(Tensor::full([4], 1.0)), tape.constant(Tensor::zeros([4])), &mut RunningStats::new(4), Mode::Train).unwrap()
                .elu()
                .avg_pool2().unwrap()
                .pixel_shuffle(2).unwrap();
            y.value()
        };
        prop_assert!(run().bit_eq(&run()));
    }
}
