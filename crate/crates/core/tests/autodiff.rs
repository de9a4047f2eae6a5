//! Every tape operation against central finite differences, plus Adam
//! against a scalar reference implementation.

use fullglow::autodiff::{AdamConfig, AdamState, Tape, Var};
use fullglow::params::{ParamGrads, ParamStore};
use fullglow::verify::oracle::fd_partial;
use fullglow::{Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
}

/// `Σ out ⊙ r` for fixed random weights `r`, so every output element
/// contributes with a distinct coefficient.
fn projected(inputs: &[Tensor<f64>], build: &Build, with_grad: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let weights = random(tape.shape(out), 999);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.value(loss).item();
    if !with_grad {
        return (value, Vec::new());
    }
    let mut grads = tape.backward(loss).unwrap();
    let g = vars.iter().zip(inputs).map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    (value, g)
}

/// Worst relative gap between analytic and finite-difference gradients
/// over every input coordinate.
fn gradient_gap(inputs: Vec<Tensor<f64>>, build: &Build) -> f64 {
    let (_, analytic) = projected(&inputs, build, true);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let numeric = fd_partial(
                |v| {
                    let mut probe = inputs.clone();
                    probe[i].data_mut()[k] = v;
                    projected(&probe, build, false).0
                },
                t.data()[k],
                1e-6,
            );
            let a = analytic[i].data()[k];
            worst = worst.max((a - numeric).abs() / (1.0 + a.abs().max(numeric.abs())));
        }
    }
    worst
}

const TOL: f64 = 1e-7;

#[test]
fn elementwise_ops() {
    let a = random(&[2, 3], 1);
    let b = random(&[2, 3], 2);
    let positive = a.map(|v| v.abs() + 0.5);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<Build>)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul self", vec![a.clone()], Box::new(|t, v| t.mul(v[0], v[0]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -2.5))),
        ("add_const", vec![a.clone()], Box::new(|t, v| t.add_const(v[0], 3.0))),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("log", vec![positive], Box::new(|t, v| t.log(v[0]))),
        ("square", vec![a.clone()], Box::new(|t, v| t.square(v[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        ("log_sigmoid", vec![a.clone()], Box::new(|t, v| t.log_sigmoid(v[0]))),
        ("relu", vec![a.map(|v| if v.abs() < 0.1 { 0.3 } else { v })], Box::new(|t, v| t.relu(v[0]))),
    ];
    for (name, inputs, build) in cases {
        let gap = gradient_gap(inputs, build.as_ref());
        assert!(gap < TOL, "{name}: gap {gap:e}");
    }
}

#[test]
fn reductions_and_reshapes() {
    let x = random(&[2, 4, 2, 2], 3);
    let cases: Vec<(&str, Box<Build>)> = vec![
        ("sum", Box::new(|t, v| t.sum(v[0]))),
        ("sum_per_sample", Box::new(|t, v| t.sum_per_sample(v[0]))),
        ("expand", Box::new(|t, v| t.expand(v[0], 3))),
        ("reshape", Box::new(|t, v| t.reshape(v[0], vec![2, 16]))),
        ("slice", Box::new(|t, v| t.slice_channels(v[0], 1, 2))),
        ("concat", Box::new(|t, v| {
            let s = t.slice_channels(v[0], 0, 2)?;
            t.concat_channels(&[v[0], s])
        })),
        ("squeeze", Box::new(|t, v| t.squeeze(v[0]))),
        ("unsqueeze", Box::new(|t, v| t.unsqueeze(v[0]))),
    ];
    for (name, build) in cases {
        let gap = gradient_gap(vec![x.clone()], build.as_ref());
        assert!(gap < TOL, "{name}: gap {gap:e}");
    }
}

#[test]
fn layer_ops() {
    let x = random(&[2, 3, 4, 4], 4);
    for (stride, padding, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 3)] {
        let build: Box<Build> = Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, padding));
        let gap = gradient_gap(vec![x.clone(), random(&[2, 3, k, k], 5), random(&[2], 6)], build.as_ref());
        assert!(gap < TOL, "conv2d stride {stride} pad {padding}: {gap:e}");
    }
    let gap = gradient_gap(vec![random(&[3, 5], 7), random(&[4, 5], 8), random(&[4], 9)], &|t, v| t.dense(v[0], v[1], v[2]));
    assert!(gap < TOL, "dense: {gap:e}");
    let gap = gradient_gap(vec![x.clone(), random(&[2, 3], 10), random(&[2, 3], 11)], &|t, v| t.channel_affine(v[0], v[1], v[2]));
    assert!(gap < TOL, "channel_affine: {gap:e}");
    let gap = gradient_gap(vec![x.clone(), random(&[2, 3, 3], 12)], &|t, v| t.channel_mix(v[0], v[1]));
    assert!(gap < TOL, "channel_mix: {gap:e}");
    let lu: &Build = &|t, v| t.lu_assemble(v[0], v[1], v[2], &[2, 0, 1], &[1.0, -1.0, 1.0]);
    let gap = gradient_gap(vec![random(&[2, 3], 13), random(&[2, 3], 14), random(&[2, 3], 15).map(|v| 0.3 * v)], lu);
    assert!(gap < TOL, "lu_assemble: {gap:e}");
}

#[test]
fn seeded_backward_matches_sum_of_parts() {
    // Seeding two outputs equals backpropagating their weighted sum.
    let x = random(&[2, 3], 16);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let e = tape.exp(xv).unwrap();
    let s = tape.square(xv).unwrap();
    let mut seeded = tape.backward_with(vec![(e, Tensor::full(&[2, 3], 2.0)), (s, Tensor::full(&[2, 3], 1.0))]).unwrap();
    let g = seeded.take(xv).unwrap();
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert!((gi - (2.0 * xi.exp() + 2.0 * xi)).abs() < 1e-12);
    }
}

#[test]
fn a_tape_cannot_be_swept_twice() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let y = tape.square(x).unwrap();
    tape.backward(y).unwrap();
    assert!(tape.backward(y).is_err());
}

#[test]
fn non_finite_results_are_reported() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(1000.0), true);
    assert!(tape.exp(x).is_err());
    let z = tape.leaf(Tensor::scalar(0.0), true);
    assert!(tape.log(z).is_err());
}

#[test]
fn adam_matches_a_scalar_reference() {
    let config = AdamConfig::default();
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), true).unwrap();
    let mut adam = AdamState::new(&store, config);
    let grad_steps = [[0.1, -0.2, 0.3], [-0.4, 0.05, 0.0]];
    let lr = 1e-2;

    let mut w = vec![0.5, -1.0, 2.0];
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    for (t, g) in grad_steps.iter().enumerate() {
        let mut grads = ParamGrads::new(store.len());
        grads.accumulate(id, Tensor::new(vec![3], g.to_vec()).unwrap());
        adam.step(&mut store, &grads, lr).unwrap();
        let step = (t + 1) as i32;
        for i in 0..3 {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - config.beta1.powi(step));
            let v_hat = v[i] / (1.0 - config.beta2.powi(step));
            w[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
        for (a, b) in store.get(id).data().iter().zip(&w) {
            assert!((a - b).abs() < 1e-12, "step {step}: {a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients_hold_for_random_shapes(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4, size in 3usize..6, seed in 0u64..1000,
    ) {
        let build: &Build = &|t, v| t.conv2d(v[0], v[1], v[2], 1, 1);
        let gap = gradient_gap(
            vec![random(&[n, cin, size, size], seed), random(&[cout, cin, 3, 3], seed + 1), random(&[cout], seed + 2)],
            build,
        );
        prop_assert!(gap < TOL, "gap {gap:e}");
    }

    #[test]
    fn channel_mix_gradients_hold_for_random_shapes(n in 1usize..3, c in 1usize..5, hw in 1usize..4, seed in 0u64..1000) {
        let gap = gradient_gap(vec![random(&[n, c, hw, hw], seed), random(&[n, c, c], seed + 7)], &|t, v| t.channel_mix(v[0], v[1]));
        prop_assert!(gap < TOL, "gap {gap:e}");
    }

    #[test]
    fn squeeze_then_unsqueeze_is_the_identity(n in 1usize..3, c in 1usize..4, half in 1usize..4, seed in 0u64..1000) {
        let x = random(&[n, c, 2 * half, 2 * half], seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.squeeze(v).unwrap();
        prop_assert_eq!(tape.shape(s), &[n, 4 * c, half, half][..]);
        let back = tape.unsqueeze(s).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }
}
