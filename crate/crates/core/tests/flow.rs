//! Layer-level invariants on randomized parameters: round trips,
//! log-determinants against a dense determinant of the finite-difference
//! Jacobian, and additivity under composition.

use fullglow::flow::{
    actnorm_apply, coupling_apply, invconv_apply, random_rotation, squeeze, ActnormParams, CouplingParams, Direction,
    InvConvParams,
};
use fullglow::verify::oracle::{fd_jacobian, log_abs_det};
use fullglow::{Real, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
enum Layer {
    Actnorm(ActnormParams<f64>),
    InvConv(InvConvParams<f64>),
    Coupling(CouplingParams<f64>),
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

fn random_layer(kind: u8, shape: &[usize], seed: u64) -> Layer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = shape[1];
    match kind % 3 {
        0 => Layer::Actnorm(ActnormParams { log_scale: normal(&[c], 0.5, &mut rng), shift: normal(&[c], 1.0, &mut rng) }),
        1 => {
            // A rotation bent away from orthogonality so every LU factor is nontrivial.
            let mut w = random_rotation(c, &mut rng);
            for v in &mut w {
                *v += rng.random_range(-0.2..0.2);
            }
            Layer::InvConv(InvConvParams::from_matrix(c, &w).unwrap())
        }
        _ => {
            let half = [shape[0], c / 2, shape[2], shape[3]];
            Layer::Coupling(CouplingParams { o1: normal(&half, 1.5, &mut rng), o2: normal(&half, 1.0, &mut rng) })
        }
    }
}

fn apply<R: Real>(layer: &Layer, x: &Tensor<R>, direction: Direction) -> (Tensor<R>, Vec<f64>) {
    let (y, ld) = match layer {
        Layer::Actnorm(p) => {
            let p = ActnormParams { log_scale: p.log_scale.cast(), shift: p.shift.cast() };
            actnorm_apply(x, &p, direction)
        }
        Layer::InvConv(p) => {
            let p = InvConvParams {
                perm: p.perm.clone(),
                sign: p.sign.clone(),
                lower: p.lower.cast(),
                upper: p.upper.cast(),
                log_s: p.log_s.cast(),
            };
            invconv_apply(x, &p, direction)
        }
        Layer::Coupling(p) => coupling_apply(x, &CouplingParams { o1: p.o1.cast(), o2: p.o2.cast() }, direction),
    }
    .unwrap();
    (y, ld.iter().map(|v| v.as_f64()).collect())
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1usize..3, 1usize..5, 1usize..3).prop_map(|(n, half_c, hw)| vec![n, 2 * half_c, hw, hw])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_layer_round_trips(kind in 0u8..3, shape in shape_strategy(), seed in 0u64..10_000) {
        let layer = random_layer(kind, &shape, seed);
        let x = normal(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let (y, fwd) = apply(&layer, &x, Direction::Forward);
        let (back, inv) = apply(&layer, &y, Direction::Inverse);
        prop_assert!(back.max_abs_diff(&x) <= 1e-12, "f64 gap {:e}", back.max_abs_diff(&x));
        for (a, b) in fwd.iter().zip(&inv) {
            prop_assert_eq!(a + b, 0.0, "forward and inverse logdets must cancel exactly");
        }

        let x32: Tensor<f32> = x.cast();
        let (y32, _) = apply(&layer, &x32, Direction::Forward);
        let (back32, _) = apply(&layer, &y32, Direction::Inverse);
        let rel = back32.max_abs_diff(&x32) / x32.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        prop_assert!(rel <= 1e-4, "f32 relative gap {rel:e}");
    }

    #[test]
    fn logdet_matches_the_dense_jacobian(kind in 0u8..3, half_c in 1usize..5, hw in 1usize..3, seed in 0u64..10_000) {
        let shape = vec![1, 2 * half_c, hw, hw];
        let layer = random_layer(kind, &shape, seed);
        let x = normal(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let d = x.numel();
        prop_assume!(d <= 32);
        let jac = fd_jacobian(
            |v| apply(&layer, &Tensor::new(shape.clone(), v.to_vec()).unwrap(), Direction::Forward).0.into_data(),
            x.data(),
            1e-5,
        );
        let oracle = log_abs_det(&jac, d);
        let (_, ld) = apply(&layer, &x, Direction::Forward);
        prop_assert!((ld[0] - oracle).abs() <= 1e-6, "reported {} vs dense {oracle}", ld[0]);
    }

    #[test]
    fn composed_logdet_is_the_sum_of_parts(shape in shape_strategy(), seed in 0u64..10_000) {
        let layers: Vec<Layer> = (0..3u8).map(|k| random_layer(k, &shape, seed + k as u64)).collect();
        let x = normal(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 9));
        let mut h = x.clone();
        let mut parts = vec![0.0; shape[0]];
        for layer in &layers {
            let (y, ld) = apply(layer, &h, Direction::Forward);
            for (p, l) in parts.iter_mut().zip(ld) {
                *p += l;
            }
            h = y;
        }
        if shape[1] * shape[2] * shape[3] <= 32 && shape[0] == 1 {
            let d = x.numel();
            let jac = fd_jacobian(
                |v| {
                    let mut h = Tensor::new(shape.clone(), v.to_vec()).unwrap();
                    for layer in &layers {
                        h = apply(layer, &h, Direction::Forward).0;
                    }
                    h.into_data()
                },
                x.data(),
                1e-5,
            );
            let oracle = log_abs_det(&jac, d);
            prop_assert!((parts[0] - oracle).abs() <= 1e-6, "sum {} vs dense {oracle}", parts[0]);
        }
        // Undo in reverse order.
        for layer in layers.iter().rev() {
            h = apply(layer, &h, Direction::Inverse).0;
        }
        prop_assert!(h.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn squeeze_is_a_volume_preserving_permutation(n in 1usize..3, c in 1usize..4, half in 1usize..4, seed in 0u64..1000) {
        let x = normal(&[n, c, 2 * half, 2 * half], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = squeeze(&x, Direction::Forward).unwrap();
        prop_assert_eq!(y.shape(), &[n, 4 * c, half, half][..]);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert_eq!(squeeze(&y, Direction::Inverse).unwrap(), x);
    }
}
