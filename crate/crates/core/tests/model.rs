//! Whole-model properties on small configurations.

use fullglow::data::generate_dataset;
use fullglow::flow::gaussian_logp;
use fullglow::model::{bits_per_dim, objective, ConditioningMode, FullGlow, ModelConfig, PairBatch};
use fullglow::train::make_batch;
use fullglow::Real;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(mode: ConditioningMode, use_boundary: bool) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        n_flows: 2,
        image_size: 8,
        hidden_channels: 8,
        conditioning: mode,
        use_boundary,
        ..ModelConfig::default()
    }
}

fn batch<R: Real>(n: usize, size: usize, seed: u64, with_boundary: bool) -> PairBatch<R> {
    let samples = generate_dataset(n, size, 8, seed).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    make_batch(&refs, with_boundary, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Initialized on `data`, then nudged so zero-initialized layers matter.
fn model(config: ModelConfig, seed: u64, data: &PairBatch<f64>) -> FullGlow<f64> {
    let mut m = FullGlow::new(config, seed).unwrap();
    m.initialize(data).unwrap();
    m.store.perturb(0.05, &mut ChaCha8Rng::seed_from_u64(seed + 1), |_| true);
    m
}

fn mode_strategy() -> impl Strategy<Value = ConditioningMode> {
    prop::sample::select(ConditioningMode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn both_stacks_invert_for_any_configuration(
        n_blocks in 1usize..4, n_flows in 1usize..3, mode in mode_strategy(), use_boundary: bool, seed in 0u64..1000,
    ) {
        // The last block keeps a 2×2 grid; at 1×1 a two-sample actnorm init
        // on flat segmentation colours sits on the variance floor.
        let image_size = (2 << n_blocks).max(8);
        let config = ModelConfig { n_blocks, n_flows, image_size, ..small(mode, use_boundary) };
        let data = batch::<f64>(2, image_size, seed, use_boundary);
        let m = model(config, seed, &data);
        let (src, cache) = m.source_forward(&data.source, data.boundary.as_ref()).unwrap();
        prop_assert!(m.source_inverse(&src.latents).unwrap().max_abs_diff(&data.source) <= 1e-10);
        let tgt = m.target_forward(&data.target, &cache).unwrap();
        prop_assert!(m.target_inverse(&tgt.latents, &cache).unwrap().max_abs_diff(&data.target) <= 1e-10);
        prop_assert_eq!(tgt.latents.dim(), m.config().image_dim());
        prop_assert_eq!(src.latents.dim(), m.config().image_dim());
    }

    #[test]
    fn logp_is_base_density_plus_logdet(mode in mode_strategy(), seed in 0u64..1000) {
        let data = batch::<f64>(3, 8, seed, true);
        let m = model(small(mode, true), seed, &data);
        let (src, cache) = m.source_forward(&data.source, data.boundary.as_ref()).unwrap();
        let tgt = m.target_forward(&data.target, &cache).unwrap();
        for pass in [&src, &tgt] {
            for i in 0..3 {
                let base: f64 = pass.latents.chunks.iter().map(|c| gaussian_logp(&c.sample(i))).sum();
                let gap = (pass.logp[i] - (base + pass.logdet[i])).abs();
                prop_assert!(gap <= 1e-9 * pass.logp[i].abs().max(1.0), "sample {i}: gap {gap:e}");
            }
        }
    }
}

#[test]
fn loss_is_linear_in_lambda_with_the_source_nll_as_slope() {
    let data = batch::<f64>(2, 8, 5, false);
    let m = model(small(ConditioningMode::Full, false), 5, &data);
    let (ls, lt) = m.log_likelihoods(&data).unwrap();
    let source_nll = -ls.iter().sum::<f64>() / 2.0;
    let at_zero = m.loss_with_lambda(&data, 0.0).unwrap();
    assert!((at_zero - objective(&ls, &lt, 0.0)).abs() < 1e-12);
    for lambda in [1e-4, 0.5, 1.0, 3.0] {
        let expected = at_zero + lambda * source_nll;
        let got = m.loss_with_lambda(&data, lambda).unwrap();
        assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1.0), "λ={lambda}: {got} vs {expected}");
    }
}

#[test]
fn unconditional_target_ignores_the_source() {
    let a = batch::<f64>(2, 8, 11, false);
    let b = batch::<f64>(2, 8, 12, false);
    let swapped = PairBatch { source: b.source.clone(), target: a.target.clone(), boundary: None };
    let m = model(small(ConditioningMode::Unconditional, false), 3, &a);
    assert_eq!(m.log_likelihoods(&a).unwrap().1, m.log_likelihoods(&swapped).unwrap().1);

    let m = model(small(ConditioningMode::Full, false), 3, &a);
    assert_ne!(m.log_likelihoods(&a).unwrap().1, m.log_likelihoods(&swapped).unwrap().1);
}

#[test]
fn construction_is_deterministic_in_the_seed() {
    let config = small(ConditioningMode::Full, true);
    let a = FullGlow::<f64>::new(config.clone(), 7).unwrap();
    let b = FullGlow::<f64>::new(config.clone(), 7).unwrap();
    let c = FullGlow::<f64>::new(config, 8).unwrap();
    let values = |m: &FullGlow<f64>| m.store.entries().iter().flat_map(|e| e.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

#[test]
fn shared_source_cache_serves_forward_inverse_and_sampling() {
    let data = batch::<f64>(2, 8, 21, true);
    let m = model(small(ConditioningMode::Full, true), 21, &data);
    let (_, cache) = m.source_forward(&data.source, data.boundary.as_ref()).unwrap();
    let z = m.target_forward(&data.target, &cache).unwrap().latents;
    let direct = m.target_inverse(&z, &cache).unwrap();
    let zero = m.sample(&data.source, data.boundary.as_ref(), 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let zero_latent = fullglow::flow::LatentPyramid::<f64>::sample(&m.latent_shapes(2), 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(zero, m.target_inverse(&zero_latent, &cache).unwrap());
    assert!(direct.max_abs_diff(&data.target) < 1e-10);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let m = FullGlow::<f64>::new(small(ConditioningMode::Full, true), 1).unwrap();
    let wrong_size = batch::<f64>(1, 16, 1, true);
    assert!(m.source_forward(&wrong_size.source, wrong_size.boundary.as_ref()).is_err());
    let right = batch::<f64>(1, 8, 1, true);
    assert!(m.source_forward(&right.source, None).is_err(), "boundary is required when configured");
    assert!(m.sample(&right.source, right.boundary.as_ref(), -1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn bits_per_dim_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((bits_per_dim(-3072.0 * ln2, 3072) - 1.0).abs() < 1e-12);
    assert!((bits_per_dim(-2.0 * 12.0 * ln2, 12) - 2.0).abs() < 1e-12);
    assert_eq!(bits_per_dim(0.0, 10), 0.0);
    assert!(bits_per_dim(5.0, 10) < 0.0, "densities above one give negative bits");
}
