//! Exactness checks: invertibility, log-determinants, gradients,
//! initialization and checkpointed recomputation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::oracle::{channel_stats, fd_jacobian, log_abs_det, lu_product, orthonormality_error};
use super::{perturbed_model, relative_error, synthetic_batch, Outcome, VerifyOptions};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::{ActivationCache, ConditioningMode, FullGlow, ModelConfig, PairBatch, SubLayer};
use crate::tensor::{Real, Tensor};

const MODES: [ConditioningMode; 3] =
    [ConditioningMode::Full, ConditioningMode::CouplingOnly, ConditioningMode::Unconditional];

fn random_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches data")
}

fn cast_batch<S: Real>(b: &PairBatch<f64>) -> PairBatch<S> {
    PairBatch { source: b.source.cast(), target: b.target.cast(), boundary: b.boundary.as_ref().map(|t| t.cast()) }
}

/// Worst relative reconstruction error of either stack.
fn round_trip<R: Real>(model: &FullGlow<R>, batch: &PairBatch<R>) -> Result<f64> {
    let (src, cache) = model.source_forward(&batch.source, batch.boundary.as_ref())?;
    let source_back = model.source_inverse(&src.latents)?;
    let tgt = model.target_forward(&batch.target, &cache)?;
    let target_back = model.target_inverse(&tgt.latents, &cache)?;
    Ok(relative_error(&source_back, &batch.source).max(relative_error(&target_back, &batch.target)))
}

pub(super) fn invertibility(_: &VerifyOptions) -> Result<Outcome> {
    let start = Instant::now();
    let variants = [
        (ConditioningMode::Full, false),
        (ConditioningMode::CouplingOnly, false),
        (ConditioningMode::Unconditional, false),
        (ConditioningMode::Full, true),
    ];
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for (i, (mode, boundary)) in variants.into_iter().enumerate() {
        let config = ModelConfig { n_blocks: 4, n_flows: 4, conditioning: mode, use_boundary: boundary, ..ModelConfig::default() };
        let batch = synthetic_batch::<f64>(2, 32, 100 + i as u64, boundary)?;
        let model = perturbed_model(config, 7 + i as u64, &batch, 0.01)?;
        worst64 = worst64.max(round_trip(&model, &batch)?);
        worst32 = worst32.max(round_trip(&model.cast::<f32>(), &cast_batch::<f32>(&batch))?);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome::new(
        worst32 <= 1e-4 && worst64 <= 1e-10 && secs < 60.0,
        format!("f32 rel err {worst32:.2e} (≤1e-4), f64 rel err {worst64:.2e} (≤1e-10), {secs:.1}s (<60s)"),
    ))
}

fn toy_config(mode: ConditioningMode) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        n_flows: 2,
        image_size: 4,
        in_channels: 2,
        hidden_channels: 8,
        conditioning: mode,
        ..ModelConfig::default()
    }
}

fn toy_model(mode: ConditioningMode, rng: &mut ChaCha8Rng) -> Result<FullGlow<f64>> {
    let init = PairBatch {
        source: random_tensor(&[4, 2, 4, 4], 0.3, rng),
        target: random_tensor(&[4, 2, 4, 4], 0.3, rng),
        boundary: None,
    };
    perturbed_model(toy_config(mode), 3, &init, 0.05)
}

/// `|ln|det J| − logdet|` for a map from a flat input to a flat output.
fn logdet_gap(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], reported: f64) -> f64 {
    let jac = fd_jacobian(&f, x, 1e-5);
    let n = x.len();
    assert_eq!(jac.len(), n * n, "map must be dimension preserving");
    (log_abs_det(&jac, n) - reported).abs()
}

pub(super) fn change_of_variables(_: &VerifyOptions) -> Result<Outcome> {
    const TOL: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = [1, 2, 4, 4];
    let (mut end_to_end, mut per_layer, mut consistency) = (0.0f64, 0.0f64, 0.0f64);
    let mut layers_checked = 0;
    for mode in MODES {
        let model = toy_model(mode, &mut rng)?;
        let source = random_tensor(&shape, 0.5, &mut rng);
        let target = random_tensor(&shape, 0.5, &mut rng);
        let image = |v: &[f64]| Tensor::new(shape.to_vec(), v.to_vec()).expect("shape matches data");

        let (src, cache) = model.source_forward(&source, None)?;
        let source_map = |v: &[f64]| model.source_forward(&image(v), None).expect("finite").0.latents.flatten();
        end_to_end = end_to_end.max(logdet_gap(source_map, source.data(), src.logdet[0]));

        let tgt = model.target_forward(&target, &cache)?;
        let target_map = |v: &[f64]| model.target_forward(&image(v), &cache).expect("finite").latents.flatten();
        end_to_end = end_to_end.max(logdet_gap(target_map, target.data(), tgt.logdet[0]));

        for pass in [&src, &tgt] {
            consistency = consistency.max((pass.logp[0] - pass.latents.logp() - pass.logdet[0]).abs());
        }

        for (index, layout) in model.layouts().iter().enumerate() {
            let step_shape = [1, layout.channels, layout.height, layout.width];
            let as_step = |v: &[f64]| Tensor::new(step_shape.to_vec(), v.to_vec()).expect("shape matches data");
            for layer in SubLayer::ALL {
                let x = random_tensor(&step_shape, 0.5, &mut rng);
                let (_, ld) = model.target_sublayer(index, layer, &x, &cache)?;
                let map = |v: &[f64]| model.target_sublayer(index, layer, &as_step(v), &cache).expect("finite").0.into_data();
                per_layer = per_layer.max(logdet_gap(map, x.data(), ld[0]));
                layers_checked += 1;
            }
            let x = random_tensor(&step_shape, 0.5, &mut rng);
            let source_step = |v: &[f64]| -> Result<(Vec<f64>, f64)> {
                let mut tape = Tape::new();
                let xv = tape.constant(as_step(v));
                let vars = model.source_steps()[index].forward(&mut tape, &model.store, xv)?;
                Ok((tape.value(vars.out).data().to_vec(), tape.value(vars.logdet).data()[0]))
            };
            let (_, ld) = source_step(x.data())?;
            per_layer = per_layer.max(logdet_gap(|v| source_step(v).expect("finite").0, x.data(), ld));
            layers_checked += 1;
        }
    }
    Ok(Outcome::new(
        end_to_end <= TOL && per_layer <= TOL && consistency <= 1e-9,
        format!(
            "end-to-end gap {end_to_end:.2e}, worst of {layers_checked} layer gaps {per_layer:.2e} (≤1e-5); logp = prior + logdet to {consistency:.1e}"
        ),
    ))
}

fn parameter_class(name: &str) -> &'static str {
    if name.starts_with("source.") {
        "source"
    } else if name.contains(".actnorm_cn.") {
        "actnorm CN"
    } else if name.contains(".invconv_cn.") {
        "1×1 CN"
    } else if name.contains(".coupling_cn.") {
        "coupling CN"
    } else {
        "other"
    }
}

pub(super) fn gradients(_: &VerifyOptions) -> Result<Outcome> {
    const STEP: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;
    // Finite-difference noise floor for gradients that are nearly zero.
    const ABS_FLOOR: f64 = 1e-7;
    const PER_ENTRY: usize = 2;
    let config = ModelConfig { n_blocks: 2, n_flows: 2, image_size: 8, hidden_channels: 8, use_boundary: true, ..ModelConfig::default() };
    let batch = synthetic_batch::<f64>(2, 8, 31, true)?;
    let mut model = perturbed_model(config, 5, &batch, 0.05)?;
    let (report, grads, _) = model.loss_and_grads(&batch, false)?;
    let loss_gap = (report.loss - model.loss(&batch)?).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let classes = ["source", "actnorm CN", "1×1 CN", "coupling CN"];
    let mut covered = [0usize; 4];
    let (mut worst_rel, mut checked, mut failures) = (0.0f64, 0, 0);
    let ids: Vec<_> = model.store.trainable_ids().collect();
    for id in ids {
        let class = parameter_class(model.store.name(id));
        let analytic = grads.get_or_zero(id, &model.store);
        let len = analytic.numel();
        for _ in 0..PER_ENTRY.min(len) {
            let k = rand::Rng::random_range(&mut rng, 0..len);
            let original = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = original + STEP;
            let plus = model.loss(&batch)?;
            model.store.get_mut(id).data_mut()[k] = original - STEP;
            let minus = model.loss(&batch)?;
            model.store.get_mut(id).data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[k];
            let gap = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if gap > REL_TOL * scale + ABS_FLOOR {
                failures += 1;
            }
            if scale > 1e-3 {
                worst_rel = worst_rel.max(gap / scale);
            }
            if let Some(c) = classes.iter().position(|&c| c == class) {
                if a.abs() > 1e-8 {
                    covered[c] += 1;
                }
            }
            checked += 1;
        }
    }
    let all_covered = covered.iter().all(|&c| c > 0);
    let coverage: Vec<String> = classes.iter().zip(covered).map(|(c, k)| format!("{c} {k}")).collect();
    Ok(Outcome::new(
        failures == 0 && all_covered && loss_gap < 1e-10,
        format!(
            "{checked} coordinates, {failures} outside 1e-4 rel, worst rel {worst_rel:.2e}; nonzero per class: {}",
            coverage.join(", ")
        ),
    ))
}

/// Reads column `k` of the 1×1 kernel a target step applies, by feeding
/// the unit vector `e_k` at every pixel of every sample. Returns the
/// column and how far any pixel deviates from the first one.
fn probe_kernel_column(
    model: &FullGlow<f64>,
    index: usize,
    k: usize,
    cache: &ActivationCache<f64>,
) -> Result<(Vec<f64>, f64)> {
    let layout = model.layouts()[index];
    let n = cache.batch_size();
    let (c, hw) = (layout.channels, layout.height * layout.width);
    let mut x = Tensor::zeros(&[n, c, layout.height, layout.width]);
    for s in 0..n {
        x.data_mut()[(s * c + k) * hw..(s * c + k + 1) * hw].fill(1.0);
    }
    let (y, _) = model.target_sublayer(index, SubLayer::InvConv, &x, cache)?;
    let column: Vec<f64> = (0..c).map(|row| y.data()[row * hw]).collect();
    let mut spread = 0.0f64;
    for s in 0..n {
        for (row, &expected) in column.iter().enumerate() {
            for p in 0..hw {
                spread = spread.max((y.data()[(s * c + row) * hw + p] - expected).abs());
            }
        }
    }
    Ok((column, spread))
}

pub(super) fn initialization(_: &VerifyOptions) -> Result<Outcome> {
    let config = ModelConfig { n_blocks: 3, n_flows: 2, image_size: 16, hidden_channels: 16, use_boundary: true, ..ModelConfig::default() };
    let batch = synthetic_batch::<f64>(8, 16, 41, true)?;
    let mut model = FullGlow::<f64>::new(config, 4)?;
    model.initialize(&batch)?;
    let (_, cache) = model.source_forward(&batch.source, batch.boundary.as_ref())?;
    let (_, target_steps) = model.target_activations(&batch.target, &cache)?;

    let standardization = |act: &Tensor<f64>| -> Result<f64> {
        let (n, c, h, w) = act.dims4()?;
        Ok(channel_stats(act.data(), n, c, h * w)
            .into_iter()
            .map(|(mean, std)| mean.abs().max((std - 1.0).abs()))
            .fold(0.0, f64::max))
    };
    let mut target_moments = 0.0f64;
    let mut source_moments = 0.0f64;
    for (t, s) in target_steps.iter().zip(&cache.steps) {
        target_moments = target_moments.max(standardization(&t.act)?);
        source_moments = source_moments.max(standardization(&s.act)?);
    }

    let mut kernel = 0.0f64;
    let mut constancy = 0.0f64;
    let mut coupling = 0.0f64;
    let mut passthrough = 0.0f64;
    let sig2 = 1.0 / (1.0 + (-2.0f64).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for (index, layout) in model.layouts().iter().enumerate() {
        let c = layout.channels;
        let mut w = vec![0.0; c * c];
        for k in 0..c {
            let (column, spread) = probe_kernel_column(&model, index, k, &cache)?;
            constancy = constancy.max(spread);
            for (row, v) in column.into_iter().enumerate() {
                w[row * c + k] = v;
            }
        }
        kernel = kernel.max(orthonormality_error(&w, c));

        let inv = &model.source_steps()[index].invconv;
        let store = &model.store;
        let w = lu_product(
            &inv.frozen.perm(store),
            &inv.frozen.sign(store),
            store.get(inv.lower).data(),
            store.get(inv.upper).data(),
            store.get(inv.log_s).data(),
        );
        kernel = kernel.max(orthonormality_error(&w, c));

        let x = random_tensor(&[cache.batch_size(), c, layout.height, layout.width], 1.0, &mut rng);
        let (y, _) = model.target_sublayer(index, SubLayer::Coupling, &x, &cache)?;
        let half = c / 2;
        let x1 = x.slice_channels(0, half)?;
        let y1 = y.slice_channels(0, half)?;
        coupling = coupling.max(y1.max_abs_diff(&x1.map(|v| sig2 * v)));
        passthrough = passthrough.max(y.slice_channels(half, half)?.max_abs_diff(&x.slice_channels(half, half)?));
    }
    let exact = coupling == 0.0 && passthrough == 0.0;
    Ok(Outcome::new(
        target_moments <= 1e-4 && source_moments <= 1e-4 && kernel <= 1e-8 && constancy == 0.0 && exact,
        format!(
            "conditional actnorm |mean|,|std−1| ≤ {target_moments:.1e} (source {source_moments:.1e}, ≤1e-4); \
             |WᵀW−I| {kernel:.1e} (≤1e-8); coupling y1−sigmoid(2)·x1 {coupling:.0e}, y2−x2 {passthrough:.0e} (exact)"
        ),
    ))
}

pub(super) fn checkpointed_recomputation(_: &VerifyOptions) -> Result<Outcome> {
    let config = ModelConfig { n_blocks: 3, n_flows: 2, image_size: 16, hidden_channels: 8, use_boundary: true, ..ModelConfig::default() };
    let batch = synthetic_batch::<f64>(2, 16, 91, true)?;
    let model = perturbed_model(config, 9, &batch, 0.05)?;
    let (plain_report, plain, plain_mem) = model.loss_and_grads(&batch, false)?;
    let (chk_report, chk, chk_mem) = model.loss_and_grads(&batch, true)?;
    let mut worst = 0.0f64;
    let mut within = true;
    for id in model.store.trainable_ids() {
        let a = plain.get_or_zero(id, &model.store);
        let b = chk.get_or_zero(id, &model.store);
        let scale = a.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let gap = a.max_abs_diff(&b);
        within &= gap <= 1e-10 * scale + 1e-14;
        if scale > 0.0 {
            worst = worst.max(gap / scale);
        }
    }
    let loss_gap = (plain_report.loss - chk_report.loss).abs();
    let steps = model.layouts().len();
    let stored_ok = chk_mem.stored_activations == 2 * steps && chk_mem.stored_activations < plain_mem.stored_activations;
    Ok(Outcome::new(
        within && loss_gap <= 1e-10 * plain_report.loss.abs().max(1.0) && stored_ok,
        format!(
            "grad rel gap {worst:.1e} (≤1e-10), loss gap {loss_gap:.1e}; stored tensors {} = 2×{steps} steps vs {} on one tape; \
             peak tape scalars {} vs {}",
            chk_mem.stored_activations, plain_mem.stored_activations, chk_mem.peak_tape_scalars, plain_mem.peak_tape_scalars
        ),
    ))
}
