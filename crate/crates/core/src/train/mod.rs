//! Optimization loop, batching, held-out evaluation and persistence.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, TrainState, MAGIC, VERSION};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{dequantize, grid_tensor_u8, PairedSample};
use crate::error::{Error, Result};
use crate::model::{bits_per_dim, FullGlow, PairBatch};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total iteration budget; a resumed run continues up to this count.
    pub iterations: u64,
    pub checkpoint_interval: u64,
    /// Recompute within-step activations during the backward sweep.
    pub checkpointing: bool,
    pub seed: u64,
    /// Decay the learning rate linearly to zero over the budget.
    pub linear_decay: bool,
    /// Pairs used for data-dependent initialization.
    pub init_batch: usize,
    /// Where periodic checkpoints are written.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            iterations: 2000,
            checkpoint_interval: 500,
            checkpointing: false,
            seed: 0,
            linear_decay: false,
            init_batch: 16,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("lr must be finite and > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.iterations == 0 {
            problems.push("iterations must be at least 1".to_string());
        }
        if self.checkpoint_interval == 0 {
            problems.push("checkpoint_interval must be at least 1".to_string());
        }
        if self.init_batch == 0 {
            problems.push("init_batch must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    fn rate_at(&self, iteration: u64) -> f64 {
        if self.linear_decay {
            self.learning_rate * (self.iterations - iteration) as f64 / self.iterations as f64
        } else {
            self.learning_rate
        }
    }
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub loss: f64,
    pub bpd_source: f64,
    pub bpd_target: f64,
}

pub const TRACE_HEADER: &str = "iteration,loss,bpd_source,bpd_target";

/// The trace as CSV, header included.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.iteration, r.loss, r.bpd_source, r.bpd_target).expect("write to string");
    }
    out
}

/// Random stream for one training iteration; depends only on the seed and
/// the iteration index so resumed runs draw the same batches.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Dequantizes a set of pairs into a batch. The boundary map is included
/// when `with_boundary` is set.
pub fn make_batch<R: Real>(samples: &[&PairedSample], with_boundary: bool, rng: &mut impl Rng) -> Result<PairBatch<R>> {
    if samples.is_empty() {
        return Err(Error::usage("cannot build an empty batch"));
    }
    let mut src = Vec::with_capacity(samples.len());
    let mut tgt = Vec::with_capacity(samples.len());
    let mut bnd = Vec::with_capacity(samples.len());
    for s in samples {
        src.push(dequantize::<R>(&s.seg, rng));
        tgt.push(dequantize::<R>(&s.photo, rng));
        if with_boundary {
            bnd.push(grid_tensor_u8::<R>(&s.boundary_or_derived()));
        }
    }
    Ok(PairBatch {
        source: Tensor::stack(&src)?,
        target: Tensor::stack(&tgt)?,
        boundary: if with_boundary { Some(Tensor::stack(&bnd)?) } else { None },
    })
}

const INIT_STREAM: u64 = u64::MAX;
const EVAL_SEED: u64 = 0x5EED_0E7A1;

/// Runs data-dependent initialization on the first `cfg.init_batch` pairs
/// if the model has not been initialized yet.
pub fn ensure_initialized<R: Real>(state: &mut TrainState<R>, data: &[PairedSample], cfg: &TrainConfig) -> Result<()> {
    if state.model.is_initialized() {
        return Ok(());
    }
    let refs: Vec<&PairedSample> = data.iter().take(cfg.init_batch).collect();
    let batch = make_batch(&refs, state.model.uses_boundary(), &mut iteration_rng(cfg.seed, INIT_STREAM))?;
    state.model.initialize(&batch)
}

/// Trains until `state.iteration` reaches the budget. `on_step` runs after
/// every iteration and may abort training by returning an error.
pub fn train<R: Real>(
    state: &mut TrainState<R>,
    data: &[PairedSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TraceRow, &TrainState<R>) -> Result<()>,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::usage("training needs a nonempty dataset"));
    }
    let size = state.model.config().image_size;
    if let Some(bad) = data.iter().position(|s| s.size() != (size, size)) {
        return Err(Error::config(format!("pair {bad} is {:?}, the model expects {size}×{size}", data[bad].size())));
    }
    ensure_initialized(state, data, cfg)?;
    let dim = state.model.config().image_dim();
    let with_boundary = state.model.uses_boundary();
    let mut rows = Vec::new();
    let mut last_finite: Option<f64> = None;
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let mut rng = iteration_rng(cfg.seed, it);
        let picks: Vec<&PairedSample> = (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let batch = make_batch::<R>(&picks, with_boundary, &mut rng)?;
        let abort = |msg: String| {
            Error::numerical(match last_finite {
                Some(l) => format!("iteration {it}: {msg}; last finite loss {l}"),
                None => format!("iteration {it}: {msg}; no finite loss yet"),
            })
        };
        let (report, grads, _) = state.model.loss_and_grads(&batch, cfg.checkpointing).map_err(|e| match e {
            Error::Numerical(m) => abort(m),
            other => other,
        })?;
        if !report.loss.is_finite() {
            return Err(abort(format!("loss is {}", report.loss)));
        }
        state.adam.step(&mut state.model.store, &grads, cfg.rate_at(it))?;
        state.iteration += 1;
        last_finite = Some(report.loss);
        let mean_bpd = |lp: &[f64]| lp.iter().map(|&l| bits_per_dim(l, dim)).sum::<f64>() / lp.len() as f64;
        let row = TraceRow {
            iteration: it,
            loss: report.loss,
            bpd_source: mean_bpd(&report.source_logp),
            bpd_target: mean_bpd(&report.target_logp),
        };
        rows.push(row);
        if let Some(path) = &cfg.checkpoint_path {
            if state.iteration % cfg.checkpoint_interval == 0 || state.iteration == cfg.iterations {
                save_checkpoint(state, path)?;
            }
        }
        on_step(&row, state)?;
    }
    Ok(rows)
}

/// Mean conditional bits per dimension over `data`, with dequantization
/// noise drawn from a fixed stream so repeated evaluations agree.
pub fn evaluate_bpd<R: Real>(model: &FullGlow<R>, data: &[PairedSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::usage("evaluation needs a nonempty dataset"));
    }
    let mut total = 0.0;
    for (i, chunk) in data.chunks(8).enumerate() {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        let batch = make_batch::<R>(&refs, model.uses_boundary(), &mut iteration_rng(EVAL_SEED, i as u64))?;
        total += model.bpd(&batch)?.iter().sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::model::ModelConfig;

    fn tiny_model() -> FullGlow<f64> {
        let cfg = ModelConfig { n_blocks: 2, n_flows: 2, image_size: 8, hidden_channels: 8, ..ModelConfig::default() };
        FullGlow::new(cfg, 1).unwrap()
    }

    #[test]
    fn same_seed_gives_the_same_trace() {
        let data = generate_dataset(4, 8, 8, 2).unwrap();
        let cfg = TrainConfig { iterations: 5, seed: 9, ..TrainConfig::default() };
        let run = || train(&mut TrainState::new(tiny_model()), &data, &cfg, |_, _| Ok(())).unwrap();
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.len(), 5);
        assert!(a[0].loss.is_finite());
    }

    #[test]
    fn trace_csv_has_the_documented_header() {
        let csv = trace_csv(&[TraceRow { iteration: 0, loss: 1.5, bpd_source: -0.5, bpd_target: 2.0 }]);
        assert_eq!(csv, "iteration,loss,bpd_source,bpd_target\n0,1.5,-0.5,2\n");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = TrainConfig { learning_rate: -1.0, batch_size: 0, ..TrainConfig::default() };
        let Err(Error::Config(msg)) = cfg.validate() else { panic!() };
        assert!(msg.contains("lr") && msg.contains("batch_size"));
        let data = generate_dataset(1, 16, 8, 2).unwrap();
        let err = train(&mut TrainState::new(tiny_model()), &data, &TrainConfig::default(), |_, _| Ok(()));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_is_repeatable() {
        let data = generate_dataset(3, 8, 8, 4).unwrap();
        let mut state = TrainState::new(tiny_model());
        ensure_initialized(&mut state, &data, &TrainConfig::default()).unwrap();
        let a = evaluate_bpd(&state.model, &data).unwrap();
        assert_eq!(a, evaluate_bpd(&state.model, &data).unwrap());
    }
}
