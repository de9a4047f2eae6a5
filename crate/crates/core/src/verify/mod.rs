//! Self-verification suite: every acceptance criterion as a runnable check,
//! each pairing the library path with an independent reference.

mod experiment;
mod numerics;
pub mod oracle;
mod semantics;

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::generate_dataset;
use crate::error::Result;
use crate::model::{FullGlow, ModelConfig, PairBatch};
use crate::tensor::Real;
use crate::train::make_batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Not run in quick mode.
    Skipped,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIP",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub id: u8,
    pub name: &'static str,
    pub status: Status,
    /// Measured quantities against their thresholds.
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {:<28} {:>7.1}s  {}",
            self.status,
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Replace the long training experiments with a short smoke run.
    pub quick: bool,
}

/// What a check hands back before timing is attached.
pub(crate) struct Outcome {
    pub status: Status,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { status: if passed { Status::Pass } else { Status::Fail }, detail: detail.into() }
    }

    pub fn skipped(detail: impl Into<String>) -> Self {
        Self { status: Status::Skipped, detail: detail.into() }
    }
}

type CheckFn = fn(&VerifyOptions) -> Result<Outcome>;

pub const CHECK_NAMES: [&str; 11] = [
    "invertibility",
    "change of variables",
    "gradients",
    "initialization",
    "learning",
    "conditioning ablation",
    "temperature",
    "content transfer",
    "checkpointed recomputation",
    "persistence",
    "boundary maps",
];

fn check_fn(id: u8) -> CheckFn {
    match id {
        1 => numerics::invertibility,
        2 => numerics::change_of_variables,
        3 => numerics::gradients,
        4 => numerics::initialization,
        5 => experiment::learning,
        6 => experiment::ablation,
        7 => semantics::temperature,
        8 => semantics::content_transfer,
        9 => numerics::checkpointed_recomputation,
        10 => semantics::persistence,
        11 => semantics::boundary_maps,
        _ => unreachable!("check ids are 1..=11"),
    }
}

/// Runs one check (1-based id). Errors raised inside a check count as a
/// failure with the error as detail.
pub fn run_check(id: u8, options: &VerifyOptions) -> CheckResult {
    assert!((1..=11).contains(&id), "check id {id} out of range");
    let start = Instant::now();
    let outcome = check_fn(id)(options).unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    CheckResult {
        id,
        name: CHECK_NAMES[id as usize - 1],
        status: outcome.status,
        detail: outcome.detail,
        elapsed: start.elapsed(),
    }
}

/// Runs every check in order, calling `report` as each one finishes.
pub fn run_all(options: &VerifyOptions, mut report: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    (1..=11)
        .map(|id| {
            let r = run_check(id, options);
            report(&r);
            r
        })
        .collect()
}

/// A synthetic batch of `n` pairs, dequantized with a fixed stream.
pub(crate) fn synthetic_batch<R: Real>(n: usize, size: usize, seed: u64, with_boundary: bool) -> Result<PairBatch<R>> {
    let samples = generate_dataset(n, size, 8, seed)?;
    let refs: Vec<_> = samples.iter().collect();
    make_batch(&refs, with_boundary, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Data-initialized model with every trainable entry nudged off its
/// initial value, so zero-initialized layers are exercised too.
pub(crate) fn perturbed_model<R: Real>(config: ModelConfig, seed: u64, init: &PairBatch<R>, scale: f64) -> Result<FullGlow<R>> {
    let mut model = FullGlow::new(config, seed)?;
    model.initialize(init)?;
    model.store.perturb(scale, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5), |_| true);
    Ok(model)
}

/// `‖a − b‖∞ / ‖b‖∞`.
pub(crate) fn relative_error<R: Real>(a: &crate::Tensor<R>, b: &crate::Tensor<R>) -> f64 {
    let scale = b.data().iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
    a.max_abs_diff(b) / scale.max(f64::MIN_POSITIVE)
}
