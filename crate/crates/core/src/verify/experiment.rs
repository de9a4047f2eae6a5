//! The scaled-down training experiment behind the learning and ablation
//! checks. Runs are cached so the ablation reuses the full-mode run.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Instant;

use super::{Outcome, VerifyOptions};
use crate::data::generate_dataset;
use crate::error::Result;
use crate::model::{ConditioningMode, FullGlow, ModelConfig};
use crate::train::{ensure_initialized, evaluate_bpd, train, TrainConfig, TrainState};

const TRAIN_SEED: u64 = 500;
const HELD_OUT_SEED: u64 = 900;

#[derive(Clone, Copy, Debug)]
struct Run {
    initial_bpd: f64,
    final_bpd: f64,
    seconds: f64,
}

struct Plan {
    train_pairs: usize,
    held_out: usize,
    iterations: u64,
    hidden: usize,
}

fn plan(quick: bool) -> Plan {
    if quick {
        Plan { train_pairs: 16, held_out: 8, iterations: 150, hidden: 32 }
    } else {
        // Coupling width scaled down with the flow count (16 → 4 steps per
        // block); at 128 the 64 training pairs are memorized well inside
        // the budget and held-out BPD ends above its starting value.
        Plan { train_pairs: 64, held_out: 16, iterations: 2000, hidden: 32 }
    }
}

static RUNS: Mutex<Option<HashMap<(&'static str, bool), Run>>> = Mutex::new(None);

/// Held-out conditional BPD before and after training a 4-block, 4-step
/// model in `mode`. Every mode sees the same data, seeds and budget.
fn run(mode: ConditioningMode, quick: bool) -> Result<Run> {
    let key = (mode.as_str(), quick);
    if let Some(r) = RUNS.lock().expect("run cache").get_or_insert_with(HashMap::new).get(&key) {
        return Ok(*r);
    }
    let start = Instant::now();
    let p = plan(quick);
    let train_data = generate_dataset(p.train_pairs, 32, 8, TRAIN_SEED)?;
    let held_out = generate_dataset(p.held_out, 32, 8, HELD_OUT_SEED)?;
    let config = ModelConfig {
        n_blocks: 4,
        n_flows: 4,
        hidden_channels: p.hidden,
        lambda: 1e-4,
        conditioning: mode,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig { learning_rate: 1e-4, batch_size: 1, iterations: p.iterations, seed: 3, ..TrainConfig::default() };
    let mut state = TrainState::new(FullGlow::<f32>::new(config, 1)?);
    ensure_initialized(&mut state, &train_data, &cfg)?;
    let initial_bpd = evaluate_bpd(&state.model, &held_out)?;
    train(&mut state, &train_data, &cfg, |_, _| Ok(()))?;
    let final_bpd = evaluate_bpd(&state.model, &held_out)?;
    let r = Run { initial_bpd, final_bpd, seconds: start.elapsed().as_secs_f64() };
    RUNS.lock().expect("run cache").get_or_insert_with(HashMap::new).insert(key, r);
    Ok(r)
}

pub(super) fn learning(options: &VerifyOptions) -> Result<Outcome> {
    let r = run(ConditioningMode::Full, options.quick)?;
    // BPD of the dequantized data carries no discretization offset and is
    // negative here, so the reduction is measured against its magnitude.
    let drop = r.initial_bpd - r.final_bpd;
    let required = 0.1 * r.initial_bpd.abs();
    let p = plan(options.quick);
    let detail = format!(
        "held-out bpd {:.4} → {:.4} after {} iterations, drop {drop:.4} (need ≥ {required:.4}); {:.0}s",
        r.initial_bpd, r.final_bpd, p.iterations, r.seconds
    );
    if options.quick {
        return Ok(Outcome::new(drop > 0.0, format!("quick smoke run: {detail}")));
    }
    Ok(Outcome::new(drop >= required, detail))
}

pub(super) fn ablation(options: &VerifyOptions) -> Result<Outcome> {
    if options.quick {
        return Ok(Outcome::skipped("needs the full training budget; run without --quick"));
    }
    let full = run(ConditioningMode::Full, false)?.final_bpd;
    let coupling = run(ConditioningMode::CouplingOnly, false)?.final_bpd;
    let unconditional = run(ConditioningMode::Unconditional, false)?.final_bpd;
    let ordered = full <= coupling && coupling <= unconditional;
    let margin = unconditional - full;
    Ok(Outcome::new(
        ordered && margin >= 0.05,
        format!("held-out bpd full {full:.4}, coupling_only {coupling:.4}, unconditional {unconditional:.4}; unconditional − full = {margin:.4} (≥0.05)"),
    ))
}
