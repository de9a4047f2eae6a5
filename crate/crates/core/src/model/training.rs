//! Gradients of the objective, either from one tape over the whole model or
//! with activations stored only at flow-step boundaries and each step
//! recomputed during the backward sweep.

use super::glow::{FullGlow, PairBatch, SegmentVars};
use super::steps::Conditioning;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamGrads;
use crate::tensor::{Real, Tensor};

/// Loss and per-sample log-likelihoods of the batch a gradient came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub loss: f64,
    pub source_logp: Vec<f64>,
    pub target_logp: Vec<f64>,
}

/// Activation bookkeeping of one gradient evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryStats {
    /// Tensors kept alive across the whole forward pass: every recorded
    /// node for the plain path, the `(source, target)` pair entering each
    /// step for the checkpointed path.
    pub stored_activations: usize,
    /// Largest number of scalars held by a single tape.
    pub peak_tape_scalars: usize,
}

struct Joint {
    source: SegmentVars,
    target: SegmentVars,
    loss: Var,
}

impl<R: Real> FullGlow<R> {
    fn joint_segment(
        &self,
        tape: &mut Tape<R>,
        index: usize,
        hs: Var,
        ht: Var,
        boundary: Option<Var>,
    ) -> Result<Joint> {
        let layout = self.layouts()[index];
        let at = |e: Error| e.at(&format!("{}", layout.label()));
        let n = tape.shape(hs)[0] as f64;
        let source = self.source_segment(tape, index, hs).map_err(at)?;
        let cond = self.target_steps()[index].is_conditional().then_some(Conditioning {
            act: source.step.act,
            mixed: source.step.mixed,
            out: source.step.out,
            boundary,
        });
        let target = self.target_segment(tape, index, ht, cond.as_ref()).map_err(at)?;
        let ls = tape.sum(source.logp)?;
        let lt = tape.sum(target.logp)?;
        let ls = tape.scale(ls, -self.config().lambda / n)?;
        let lt = tape.scale(lt, -1.0 / n)?;
        let loss = tape.add(ls, lt)?;
        Ok(Joint { source, target, loss })
    }

    fn check_batch(&self, batch: &PairBatch<R>) -> Result<()> {
        if batch.source.shape() != batch.target.shape() {
            return Err(Error::usage(format!(
                "source {:?} and target {:?} batches differ in shape",
                batch.source.shape(),
                batch.target.shape()
            )));
        }
        Ok(())
    }

    /// Loss and gradients for every parameter. With `checkpointed`, only
    /// step-boundary activations are kept and each step is recomputed on
    /// its own tape during the backward sweep.
    pub fn loss_and_grads(
        &self,
        batch: &PairBatch<R>,
        checkpointed: bool,
    ) -> Result<(GradientReport, ParamGrads<R>, MemoryStats)> {
        self.check_batch(batch)?;
        if checkpointed {
            self.checkpointed_grads(batch)
        } else {
            self.plain_grads(batch)
        }
    }

    fn plain_grads(&self, batch: &PairBatch<R>) -> Result<(GradientReport, ParamGrads<R>, MemoryStats)> {
        let n = batch.len();
        let boundaries = self.boundary_pyramid(batch.boundary.as_ref())?;
        let mut tape = Tape::new();
        let mut hs = tape.constant(batch.source.clone());
        let mut ht = tape.constant(batch.target.clone());
        let boundary_vars: Vec<Option<Var>> = boundaries.into_iter().map(|b| b.map(|b| tape.constant(b))).collect();
        let mut total: Option<Var> = None;
        let mut report = GradientReport { loss: 0.0, source_logp: vec![0.0; n], target_logp: vec![0.0; n] };
        for index in 0..self.layouts().len() {
            let block = self.layouts()[index].block;
            let joint = self.joint_segment(&mut tape, index, hs, ht, boundary_vars[block])?;
            accumulate_logp(&tape, &joint, &mut report);
            total = Some(match total {
                Some(t) => tape.add(t, joint.loss)?,
                None => joint.loss,
            });
            if let (Some(s), Some(t)) = (joint.source.next, joint.target.next) {
                hs = s;
                ht = t;
            }
        }
        let total = total.expect("at least one step");
        report.loss = tape.value(total).item().as_f64();
        let stats = MemoryStats { stored_activations: tape.len(), peak_tape_scalars: tape.stored_scalars() };
        let mut grads = tape.backward(total)?;
        let mut out = ParamGrads::new(self.store.len());
        tape.param_grads(&mut grads, &mut out);
        Ok((report, out, stats))
    }

    fn checkpointed_grads(&self, batch: &PairBatch<R>) -> Result<(GradientReport, ParamGrads<R>, MemoryStats)> {
        let n = batch.len();
        let boundaries = self.boundary_pyramid(batch.boundary.as_ref())?;
        let steps = self.layouts().len();
        let mut report = GradientReport { loss: 0.0, source_logp: vec![0.0; n], target_logp: vec![0.0; n] };
        let mut peak = 0;

        // Forward: keep only the pair entering each step.
        let mut states: Vec<(Tensor<R>, Tensor<R>)> = Vec::with_capacity(steps);
        states.push((batch.source.clone(), batch.target.clone()));
        for index in 0..steps {
            let mut tape = Tape::new();
            let (s, t) = &states[index];
            let hs = tape.constant(s.clone());
            let ht = tape.constant(t.clone());
            let b = boundaries[self.layouts()[index].block].clone().map(|b| tape.constant(b));
            let joint = self.joint_segment(&mut tape, index, hs, ht, b)?;
            accumulate_logp(&tape, &joint, &mut report);
            report.loss += tape.value(joint.loss).item().as_f64();
            peak = peak.max(tape.stored_scalars());
            if let (Some(s), Some(t)) = (joint.source.next, joint.target.next) {
                states.push((tape.value(s).clone(), tape.value(t).clone()));
            }
        }
        let stats = MemoryStats { stored_activations: 2 * states.len(), peak_tape_scalars: peak };

        // Backward: recompute each step and chain the input gradients.
        let mut out = ParamGrads::new(self.store.len());
        let mut upstream: Option<(Tensor<R>, Tensor<R>)> = None;
        for index in (0..steps).rev() {
            let (s, t) = states.pop().expect("one state per step");
            let needs_input = index > 0;
            let mut tape = Tape::new();
            let hs = tape.leaf(s, needs_input);
            let ht = tape.leaf(t, needs_input);
            let b = boundaries[self.layouts()[index].block].clone().map(|b| tape.constant(b));
            let joint = self.joint_segment(&mut tape, index, hs, ht, b)?;
            let mut seeds = vec![(joint.loss, Tensor::scalar(R::one()))];
            if let Some((gs, gt)) = upstream.take() {
                let (ns, nt) = joint.source.next.zip(joint.target.next).expect("non-final step has outputs");
                seeds.push((ns, gs));
                seeds.push((nt, gt));
            }
            let mut grads = tape.backward_with(seeds)?;
            tape.param_grads(&mut grads, &mut out);
            if needs_input {
                let gs = grads.take(hs).unwrap_or_else(|| Tensor::zeros(tape.shape(hs)));
                let gt = grads.take(ht).unwrap_or_else(|| Tensor::zeros(tape.shape(ht)));
                upstream = Some((gs, gt));
            }
        }
        Ok((report, out, stats))
    }
}

fn accumulate_logp<R: Real>(tape: &Tape<R>, joint: &Joint, report: &mut GradientReport) {
    for (acc, v) in report.source_logp.iter_mut().zip(tape.value(joint.source.logp).data()) {
        *acc += v.as_f64();
    }
    for (acc, v) in report.target_logp.iter_mut().zip(tape.value(joint.target.logp).data()) {
        *acc += v.as_f64();
    }
}
