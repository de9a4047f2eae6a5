//! Per-channel affine normalization, `y = exp(ℓ) ⊙ x + t`.

use super::Direction;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest standard deviation used by data-dependent initialization.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ActnormParams<R> {
    /// Per-channel log scale ℓ.
    pub log_scale: Tensor<R>,
    /// Per-channel shift t.
    pub shift: Tensor<R>,
}

impl<R: Real> ActnormParams<R> {
    pub fn identity(channels: usize) -> Self {
        Self { log_scale: Tensor::zeros(&[channels]), shift: Tensor::zeros(&[channels]) }
    }

    pub fn channels(&self) -> usize {
        self.log_scale.numel()
    }
}

/// Population mean and standard deviation of every channel of an
/// `N×C×H×W` batch, pooled over `N`, `H` and `W`.
pub fn channel_moments<R: Real>(x: &Tensor<R>) -> Result<Vec<(f64, f64)>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = |s: usize| &x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
        let mean = (0..n).flat_map(plane).map(|v| v.as_f64()).sum::<f64>() / count;
        let var = (0..n).flat_map(plane).map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / count;
        out.push((mean, var.sqrt()));
    }
    Ok(out)
}

/// Parameters that standardize `first_batch` per channel (mean 0, std 1).
///
/// Constant channels have their standard deviation floored at [`STD_FLOOR`].
pub fn actnorm_data_init<R: Real>(first_batch: &Tensor<R>) -> Result<ActnormParams<R>> {
    let moments = channel_moments(first_batch)?;
    let mut ls = Vec::with_capacity(moments.len());
    let mut t = Vec::with_capacity(moments.len());
    for (mean, std) in moments {
        let std = std.max(STD_FLOOR);
        ls.push(-std.ln());
        t.push(-mean / std);
    }
    let c = ls.len();
    Ok(ActnormParams { log_scale: Tensor::from_f64(vec![c], &ls)?, shift: Tensor::from_f64(vec![c], &t)? })
}

/// Recorded forward pass with per-sample parameters of shape `N×C`.
/// Returns the output and per-sample log-determinants `H·W·Σℓ`.
pub fn actnorm_forward<R: Real>(tape: &mut Tape<R>, x: Var, log_scale: Var, shift: Var) -> Result<(Var, Var)> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    let y = tape.channel_affine(x, log_scale, shift)?;
    let per_sample = tape.sum_per_sample(log_scale)?;
    let logdet = tape.scale(per_sample, (h * w) as f64)?;
    Ok((y, logdet))
}

/// Exact inverse with per-sample parameters `N×C`; returns `x` and the
/// per-sample log-determinant of the inverse map.
pub fn actnorm_inverse<R: Real>(y: &Tensor<R>, log_scale: &Tensor<R>, shift: &Tensor<R>) -> Result<(Tensor<R>, Vec<R>)> {
    let (n, c, h, w) = y.dims4()?;
    if log_scale.shape() != [n, c] || shift.shape() != [n, c] {
        return Err(Error::config(format!(
            "actnorm parameters must be {:?}, got {:?} and {:?}",
            [n, c],
            log_scale.shape(),
            shift.shape()
        )));
    }
    let hw = h * w;
    let mut out = y.data().to_vec();
    for (nc, plane) in out.chunks_mut(hw).enumerate() {
        let inv = (-log_scale.data()[nc]).exp();
        let t = shift.data()[nc];
        for v in plane {
            *v = (*v - t) * inv;
        }
    }
    let hw_r = R::lit(hw as f64);
    let logdet = log_scale.data().chunks(c).map(|row| -hw_r * row.iter().copied().sum::<R>()).collect();
    Ok((Tensor::new(y.shape().to_vec(), out)?, logdet))
}

/// Applies shared (unconditional) parameters in either direction.
pub fn actnorm_apply<R: Real>(x: &Tensor<R>, p: &ActnormParams<R>, direction: Direction) -> Result<(Tensor<R>, Vec<R>)> {
    let (n, c, _, _) = x.dims4()?;
    if c != p.channels() {
        return Err(Error::config(format!("actnorm expects {} channels, input has {c}", p.channels())));
    }
    p.log_scale.check_finite("actnorm log scale")?;
    p.shift.check_finite("actnorm shift")?;
    let ls = broadcast_rows(&p.log_scale, n)?;
    let t = broadcast_rows(&p.shift, n)?;
    match direction {
        Direction::Forward => {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let lv = tape.constant(ls);
            let tv = tape.constant(t);
            let (y, ld) = actnorm_forward(&mut tape, xv, lv, tv)?;
            Ok((tape.value(y).clone(), tape.value(ld).data().to_vec()))
        }
        Direction::Inverse => actnorm_inverse(x, &ls, &t),
    }
}

/// Stacks a length-`C` vector into an `N×C` matrix.
pub fn broadcast_rows<R: Real>(v: &Tensor<R>, n: usize) -> Result<Tensor<R>> {
    let c = v.numel();
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        data.extend_from_slice(v.data());
    }
    Tensor::new(vec![n, c], data)
}
