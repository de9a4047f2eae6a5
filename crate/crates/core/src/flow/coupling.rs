//! Affine coupling: the first channel half is scaled and shifted by
//! parameters computed from the second half, which passes through untouched.
//!
//! `s = sigmoid(o1 + 2)`, `t = o2`, `y1 = s ⊙ x1 + t`.

use super::Direction;
use crate::autodiff::kernels::{log_sigmoid, sigmoid};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Constant added to the raw scale field before the sigmoid.
pub const SCALE_OFFSET: f64 = 2.0;

/// Raw coupling fields, each `N×C/2×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingParams<R> {
    pub o1: Tensor<R>,
    pub o2: Tensor<R>,
}

impl<R: Real> CouplingParams<R> {
    pub fn scale(&self) -> Tensor<R> {
        let off = R::lit(SCALE_OFFSET);
        self.o1.map(|v| sigmoid(v + off))
    }

    pub fn shift(&self) -> &Tensor<R> {
        &self.o2
    }
}

pub fn half_channels(c: usize) -> Result<usize> {
    if c % 2 != 0 || c == 0 {
        return Err(Error::config(format!("coupling needs an even channel count, got {c}")));
    }
    Ok(c / 2)
}

/// Splits `x` into its first and second channel halves on the tape.
pub fn split_halves<R: Real>(tape: &mut Tape<R>, x: Var) -> Result<(Var, Var)> {
    let c = tape.value(x).dims4()?.1;
    let half = half_channels(c)?;
    Ok((tape.slice_channels(x, 0, half)?, tape.slice_channels(x, half, half)?))
}

/// Recorded forward pass given already-split halves and raw fields.
/// Returns the output and per-sample log-determinants `Σ ln s`.
pub fn coupling_forward<R: Real>(tape: &mut Tape<R>, x1: Var, x2: Var, o1: Var, o2: Var) -> Result<(Var, Var)> {
    let shifted = tape.add_const(o1, SCALE_OFFSET)?;
    let s = tape.sigmoid(shifted)?;
    let scaled = tape.mul(s, x1)?;
    let y1 = tape.add(scaled, o2)?;
    let y = tape.concat_channels(&[y1, x2])?;
    let log_s = tape.log_sigmoid(shifted)?;
    let logdet = tape.sum_per_sample(log_s)?;
    Ok((y, logdet))
}

/// Exact inverse: `x1 = (y1 − t) / s`, `x2 = y2`.
pub fn coupling_inverse<R: Real>(y: &Tensor<R>, p: &CouplingParams<R>) -> Result<(Tensor<R>, Vec<R>)> {
    let (n, c, h, w) = y.dims4()?;
    let half = half_channels(c)?;
    let expected = [n, half, h, w];
    if p.o1.shape() != expected || p.o2.shape() != expected {
        return Err(Error::config(format!(
            "coupling fields must be {expected:?}, got {:?} and {:?}",
            p.o1.shape(),
            p.o2.shape()
        )));
    }
    let off = R::lit(SCALE_OFFSET);
    let y1 = y.slice_channels(0, half)?;
    let y2 = y.slice_channels(half, half)?;
    let mut x1 = y1.clone();
    for ((v, &a), &t) in x1.data_mut().iter_mut().zip(p.o1.data()).zip(p.o2.data()) {
        *v = (*v - t) / sigmoid(a + off);
    }
    let per = half * h * w;
    let logdet = p
        .o1
        .data()
        .chunks(per)
        .map(|chunk| -chunk.iter().map(|&a| log_sigmoid(a + off)).sum::<R>())
        .collect();
    Ok((Tensor::concat_channels(&[&x1, &y2])?, logdet))
}

/// Applies fixed coupling fields in either direction.
pub fn coupling_apply<R: Real>(x: &Tensor<R>, p: &CouplingParams<R>, direction: Direction) -> Result<(Tensor<R>, Vec<R>)> {
    let (n, c, h, w) = x.dims4()?;
    let half = half_channels(c)?;
    if p.o1.shape() != [n, half, h, w] || p.o2.shape() != [n, half, h, w] {
        return Err(Error::config(format!(
            "coupling fields must be {:?}, got {:?}",
            [n, half, h, w],
            p.o1.shape()
        )));
    }
    match direction {
        Direction::Forward => {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (x1, x2) = split_halves(&mut tape, xv)?;
            let o1 = tape.constant(p.o1.clone());
            let o2 = tape.constant(p.o2.clone());
            let (y, ld) = coupling_forward(&mut tape, x1, x2, o1, o2)?;
            Ok((tape.value(y).clone(), tape.value(ld).data().to_vec()))
        }
        Direction::Inverse => coupling_inverse(x, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fields_scale_by_sigmoid_two() {
        let x = Tensor::<f64>::from_f64(vec![1, 2, 1, 2], &[1.0, -2.0, 3.0, 4.0]).unwrap();
        let p = CouplingParams { o1: Tensor::zeros(&[1, 1, 1, 2]), o2: Tensor::zeros(&[1, 1, 1, 2]) };
        let (y, ld) = coupling_apply(&x, &p, Direction::Forward).unwrap();
        let s2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((y.data()[0] - s2).abs() < 1e-15);
        assert!((y.data()[1] + 2.0 * s2).abs() < 1e-15);
        assert_eq!(&y.data()[2..], &[3.0, 4.0]);
        assert!((ld[0] - 2.0 * s2.ln()).abs() < 1e-14);
    }

    #[test]
    fn odd_channels_are_a_configuration_error() {
        let x = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        let p = CouplingParams { o1: Tensor::zeros(&[1, 1, 1, 1]), o2: Tensor::zeros(&[1, 1, 1, 1]) };
        assert!(matches!(coupling_apply(&x, &p, Direction::Forward), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_restores_input_and_negates_logdet() {
        let x = Tensor::<f64>::from_f64(vec![1, 4, 1, 1], &[0.5, -1.5, 2.0, 0.1]).unwrap();
        let p = CouplingParams {
            o1: Tensor::from_f64(vec![1, 2, 1, 1], &[0.3, -2.0]).unwrap(),
            o2: Tensor::from_f64(vec![1, 2, 1, 1], &[1.0, -0.7]).unwrap(),
        };
        let (y, ld) = coupling_apply(&x, &p, Direction::Forward).unwrap();
        let (back, ld_inv) = coupling_apply(&y, &p, Direction::Inverse).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-14);
        assert!((ld[0] + ld_inv[0]).abs() < 1e-15);
    }
}
