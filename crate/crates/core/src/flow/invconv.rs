//! Invertible 1×1 convolution parameterized as `W = P·L·(U + diag(sign ⊙ exp(ℓ)))`.
//!
//! The permutation and the signs are fixed when the layer is created; only
//! the strictly triangular entries and the log magnitudes are learned, so
//! `W` stays invertible for every finite parameter value.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::Direction;
use crate::autodiff::kernels;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct InvConvParams<R> {
    /// `perm[i]` is the row of `L·M` that becomes row `i` of `W`.
    pub perm: Vec<usize>,
    /// Frozen signs of the diagonal of the upper factor.
    pub sign: Vec<f64>,
    /// Strictly-lower entries of `L`, row-major, `C(C−1)/2` values.
    pub lower: Tensor<R>,
    /// Strictly-upper entries of `U`, row-major, `C(C−1)/2` values.
    pub upper: Tensor<R>,
    /// Per-channel log magnitudes of the diagonal.
    pub log_s: Tensor<R>,
}

pub fn triangle_len(channels: usize) -> usize {
    channels * (channels - 1) / 2
}

fn check_channels(c: usize) -> Result<()> {
    if c < 2 {
        return Err(Error::config(format!("1×1 convolution needs at least 2 channels, got {c}")));
    }
    Ok(())
}

impl<R: Real> InvConvParams<R> {
    pub fn identity(channels: usize) -> Result<Self> {
        check_channels(channels)?;
        let k = triangle_len(channels);
        Ok(Self {
            perm: (0..channels).collect(),
            sign: vec![1.0; channels],
            lower: Tensor::zeros(&[k]),
            upper: Tensor::zeros(&[k]),
            log_s: Tensor::zeros(&[channels]),
        })
    }

    pub fn channels(&self) -> usize {
        self.perm.len()
    }

    /// Pivoted LU factorization of an invertible `C×C` matrix (row-major).
    pub fn from_matrix(c: usize, w: &[f64]) -> Result<Self> {
        check_channels(c)?;
        if w.len() != c * c {
            return Err(Error::config(format!("expected {} matrix entries, got {}", c * c, w.len())));
        }
        let lu = DMatrix::from_row_slice(c, c, w).lu();
        let (p, l, u) = lu.unpack();
        // nalgebra factors P·W = L·U, so W = Pᵀ·L·U.
        let mut pm = DMatrix::<f64>::identity(c, c);
        p.permute_rows(&mut pm);
        let mut perm = vec![0; c];
        for (i, slot) in perm.iter_mut().enumerate() {
            *slot = (0..c).find(|&j| pm[(j, i)] == 1.0).expect("permutation matrix");
        }
        let mut lower = Vec::with_capacity(triangle_len(c));
        let mut upper = Vec::with_capacity(triangle_len(c));
        let mut sign = Vec::with_capacity(c);
        let mut log_s = Vec::with_capacity(c);
        for i in 0..c {
            for j in 0..i {
                lower.push(l[(i, j)]);
            }
            let d = u[(i, i)];
            if d == 0.0 || !d.is_finite() {
                return Err(Error::numerical("matrix is singular; cannot factor 1×1 convolution"));
            }
            sign.push(d.signum());
            log_s.push(d.abs().ln());
            for j in i + 1..c {
                upper.push(u[(i, j)]);
            }
        }
        let k = triangle_len(c);
        Ok(Self {
            perm,
            sign,
            lower: Tensor::from_f64(vec![k], &lower)?,
            upper: Tensor::from_f64(vec![k], &upper)?,
            log_s: Tensor::from_f64(vec![c], &log_s)?,
        })
    }

    /// Dense `W` in row-major order.
    pub fn assemble(&self) -> Vec<R> {
        let c = self.channels();
        let sign: Vec<R> = self.sign.iter().map(|&s| R::lit(s)).collect();
        let mut out = vec![R::zero(); c * c];
        kernels::lu_assemble(c, self.lower.data(), self.upper.data(), self.log_s.data(), &self.perm, &sign, &mut out);
        out
    }

    /// Packs `[lower | upper | log_s]` into one vector of length `C²`.
    pub fn pack(&self) -> Vec<R> {
        let mut v = self.lower.data().to_vec();
        v.extend_from_slice(self.upper.data());
        v.extend_from_slice(self.log_s.data());
        v
    }

    /// Inverse of [`pack`](Self::pack) given the frozen permutation and signs.
    pub fn unpack(packed: &[R], perm: Vec<usize>, sign: Vec<f64>) -> Result<Self> {
        let c = perm.len();
        check_channels(c)?;
        let k = triangle_len(c);
        if packed.len() != c * c {
            return Err(Error::config(format!("packed 1×1 parameters need {} values, got {}", c * c, packed.len())));
        }
        Ok(Self {
            perm,
            sign,
            lower: Tensor::new(vec![k], packed[..k].to_vec())?,
            upper: Tensor::new(vec![k], packed[k..2 * k].to_vec())?,
            log_s: Tensor::new(vec![c], packed[2 * k..].to_vec())?,
        })
    }
}

/// Orthonormal factor of the QR decomposition of a standard-normal `C×C`
/// matrix, row-major. Re-draws on numerical rank deficiency.
pub fn random_rotation(c: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let g = DMatrix::<f64>::from_fn(c, c, |_, _| rng.sample(StandardNormal));
        let qr = g.qr();
        let r = qr.r();
        if (0..c).all(|i| r[(i, i)].abs() > 1e-8) {
            let q = qr.q();
            let mut out = Vec::with_capacity(c * c);
            for i in 0..c {
                for j in 0..c {
                    out.push(q[(i, j)]);
                }
            }
            return out;
        }
    }
}

/// Recorded forward pass with per-sample factors (`N×K`, `N×K`, `N×C`).
pub fn invconv_forward<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    lower: Var,
    upper: Var,
    log_s: Var,
    perm: &[usize],
    sign: &[f64],
) -> Result<(Var, Var)> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    if c != perm.len() {
        return Err(Error::config(format!("1×1 convolution expects {} channels, input has {c}", perm.len())));
    }
    let weight = tape.lu_assemble(lower, upper, log_s, perm, sign)?;
    let y = tape.channel_mix(x, weight)?;
    let per_sample = tape.sum_per_sample(log_s)?;
    let logdet = tape.scale(per_sample, (h * w) as f64)?;
    Ok((y, logdet))
}

/// Exact inverse by permutation and two triangular solves per sample;
/// no dense inverse is formed.
pub fn invconv_inverse<R: Real>(
    y: &Tensor<R>,
    lower: &Tensor<R>,
    upper: &Tensor<R>,
    log_s: &Tensor<R>,
    perm: &[usize],
    sign: &[f64],
) -> Result<(Tensor<R>, Vec<R>)> {
    let (n, c, h, w) = y.dims4()?;
    let k = triangle_len(c);
    if perm.len() != c || lower.shape() != [n, k] || upper.shape() != [n, k] || log_s.shape() != [n, c] {
        return Err(Error::config(format!(
            "1×1 inverse: input {:?} does not match factors {:?}, {:?}, {:?}",
            y.shape(),
            lower.shape(),
            upper.shape(),
            log_s.shape()
        )));
    }
    let hw = h * w;
    let sign_r: Vec<R> = sign.iter().map(|&s| R::lit(s)).collect();
    let mut out = vec![R::zero(); y.numel()];
    let mut logdet = Vec::with_capacity(n);
    for s in 0..n {
        let ls = &log_s.data()[s * c..(s + 1) * c];
        let (l, m) = kernels::lu_factors(
            c,
            &lower.data()[s * k..(s + 1) * k],
            &upper.data()[s * k..(s + 1) * k],
            ls,
            &sign_r,
        );
        let src = &y.data()[s * c * hw..(s + 1) * c * hw];
        let z = &mut out[s * c * hw..(s + 1) * c * hw];
        // z = Pᵀ y
        for i in 0..c {
            z[perm[i] * hw..(perm[i] + 1) * hw].copy_from_slice(&src[i * hw..(i + 1) * hw]);
        }
        // L z' = z
        for i in 0..c {
            for j in 0..i {
                let lij = l[i * c + j];
                if lij != R::zero() {
                    let (head, tail) = z.split_at_mut(i * hw);
                    let zj = &head[j * hw..(j + 1) * hw];
                    for (a, b) in tail[..hw].iter_mut().zip(zj) {
                        *a -= lij * *b;
                    }
                }
            }
        }
        // M x = z'
        for i in (0..c).rev() {
            for j in i + 1..c {
                let mij = m[i * c + j];
                if mij != R::zero() {
                    let (head, tail) = z.split_at_mut(j * hw);
                    let zj = &tail[..hw];
                    for (a, b) in head[i * hw..(i + 1) * hw].iter_mut().zip(zj) {
                        *a -= mij * *b;
                    }
                }
            }
            let d = m[i * c + i];
            for v in &mut z[i * hw..(i + 1) * hw] {
                *v /= d;
            }
        }
        logdet.push(-R::lit(hw as f64) * ls.iter().copied().sum::<R>());
    }
    Ok((Tensor::new(y.shape().to_vec(), out)?, logdet))
}

/// Applies shared (unconditional) parameters in either direction.
pub fn invconv_apply<R: Real>(x: &Tensor<R>, p: &InvConvParams<R>, direction: Direction) -> Result<(Tensor<R>, Vec<R>)> {
    let (n, c, _, _) = x.dims4()?;
    if c != p.channels() {
        return Err(Error::config(format!("1×1 convolution expects {} channels, input has {c}", p.channels())));
    }
    for (name, t) in [("lower", &p.lower), ("upper", &p.upper), ("log_s", &p.log_s)] {
        t.check_finite(&format!("1×1 convolution {name}"))?;
    }
    let rows = |t: &Tensor<R>| super::actnorm::broadcast_rows(t, n);
    let (lo, up, ls) = (rows(&p.lower)?, rows(&p.upper)?, rows(&p.log_s)?);
    match direction {
        Direction::Forward => {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (a, b, s) = (tape.constant(lo), tape.constant(up), tape.constant(ls));
            let (y, ld) = invconv_forward(&mut tape, xv, a, b, s, &p.perm, &p.sign)?;
            Ok((tape.value(y).clone(), tape.value(ld).data().to_vec()))
        }
        Direction::Inverse => invconv_inverse(x, &lo, &up, &ls, &p.perm, &p.sign),
    }
}
