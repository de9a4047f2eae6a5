//! Raw numeric kernels shared by the tape's forward and backward rules.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (H'·W')` patch matrix.
pub fn im2col<R: Real>(g: &ConvGeometry, image: &[R], cols: &mut [R]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(R::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize { R::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image.
pub fn col2im_add<R: Real>(g: &ConvGeometry, cols: &[R], image: &mut [R]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Space-to-depth index map: output flat index for each input flat index of
/// one `C×H×W` sample. Output channel of input channel `c` at offset
/// `(dy, dx)` is `4c + 2dy + dx`.
pub fn squeeze_index(c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut map = vec![0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let oc = ch * 4 + (y % 2) * 2 + (x % 2);
                map[(ch * h + y) * w + x] = (oc * oh + y / 2) * ow + x / 2;
            }
        }
    }
    map
}

/// Assembles `W = P·L·(U + diag(sign ⊙ exp(log_s)))` for one sample.
///
/// `lower` and `upper` hold the strictly triangular entries row-major;
/// `perm[i]` is the row of `L·M` that lands in row `i` of `W`.
pub fn lu_assemble<R: Real>(
    c: usize,
    lower: &[R],
    upper: &[R],
    log_s: &[R],
    perm: &[usize],
    sign: &[R],
    out: &mut [R],
) {
    let (l, m) = lu_factors(c, lower, upper, log_s, sign);
    let mut a = vec![R::zero(); c * c];
    R::gemm(c, c, c, R::one(), &l, (c as isize, 1), &m, (c as isize, 1), R::zero(), &mut a, (c as isize, 1));
    for i in 0..c {
        out[i * c..(i + 1) * c].copy_from_slice(&a[perm[i] * c..(perm[i] + 1) * c]);
    }
}

/// Dense `L` (unit diagonal) and `M = U + diag(sign ⊙ exp(log_s))`.
pub fn lu_factors<R: Real>(c: usize, lower: &[R], upper: &[R], log_s: &[R], sign: &[R]) -> (Vec<R>, Vec<R>) {
    let mut l = vec![R::zero(); c * c];
    let mut m = vec![R::zero(); c * c];
    let (mut li, mut ui) = (0, 0);
    for i in 0..c {
        for j in 0..i {
            l[i * c + j] = lower[li];
            li += 1;
        }
        l[i * c + i] = R::one();
        m[i * c + i] = sign[i] * log_s[i].exp();
        for j in i + 1..c {
            m[i * c + j] = upper[ui];
            ui += 1;
        }
    }
    (l, m)
}

/// Gradients of the LU assembly for one sample given `dW`.
#[allow(clippy::too_many_arguments)]
pub fn lu_assemble_backward<R: Real>(
    c: usize,
    lower: &[R],
    upper: &[R],
    log_s: &[R],
    perm: &[usize],
    sign: &[R],
    d_w: &[R],
    d_lower: &mut [R],
    d_upper: &mut [R],
    d_log_s: &mut [R],
) {
    let (l, m) = lu_factors(c, lower, upper, log_s, sign);
    let mut d_a = vec![R::zero(); c * c];
    for i in 0..c {
        d_a[perm[i] * c..(perm[i] + 1) * c].copy_from_slice(&d_w[i * c..(i + 1) * c]);
    }
    let cs = c as isize;
    // dL = dA · Mᵀ
    let mut d_l = vec![R::zero(); c * c];
    R::gemm(c, c, c, R::one(), &d_a, (cs, 1), &m, (1, cs), R::zero(), &mut d_l, (cs, 1));
    // dM = Lᵀ · dA
    let mut d_m = vec![R::zero(); c * c];
    R::gemm(c, c, c, R::one(), &l, (1, cs), &d_a, (cs, 1), R::zero(), &mut d_m, (cs, 1));
    let (mut li, mut ui) = (0, 0);
    for i in 0..c {
        for j in 0..i {
            d_lower[li] += d_l[i * c + j];
            li += 1;
        }
        d_log_s[i] += d_m[i * c + i] * sign[i] * log_s[i].exp();
        for j in i + 1..c {
            d_upper[ui] += d_m[i * c + j];
            ui += 1;
        }
    }
}

/// Numerically stable `ln(sigmoid(x))`.
#[inline]
pub fn log_sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry { in_channels: 2, height: 5, width: 4, kernel: 3, stride: 2, padding: 1 };
        let image: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_probe: Vec<f64> = (0..g.patch_len() * g.out_positions()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cols_probe.len()];
        im2col(&g, &image, &mut cols);
        let mut back = vec![0.0; image.len()];
        col2im_add(&g, &cols_probe, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = image.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn squeeze_index_is_a_permutation() {
        let mut map = squeeze_index(3, 4, 6);
        map.sort_unstable();
        assert_eq!(map, (0..72).collect::<Vec<_>>());
    }

    #[test]
    fn log_sigmoid_is_stable_in_both_tails() {
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0f64).abs() < 1e-300);
        assert!((log_sigmoid(2.0f64) - sigmoid(2.0f64).ln()).abs() < 1e-15);
    }
}
