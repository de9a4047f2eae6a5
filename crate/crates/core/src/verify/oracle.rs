//! Reference computations that share no code with the library paths they
//! check.

/// Central finite-difference Jacobian of `f` at `x`, row-major with one row
/// per output.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> Vec<f64> {
    let m = f(x).len();
    let n = x.len();
    let mut jac = vec![0.0; m * n];
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + step;
        let plus = f(&probe);
        probe[j] = x[j] - step;
        let minus = f(&probe);
        probe[j] = x[j];
        for i in 0..m {
            jac[i * n + j] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    jac
}

/// Central finite difference of a scalar function along one coordinate.
pub fn fd_partial(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// `ln |det A|` of a square row-major matrix by Gaussian elimination with
/// partial pivoting. Returns `-inf` for a singular matrix.
pub fn log_abs_det(matrix: &[f64], n: usize) -> f64 {
    assert_eq!(matrix.len(), n * n, "matrix must be {n}×{n}");
    let mut a = matrix.to_vec();
    let mut total = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .expect("non-empty range");
        let p = a[pivot * n + col];
        if p == 0.0 {
            return f64::NEG_INFINITY;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
        }
        total += p.abs().ln();
        for r in col + 1..n {
            let factor = a[r * n + col] / p;
            if factor != 0.0 {
                for k in col..n {
                    a[r * n + k] -= factor * a[col * n + k];
                }
            }
        }
    }
    total
}

/// Boundary rule evaluated by comparing the id grid against its four
/// shifted copies; out-of-image neighbours never count.
pub fn boundary_oracle(ids: &[u32], width: usize, height: usize) -> Vec<u8> {
    let at = |x: isize, y: isize| -> Option<u32> {
        if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
            None
        } else {
            Some(ids[y as usize * width + x as usize])
        }
    };
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let me = at(x, y);
            let shifts = [(-1, 0), (1, 0), (0, -1), (0, 1)];
            let edge = shifts.iter().filter_map(|&(dx, dy)| at(x + dx, y + dy)).any(|v| Some(v) != me);
            out.push(u8::from(edge));
        }
    }
    out
}

/// Dense `C×C` weight from permutation, signs and packed triangular
/// factors, built entry by entry: row `i` of the result is row `perm[i]`
/// of `L·(U + diag(sign·exp(log_s)))`.
pub fn lu_product(perm: &[usize], sign: &[f64], lower: &[f64], upper: &[f64], log_s: &[f64]) -> Vec<f64> {
    let c = perm.len();
    let mut l = vec![0.0; c * c];
    let mut u = vec![0.0; c * c];
    let (mut li, mut ui) = (0, 0);
    for i in 0..c {
        l[i * c + i] = 1.0;
        for j in 0..c {
            if j < i {
                l[i * c + j] = lower[li];
                li += 1;
            } else if j > i {
                u[i * c + j] = upper[ui];
                ui += 1;
            }
        }
        u[i * c + i] = sign[i] * log_s[i].exp();
    }
    let mut w = vec![0.0; c * c];
    for (i, &row) in perm.iter().enumerate() {
        for j in 0..c {
            w[i * c + j] = (0..c).map(|k| l[row * c + k] * u[k * c + j]).sum();
        }
    }
    w
}

/// `max |WᵀW − I|` of a row-major `C×C` matrix.
pub fn orthonormality_error(w: &[f64], c: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..c {
        for j in 0..c {
            let dot: f64 = (0..c).map(|k| w[k * c + i] * w[k * c + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Per-channel `(mean, population std)` of `N×C×H×W` data, accumulated in
/// one pass over the flat buffer.
pub fn channel_stats(data: &[f64], n: usize, c: usize, hw: usize) -> Vec<(f64, f64)> {
    let mut sum = vec![0.0; c];
    let mut count = vec![0usize; c];
    for (i, v) in data.iter().enumerate().take(n * c * hw) {
        let ch = (i / hw) % c;
        sum[ch] += v;
        count[ch] += 1;
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
    let mut sq = vec![0.0; c];
    for (i, v) in data.iter().enumerate().take(n * c * hw) {
        let ch = (i / hw) % c;
        sq[ch] += (v - mean[ch]) * (v - mean[ch]);
    }
    (0..c).map(|ch| (mean[ch], (sq[ch] / count[ch] as f64).sqrt())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_product_of_identity_factors_is_a_permutation() {
        let w = lu_product(&[1, 0], &[1.0, -1.0], &[0.0], &[0.0], &[0.0, 0.0]);
        assert_eq!(w, vec![0.0, -1.0, 1.0, 0.0]);
        assert_eq!(orthonormality_error(&w, 2), 0.0);
    }

    #[test]
    fn channel_stats_of_two_channels() {
        // one sample, two channels of two pixels each
        let s = channel_stats(&[1.0, 3.0, -2.0, -2.0], 1, 2, 2);
        assert_eq!(s, vec![(2.0, 1.0), (-2.0, 0.0)]);
    }

    #[test]
    fn log_det_of_known_matrices() {
        assert!((log_abs_det(&[2.0, 0.0, 0.0, 3.0], 2) - 6f64.ln()).abs() < 1e-15);
        // det = 0·3 − 1·2 = −2 needs a pivot swap
        assert!((log_abs_det(&[0.0, 1.0, 2.0, 3.0], 2) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_abs_det(&[1.0, 2.0, 2.0, 4.0], 2), f64::NEG_INFINITY);
    }

    #[test]
    fn fd_jacobian_of_a_linear_map_is_exact() {
        let jac = fd_jacobian(|x| vec![2.0 * x[0] + x[1], -x[1]], &[0.3, 0.7], 1e-3);
        for (a, b) in jac.iter().zip([2.0, 1.0, 0.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_oracle_marks_a_vertical_edge() {
        let ids = [0, 0, 1, 1];
        assert_eq!(boundary_oracle(&ids, 4, 1), vec![0, 1, 1, 0]);
    }
}
