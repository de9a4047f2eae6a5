//! Squeeze, split and the standard-normal base density.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Direction;
use crate::autodiff::{squeeze_tensor, unsqueeze_tensor, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Space-to-depth (forward) or depth-to-space (inverse). Log-determinant 0.
pub fn squeeze<R: Real>(x: &Tensor<R>, direction: Direction) -> Result<Tensor<R>> {
    match direction {
        Direction::Forward => squeeze_tensor(x),
        Direction::Inverse => unsqueeze_tensor(x),
    }
}

/// `Σ_i [−½ z_i² − ½ ln 2π]` over the whole tensor.
pub fn gaussian_logp<R: Real>(z: &Tensor<R>) -> f64 {
    z.data().iter().map(|v| -0.5 * v.as_f64().powi(2) - HALF_LN_2PI).sum()
}

/// Per-sample standard-normal log-density, recorded on the tape.
pub fn gaussian_logp_on<R: Real>(tape: &mut Tape<R>, z: Var) -> Result<Var> {
    let per = tape.value(z).per_sample();
    let sq = tape.square(z)?;
    let ss = tape.sum_per_sample(sq)?;
    let scaled = tape.scale(ss, -0.5)?;
    tape.add_const(scaled, -(per as f64) * HALF_LN_2PI)
}

/// Forward split on the tape: keeps the first half of the channels and
/// scores the second half under the base density.
pub fn split_forward<R: Real>(tape: &mut Tape<R>, x: Var) -> Result<(Var, Var, Var)> {
    let c = tape.value(x).dims4()?.1;
    if c % 2 != 0 {
        return Err(Error::config(format!("split needs an even channel count, got {c}")));
    }
    let kept = tape.slice_channels(x, 0, c / 2)?;
    let z = tape.slice_channels(x, c / 2, c / 2)?;
    let logp = gaussian_logp_on(tape, z)?;
    Ok((kept, z, logp))
}

/// Result of the plain forward split.
pub struct SplitOutput<R> {
    pub kept: Tensor<R>,
    pub z: Tensor<R>,
    pub logp: f64,
}

pub fn split_prior_forward<R: Real>(x: &Tensor<R>) -> Result<SplitOutput<R>> {
    let c = x.dims4()?.1;
    if c % 2 != 0 {
        return Err(Error::config(format!("split needs an even channel count, got {c}")));
    }
    let kept = x.slice_channels(0, c / 2)?;
    let z = x.slice_channels(c / 2, c / 2)?;
    let logp = gaussian_logp(&z);
    Ok(SplitOutput { kept, z, logp })
}

/// Inverse split: concatenates `kept` with the given latent, or with a
/// fresh draw from `N(0, T²I)` when none is given.
pub fn split_prior_inverse<R: Real>(
    kept: &Tensor<R>,
    z: Option<&Tensor<R>>,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<R>> {
    check_temperature(temperature)?;
    match z {
        Some(z) => Tensor::concat_channels(&[kept, z]),
        None => {
            let fresh = sample_normal(kept.shape(), temperature, rng);
            Tensor::concat_channels(&[kept, &fresh])
        }
    }
}

pub fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::usage(format!("temperature must be finite and ≥ 0, got {temperature}")));
    }
    Ok(())
}

/// Draws `N(0, T²I)` values; `T = 0` yields exact zeros without touching `rng`.
pub fn sample_normal<R: Real>(shape: &[usize], temperature: f64, rng: &mut impl Rng) -> Tensor<R> {
    if temperature == 0.0 {
        return Tensor::zeros(shape);
    }
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v = R::lit(temperature * e);
    }
    t
}

/// Factored-out latents of one batch: one chunk per split plus the final
/// block output.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPyramid<R> {
    pub chunks: Vec<Tensor<R>>,
}

impl<R: Real> LatentPyramid<R> {
    /// Total element count across chunks.
    pub fn numel(&self) -> usize {
        self.chunks.iter().map(|c| c.numel()).sum()
    }

    /// Per-sample dimensionality.
    pub fn dim(&self) -> usize {
        self.chunks.iter().map(|c| c.per_sample()).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.chunks.iter().map(|c| c.shape().to_vec()).collect()
    }

    /// Draws every chunk from `N(0, T²I)`.
    pub fn sample(shapes: &[Vec<usize>], temperature: f64, rng: &mut impl Rng) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(Self { chunks: shapes.iter().map(|s| sample_normal(s, temperature, rng)).collect() })
    }

    /// Base log-density summed over all chunks and samples.
    pub fn logp(&self) -> f64 {
        self.chunks.iter().map(gaussian_logp).sum()
    }

    /// All values flattened, chunk after chunk.
    pub fn flatten(&self) -> Vec<R> {
        self.chunks.iter().flat_map(|c| c.data().iter().copied()).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.chunks.iter().zip(&other.chunks).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squeeze_orders_neighbourhood_top_left_first() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let y = squeeze(&x, Direction::Forward).unwrap();
        assert_eq!(y.shape(), &[1, 4, 2, 2]);
        assert_eq!(&y.data()[0..4], &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(&y.data()[4..8], &[2.0, 4.0, 10.0, 12.0]);
        assert_eq!(&y.data()[8..12], &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(squeeze(&y, Direction::Inverse).unwrap(), x);
    }

    #[test]
    fn squeeze_shape_arithmetic_and_odd_rejection() {
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        assert_eq!(squeeze(&x, Direction::Forward).unwrap().shape(), &[1, 12, 16, 16]);
        assert!(squeeze(&Tensor::<f32>::zeros(&[1, 1, 3, 4]), Direction::Forward).is_err());
    }

    #[test]
    fn gaussian_logp_closed_forms() {
        let z = Tensor::<f64>::zeros(&[2]);
        assert!((gaussian_logp(&z) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((gaussian_logp(&z) + 1.83788).abs() < 1e-5);
        let one = Tensor::<f64>::from_f64(vec![1], &[1.0]).unwrap();
        assert!((gaussian_logp(&one) - (-0.5 - HALF_LN_2PI)).abs() < 1e-15);
    }

    #[test]
    fn split_of_zero_latent_scores_minus_four_ln_two_pi() {
        let mut x = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        x.data_mut()[..8].fill(0.7);
        let out = split_prior_forward(&x).unwrap();
        assert!((out.logp + 4.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-13);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let back = split_prior_inverse(&out.kept, Some(&out.z), 1.0, &mut rng).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn zero_temperature_without_latent_gives_zeros() {
        let kept = Tensor::<f64>::full(&[1, 2, 2, 2], 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = split_prior_inverse(&kept, None, 0.0, &mut rng).unwrap();
        assert!(x.slice_channels(2, 2).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(split_prior_inverse(&kept, None, -0.1, &mut rng).is_err());
    }

    #[test]
    fn tape_logp_matches_plain_logp() {
        let z = Tensor::<f64>::from_f64(vec![2, 1, 1, 3], &[0.1, -0.2, 1.5, 2.0, 0.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let lp = gaussian_logp_on(&mut tape, v).unwrap();
        let per: f64 = tape.value(lp).data().iter().sum();
        assert!((per - gaussian_logp(&z)).abs() < 1e-13);
    }
}
