//! Conversion between 8-bit images and real-valued planar tensors.

use rand::Rng;

use super::grid::{Grid, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LEVELS: f64 = 256.0;

/// `y = (k + u)/256 − 0.5` with `u ~ U[0, 1)`, returned as a `1×3×H×W` batch of one.
pub fn dequantize<R: Real>(image: &RgbImage, rng: &mut impl Rng) -> Tensor<R> {
    let (w, h) = (image.width, image.height);
    let mut data = vec![R::zero(); 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(x, y);
            for c in 0..3 {
                let u: f64 = rng.random();
                data[c * h * w + y * w + x] = R::lit((f64::from(px[c]) + u) / LEVELS - 0.5);
            }
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("shape matches data")
}

/// Bin centers instead of uniform noise; used where determinism across
/// calls matters more than an unbiased density estimate.
pub fn center_dequantize<R: Real>(image: &RgbImage) -> Tensor<R> {
    let (w, h) = (image.width, image.height);
    let mut data = vec![R::zero(); 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(x, y);
            for c in 0..3 {
                data[c * h * w + y * w + x] = R::lit((f64::from(px[c]) + 0.5) / LEVELS - 0.5);
            }
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("shape matches data")
}

/// Inverse of [`dequantize`]: `floor((y + 0.5)·256)` clamped to `[0, 255]`.
/// Accepts `3×H×W` or `1×3×H×W`.
pub fn quantize<R: Real>(tensor: &Tensor<R>) -> Result<RgbImage> {
    let (c, h, w) = match *tensor.shape() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::usage(format!("cannot quantize a tensor of shape {:?}", tensor.shape()))),
    };
    if c != 3 {
        return Err(Error::usage(format!("expected 3 channels to quantize, got {c}")));
    }
    let d = tensor.data();
    let mut out = RgbImage::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0u8; 3];
            for (ch, v) in rgb.iter_mut().enumerate() {
                let y_val = d[ch * h * w + y * w + x].as_f64();
                *v = ((y_val + 0.5) * LEVELS).floor().clamp(0.0, 255.0) as u8;
            }
            out.put(x, y, rgb);
        }
    }
    Ok(out)
}

/// A `1×1×H×W` tensor from a real-valued grid.
pub fn grid_tensor<R: Real>(grid: &Grid<f64>) -> Tensor<R> {
    Tensor::from_f64(vec![1, 1, grid.height, grid.width], &grid.data).expect("shape matches data")
}

/// A `1×1×H×W` tensor from a binary grid.
pub fn grid_tensor_u8<R: Real>(grid: &Grid<u8>) -> Tensor<R> {
    let data = grid.data.iter().map(|&v| R::lit(f64::from(v))).collect();
    Tensor::new(vec![1, 1, grid.height, grid.width], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_maps_into_the_first_bin() {
        let img = RgbImage::filled(2, 2, [0, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = dequantize(&img, &mut rng);
        assert!(t.data().iter().all(|&v| (-0.5..-0.5 + 1.0 / 256.0).contains(&v)));
    }

    #[test]
    fn quantize_inverts_every_level() {
        let data: Vec<u8> = (0..=255u8).flat_map(|k| [k, k, 255 - k]).collect();
        let img = RgbImage::new(256, 1, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            let t: Tensor<f32> = dequantize(&img, &mut rng);
            assert_eq!(quantize(&t).unwrap(), img);
        }
        assert_eq!(quantize(&center_dequantize::<f64>(&img)).unwrap(), img);
    }

    #[test]
    fn seeded_dequantization_is_reproducible() {
        let img = RgbImage::filled(3, 3, [10, 20, 30]);
        let a: Tensor<f64> = dequantize(&img, &mut ChaCha8Rng::seed_from_u64(9));
        let b: Tensor<f64> = dequantize(&img, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.data(), b.data());
    }
}
