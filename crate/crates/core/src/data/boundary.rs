//! Instance boundary maps and their block-resolution down-sampling.

use super::grid::Grid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DownsampleMode {
    /// Cell averages, values in `[0, 1]`.
    #[default]
    Bilinear,
    /// Cell averages thresholded at `> 0` back to `{0, 1}`.
    Binary,
}

impl DownsampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DownsampleMode::Bilinear => "bilinear",
            DownsampleMode::Binary => "binary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bilinear" => Some(DownsampleMode::Bilinear),
            "binary" => Some(DownsampleMode::Binary),
            _ => None,
        }
    }
}

/// A pixel is 1 iff one of its in-image 4-neighbours carries a different
/// instance id.
pub fn boundary_map(ids: &Grid<u32>) -> Grid<u8> {
    let (w, h) = (ids.width, ids.height);
    let mut out = Grid::filled(w, h, 0u8);
    for y in 0..h {
        for x in 0..w {
            let id = ids.get(x, y);
            let differs = (x > 0 && ids.get(x - 1, y) != id)
                || (x + 1 < w && ids.get(x + 1, y) != id)
                || (y > 0 && ids.get(x, y - 1) != id)
                || (y + 1 < h && ids.get(x, y + 1) != id);
            if differs {
                out.set(x, y, 1);
            }
        }
    }
    out
}

/// Reduces a map by `factor` (a power of two dividing both sides) by
/// averaging each `factor×factor` cell.
pub fn downsample_boundary(map: &Grid<f64>, factor: usize, mode: DownsampleMode) -> Result<Grid<f64>> {
    if factor == 0 || !factor.is_power_of_two() || map.width % factor != 0 || map.height % factor != 0 {
        return Err(Error::usage(format!(
            "down-sampling factor {factor} must be a power of two dividing {}×{}",
            map.width, map.height
        )));
    }
    let (ow, oh) = (map.width / factor, map.height / factor);
    let area = (factor * factor) as f64;
    let mut out = Grid::filled(ow, oh, 0.0);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += map.get(ox * factor + dx, oy * factor + dy);
                }
            }
            let mean = acc / area;
            out.set(ox, oy, match mode {
                DownsampleMode::Bilinear => mean,
                DownsampleMode::Binary => f64::from(u8::from(mean > 0.0)),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_ids_have_no_boundary() {
        let ids = Grid::filled(5, 4, 7u32);
        assert!(boundary_map(&ids).data.iter().all(|&v| v == 0));
    }

    #[test]
    fn left_right_halves_mark_the_two_middle_columns() {
        let ids = Grid::new(4, 4, (0..16).map(|i| u32::from(i % 4 >= 2)).collect()).unwrap();
        let b = boundary_map(&ids);
        for y in 0..4 {
            assert_eq!([b.get(0, y), b.get(1, y), b.get(2, y), b.get(3, y)], [0, 1, 1, 0]);
        }
    }

    #[test]
    fn single_interior_pixel_marks_a_plus_shape() {
        let mut ids = Grid::filled(5, 5, 0u32);
        ids.set(2, 2, 9);
        let b = boundary_map(&ids);
        let ones: Vec<(usize, usize)> =
            (0..5).flat_map(|y| (0..5).map(move |x| (x, y))).filter(|&(x, y)| b.get(x, y) == 1).collect();
        assert_eq!(ones, vec![(2, 1), (1, 2), (2, 2), (3, 2), (2, 3)]);
    }

    #[test]
    fn downsample_constant_and_checkerboard() {
        let ones = Grid::filled(4, 4, 1.0);
        for mode in [DownsampleMode::Bilinear, DownsampleMode::Binary] {
            let d = downsample_boundary(&ones, 2, mode).unwrap();
            assert_eq!((d.width, d.height), (2, 2));
            assert!(d.data.iter().all(|&v| v == 1.0));
        }
        let checker = Grid::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample_boundary(&checker, 2, DownsampleMode::Bilinear).unwrap().data, vec![0.5]);
        assert_eq!(downsample_boundary(&checker, 2, DownsampleMode::Binary).unwrap().data, vec![1.0]);
    }

    #[test]
    fn non_dividing_factor_is_rejected() {
        let g = Grid::filled(6, 6, 0.0);
        assert!(matches!(downsample_boundary(&g, 4, DownsampleMode::Bilinear), Err(Error::Usage(_))));
        assert!(downsample_boundary(&g, 3, DownsampleMode::Bilinear).is_err());
    }
}
