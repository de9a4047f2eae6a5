//! Deterministic synthetic street scenes: a color-coded segmentation, a
//! rendered photo and per-object instance ids.
//!
//! Photos depend on the layout in two ways: locally (each class has its own
//! base color and texture) and globally (overall brightness follows the
//! horizon height), so both local and whole-image conditioning carry
//! information about the photo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::boundary::boundary_map;
use super::grid::{Grid, RgbImage};
use crate::error::{Error, Result};

pub const MAX_CLASSES: usize = 8;
pub const MIN_SCENE_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Sky = 0,
    Road = 1,
    Building = 2,
    Vegetation = 3,
    Car = 4,
    Person = 5,
    Pole = 6,
    Sidewalk = 7,
}

impl Class {
    pub const ALL: [Class; MAX_CLASSES] = [
        Class::Sky,
        Class::Road,
        Class::Building,
        Class::Vegetation,
        Class::Car,
        Class::Person,
        Class::Pole,
        Class::Sidewalk,
    ];

    /// Segmentation color.
    pub fn color(self) -> [u8; 3] {
        PALETTE[self as usize]
    }

    /// Base photo color before lighting and texture.
    fn albedo(self) -> [f64; 3] {
        match self {
            Class::Sky => [150.0, 185.0, 225.0],
            Class::Road => [95.0, 90.0, 92.0],
            Class::Building => [150.0, 120.0, 100.0],
            Class::Vegetation => [60.0, 120.0, 45.0],
            Class::Car => [170.0, 30.0, 35.0],
            Class::Person => [200.0, 160.0, 130.0],
            Class::Pole => [120.0, 120.0, 130.0],
            Class::Sidewalk => [175.0, 170.0, 160.0],
        }
    }
}

/// Segmentation palette, indexed by class.
pub const PALETTE: [[u8; 3]; MAX_CLASSES] = [
    [70, 130, 180],
    [128, 64, 128],
    [70, 70, 70],
    [107, 142, 35],
    [0, 0, 142],
    [220, 20, 60],
    [220, 220, 0],
    [244, 35, 232],
];

/// One segmentation/photo pair with instance information.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub seg: RgbImage,
    pub photo: RgbImage,
    pub instance_ids: Grid<u32>,
    pub boundary: Option<Grid<u8>>,
}

impl PairedSample {
    pub fn size(&self) -> (usize, usize) {
        (self.seg.width, self.seg.height)
    }

    /// Boundary map, derived from the instance ids when not stored.
    pub fn boundary_or_derived(&self) -> Grid<u8> {
        self.boundary.clone().unwrap_or_else(|| boundary_map(&self.instance_ids))
    }
}

struct Canvas {
    size: usize,
    class: Grid<u8>,
    instance: Grid<u32>,
    next_id: u32,
}

impl Canvas {
    fn paint(&mut self, class: Class, inside: impl Fn(usize, usize) -> bool) {
        let id = self.next_id;
        self.next_id += 1;
        for y in 0..self.size {
            for x in 0..self.size {
                if inside(x, y) {
                    self.class.set(x, y, class as u8);
                    self.instance.set(x, y, id);
                }
            }
        }
    }
}

/// Generates one scene. `n_classes` limits which classes may appear
/// (the first `n_classes` entries of [`Class::ALL`]).
pub fn generate_scene(seed: u64, size: usize, n_classes: usize) -> Result<PairedSample> {
    if size < MIN_SCENE_SIZE {
        return Err(Error::config(format!("scene size {size} is below the minimum of {MIN_SCENE_SIZE}")));
    }
    if !(2..=MAX_CLASSES).contains(&n_classes) {
        return Err(Error::config(format!("class count must be in 2..={MAX_CLASSES}, got {n_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let horizon = rng.random_range((0.3 * s) as usize..=(0.6 * s) as usize);
    let mut canvas = Canvas {
        size,
        class: Grid::filled(size, size, Class::Sky as u8),
        instance: Grid::filled(size, size, 1),
        next_id: 2,
    };
    canvas.paint(Class::Road, |_, y| y >= horizon);
    if n_classes > Class::Sidewalk as usize {
        let band = (size / 8).max(1);
        canvas.paint(Class::Sidewalk, |_, y| y >= horizon && y < horizon + band);
    }

    let object_classes: Vec<Class> = Class::ALL[2..n_classes.min(Class::Pole as usize + 1)].to_vec();
    if !object_classes.is_empty() {
        let count = rng.random_range(2..=6);
        for _ in 0..count {
            let class = object_classes[rng.random_range(0..object_classes.len())];
            place_object(&mut canvas, class, horizon, &mut rng);
        }
    }

    let photo = render_photo(&canvas, horizon, &mut rng);
    let mut seg = RgbImage::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            seg.put(x, y, PALETTE[canvas.class.get(x, y) as usize]);
        }
    }
    let boundary = boundary_map(&canvas.instance);
    Ok(PairedSample { seg, photo, instance_ids: canvas.instance, boundary: Some(boundary) })
}

fn place_object(canvas: &mut Canvas, class: Class, horizon: usize, rng: &mut ChaCha8Rng) {
    let size = canvas.size;
    let s = size as f64;
    let span = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(((lo * s) as usize).max(1)..=((hi * s) as usize).max(1));
    match class {
        Class::Building => {
            let w = span(rng, 0.15, 0.4);
            let h = span(rng, 0.2, 0.5).min(horizon.max(1));
            let x0 = rng.random_range(0..size.saturating_sub(w).max(1));
            let top = horizon.saturating_sub(h);
            canvas.paint(class, |x, y| x >= x0 && x < x0 + w && y >= top && y < horizon + 1);
        }
        Class::Vegetation => {
            let r = span(rng, 0.08, 0.18) as f64;
            let cx = rng.random_range(0.0..s);
            let cy = horizon as f64 - r * 0.5;
            canvas.paint(class, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            });
        }
        Class::Car => {
            let w = span(rng, 0.2, 0.35);
            let h = (w / 2).max(1);
            let x0 = rng.random_range(0..size.saturating_sub(w).max(1));
            let bottom = rng.random_range((horizon + h).min(size - 1)..size);
            canvas.paint(class, |x, y| x >= x0 && x < x0 + w && y + h > bottom && y <= bottom);
        }
        Class::Person => {
            let h = span(rng, 0.12, 0.25);
            let w = (h / 3).max(1);
            let x0 = rng.random_range(0..size.saturating_sub(w).max(1));
            let bottom = rng.random_range(horizon.min(size - 1)..size);
            canvas.paint(class, |x, y| x >= x0 && x < x0 + w && y + h > bottom && y <= bottom);
        }
        Class::Pole => {
            let h = span(rng, 0.3, 0.5);
            let x0 = rng.random_range(0..size);
            let bottom = rng.random_range(horizon.min(size - 1)..size);
            canvas.paint(class, |x, y| x == x0 && y + h > bottom && y <= bottom);
        }
        Class::Sky | Class::Road | Class::Sidewalk => {}
    }
}

fn render_photo(canvas: &Canvas, horizon: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let size = canvas.size;
    let s = size as f64;
    // Global illumination: low horizons (more sky) give brighter scenes.
    let light = 1.25 - 0.9 * (horizon as f64 / s);
    let noise = Normal::new(0.0, 4.0).expect("finite");
    // Per-instance color jitter so instances of one class differ.
    let mut jitter = std::collections::HashMap::new();
    let mut photo = RgbImage::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let class = Class::ALL[canvas.class.get(x, y) as usize];
            let id = canvas.instance.get(x, y);
            let j: f64 = *jitter.entry(id).or_insert_with(|| rng.random_range(-20.0..20.0));
            let base = class.albedo();
            let (fx, fy) = (x as f64 / s, y as f64 / s);
            let texture = match class {
                Class::Sky => -40.0 * fy,
                Class::Road => 10.0 * ((x + 2 * y) % 3) as f64 - 10.0,
                Class::Building => if (x % 3 == 1) && (y % 3 == 1) { -45.0 } else { 0.0 },
                Class::Vegetation => 25.0 * ((7 * x + 3 * y) % 5) as f64 / 4.0 - 12.0,
                Class::Car => if y % 4 == 3 { -50.0 } else { 15.0 * fx },
                Class::Person => -20.0 * fy,
                Class::Pole => 0.0,
                Class::Sidewalk => if (x + y) % 2 == 0 { 8.0 } else { -8.0 },
            };
            let mut rgb = [0u8; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let v = light * (base[c] + texture + j) + noise.sample(rng);
                *out = v.round().clamp(0.0, 255.0) as u8;
            }
            photo.put(x, y, rgb);
        }
    }
    photo
}
