//! On-disk dataset layout: `<root>/pairs/<index>_seg.ppm`,
//! `<index>_photo.ppm` and `<index>_inst.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use super::boundary::boundary_map;
use super::pnm::{read_image, read_instance_map, write_image, write_instance_map};
use super::scene::{generate_scene, PairedSample};
use crate::error::{Error, Result};

pub const PAIRS_DIR: &str = "pairs";

fn pair_paths(root: &Path, index: usize) -> [PathBuf; 3] {
    let dir = root.join(PAIRS_DIR);
    [
        dir.join(format!("{index:05}_seg.ppm")),
        dir.join(format!("{index:05}_photo.ppm")),
        dir.join(format!("{index:05}_inst.pgm")),
    ]
}

/// Seed of the `index`-th scene of a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Generates `count` scenes deterministically in memory.
pub fn generate_dataset(count: usize, size: usize, n_classes: usize, seed: u64) -> Result<Vec<PairedSample>> {
    (0..count).map(|i| generate_scene(scene_seed(seed, i), size, n_classes)).collect()
}

pub fn write_dataset(root: &Path, samples: &[PairedSample]) -> Result<()> {
    fs::create_dir_all(root.join(PAIRS_DIR))?;
    for (i, s) in samples.iter().enumerate() {
        let [seg, photo, inst] = pair_paths(root, i);
        write_image(seg, &s.seg)?;
        write_image(photo, &s.photo)?;
        write_instance_map(inst, &s.instance_ids)?;
    }
    Ok(())
}

/// Loads pairs `0, 1, …` until the first missing index. The instance map is
/// optional; when present the boundary map is derived from it.
pub fn read_dataset(root: &Path) -> Result<Vec<PairedSample>> {
    let dir = root.join(PAIRS_DIR);
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no {PAIRS_DIR} directory under {}", root.display()),
        )));
    }
    let mut out = Vec::new();
    loop {
        let [seg, photo, inst] = pair_paths(root, out.len());
        if !seg.exists() {
            break;
        }
        let seg = read_image(&seg)?;
        let photo = read_image(&photo)?;
        if (seg.width, seg.height) != (photo.width, photo.height) {
            return Err(Error::config(format!("pair {} has mismatched seg and photo sizes", out.len())));
        }
        let instance_ids = if inst.exists() {
            read_instance_map(&inst)?
        } else {
            super::grid::Grid::filled(seg.width, seg.height, 0)
        };
        if (instance_ids.width, instance_ids.height) != (seg.width, seg.height) {
            return Err(Error::config(format!("pair {} has a mismatched instance map", out.len())));
        }
        let boundary = Some(boundary_map(&instance_ids));
        out.push(PairedSample { seg, photo, instance_ids, boundary });
    }
    if out.is_empty() {
        return Err(Error::config(format!("dataset at {} contains no pairs", root.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(3, 16, 8, 7).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        assert!(dir.path().join("pairs/00002_inst.pgm").exists());
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);
    }

    #[test]
    fn empty_or_missing_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io(_))));
        fs::create_dir_all(dir.path().join(PAIRS_DIR)).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Config(_))));
    }
}
