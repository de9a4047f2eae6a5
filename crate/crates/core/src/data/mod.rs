//! Synthetic paired scenes, image codecs, dequantization and boundary maps.

pub mod boundary;
pub mod dataset;
pub mod dequant;
pub mod grid;
pub mod pnm;
pub mod scene;

pub use boundary::{boundary_map, downsample_boundary, DownsampleMode};
pub use dataset::{generate_dataset, read_dataset, write_dataset};
pub use dequant::{center_dequantize, dequantize, grid_tensor, grid_tensor_u8, quantize};
pub use grid::{Grid, RgbImage};
pub use pnm::{read_image, read_instance_map, write_image, write_instance_map};
pub use scene::{generate_scene, PairedSample, PALETTE};
