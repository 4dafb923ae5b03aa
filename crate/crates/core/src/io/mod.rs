//! File formats: COLMAP text models, PLY checkpoints, PNG/JPEG images and scene directories.

pub mod colmap;
pub mod images;
pub mod loader;
pub mod ply;

pub use colmap::{read_colmap_text, write_colmap_text, ColmapModel};
pub use images::{read_depth_png, read_image, write_depth_png, write_image};
pub use loader::load_scene;
pub use ply::{read_ply, write_ply};
