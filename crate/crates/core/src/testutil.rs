//! Small scenes shared by unit tests.

use crate::anchoring::ImageContext;
use crate::geometry::VoxelGridSpec;

pub(crate) fn tiny_scene(channels: usize, seed: u64) -> (VoxelGridSpec, ImageContext) {
    crate::gradsuite::miniature_scene(channels, seed)
}
