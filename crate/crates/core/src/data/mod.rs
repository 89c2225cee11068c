//! Procedural stand-in for a segmentation-labelled inpainting corpus.

pub mod brush;
pub mod pairs;
pub mod scene;
pub mod shard;

use crate::image::{Image, Mask};
use crate::lcg::{Category, MaskKind};

pub use brush::{gen_brush_mask, BrushConfig};
pub use pairs::{build_pairs, PairConfig, PairStream};
pub use scene::{gen_scene, Scene, SceneConfig, ShapeKind};
pub use shard::{read_shard, write_shard, Shard};

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMaskSample {
    pub image: Image,
    /// Region to fill.
    pub mask: Mask,
    pub category: Category,
    pub mask_kind: MaskKind,
    /// Seed of the random stream that produced this sample.
    pub seed: u64,
}
