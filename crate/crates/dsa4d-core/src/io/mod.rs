//! File formats tying the pipeline together.
//!
//! - Images: binary portable graymap (P5), maxval 65535, big-endian
//!   samples; pixel value `v` maps to `v / 65535`.
//! - Volumes and checkpoints: a JSON header next to a raw file of
//!   little-endian 32-bit IEEE-754 reals in grid flattened order. Both are
//!   written as a `{base}.json` + `{base}.raw` pair.
//! - Manifest: a JSON document listing acquisition views and the scene
//!   bounds; image paths are relative to the manifest's directory.
//!
//! Every JSON document carries a `format_version` field, currently 1.

mod checkpoint;
mod manifest;
mod pgm;
mod volume;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use manifest::{
    load_manifest, load_projections, save_manifest, Manifest, ManifestView,
};
pub use pgm::{read_image, write_image};
pub use volume::{read_volume, write_volume};

pub const FORMAT_VERSION: u32 = 1;
