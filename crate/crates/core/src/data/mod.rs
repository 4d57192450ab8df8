//! Images, manifests, augmentation and synthetic data.

mod crop;
mod image;
mod manifest;
mod mask;
mod synth;

pub use crop::{multi_crop_views, photometric, render_view, sample_crop, CropParams, CropRect, MultiCropViews, ViewMeta};
pub use image::{bilinear_taps, decode_pgm, decode_ppm, encode_pgm, encode_ppm, Image};
pub use manifest::{load_manifest, parse_manifest, render_manifest, write_manifest, Dataset, ManifestEntry, Split, MANIFEST_HEADER};
pub use mask::{mask_target, sample_block_mask, MaskPattern, MIN_BLOCK_PATCHES};
pub use synth::{generate_synth_dataset, render_identity_image, SynthConfig};
