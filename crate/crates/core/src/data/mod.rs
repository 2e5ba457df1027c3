//! Paired person images, 18-joint keypoints, pose heatmaps and batching.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! root/images/<person_id>_<pose_id>.png      8-bit RGB
//! root/keypoints/<person_id>_<pose_id>.json  {"points": [[x, y] x 18], "visible": [bool x 18]}
//! root/splits.json                           {"<person_id>": "train" | "test", ...}
//! ```

mod dataset;
mod heatmap;
mod image;
mod keypoints;
mod synthetic;

pub use dataset::{
    load_dataset, parse_splits, parse_stem, BatchSampler, DatasetIndex, PairDataset, PairEntry, Split,
    TrainingBatch,
};
pub use heatmap::{channel_argmax, default_sigma, render_heatmap, REFERENCE_SIGMA};
pub use image::{
    byte_to_unit, denormalize_image, encode_png, load_image, normalize_image, normalize_rgb, unit_to_byte,
};
pub use keypoints::{Keypoints18, INVISIBLE, JOINT_NAMES, NUM_JOINTS};
pub use synthetic::{
    digest_dir, digest_files, generate_samples, make_synthetic_dataset, person_id, pose_id, render_files,
    SynthOptions, SynthSample, SynthSummary,
};

use ratenet_autograd::Tensor;

use crate::error::{Error, Result};

/// Checks an image batch: `B x 3 x H x W`, H and W multiples of 8, finite, within `[-1, 1]`.
pub fn validate_image_batch(t: &Tensor<f32>) -> Result<()> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Invalid(format!("image batch needs 3 channels, got {c}")));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Invalid(format!("image size {h}x{w} is not a multiple of 8")));
    }
    if !t.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
        return Err(Error::Invalid("image values must be finite and within [-1, 1]".into()));
    }
    Ok(())
}
