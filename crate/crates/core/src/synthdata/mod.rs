//! Synthetic paired-image generator with known ground truth: a seeded vessel
//! tree rendered as a scanning-laser condition image, an early-phase
//! angiogram, and a late-phase angiogram carrying leakage blobs and a random
//! projective misalignment.

mod augment;
mod dataset;
mod render;
mod vessels;

pub use augment::{augment, iou, AugmentationParams, MAX_ROTATION_DEG};
pub use dataset::{
    build_dataset, sample_seed, synth_sample, write_sample, Manifest, ManifestEntry, SampleDir,
    SampleMeta, Split, SynthOptions, MANIFEST_FORMAT,
};
pub use render::{
    render_triplet, Blob, LesionKind, LesionSpec, PairedTriplet, LATE_BLUR_SIGMA, LATE_DIM,
};
pub use vessels::{generate_vessel_tree, rasterize, Polyline, VesselMap};
