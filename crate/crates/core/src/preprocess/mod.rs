//! SLO contrast sharpening, line-structure prefiltering and late-to-early
//! registration.

mod register;
mod sector;
mod sharpen;
pub mod sift;
mod pipeline;

pub use pipeline::{preprocess_dataset, PreprocessOptions, PreprocessSummary};
pub use register::{ransac_homography, register, RegistrationParams, RegistrationRecord, RegistrationResult};
pub use sector::{sector_filter, sector_filter_scales, SectorFilterParams};
pub use sharpen::{equalize_plane, sharpen_slo, HIST_BINS};
