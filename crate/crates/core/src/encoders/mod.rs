//! Clip and scene encoders.

mod sparse;
mod unet;
mod video;

pub use sparse::{build_levels, LevelIndex, SparseLevel, SSC_OFFSETS};
pub use unet::{DecoderHook, IdentityHook, SceneFeatures, SparseUNet};
pub use video::{resample_frames, ClipBlock, ClipFeatures, IntentionProjector, ToyVideoEncoder};
