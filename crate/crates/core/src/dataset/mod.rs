//! Sequence loading: TUM RGB-D layout, masks, estimated depth, and seeded
//! synthetic scenes.

mod frame;
mod prefetch;
pub mod synthetic;
mod tum;

pub use frame::{Frame, FrameDescriptor};
pub use prefetch::{Prefetcher, DEFAULT_PREFETCH};
pub use synthetic::{generate_synthetic_sequence, SceneSpec, SyntheticSequence};
pub use tum::{
    load_est_depth, load_masks, load_tum_sequence, read_camera_file, read_camera_path, read_depth, read_index, read_mask, read_rgb, tum_fr3_intrinsics,
    write_camera_file, write_depth, write_mask, write_rgb, SequenceManifest, CAMERA_FILE, DEFAULT_ASSOC_TOLERANCE,
};
pub(crate) use tum::file_stem;
