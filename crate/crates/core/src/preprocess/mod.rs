//! Octree construction from raw rectilinear datasets.
//!
//! The grid is cut into `b`-cell leaf blocks with a one-sample overlap on the high
//! side, so every payload holds `(b+1)³` samples per field and neighbouring blocks
//! share their boundary samples. Inner levels are pure stride-2 sub-samples of
//! the level below.

pub mod build;
pub mod layout;
pub mod raw;
pub mod store;
pub mod synth;

pub use build::{build_leaf, build_octree, build_store, build_timestep, downsample};
pub use layout::{level_count, level_sizes, overhead_ratio, partition_dims, total_node_count};
pub use raw::{GridSource, RawDataset, RawMeta, TimestepGrid};
pub use store::OctreeStore;
pub use synth::{synth_generate, Blob, SynthSpec, Wind};
