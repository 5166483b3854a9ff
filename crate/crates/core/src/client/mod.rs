//! Client side: cut maintenance, the network connection, headless exploration
//! and the reference fragment resolver.

pub mod connection;
pub mod cut;
pub mod explore;
pub mod resolve;

pub use connection::{Connection, Received};
pub use cut::{advect, priority_of, solid_angle, Applied, Cut, CutNode, Frustum, RenderState};
pub use explore::{run_explore, CameraKey, ExploreReport, ExploreScript, SpecKey, TimestepKey};
pub use resolve::{resolve_fragments, Fragment, FragmentList};
