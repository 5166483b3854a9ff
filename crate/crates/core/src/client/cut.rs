//! View-dependent cut through the octree and the per-node render states.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;

use crate::math::{Aabb, Vec3};
use crate::model::{
    node_bbox, CameraState, CutDelta, DatasetMeta, NodeId, ResultMesh, SpecSet, SubVolumeSpec,
};
use crate::protocol::Frame;
use crate::Result;

/// Collapse threshold as a fraction of the split threshold.
pub const MERGE_FACTOR: f64 = 0.8;
/// Smallest priority change worth telling the backend about.
pub const PRIORITY_EPSILON: f32 = 1e-3;
/// Default split threshold in steradians.
pub const DEFAULT_THETA: f64 = 0.05;

/// Solid angle of a box's bounding sphere seen from `eye`. An eye inside the
/// sphere sees the full hemisphere, 2π.
pub fn solid_angle(bbox: &Aabb, eye: Vec3) -> f64 {
    let r = bbox.radius();
    let d = (bbox.center() - eye).length();
    if d <= r {
        return 2.0 * PI;
    }
    2.0 * PI * (1.0 - d / (d * d + r * r).sqrt())
}

/// `1 / (1 + d/diag)`: 1 at the box centre, halving at one dataset diagonal.
pub fn priority_of(bbox: &Aabb, eye: Vec3, diagonal: f64) -> f64 {
    let d = (bbox.center() - eye).length();
    1.0 / (1.0 + d / diagonal)
}

/// Six inward-facing planes of a perspective camera.
#[derive(Debug, Clone, Copy)]
pub struct Frustum {
    planes: [(Vec3, f64); 6],
}

impl Frustum {
    pub fn new(camera: &CameraState) -> Self {
        let (p, f, u) = (camera.position, camera.forward, camera.up);
        let r = camera.right();
        let ty = (camera.vertical_fov * 0.5).tan();
        let tx = ty * camera.aspect;
        let side = |edge: Vec3, along: Vec3| {
            let mut n = along.cross(edge).try_normalize().unwrap_or(f);
            if n.dot(f) < 0.0 {
                n = -n;
            }
            (n, -n.dot(p))
        };
        let planes = [
            (f, -f.dot(p + f * camera.near)),
            (-f, f.dot(p + f * camera.far)),
            side(f + r * tx, u),
            side(f - r * tx, u),
            side(f + u * ty, r),
            side(f - u * ty, r),
        ];
        Self { planes }
    }

    /// Conservative box test: false only when the box lies wholly outside one plane.
    pub fn intersects(&self, b: &Aabb) -> bool {
        self.planes.iter().all(|&(n, d)| {
            let corner = Vec3::new(
                if n.x >= 0.0 { b.max.x } else { b.min.x },
                if n.y >= 0.0 { b.max.y } else { b.min.y },
                if n.z >= 0.0 { b.max.z } else { b.min.z },
            );
            n.dot(corner) + d >= 0.0
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RenderState {
    /// Requested, nothing to show yet.
    Empty,
    /// Showing meshes of an older spec version or timestep.
    Stale,
    Fresh,
}

#[derive(Debug, Clone)]
pub struct CutNode {
    pub priority: f32,
    pub state: RenderState,
    /// Meshes currently rendered.
    pub meshes: Vec<ResultMesh>,
    /// Meshes of the current version gathered until the node-done marker.
    incoming: Vec<ResultMesh>,
}

impl CutNode {
    fn new(priority: f32) -> Self {
        Self {
            priority,
            state: RenderState::Empty,
            meshes: Vec::new(),
            incoming: Vec::new(),
        }
    }

    pub fn triangle_count(&self) -> usize {
        self.meshes.iter().map(ResultMesh::triangle_count).sum()
    }
}

/// What [`Cut::apply_result`] did with a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applied {
    Accumulated,
    /// A node became fresh.
    Completed(NodeId),
    /// Superseded or for a node outside the cut.
    Dropped,
    /// Not a result frame.
    Ignored,
}

/// The set of nodes selected for rendering plus the spec they are extracted for.
#[derive(Debug, Clone)]
pub struct Cut {
    meta: DatasetMeta,
    theta: f64,
    specs: SpecSet,
    timestep: u32,
    nodes: BTreeMap<NodeId, CutNode>,
    resend_all: bool,
    dropped: u64,
}

impl Cut {
    pub fn new(meta: DatasetMeta, theta: f64) -> Self {
        assert!(theta > 0.0, "split threshold must be positive");
        Self {
            meta,
            theta,
            specs: SpecSet::default(),
            timestep: 0,
            nodes: BTreeMap::new(),
            resend_all: false,
            dropped: 0,
        }
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn version(&self) -> u32 {
        self.specs.version
    }

    pub fn specs(&self) -> &SpecSet {
        &self.specs
    }

    pub fn timestep(&self) -> u32 {
        self.timestep
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, CutNode> {
        &self.nodes
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains_key(&node)
    }

    /// Result frames that did not match the cut or version.
    pub fn dropped_frames(&self) -> u64 {
        self.dropped
    }

    pub fn count(&self, state: RenderState) -> usize {
        self.nodes.values().filter(|n| n.state == state).count()
    }

    pub fn triangle_count(&self) -> usize {
        self.nodes.values().map(CutNode::triangle_count).sum()
    }

    fn supersede(&mut self) {
        for n in self.nodes.values_mut() {
            if n.state == RenderState::Fresh {
                n.state = RenderState::Stale;
            }
            n.incoming.clear();
        }
        self.resend_all = true;
    }

    /// Installs new sub-volumes under the next version. Every cut node turns
    /// stale and is requested again on the next update.
    pub fn set_spec(&mut self, subvolumes: Vec<SubVolumeSpec>) -> Result<&SpecSet> {
        self.specs.replace(subvolumes)?;
        self.supersede();
        Ok(&self.specs)
    }

    /// Moves to another timestep; like a spec change this bumps the version.
    pub fn set_timestep(&mut self, timestep: u32) -> &SpecSet {
        self.timestep = timestep;
        self.specs.touch();
        self.supersede();
        &self.specs
    }

    /// Nodes the camera calls for, with their priorities.
    pub fn select(&self, camera: &CameraState) -> BTreeMap<NodeId, f32> {
        let frustum = Frustum::new(camera);
        let mut split_before: HashSet<NodeId> = HashSet::new();
        for &n in self.nodes.keys() {
            let mut p = self.meta.parent(n);
            while let Some(a) = p {
                if !split_before.insert(a) {
                    break;
                }
                p = self.meta.parent(a);
            }
        }
        let diagonal = self.meta.world_diagonal();
        let bbox_of =
            |n: NodeId| node_bbox(n, &self.meta).expect("traversal stays inside the tree");
        let mut out = BTreeMap::new();
        let root = self.meta.root();
        let mut stack = vec![(root, bbox_of(root))];
        stack.retain(|(_, b)| frustum.intersects(b));
        while let Some((node, bbox)) = stack.pop() {
            let split = node.level > 0 && {
                let omega = solid_angle(&bbox, camera.position);
                if omega > self.theta {
                    true
                } else if omega <= MERGE_FACTOR * self.theta {
                    false
                } else {
                    split_before.contains(&node)
                }
            };
            let children: Vec<(NodeId, Aabb)> = if split {
                self.meta
                    .children(node)
                    .into_iter()
                    .map(|c| (c, bbox_of(c)))
                    .filter(|(_, b)| frustum.intersects(b))
                    .collect()
            } else {
                Vec::new()
            };
            // The box test is conservative, so a visible node can have no visible
            // child; it then stands for its (invisible) subtree itself.
            if children.is_empty() {
                out.insert(node, priority_of(&bbox, camera.position, diagonal) as f32);
            } else {
                stack.extend(children);
            }
        }
        out
    }

    /// Re-traverses the tree for `camera` and returns the changes to send.
    pub fn update(&mut self, camera: &CameraState) -> CutDelta {
        let selected = self.select(camera);
        let mut delta = CutDelta::default();
        let resend = std::mem::take(&mut self.resend_all);
        self.nodes.retain(|n, _| {
            let keep = selected.contains_key(n);
            if !keep {
                delta.removed.push(*n);
            }
            keep
        });
        for (&node, &priority) in &selected {
            match self.nodes.get_mut(&node) {
                Some(entry) if resend => {
                    entry.priority = priority;
                    delta.added.push((node, priority));
                }
                Some(entry) => {
                    if (entry.priority - priority).abs() > PRIORITY_EPSILON {
                        entry.priority = priority;
                        delta.reprioritized.push((node, priority));
                    }
                }
                None => {
                    self.nodes.insert(node, CutNode::new(priority));
                    delta.added.push((node, priority));
                }
            }
        }
        delta
    }

    /// Feeds one frame from the backend into the node states.
    pub fn apply_result(&mut self, frame: Frame) -> Applied {
        let (node, version, timestep) = match &frame {
            Frame::ResultMesh(m) => (m.node, m.spec_version, m.timestep),
            Frame::NodeDone(k) => (k.node, k.spec_version, k.timestep),
            _ => return Applied::Ignored,
        };
        let current = version == self.specs.version && timestep == self.timestep;
        let Some(entry) = self.nodes.get_mut(&node).filter(|_| current) else {
            self.dropped += 1;
            return Applied::Dropped;
        };
        match frame {
            Frame::ResultMesh(m) => {
                entry.incoming.push(m);
                Applied::Accumulated
            }
            _ => {
                entry.meshes = std::mem::take(&mut entry.incoming);
                entry.state = RenderState::Fresh;
                Applied::Completed(node)
            }
        }
    }
}

/// Displaces vertices along their wind velocity for `s` of a simulation step
/// of `dt` seconds. Meshes without velocities are returned unchanged.
pub fn advect(mesh: &ResultMesh, s: f64, dt: f64) -> Vec<[f32; 3]> {
    match &mesh.velocities {
        Some(vel) => mesh
            .positions
            .iter()
            .zip(vel)
            .map(|(p, v)| {
                let moved = Vec3::from_f32(*p) + Vec3::from_f32(*v) * (s * dt);
                moved.to_f32()
            })
            .collect(),
        None => mesh.positions.clone(),
    }
}
