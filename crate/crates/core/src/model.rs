//! Domain types shared by preprocessing, extraction, the backend and the cut client.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};
use crate::preprocess::layout::{ceil_halve, level_count, partition_dims};

/// Names of the wind components carried as per-vertex velocities when present.
pub const WIND_FIELDS: [&str; 3] = ["u", "v", "w"];

/// Geometry and layout of a rectilinear dataset and its octree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Samples per axis.
    pub dims: [u32; 3],
    /// World units per cell.
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
    /// Cells per axis per leaf node.
    pub block_size: u32,
    pub fields: Vec<String>,
    pub timesteps: u32,
    pub levels: u8,
}

impl DatasetMeta {
    pub fn new(
        dims: [u32; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        block_size: u32,
        fields: Vec<String>,
        timesteps: u32,
    ) -> Result<Self> {
        let blocks = partition_dims(dims, block_size)?;
        let meta = Self {
            dims,
            spacing,
            origin,
            block_size,
            fields,
            timesteps,
            levels: level_count(blocks),
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = partition_dims(self.dims, self.block_size)?;
        if self.levels != level_count(blocks) {
            return Err(Error::InvalidMeta(format!(
                "levels is {} but the block layout {:?} needs {}",
                self.levels,
                blocks,
                level_count(blocks)
            )));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidMeta(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidMeta("origin must be finite".into()));
        }
        if self.timesteps == 0 {
            return Err(Error::InvalidMeta(
                "at least one timestep is required".into(),
            ));
        }
        if self.block_size > u16::MAX as u32 {
            return Err(Error::InvalidMeta("block size must fit in 16 bits".into()));
        }
        if self.fields.len() > u8::MAX as usize {
            return Err(Error::InvalidMeta(
                "at most 255 fields are supported".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for f in &self.fields {
            if f.is_empty() {
                return Err(Error::InvalidMeta("field names must be non-empty".into()));
            }
            if !seen.insert(f.as_str()) {
                return Err(Error::InvalidMeta(format!("duplicate field `{f}`")));
            }
        }
        let per_axis = self.nodes_per_axis(0);
        if per_axis.iter().any(|&n| n > u16::MAX as u32 + 1) {
            return Err(Error::InvalidMeta("too many blocks per axis".into()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> [u32; 3] {
        let b = self.block_size;
        self.dims.map(|d| (d - 1).div_ceil(b))
    }

    /// Node counts per axis at `level` (0 = leaves).
    pub fn nodes_per_axis(&self, level: u8) -> [u32; 3] {
        let mut n = self.blocks();
        for _ in 0..level {
            n = n.map(ceil_halve);
        }
        n
    }

    pub fn nodes_at_level(&self, level: u8) -> usize {
        self.nodes_per_axis(level)
            .iter()
            .map(|&n| n as usize)
            .product()
    }

    /// Node payloads per timestep over all levels.
    pub fn total_nodes(&self) -> usize {
        (0..self.levels).map(|l| self.nodes_at_level(l)).sum()
    }

    pub fn root(&self) -> NodeId {
        NodeId::new(self.levels - 1, 0, 0, 0)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        if node.level >= self.levels {
            return false;
        }
        let n = self.nodes_per_axis(node.level);
        (node.ix as u32) < n[0] && (node.iy as u32) < n[1] && (node.iz as u32) < n[2]
    }

    pub fn check_node(&self, node: NodeId) -> Result<()> {
        if self.contains(node) {
            Ok(())
        } else {
            Err(Error::InvalidNode { node })
        }
    }

    /// Nodes of one level in x-fastest order, the order used by the store index.
    pub fn level_nodes(&self, level: u8) -> impl Iterator<Item = NodeId> {
        let [nx, ny, nz] = self.nodes_per_axis(level);
        (0..nz).flat_map(move |z| {
            (0..ny).flat_map(move |y| {
                (0..nx).map(move |x| NodeId::new(level, x as u16, y as u16, z as u16))
            })
        })
    }

    /// Position of `node` in the per-timestep payload order (levels ascending, x-fastest).
    pub fn node_index(&self, node: NodeId) -> Result<usize> {
        self.check_node(node)?;
        let below: usize = (0..node.level).map(|l| self.nodes_at_level(l)).sum();
        let [nx, ny, _] = self.nodes_per_axis(node.level).map(|n| n as usize);
        Ok(below + node.ix as usize + nx * (node.iy as usize + ny * node.iz as usize))
    }

    /// Existing children of an inner node.
    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        if node.level == 0 || !self.contains(node) {
            return Vec::new();
        }
        let level = node.level - 1;
        let mut out = Vec::with_capacity(8);
        for dz in 0..2u16 {
            for dy in 0..2u16 {
                for dx in 0..2u16 {
                    let child =
                        NodeId::new(level, node.ix * 2 + dx, node.iy * 2 + dy, node.iz * 2 + dz);
                    if self.contains(child) {
                        out.push(child);
                    }
                }
            }
        }
        out
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        if node.level + 1 >= self.levels {
            return None;
        }
        Some(NodeId::new(
            node.level + 1,
            node.ix / 2,
            node.iy / 2,
            node.iz / 2,
        ))
    }

    /// Finest-lattice sample index that sample `s` of a node at `level` with node
    /// coordinate `i` along `axis` refers to, clamped to the grid border.
    pub fn lattice_index(&self, axis: usize, level: u8, i: u16, s: u32) -> u32 {
        let idx = (i as u64 * self.block_size as u64 + s as u64) << level;
        idx.min(self.dims[axis] as u64 - 1) as u32
    }

    /// World coordinate of a finest-lattice sample index along `axis`.
    pub fn world_coord(&self, axis: usize, lattice: u32) -> f64 {
        self.origin[axis] as f64 + self.spacing[axis] as f64 * lattice as f64
    }

    pub fn world_bounds(&self) -> Aabb {
        let min = Vec3::new(
            self.world_coord(0, 0),
            self.world_coord(1, 0),
            self.world_coord(2, 0),
        );
        let max = Vec3::new(
            self.world_coord(0, self.dims[0] - 1),
            self.world_coord(1, self.dims[1] - 1),
            self.world_coord(2, self.dims[2] - 1),
        );
        Aabb::new(min, max)
    }

    pub fn world_diagonal(&self) -> f64 {
        let b = self.world_bounds();
        (b.max - b.min).length()
    }

    /// Samples per axis of every payload, `block_size + 1`.
    pub fn samples_per_axis(&self) -> usize {
        self.block_size as usize + 1
    }

    /// 32-bit reals in one node payload over all fields.
    pub fn payload_len(&self) -> usize {
        self.fields.len() * self.samples_per_axis().pow(3)
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f == name)
    }

    /// Indices of the `u`, `v`, `w` fields when all three exist.
    pub fn wind_fields(&self) -> Option<[usize; 3]> {
        let u = self.field_index(WIND_FIELDS[0])?;
        let v = self.field_index(WIND_FIELDS[1])?;
        let w = self.field_index(WIND_FIELDS[2])?;
        Some([u, v, w])
    }
}

/// Octree node address. Level 0 holds the leaves; the root sits at `levels - 1`.
///
/// The derived ordering (level, ix, iy, iz) is the scheduler's tie-break order.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct NodeId {
    pub level: u8,
    pub ix: u16,
    pub iy: u16,
    pub iz: u16,
}

impl NodeId {
    pub const fn new(level: u8, ix: u16, iy: u16, iz: u16) -> Self {
        Self { level, ix, iy, iz }
    }

    pub fn coords(&self) -> [u16; 3] {
        [self.ix, self.iy, self.iz]
    }

    /// True if `self` is a strict ancestor of `other`.
    pub fn is_ancestor_of(&self, other: &NodeId) -> bool {
        if self.level <= other.level {
            return false;
        }
        let shift = self.level - other.level;
        (0..3).all(|a| (other.coords()[a] >> shift) == self.coords()[a])
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.level, self.ix, self.iy, self.iz)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    /// Parses `level,ix,iy,iz`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidMeta(format!("cannot parse node id `{s}`, expected L,ix,iy,iz"));
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let level = parts[0].parse().map_err(|_| bad())?;
        let mut c = [0u16; 3];
        for (dst, p) in c.iter_mut().zip(&parts[1..]) {
            *dst = p.parse().map_err(|_| bad())?;
        }
        Ok(NodeId::new(level, c[0], c[1], c[2]))
    }
}

/// Identity of one extraction request: spec version, timestep and node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkKey {
    pub spec_version: u32,
    pub timestep: u32,
    pub node: NodeId,
}

impl WorkKey {
    pub const fn new(spec_version: u32, timestep: u32, node: NodeId) -> Self {
        Self {
            spec_version,
            timestep,
            node,
        }
    }
}

impl fmt::Display for WorkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "v{} t{} node {}",
            self.spec_version, self.timestep, self.node
        )
    }
}

/// Per-field sample payload of one node at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockData {
    pub node: NodeId,
    pub timestep: u32,
    /// Samples per axis (`block_size + 1`).
    pub side: usize,
    /// One x-fastest `side³` array per field, in metadata order.
    pub samples: Vec<Vec<f32>>,
}

impl BlockData {
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.side * (y + self.side * z)
    }

    pub fn value(&self, field: usize, x: usize, y: usize, z: usize) -> f32 {
        self.samples[field][self.index(x, y, z)]
    }

    pub fn byte_len(&self) -> usize {
        self.samples.iter().map(|s| s.len() * 4).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().flatten().all(|v| v.is_finite())
    }
}

/// One scalar band `lower ≤ field ≤ upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limit {
    pub field: String,
    pub lower: f32,
    pub upper: f32,
}

impl Limit {
    pub fn new(field: impl Into<String>, lower: f32, upper: f32) -> Self {
        Self {
            field: field.into(),
            lower,
            upper,
        }
    }

    /// Signed distance to the nearer bound, positive strictly inside.
    pub fn slack(&self, value: f64) -> f64 {
        (value - self.lower as f64).min(self.upper as f64 - value)
    }
}

/// A sub-volume: the intersection of its limits' bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubVolumeSpec {
    pub id: u8,
    pub limits: Vec<Limit>,
}

impl SubVolumeSpec {
    pub fn new(id: u8, limits: Vec<Limit>) -> Self {
        Self { id, limits }
    }

    pub fn validate(&self, meta: &DatasetMeta) -> Result<()> {
        if self.limits.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "sub-volume {} has no limits",
                self.id
            )));
        }
        let mut seen = BTreeSet::new();
        for l in &self.limits {
            if !(l.lower <= l.upper) {
                return Err(Error::InvalidSpec(format!(
                    "sub-volume {}: limit on `{}` has lower {} > upper {}",
                    self.id, l.field, l.lower, l.upper
                )));
            }
            if meta.field_index(&l.field).is_none() {
                return Err(Error::InvalidSpec(format!(
                    "sub-volume {}: unknown field `{}`",
                    self.id, l.field
                )));
            }
            if !seen.insert(l.field.as_str()) {
                return Err(Error::InvalidSpec(format!(
                    "sub-volume {}: more than one limit on `{}`",
                    self.id, l.field
                )));
            }
        }
        Ok(())
    }
}

/// Minimum slack over all limits of `spec`: positive strictly inside the
/// intersection of the bands, zero on its boundary, negative outside.
pub fn composite_margin(values: &HashMap<&str, f64>, spec: &SubVolumeSpec) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for limit in &spec.limits {
        let v = values
            .get(limit.field.as_str())
            .ok_or_else(|| Error::MissingField(limit.field.clone()))?;
        margin = margin.min(limit.slack(*v));
    }
    Ok(margin)
}

/// The configured sub-volumes together with their version counter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpecSet {
    pub version: u32,
    pub subvolumes: Vec<SubVolumeSpec>,
}

impl SpecSet {
    pub fn new(version: u32, subvolumes: Vec<SubVolumeSpec>) -> Result<Self> {
        let set = Self {
            version,
            subvolumes,
        };
        set.check_ids()?;
        Ok(set)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.subvolumes {
            if !seen.insert(s.id) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate sub-volume id {}",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self, meta: &DatasetMeta) -> Result<()> {
        self.check_ids()?;
        self.subvolumes.iter().try_for_each(|s| s.validate(meta))
    }

    /// Replaces the sub-volumes and bumps the version.
    pub fn replace(&mut self, subvolumes: Vec<SubVolumeSpec>) -> Result<()> {
        let next = SpecSet {
            version: self.version + 1,
            subvolumes,
        };
        next.check_ids()?;
        *self = next;
        Ok(())
    }

    /// Bumps the version without changing the sub-volumes (e.g. on a timestep change).
    pub fn touch(&mut self) {
        self.version += 1;
    }
}

/// Boundary mesh of one sub-volume within one node, as streamed to the client.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultMesh {
    pub node: NodeId,
    pub timestep: u32,
    pub spec_version: u32,
    pub subvolume_id: u8,
    /// Triangle soup in world coordinates, three vertices per triangle.
    pub positions: Vec<[f32; 3]>,
    pub normals: Vec<[f32; 3]>,
    /// One array per dataset field (metadata order), one value per vertex.
    pub attributes: Vec<Vec<f32>>,
    pub velocities: Option<Vec<[f32; 3]>>,
}

impl ResultMesh {
    pub fn key(&self) -> WorkKey {
        WorkKey::new(self.spec_version, self.timestep, self.node)
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraState {
    pub position: Vec3,
    pub forward: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub vertical_fov: f64,
    pub aspect: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraState {
    /// Builds a camera, orthonormalizing `forward` and `up`.
    pub fn new(
        position: Vec3,
        forward: Vec3,
        up: Vec3,
        vertical_fov: f64,
        aspect: f64,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let bad = |m: &str| Error::InvalidMeta(format!("camera: {m}"));
        let forward = forward
            .try_normalize()
            .ok_or_else(|| bad("zero forward vector"))?;
        let up = (up - forward * up.dot(forward))
            .try_normalize()
            .ok_or_else(|| bad("up is parallel to forward"))?;
        if !(vertical_fov > 0.0 && vertical_fov < std::f64::consts::PI) {
            return Err(bad("vertical fov must lie in (0, π)"));
        }
        if !(aspect > 0.0) {
            return Err(bad("aspect must be positive"));
        }
        if !(near > 0.0 && near < far) {
            return Err(bad("need 0 < near < far"));
        }
        Ok(Self {
            position,
            forward,
            up,
            vertical_fov,
            aspect,
            near,
            far,
        })
    }

    pub fn look_at(position: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        Self::new(position, target - position, up, 1.0, 16.0 / 9.0, 0.01, 1e7)
    }

    pub fn right(&self) -> Vec3 {
        self.forward.cross(self.up)
    }
}

/// Per-frame changes to the cut, as sent to the backend.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CutDelta {
    pub added: Vec<(NodeId, f32)>,
    pub removed: Vec<NodeId>,
    pub reprioritized: Vec<(NodeId, f32)>,
}

impl CutDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.reprioritized.is_empty()
    }

    /// True if no node appears in more than one list.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.added
            .iter()
            .map(|(n, _)| n)
            .chain(&self.removed)
            .chain(self.reprioritized.iter().map(|(n, _)| n))
            .all(|n| seen.insert(*n))
    }
}

/// World-space box covered by `node`, clipped to the grid extent.
pub fn node_bbox(node: NodeId, meta: &DatasetMeta) -> Result<Aabb> {
    meta.check_node(node)?;
    let b = meta.block_size;
    let coords = node.coords();
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for axis in 0..3 {
        let lo = meta.lattice_index(axis, node.level, coords[axis], 0);
        let hi = meta.lattice_index(axis, node.level, coords[axis], b);
        min[axis] = meta.world_coord(axis, lo);
        max[axis] = meta.world_coord(axis, hi);
    }
    Ok(Aabb::new(Vec3::from_array(min), Vec3::from_array(max)))
}
