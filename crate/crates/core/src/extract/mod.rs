//! Boundary meshes of boolean sub-volumes within one octree node.
//!
//! Each sub-volume is reduced to its composite margin (positive inside), and the
//! zero level set of that margin is triangulated by marching cubes over the
//! node's sample lattice. Sample positions come from the finest-lattice indices
//! the samples stand for, so neighbouring nodes agree exactly on shared faces.

pub mod tables;

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};
use crate::model::{BlockData, DatasetMeta, NodeId, ResultMesh, SpecSet, SubVolumeSpec};

use tables::{CORNERS, EDGES, TRIANGLES};

/// World coordinates of a node's samples along each axis.
///
/// Coordinates are nondecreasing; samples clamped at the grid border repeat the
/// last coordinate, and cells of zero extent are skipped by the extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    pub coords: [Vec<f64>; 3],
}

impl BlockGrid {
    pub fn for_node(meta: &DatasetMeta, node: NodeId) -> Result<Self> {
        meta.check_node(node)?;
        let c = node.coords();
        let coords = [0, 1, 2].map(|axis| {
            (0..=meta.block_size)
                .map(|s| meta.world_coord(axis, meta.lattice_index(axis, node.level, c[axis], s)))
                .collect()
        });
        Ok(Self { coords })
    }

    /// Evenly spaced samples spanning `bounds`, `side` per axis.
    pub fn uniform(bounds: Aabb, side: usize) -> Self {
        assert!(side >= 2, "a grid needs at least two samples per axis");
        let coords = [0, 1, 2].map(|axis| {
            let (lo, hi) = (bounds.min[axis], bounds.max[axis]);
            (0..side)
                .map(|s| lo + (hi - lo) * s as f64 / (side - 1) as f64)
                .collect()
        });
        Self { coords }
    }

    pub fn side(&self) -> usize {
        self.coords[0].len()
    }

    pub fn position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        Vec3::new(self.coords[0][x], self.coords[1][y], self.coords[2][z])
    }

    pub fn bounds(&self) -> Aabb {
        let n = self.side() - 1;
        Aabb::new(self.position(0, 0, 0), self.position(n, n, n))
    }

    /// Cell and in-cell fraction holding world coordinate `v` along `axis`.
    /// Values outside the grid clamp to its border.
    pub fn locate_axis(&self, axis: usize, v: f64) -> (usize, f64) {
        let c = &self.coords[axis];
        let mut best = (0, 0.0);
        for i in 0..c.len() - 1 {
            let (lo, hi) = (c[i], c[i + 1]);
            if hi <= lo {
                continue;
            }
            if v <= hi {
                return (i, ((v - lo) / (hi - lo)).max(0.0));
            }
            best = (i, 1.0);
        }
        best
    }

    pub fn locate(&self, p: Vec3) -> CellPoint {
        let mut cell = [0; 3];
        let mut frac = [0.0; 3];
        for axis in 0..3 {
            (cell[axis], frac[axis]) = self.locate_axis(axis, p[axis]);
        }
        CellPoint { cell, frac }
    }
}

/// A point given by its cell's low corner and fractional offsets in that cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPoint {
    pub cell: [usize; 3],
    pub frac: [f64; 3],
}

/// Composite margin of one sub-volume at every sample of a node.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginGrid {
    pub side: usize,
    /// x-fastest, `side³` values.
    pub values: Vec<f64>,
}

impl MarginGrid {
    pub fn from_fn(side: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(side * side * side);
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    values.push(f(x, y, z));
                }
            }
        }
        Self { side, values }
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[x + self.side * (y + self.side * z)]
    }

    /// Trilinear interpolation inside a cell.
    pub fn interpolate(&self, p: &CellPoint) -> f64 {
        trilinear(p, |x, y, z| self.at(x, y, z))
    }
}

fn trilinear(p: &CellPoint, f: impl Fn(usize, usize, usize) -> f64) -> f64 {
    let [x, y, z] = p.cell;
    let [fx, fy, fz] = p.frac;
    let mut acc = 0.0;
    for c in CORNERS {
        let w = (if c[0] == 1 { fx } else { 1.0 - fx })
            * (if c[1] == 1 { fy } else { 1.0 - fy })
            * (if c[2] == 1 { fz } else { 1.0 - fz });
        if w != 0.0 {
            acc += w * f(x + c[0], y + c[1], z + c[2]);
        }
    }
    acc
}

/// Triangle soup of a margin level set, three vertices per triangle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Surface {
    pub positions: Vec<[f32; 3]>,
    /// Where each vertex sits in the sample lattice.
    pub locations: Vec<CellPoint>,
}

impl Surface {
    pub fn triangle_count(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn area(&self) -> f64 {
        self.positions
            .chunks_exact(3)
            .map(|t| triangle_normal(t).length() * 0.5)
            .sum()
    }
}

fn triangle_normal(t: &[[f32; 3]]) -> Vec3 {
    let [a, b, c] = [t[0], t[1], t[2]].map(Vec3::from_f32);
    (b - a).cross(c - a)
}

/// Pointwise composite margin of `spec` over a block.
pub fn margin_field(
    block: &BlockData,
    spec: &SubVolumeSpec,
    meta: &DatasetMeta,
) -> Result<MarginGrid> {
    let fields = spec
        .limits
        .iter()
        .map(|l| {
            meta.field_index(&l.field)
                .filter(|&i| i < block.samples.len())
                .ok_or_else(|| Error::MissingField(l.field.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = block.side.pow(3);
    let values = (0..n)
        .map(|i| {
            spec.limits
                .iter()
                .zip(&fields)
                .map(|(l, &f)| l.slack(block.samples[f][i] as f64))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(MarginGrid {
        side: block.side,
        values,
    })
}

/// Marching-cubes surface of `margin = 0`, wound so normals face outward.
pub fn extract_surface(margin: &MarginGrid, grid: &BlockGrid) -> Surface {
    let n = margin.side;
    debug_assert_eq!(grid.side(), n);
    let mut out = Surface::default();
    if margin.values.iter().all(|&m| m > 0.0) || margin.values.iter().all(|&m| m <= 0.0) {
        return out;
    }
    let live = |axis: usize, i: usize| grid.coords[axis][i + 1] > grid.coords[axis][i];
    for z in (0..n - 1).filter(|&z| live(2, z)) {
        for y in (0..n - 1).filter(|&y| live(1, y)) {
            for x in (0..n - 1).filter(|&x| live(0, x)) {
                let m = CORNERS.map(|c| margin.at(x + c[0], y + c[1], z + c[2]));
                let case = (0..8).fold(0usize, |acc, i| acc | (usize::from(m[i] > 0.0) << i));
                let tris = &TRIANGLES[case];
                if tris.is_empty() {
                    continue;
                }
                let vertex = |e: u8| {
                    let [a, b] = EDGES[e as usize];
                    let t = m[a] / (m[a] - m[b]);
                    let (ca, cb) = (CORNERS[a], CORNERS[b]);
                    let mut pos = [0f32; 3];
                    let mut frac = [0.0; 3];
                    for axis in 0..3 {
                        let cell = [x, y, z][axis];
                        let lo = grid.coords[axis][cell + ca[axis]];
                        let hi = grid.coords[axis][cell + cb[axis]];
                        pos[axis] = (lo + t * (hi - lo)) as f32;
                        frac[axis] = if ca[axis] == cb[axis] {
                            ca[axis] as f64
                        } else {
                            t
                        };
                    }
                    (
                        pos,
                        CellPoint {
                            cell: [x, y, z],
                            frac,
                        },
                    )
                };
                for tri in tris {
                    let v = tri.map(vertex);
                    let positions = v.map(|(p, _)| p);
                    if triangle_normal(&positions).length() == 0.0 {
                        continue;
                    }
                    for (p, loc) in v {
                        out.positions.push(p);
                        out.locations.push(loc);
                    }
                }
            }
        }
    }
    out
}

/// Unit normals from the negated, trilinearly interpolated margin gradient.
///
/// Where the gradient vanishes the triangle's own normal is used instead.
pub fn compute_normals(surface: &Surface, margin: &MarginGrid, grid: &BlockGrid) -> Vec<[f32; 3]> {
    let n = margin.side;
    let gradient = |x: usize, y: usize, z: usize| -> [f64; 3] {
        let p = [x, y, z];
        [0, 1, 2].map(|axis| {
            let lo = p[axis].saturating_sub(1);
            let hi = (p[axis] + 1).min(n - 1);
            let span = grid.coords[axis][hi] - grid.coords[axis][lo];
            if span <= 0.0 {
                return 0.0;
            }
            let mut a = p;
            let mut b = p;
            a[axis] = lo;
            b[axis] = hi;
            (margin.at(b[0], b[1], b[2]) - margin.at(a[0], a[1], a[2])) / span
        })
    };
    let mut normals = Vec::with_capacity(surface.positions.len());
    for (tri, locs) in surface
        .positions
        .chunks_exact(3)
        .zip(surface.locations.chunks_exact(3))
    {
        let face = triangle_normal(tri)
            .try_normalize()
            .unwrap_or(Vec3::new(0.0, 0.0, 1.0));
        for loc in locs {
            let g = [0, 1, 2].map(|axis| trilinear(loc, |x, y, z| gradient(x, y, z)[axis]));
            let normal = (-Vec3::from_array(g)).try_normalize().unwrap_or(face);
            normals.push(normal.to_f32());
        }
    }
    normals
}

/// Trilinearly interpolated field values at every vertex, plus wind velocities
/// when the dataset has `u`, `v` and `w`.
pub fn sample_attributes(
    block: &BlockData,
    surface: &Surface,
    meta: &DatasetMeta,
) -> (Vec<Vec<f32>>, Option<Vec<[f32; 3]>>) {
    let attributes: Vec<Vec<f32>> = (0..block.samples.len())
        .map(|f| {
            surface
                .locations
                .iter()
                .map(|loc| trilinear(loc, |x, y, z| block.value(f, x, y, z) as f64) as f32)
                .collect()
        })
        .collect();
    let velocities = meta.wind_fields().map(|[u, v, w]| {
        (0..surface.positions.len())
            .map(|i| [attributes[u][i], attributes[v][i], attributes[w][i]])
            .collect()
    });
    (attributes, velocities)
}

/// One mesh per sub-volume of `specs`, in order; empty meshes included.
pub fn extract_node(
    block: &BlockData,
    specs: &SpecSet,
    meta: &DatasetMeta,
) -> Result<Vec<ResultMesh>> {
    if specs.subvolumes.is_empty() {
        return Ok(Vec::new());
    }
    let grid = BlockGrid::for_node(meta, block.node)?;
    if grid.side() != block.side {
        return Err(Error::InvalidMeta(format!(
            "block has {} samples per axis, dataset expects {}",
            block.side,
            grid.side()
        )));
    }
    specs
        .subvolumes
        .iter()
        .map(|spec| {
            let margin = margin_field(block, spec, meta).map_err(|e| Error::SubVolume {
                id: spec.id,
                source: Box::new(e),
            })?;
            let surface = extract_surface(&margin, &grid);
            let normals = compute_normals(&surface, &margin, &grid);
            let (attributes, velocities) = sample_attributes(block, &surface, meta);
            Ok(ResultMesh {
                node: block.node,
                timestep: block.timestep,
                spec_version: specs.version,
                subvolume_id: spec.id,
                positions: surface.positions,
                normals,
                attributes,
                velocities,
            })
        })
        .collect()
}
