//! Leaf extraction, stride-2 downsampling and the octree build driver.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{BlockData, DatasetMeta, NodeId};
use crate::preprocess::raw::{GridSource, RawDataset};
use crate::preprocess::store::{self, OctreeStore, StoreManifest, INCOMPLETE_MARKER, STORE_MAGIC};

fn node_err(node: NodeId, timestep: u32, source: Error) -> Error {
    Error::Node {
        node,
        timestep,
        source: Box::new(source),
    }
}

/// Copies the `(b+1)³` samples of a leaf, edge-clamping past the grid border.
pub fn build_leaf(
    source: &dyn GridSource,
    meta: &DatasetMeta,
    node: NodeId,
    timestep: u32,
) -> Result<BlockData> {
    if node.level != 0 {
        return Err(node_err(node, timestep, Error::InvalidNode { node }));
    }
    meta.check_node(node)?;
    if source.dims() != meta.dims || source.field_count() != meta.fields.len() {
        return Err(node_err(
            node,
            timestep,
            Error::InvalidMeta("grid source does not match dataset metadata".into()),
        ));
    }
    let side = meta.samples_per_axis();
    let b = meta.block_size;
    let x0 = meta.lattice_index(0, 0, node.ix, 0);
    let x_last = meta.lattice_index(0, 0, node.ix, b);
    let in_grid = (x_last - x0 + 1) as usize;
    let mut row = vec![0.0f32; in_grid];
    let mut samples = Vec::with_capacity(meta.fields.len());
    for field in 0..meta.fields.len() {
        let mut out = Vec::with_capacity(side * side * side);
        for sz in 0..=b {
            let z = meta.lattice_index(2, 0, node.iz, sz);
            for sy in 0..=b {
                let y = meta.lattice_index(1, 0, node.iy, sy);
                source
                    .read_row(field, x0, y, z, &mut row)
                    .map_err(|e| node_err(node, timestep, e))?;
                out.extend_from_slice(&row);
                let last = *row.last().expect("rows hold at least one sample");
                out.resize(out.len() + side - in_grid, last);
            }
        }
        samples.push(out);
    }
    Ok(BlockData {
        node,
        timestep,
        side,
        samples,
    })
}

/// Builds a parent payload by stride-2 sub-sampling of its children.
///
/// Parent sample `s` takes child-domain sample `2s`; the child domain spans two
/// children that share one overlap sample. Positions past a missing border child
/// clamp to the last sample of the existing one.
pub fn downsample(
    meta: &DatasetMeta,
    children: &[&BlockData],
    parent: NodeId,
) -> Result<BlockData> {
    meta.check_node(parent)?;
    if parent.level == 0 {
        return Err(Error::InvalidNode { node: parent });
    }
    let expected = meta.children(parent);
    let mut by_id: HashMap<NodeId, &BlockData> = HashMap::with_capacity(8);
    for c in children {
        if !expected.contains(&c.node) || by_id.insert(c.node, c).is_some() {
            return Err(Error::InvalidMeta(format!(
                "node {} is not a distinct child of {parent}",
                c.node
            )));
        }
    }
    if by_id.len() != expected.len() {
        return Err(Error::InvalidMeta(format!(
            "parent {parent} needs {} children, got {}",
            expected.len(),
            by_id.len()
        )));
    }
    let first = children[0];
    if children.iter().any(|c| {
        c.timestep != first.timestep
            || c.side != first.side
            || c.samples.len() != first.samples.len()
    }) {
        return Err(Error::InvalidMeta(format!(
            "children of {parent} disagree on shape or timestep"
        )));
    }

    let b = meta.block_size as usize;
    let side = b + 1;
    // Per axis and parent sample: (which child half, sample within that child).
    let pick: Vec<[(u16, usize); 3]> = (0..side)
        .map(|s| {
            let c = 2 * s;
            let mut out = [(0u16, 0usize); 3];
            for (axis, slot) in out.iter_mut().enumerate() {
                let child_coord = parent.coords()[axis] * 2;
                let upper_exists =
                    (child_coord as u32 + 1) < meta.nodes_per_axis(parent.level - 1)[axis];
                *slot = if c <= b {
                    (0, c)
                } else if upper_exists {
                    (1, c - b)
                } else {
                    (0, b)
                };
            }
            out
        })
        .collect();

    let child_at = |hx: u16, hy: u16, hz: u16| -> &BlockData {
        let id = NodeId::new(
            parent.level - 1,
            parent.ix * 2 + hx,
            parent.iy * 2 + hy,
            parent.iz * 2 + hz,
        );
        by_id[&id]
    };

    let mut samples = Vec::with_capacity(first.samples.len());
    for field in 0..first.samples.len() {
        let mut out = Vec::with_capacity(side * side * side);
        for z in 0..side {
            let (hz, cz) = pick[z][2];
            for y in 0..side {
                let (hy, cy) = pick[y][1];
                for x in 0..side {
                    let (hx, cx) = pick[x][0];
                    out.push(child_at(hx, hy, hz).value(field, cx, cy, cz));
                }
            }
        }
        samples.push(out);
    }
    Ok(BlockData {
        node: parent,
        timestep: first.timestep,
        side,
        samples,
    })
}

/// All payloads of one timestep, level by level, leaves first.
pub fn build_timestep(
    source: &dyn GridSource,
    meta: &DatasetMeta,
    timestep: u32,
) -> Result<Vec<Vec<BlockData>>> {
    let mut levels = Vec::with_capacity(meta.levels as usize);
    levels.push(build_level0(source, meta, timestep)?);
    for level in 1..meta.levels {
        let next = build_inner_level(meta, levels.last().expect("level below"), level)?;
        levels.push(next);
    }
    Ok(levels)
}

fn build_level0(
    source: &dyn GridSource,
    meta: &DatasetMeta,
    timestep: u32,
) -> Result<Vec<BlockData>> {
    let nodes: Vec<NodeId> = meta.level_nodes(0).collect();
    nodes
        .par_iter()
        .map(|&n| build_leaf(source, meta, n, timestep))
        .collect()
}

fn build_inner_level(meta: &DatasetMeta, below: &[BlockData], level: u8) -> Result<Vec<BlockData>> {
    let [nx, ny, _] = meta.nodes_per_axis(level - 1).map(|n| n as usize);
    let nodes: Vec<NodeId> = meta.level_nodes(level).collect();
    nodes
        .par_iter()
        .map(|&parent| {
            let children: Vec<&BlockData> = meta
                .children(parent)
                .into_iter()
                .map(|c| &below[c.ix as usize + nx * (c.iy as usize + ny * c.iz as usize)])
                .collect();
            downsample(meta, &children, parent)
        })
        .collect()
}

/// Preprocesses a raw dataset into an octree store at `out`.
///
/// A marker file exists for the whole duration of the build, so an interrupted
/// or failed build is detectable by [`OctreeStore::open`].
pub fn build_octree(input: &RawDataset, block_size: u32, out: &Path) -> Result<OctreeStore> {
    let raw = input.meta();
    let meta = DatasetMeta::new(
        raw.dims,
        raw.spacing,
        raw.origin,
        block_size,
        raw.fields.clone(),
        raw.timesteps,
    )?;
    let id = input
        .dir()
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    build_store(&meta, &id, out, |t| input.load_timestep(t))
}

/// Shared build driver for any per-timestep grid provider.
pub fn build_store<S, F>(
    meta: &DatasetMeta,
    id: &str,
    out: &Path,
    mut load: F,
) -> Result<OctreeStore>
where
    S: GridSource,
    F: FnMut(u32) -> Result<S>,
{
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"build in progress\n").map_err(|e| Error::io(&marker, e))?;

    store::write_manifest(
        out,
        &StoreManifest {
            format: "STR1".into(),
            id: id.to_string(),
            meta: meta.clone(),
        },
    )?;
    for t in 0..meta.timesteps {
        let grid = load(t)?;
        write_timestep(out, meta, &grid, t)?;
    }
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    OctreeStore::open(out)
}

fn write_timestep(out: &Path, meta: &DatasetMeta, grid: &dyn GridSource, t: u32) -> Result<()> {
    let final_path = out.join(store::timestep_file_name(t));
    let tmp_path = out.join(format!("{}.tmp", store::timestep_file_name(t)));
    let file = File::create(&tmp_path).map_err(|e| Error::io(&tmp_path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let werr = |e| Error::io(&tmp_path, e);

    let total = meta.total_nodes();
    let payload_bytes = (meta.payload_len() * 4) as u64;
    let data_start = store::data_offset(total);
    w.write_all(STORE_MAGIC).map_err(werr)?;
    for k in 0..total as u64 {
        w.write_all(&(data_start + k * payload_bytes).to_le_bytes())
            .map_err(werr)?;
    }

    let mut level = build_level0(grid, meta, t)?;
    write_payloads(&mut w, &level).map_err(werr)?;
    for l in 1..meta.levels {
        level = build_inner_level(meta, &level, l)?;
        write_payloads(&mut w, &level).map_err(werr)?;
    }
    let file = w
        .into_inner()
        .map_err(|e| Error::io(&tmp_path, e.into_error()))?;
    file.sync_all().map_err(werr)?;
    drop(file);
    fs::rename(&tmp_path, &final_path).map_err(|e| Error::io(&final_path, e))
}

fn write_payloads(w: &mut impl Write, blocks: &[BlockData]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for block in blocks {
        buf.clear();
        for field in &block.samples {
            for v in field {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::raw::TimestepGrid;

    fn meta(dims: [u32; 3], b: u32) -> DatasetMeta {
        DatasetMeta::new(dims, [1.0; 3], [0.0; 3], b, vec!["f".into()], 1).unwrap()
    }

    #[test]
    fn constant_leaf() {
        let m = meta([41, 41, 21], 20);
        let g = TimestepGrid::from_fn(m.dims, 1, |_, _, _, _| 7.0);
        let leaf = build_leaf(&g, &m, NodeId::new(0, 1, 1, 0), 0).unwrap();
        assert_eq!(leaf.samples[0].len(), 21 * 21 * 21);
        assert!(leaf.samples[0].iter().all(|&v| v == 7.0));
    }

    #[test]
    fn ramp_leaf_holds_its_x_range() {
        let m = meta([41, 41, 21], 20);
        let g = TimestepGrid::from_fn(m.dims, 1, |_, x, _, _| x as f32);
        let leaf = build_leaf(&g, &m, NodeId::new(0, 1, 0, 0), 0).unwrap();
        for x in 0..21 {
            assert_eq!(leaf.value(0, x, 3, 4), (20 + x) as f32);
        }
    }

    #[test]
    fn border_leaf_is_edge_clamped() {
        let m = meta([31, 31, 21], 20);
        let g = TimestepGrid::from_fn(m.dims, 1, |_, x, y, _| (x + 100 * y) as f32);
        let leaf = build_leaf(&g, &m, NodeId::new(0, 1, 0, 0), 0).unwrap();
        // Leaf 1 starts at x = 20; lattice x = 30 is the last real sample.
        assert_eq!(leaf.value(0, 10, 0, 0), 30.0);
        for x in 10..21 {
            assert_eq!(leaf.value(0, x, 2, 0), 230.0);
        }
    }

    #[test]
    fn inner_leaf_level_is_rejected() {
        let m = meta([41, 41, 21], 20);
        let g = TimestepGrid::from_fn(m.dims, 1, |_, _, _, _| 0.0);
        assert!(build_leaf(&g, &m, m.root(), 0).is_err());
    }

    #[test]
    fn constant_children_give_constant_parent() {
        let m = meta([41, 41, 21], 20);
        let g = TimestepGrid::from_fn(m.dims, 1, |_, _, _, _| 3.0);
        let levels = build_timestep(&g, &m, 0).unwrap();
        assert_eq!(levels.len(), 2);
        assert!(levels[1][0].samples[0].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn linear_field_survives_subsampling() {
        let m = meta([33, 33, 33], 8);
        let g = TimestepGrid::from_fn(m.dims, 1, |_, x, _, _| x as f32);
        let levels = build_timestep(&g, &m, 0).unwrap();
        let root = &levels[2][0];
        for s in 0..9 {
            assert_eq!(root.value(0, s, 0, 0), (4 * s) as f32);
        }
    }

    #[test]
    fn checkerboard_parent_takes_even_samples() {
        // 8³ example: 9 samples, b = 4, two leaves per axis.
        let m = meta([9, 9, 9], 4);
        let g = TimestepGrid::from_fn(m.dims, 1, |_, x, y, z| ((x + y + z) % 2) as f32);
        let levels = build_timestep(&g, &m, 0).unwrap();
        // Oracle: every parent sample reads lattice (2x, 2y, 2z), whose index sum is even.
        let mut picks = Vec::new();
        for z in 0..5u32 {
            for y in 0..5u32 {
                for x in 0..5u32 {
                    picks.push(((2 * x + 2 * y + 2 * z) % 2) as f32);
                }
            }
        }
        assert_eq!(levels[1][0].samples[0], picks);
        assert!(picks.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_rejects_wrong_children() {
        let m = meta([41, 41, 21], 20);
        let g = TimestepGrid::from_fn(m.dims, 1, |_, _, _, _| 0.0);
        let leaves = build_timestep(&g, &m, 0).unwrap().remove(0);
        let three: Vec<&BlockData> = leaves.iter().take(3).collect();
        assert!(downsample(&m, &three, m.root()).is_err());
        let dup: Vec<&BlockData> = vec![&leaves[0], &leaves[0], &leaves[1], &leaves[2]];
        assert!(downsample(&m, &dup, m.root()).is_err());
    }
}
