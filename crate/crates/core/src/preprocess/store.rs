//! On-disk octree store: `store.json` plus one `t{T}.oct` per timestep.
//!
//! A `.oct` file is the magic `STR1`, then one little-endian u64 payload offset
//! per node (levels ascending, x-fastest within a level), then the payloads:
//! fields in metadata order, each `(b+1)³` little-endian f32 in x-fastest order.

use std::collections::HashMap;
use std::fs::{self, File};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockData, DatasetMeta, NodeId};

pub const STORE_MAGIC: &[u8; 4] = b"STR1";
pub const MANIFEST_FILE: &str = "store.json";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    /// Dataset id clients pass in `OPEN`.
    pub id: String,
    pub meta: DatasetMeta,
}

pub fn timestep_file_name(t: u32) -> String {
    format!("t{t}.oct")
}

/// Byte offset of the first payload in a timestep file.
pub fn data_offset(total_nodes: usize) -> u64 {
    STORE_MAGIC.len() as u64 + 8 * total_nodes as u64
}

pub(crate) fn write_manifest(dir: &Path, manifest: &StoreManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Read access to a built octree. Safe to share between threads.
#[derive(Debug)]
pub struct OctreeStore {
    root: PathBuf,
    manifest: StoreManifest,
    files: RwLock<HashMap<u32, Arc<File>>>,
    reads: AtomicU64,
}

impl OctreeStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if root.join(INCOMPLETE_MARKER).exists() {
            return Err(Error::IncompleteStore(root));
        }
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StoreManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format != "STR1" {
            return Err(Error::CorruptStore(format!(
                "unknown format `{}`",
                manifest.format
            )));
        }
        manifest.meta.validate()?;
        Ok(Self {
            root,
            manifest,
            files: RwLock::new(HashMap::new()),
            reads: AtomicU64::new(0),
        })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.manifest.meta
    }

    pub fn id(&self) -> &str {
        &self.manifest.id
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of payloads read from disk so far.
    pub fn block_reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    fn file(&self, t: u32) -> Result<Arc<File>> {
        if let Some(f) = self.files.read().get(&t) {
            return Ok(f.clone());
        }
        let path = self.root.join(timestep_file_name(t));
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut magic = [0u8; 4];
        file.read_exact_at(&mut magic, 0)
            .map_err(|e| Error::io(&path, e))?;
        if &magic != STORE_MAGIC {
            return Err(Error::CorruptStore(format!(
                "{}: bad magic",
                path.display()
            )));
        }
        let file = Arc::new(file);
        self.files.write().insert(t, file.clone());
        Ok(file)
    }

    pub fn read_block(&self, timestep: u32, node: NodeId) -> Result<BlockData> {
        let meta = self.meta();
        let wrap = |e: Error| Error::Node {
            node,
            timestep,
            source: Box::new(e),
        };
        if timestep >= meta.timesteps {
            return Err(wrap(Error::InvalidMeta(format!(
                "timestep {timestep} out of range (dataset has {})",
                meta.timesteps
            ))));
        }
        let index = meta.node_index(node).map_err(wrap)?;
        let file = self.file(timestep).map_err(wrap)?;
        let path = || self.root.join(timestep_file_name(timestep));

        let mut off = [0u8; 8];
        file.read_exact_at(&mut off, STORE_MAGIC.len() as u64 + 8 * index as u64)
            .map_err(|e| wrap(Error::io(path(), e)))?;
        let offset = u64::from_le_bytes(off);
        if offset < data_offset(meta.total_nodes()) {
            return Err(wrap(Error::CorruptStore(format!(
                "payload offset {offset} inside the index"
            ))));
        }

        let side = meta.samples_per_axis();
        let per_field = side * side * side;
        let mut bytes = vec![0u8; meta.payload_len() * 4];
        file.read_exact_at(&mut bytes, offset)
            .map_err(|e| wrap(Error::io(path(), e)))?;
        self.reads.fetch_add(1, Ordering::Relaxed);

        let samples = bytes
            .chunks_exact(per_field * 4)
            .map(|field| {
                field
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            })
            .collect();
        Ok(BlockData {
            node,
            timestep,
            side,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::build::{build_store, build_timestep};
    use crate::preprocess::raw::TimestepGrid;

    fn sample_meta() -> DatasetMeta {
        DatasetMeta::new(
            [41, 41, 21],
            [0.5, 1.0, 2.0],
            [0.0; 3],
            20,
            vec!["a".into(), "b".into()],
            2,
        )
        .unwrap()
    }

    fn grid(t: u32) -> TimestepGrid {
        TimestepGrid::from_fn([41, 41, 21], 2, move |f, x, y, z| {
            (t as f32) * 0.25 + f as f32 + (x as f32).sin() * (y as f32 + 0.5).ln() - z as f32
        })
    }

    #[test]
    fn payloads_round_trip_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let meta = sample_meta();
        let store = build_store(&meta, "demo", dir.path(), |t| Ok(grid(t))).unwrap();
        assert_eq!(store.id(), "demo");
        for t in 0..2 {
            let levels = build_timestep(&grid(t), &meta, t).unwrap();
            for block in levels.iter().flatten() {
                let read = store.read_block(t, block.node).unwrap();
                assert_eq!(&read, block);
                assert!(read
                    .samples
                    .iter()
                    .flatten()
                    .zip(block.samples.iter().flatten())
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        assert_eq!(store.block_reads(), 10);
    }

    #[test]
    fn file_layout_matches_format() {
        let dir = tempfile::tempdir().unwrap();
        let meta = sample_meta();
        build_store(&meta, "demo", dir.path(), |t| Ok(grid(t))).unwrap();
        let bytes = fs::read(dir.path().join("t0.oct")).unwrap();
        assert_eq!(&bytes[..4], b"STR1");
        let payload = 2 * 21 * 21 * 21 * 4;
        assert_eq!(bytes.len(), 4 + 5 * 8 + 5 * payload);
        let second = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        assert_eq!(second, (4 + 5 * 8 + payload) as u64);
        // First payload value: leaf (0,0,0), field a, sample (0,0,0).
        let v = f32::from_le_bytes(bytes[44..48].try_into().unwrap());
        assert_eq!(v, grid(0).value(0, 0, 0, 0));
    }

    #[test]
    fn incomplete_marker_blocks_open() {
        let dir = tempfile::tempdir().unwrap();
        build_store(&sample_meta(), "demo", dir.path(), |t| Ok(grid(t))).unwrap();
        fs::write(dir.path().join(INCOMPLETE_MARKER), b"").unwrap();
        assert!(matches!(
            OctreeStore::open(dir.path()),
            Err(Error::IncompleteStore(_))
        ));
    }

    #[test]
    fn failed_build_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let res = build_store(&sample_meta(), "demo", dir.path(), |t| {
            if t == 1 {
                Err(Error::InvalidMeta("disk went away".into()))
            } else {
                Ok(grid(t))
            }
        });
        assert!(res.is_err());
        assert!(dir.path().join(INCOMPLETE_MARKER).exists());
    }

    #[test]
    fn bad_node_and_timestep_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let store = build_store(&sample_meta(), "demo", dir.path(), |t| Ok(grid(t))).unwrap();
        assert!(store.read_block(2, NodeId::new(0, 0, 0, 0)).is_err());
        assert!(store.read_block(0, NodeId::new(0, 2, 0, 0)).is_err());
        assert!(store.read_block(0, NodeId::new(5, 0, 0, 0)).is_err());
    }
}
