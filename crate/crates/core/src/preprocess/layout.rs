//! Block partitioning and octree level arithmetic.

use crate::error::{Error, Result};

pub(crate) fn ceil_halve(n: u32) -> u32 {
    n.div_ceil(2)
}

/// Number of `b`-cell blocks per axis covering a grid of `dims` samples.
/// The last block along an axis may cover fewer cells.
pub fn partition_dims(dims: [u32; 3], b: u32) -> Result<[u32; 3]> {
    if b < 2 {
        return Err(Error::InvalidMeta(format!(
            "block size must be at least 2, got {b}"
        )));
    }
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidMeta(format!(
            "every axis needs at least 2 samples, got {dims:?}"
        )));
    }
    Ok(dims.map(|d| (d - 1).div_ceil(b)))
}

/// Octree depth: one more than the number of ceil-halvings needed to reduce
/// every axis to a single node.
pub fn level_count(blocks: [u32; 3]) -> u8 {
    let deepest = blocks
        .iter()
        .map(|&n| n.max(1).next_power_of_two().trailing_zeros())
        .max()
        .unwrap_or(0);
    1 + deepest as u8
}

/// Node counts per level, leaves first.
pub fn level_sizes(blocks: [u32; 3]) -> Vec<u64> {
    let mut n = blocks;
    (0..level_count(blocks))
        .map(|_| {
            let size = n.iter().map(|&c| c as u64).product();
            n = n.map(ceil_halve);
            size
        })
        .collect()
}

/// Payloads per timestep over all levels.
pub fn total_node_count(blocks: [u32; 3]) -> u64 {
    level_sizes(blocks).iter().sum()
}

/// Inner-node payload bytes divided by leaf payload bytes. Every payload has the
/// same size, so this is a ratio of node counts.
pub fn overhead_ratio_for_blocks(blocks: [u32; 3]) -> f64 {
    let sizes = level_sizes(blocks);
    let inner: u64 = sizes[1..].iter().sum();
    inner as f64 / sizes[0] as f64
}

pub fn overhead_ratio(dims: [u32; 3], b: u32) -> Result<f64> {
    Ok(overhead_ratio_for_blocks(partition_dims(dims, b)?))
}
