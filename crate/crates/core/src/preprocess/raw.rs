//! Raw input format: `meta.json` plus one flat little-endian f32 file per
//! timestep and field, `t{T}_{field}.raw`, x-fastest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RAW_META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub dims: [u32; 3],
    pub spacing: [f32; 3],
    #[serde(default)]
    pub origin: [f32; 3],
    pub fields: Vec<String>,
    pub timesteps: u32,
}

impl RawMeta {
    pub fn sample_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

pub fn raw_file_name(timestep: u32, field: &str) -> String {
    format!("t{timestep}_{field}.raw")
}

/// Random access to one timestep of a rectilinear grid.
pub trait GridSource: Sync {
    fn dims(&self) -> [u32; 3];

    fn field_count(&self) -> usize;

    /// Copies `out.len()` consecutive x-samples of row (`y`, `z`) starting at `x0`.
    fn read_row(&self, field: usize, x0: u32, y: u32, z: u32, out: &mut [f32]) -> Result<()>;
}

/// One timestep held in memory, one x-fastest array per field.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepGrid {
    pub dims: [u32; 3],
    pub fields: Vec<Vec<f32>>,
}

impl TimestepGrid {
    pub fn new(dims: [u32; 3], fields: Vec<Vec<f32>>) -> Self {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        assert!(
            fields.iter().all(|f| f.len() == n),
            "field length does not match dims"
        );
        Self { dims, fields }
    }

    /// Builds a grid by evaluating `f(field, x, y, z)` at every sample.
    pub fn from_fn(
        dims: [u32; 3],
        field_count: usize,
        f: impl Fn(usize, u32, u32, u32) -> f32,
    ) -> Self {
        let fields = (0..field_count)
            .map(|fi| {
                let mut v = Vec::with_capacity(dims.iter().map(|&d| d as usize).product());
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        for x in 0..dims[0] {
                            v.push(f(fi, x, y, z));
                        }
                    }
                }
                v
            })
            .collect();
        Self { dims, fields }
    }

    pub fn index(&self, x: u32, y: u32, z: u32) -> usize {
        let [nx, ny, _] = self.dims.map(|d| d as usize);
        x as usize + nx * (y as usize + ny * z as usize)
    }

    pub fn value(&self, field: usize, x: u32, y: u32, z: u32) -> f32 {
        self.fields[field][self.index(x, y, z)]
    }
}

impl GridSource for TimestepGrid {
    fn dims(&self) -> [u32; 3] {
        self.dims
    }

    fn field_count(&self) -> usize {
        self.fields.len()
    }

    fn read_row(&self, field: usize, x0: u32, y: u32, z: u32, out: &mut [f32]) -> Result<()> {
        let start = self.index(x0, y, z);
        let row = self.fields[field]
            .get(start..start + out.len())
            .ok_or_else(|| Error::InvalidMeta(format!("row ({x0},{y},{z}) out of range")))?;
        out.copy_from_slice(row);
        Ok(())
    }
}

/// A raw dataset directory.
#[derive(Debug, Clone)]
pub struct RawDataset {
    dir: PathBuf,
    meta: RawMeta,
}

impl RawDataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(RAW_META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: RawMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if meta.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidMeta(format!(
                "{}: dims must be ≥ 2",
                path.display()
            )));
        }
        if meta.timesteps == 0 {
            return Err(Error::InvalidMeta(format!(
                "{}: no timesteps",
                path.display()
            )));
        }
        Ok(Self { dir, meta })
    }

    pub fn meta(&self) -> &RawMeta {
        &self.meta
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn read_field(&self, timestep: u32, field: &str) -> Result<Vec<f32>> {
        let path = self.dir.join(raw_file_name(timestep, field));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expect = self.meta.sample_count() * 4;
        if bytes.len() != expect {
            return Err(Error::InvalidMeta(format!(
                "{}: expected {expect} bytes, found {}",
                path.display(),
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn load_timestep(&self, timestep: u32) -> Result<TimestepGrid> {
        let fields = self
            .meta
            .fields
            .iter()
            .map(|f| self.read_field(timestep, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(TimestepGrid::new(self.meta.dims, fields))
    }
}

/// Writes `meta.json` into `dir`, creating the directory.
pub fn write_raw_meta(dir: &Path, meta: &RawMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RAW_META_FILE);
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn write_raw_field(dir: &Path, timestep: u32, field: &str, values: &[f32]) -> Result<()> {
    let path = dir.join(raw_file_name(timestep, field));
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Writes a complete raw dataset from in-memory timesteps.
pub fn write_raw_dataset(dir: &Path, meta: &RawMeta, timesteps: &[TimestepGrid]) -> Result<()> {
    write_raw_meta(dir, meta)?;
    for (t, grid) in timesteps.iter().enumerate() {
        for (name, values) in meta.fields.iter().zip(&grid.fields) {
            write_raw_field(dir, t as u32, name, values)?;
        }
    }
    Ok(())
}
