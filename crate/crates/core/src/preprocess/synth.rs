//! Synthetic datasets with analytic ground truth: drifting Gaussian blobs in a
//! field `q` and a wind field `u`, `v`, `w`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::preprocess::raw::{write_raw_field, write_raw_meta, RawMeta, TimestepGrid};

pub const SYNTH_FIELDS: [&str; 4] = ["q", "u", "v", "w"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub amplitude: f64,
    /// World units per unit of simulation time.
    #[serde(default)]
    pub drift: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wind {
    Constant([f64; 3]),
    /// Rigid rotation `omega · axis × (x − center)`.
    SolidRotation {
        center: [f64; 3],
        axis: [f64; 3],
        omega: f64,
    },
}

impl Default for Wind {
    fn default() -> Self {
        Wind::Constant([0.0; 3])
    }
}

impl Wind {
    pub fn velocity(&self, p: Vec3) -> Vec3 {
        match self {
            Wind::Constant(v) => Vec3::from_array(*v),
            Wind::SolidRotation {
                center,
                axis,
                omega,
            } => {
                let axis = Vec3::from_array(*axis)
                    .try_normalize()
                    .unwrap_or(Vec3::ZERO);
                (axis * *omega).cross(p - Vec3::from_array(*center))
            }
        }
    }
}

fn default_dt() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: [u32; 3],
    pub spacing: [f32; 3],
    #[serde(default)]
    pub origin: [f32; 3],
    pub timesteps: u32,
    /// Simulation time between consecutive timesteps.
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub blobs: Vec<Blob>,
    #[serde(default)]
    pub wind: Wind,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::InvalidMeta(format!(
                "synthetic dims must be ≥ 8 per axis, got {:?}",
                self.dims
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::InvalidMeta(
                "synthetic dataset needs a timestep".into(),
            ));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidMeta("spacing must be positive".into()));
        }
        if let Some(b) = self.blobs.iter().find(|b| !(b.radius > 0.0)) {
            return Err(Error::InvalidMeta(format!(
                "blob radius {} must be positive",
                b.radius
            )));
        }
        Ok(())
    }

    pub fn raw_meta(&self) -> RawMeta {
        RawMeta {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            fields: SYNTH_FIELDS.iter().map(|s| s.to_string()).collect(),
            timesteps: self.timesteps,
        }
    }

    pub fn world_position(&self, x: u32, y: u32, z: u32) -> Vec3 {
        let c = |a: usize, i: u32| self.origin[a] as f64 + self.spacing[a] as f64 * i as f64;
        Vec3::new(c(0, x), c(1, y), c(2, z))
    }

    /// Blob field at world position `p` and timestep `t`.
    pub fn q(&self, p: Vec3, timestep: u32) -> f64 {
        let time = timestep as f64 * self.dt;
        self.blobs
            .iter()
            .map(|b| {
                let c = Vec3::from_array(b.center) + Vec3::from_array(b.drift) * time;
                let d = p - c;
                b.amplitude * (-d.dot(d) / (b.radius * b.radius)).exp()
            })
            .sum()
    }

    /// Samples one timestep in memory, fields in [`SYNTH_FIELDS`] order.
    pub fn grid(&self, timestep: u32) -> TimestepGrid {
        let n: usize = self.dims.iter().map(|&d| d as usize).product();
        let mut fields: Vec<Vec<f32>> = (0..4).map(|_| Vec::with_capacity(n)).collect();
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let p = self.world_position(x, y, z);
                    let v = self.wind.velocity(p);
                    fields[0].push(self.q(p, timestep) as f32);
                    fields[1].push(v.x as f32);
                    fields[2].push(v.y as f32);
                    fields[3].push(v.z as f32);
                }
            }
        }
        TimestepGrid::new(self.dims, fields)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Writes the synthetic dataset in the raw input format.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<RawMeta> {
    spec.validate()?;
    let meta = spec.raw_meta();
    write_raw_meta(out, &meta)?;
    for t in 0..spec.timesteps {
        let grid = spec.grid(t);
        for (name, values) in meta.fields.iter().zip(&grid.fields) {
            write_raw_field(out, t, name, values)?;
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::raw::RawDataset;

    fn spec(blobs: Vec<Blob>, wind: Wind) -> SynthSpec {
        SynthSpec {
            dims: [9, 10, 11],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            timesteps: 2,
            dt: 1.0,
            blobs,
            wind,
        }
    }

    #[test]
    fn no_blobs_means_zero_q() {
        let g = spec(vec![], Wind::default()).grid(1);
        assert!(g.fields[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blob_peaks_at_its_center() {
        let blob = Blob {
            center: [4.0, 5.0, 6.0],
            radius: 2.0,
            amplitude: 1.0,
            drift: [0.0; 3],
        };
        let g = spec(vec![blob], Wind::default()).grid(0);
        assert_eq!(g.value(0, 4, 5, 6), 1.0);
        assert!(g.value(0, 5, 5, 6) < 1.0);
    }

    #[test]
    fn blob_drifts_with_time() {
        let blob = Blob {
            center: [2.0, 5.0, 5.0],
            radius: 2.0,
            amplitude: 1.0,
            drift: [3.0, 0.0, 0.0],
        };
        let g = spec(vec![blob], Wind::default()).grid(1);
        assert_eq!(g.value(0, 5, 5, 5), 1.0);
    }

    #[test]
    fn constant_wind_everywhere() {
        let s = spec(vec![], Wind::Constant([1.0, 0.0, 0.0]));
        for t in 0..2 {
            let g = s.grid(t);
            assert!(g.fields[1].iter().all(|&v| v == 1.0));
            assert!(g.fields[2].iter().chain(&g.fields[3]).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rotation_is_tangential() {
        let w = Wind::SolidRotation {
            center: [0.0; 3],
            axis: [0.0, 0.0, 2.0],
            omega: 0.5,
        };
        let v = w.velocity(Vec3::new(2.0, 0.0, 0.0));
        assert!((v - Vec3::new(0.0, 1.0, 0.0)).length() < 1e-12);
    }

    #[test]
    fn small_dims_and_bad_radius_are_rejected() {
        let mut s = spec(vec![], Wind::default());
        s.dims = [7, 8, 8];
        assert!(s.validate().is_err());
        let mut s = spec(
            vec![Blob {
                center: [0.0; 3],
                radius: 0.0,
                amplitude: 1.0,
                drift: [0.0; 3],
            }],
            Wind::default(),
        );
        assert!(s.validate().is_err());
        s.blobs.clear();
        assert!(s.validate().is_ok());
    }

    #[test]
    fn generated_files_are_deterministic() {
        let s = spec(
            vec![Blob {
                center: [4.0, 4.0, 4.0],
                radius: 3.0,
                amplitude: 2.0,
                drift: [0.5, 0.0, 0.0],
            }],
            Wind::Constant([0.0, 1.0, 0.0]),
        );
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(&s, a.path()).unwrap();
        synth_generate(&s, b.path()).unwrap();
        let raw = RawDataset::open(a.path()).unwrap();
        assert_eq!(raw.load_timestep(1).unwrap(), s.grid(1));
        for name in ["t0_q.raw", "t1_w.raw", "meta.json"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
    }
}
