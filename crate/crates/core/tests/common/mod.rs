//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use lodstream_core::backend::{serve, Server, ServerConfig, SessionConfig};
use lodstream_core::client::{Connection, Received};
use lodstream_core::model::{DatasetMeta, Limit, NodeId, SubVolumeSpec};
use lodstream_core::preprocess::synth::{Blob, SynthSpec, Wind};
use lodstream_core::preprocess::{build_store, OctreeStore};
use lodstream_core::protocol::{Frame, WireLimit, WireSpecSet, WireSubVolume, PROTOCOL_VERSION};

/// One blob in the middle of a `dims` grid with unit spacing.
pub fn blob_spec(dims: [u32; 3], timesteps: u32) -> SynthSpec {
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let r = dims.iter().copied().min().unwrap() as f64 / 3.0;
    SynthSpec {
        dims,
        spacing: [1.0; 3],
        origin: [0.0; 3],
        timesteps,
        dt: 1.0,
        blobs: vec![Blob {
            center: c,
            radius: r,
            amplitude: 1.0,
            drift: [0.5, 0.0, 0.0],
        }],
        wind: Wind::Constant([0.5, 0.0, 0.0]),
    }
}

pub fn synth_store(dir: &Path, spec: &SynthSpec, block_size: u32) -> Arc<OctreeStore> {
    let raw = spec.raw_meta();
    let meta = DatasetMeta::new(
        raw.dims,
        raw.spacing,
        raw.origin,
        block_size,
        raw.fields,
        raw.timesteps,
    )
    .unwrap();
    Arc::new(build_store(&meta, "synth", dir, |t| Ok(spec.grid(t))).unwrap())
}

/// 32³ blob dataset split into 8³ blocks: three levels, 73 nodes.
pub fn small_store(dir: &Path) -> Arc<OctreeStore> {
    synth_store(dir, &blob_spec([32; 3], 2), 8)
}

pub fn q_band(id: u8, lower: f32) -> SubVolumeSpec {
    SubVolumeSpec::new(id, vec![Limit::new("q", lower, 10.0)])
}

/// `SET_SPEC` for a single `q ≥ lower` sub-volume; `q` is field 0.
pub fn set_spec(version: u32, lower: f32) -> Frame {
    Frame::SetSpec(WireSpecSet {
        version,
        subvolumes: vec![WireSubVolume {
            id: 1,
            limits: vec![WireLimit {
                field: 0,
                lower,
                upper: 10.0,
            }],
        }],
    })
}

pub fn start(store: Arc<OctreeStore>, workers: usize, delay_ms: u64, cache_bytes: usize) -> Server {
    let session = SessionConfig {
        workers,
        work_delay: Duration::from_millis(delay_ms),
        stats_interval: Duration::from_millis(50),
    };
    let mut cfg = ServerConfig::local(session);
    cfg.cache_bytes = cache_bytes;
    cfg.ws_listen = Some("127.0.0.1:0".parse().unwrap());
    serve(store, cfg).unwrap()
}

/// Connects and completes HELLO / OPEN.
pub fn handshake(server: &Server) -> (Connection, DatasetMeta) {
    let mut c = Connection::connect(server.local_addr()).unwrap();
    c.send(&Frame::Hello {
        proto: PROTOCOL_VERSION,
    })
    .unwrap();
    let meta = match c.recv_non_stats(Duration::from_secs(5)) {
        Received::Frame(Frame::DatasetInfo(m)) => m,
        other => panic!("expected DATASET_INFO, got {other:?}"),
    };
    c.send(&Frame::Open {
        dataset: "synth".into(),
    })
    .unwrap();
    (c, meta)
}

/// Collects non-STATS frames until `stop` returns true or the timeout passes.
pub fn collect_until(
    c: &Connection,
    timeout: Duration,
    mut stop: impl FnMut(&Frame) -> bool,
) -> Vec<Frame> {
    let deadline = Instant::now() + timeout;
    let mut out = Vec::new();
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match c.recv_non_stats(left) {
            Received::Frame(f) => {
                let done = stop(&f);
                out.push(f);
                if done {
                    return out;
                }
            }
            Received::Timeout => return out,
            Received::Closed(_) => return out,
        }
    }
}

pub fn leaves(meta: &DatasetMeta) -> Vec<NodeId> {
    meta.level_nodes(0).collect()
}
