//! Headless exploration: drives a cut along a scripted camera path against a
//! live backend and reports what arrived and when.

use std::collections::HashMap;
use std::net::ToSocketAddrs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::connection::{Connection, Received};
use super::cut::{Applied, Cut, RenderState, DEFAULT_THETA};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::model::{node_bbox, CameraState, NodeId, SubVolumeSpec};
use crate::protocol::{Frame, WireSpecSet, PROTOCOL_VERSION};

pub const REPORT_SCHEMA: u32 = 1;

fn default_theta() -> f64 {
    DEFAULT_THETA
}
fn default_fps() -> f64 {
    10.0
}
fn default_frame_wait_ms() -> u64 {
    20
}
fn default_settle_ms() -> u64 {
    30_000
}
fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}
fn default_fov() -> f64 {
    1.0
}
fn default_aspect() -> f64 {
    16.0 / 9.0
}
fn default_near() -> f64 {
    0.01
}
fn default_far() -> f64 {
    1e7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraKey {
    /// Script time in seconds.
    pub time: f64,
    pub position: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    #[serde(default = "default_fov")]
    pub vertical_fov: f64,
    #[serde(default = "default_aspect")]
    pub aspect: f64,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

impl CameraKey {
    pub fn looking(time: f64, position: Vec3, target: Vec3) -> Self {
        Self {
            time,
            position: position.to_array(),
            target: target.to_array(),
            up: default_up(),
            vertical_fov: default_fov(),
            aspect: default_aspect(),
            near: default_near(),
            far: default_far(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecKey {
    pub time: f64,
    pub subvolumes: Vec<SubVolumeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepKey {
    pub time: f64,
    pub timestep: u32,
}

/// A scripted session. Frames are taken every `1/fps` seconds of script time
/// from 0 to `duration` inclusive; each frame waits up to `frame_wait_ms` of
/// wall time for results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreScript {
    pub dataset: String,
    pub duration: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    pub cameras: Vec<CameraKey>,
    #[serde(default)]
    pub specs: Vec<SpecKey>,
    #[serde(default)]
    pub timesteps: Vec<TimestepKey>,
    #[serde(default = "default_frame_wait_ms")]
    pub frame_wait_ms: u64,
    /// Wall-time limit for reaching an all-fresh cut after the last frame.
    #[serde(default = "default_settle_ms")]
    pub settle_ms: u64,
    /// Where the CLI writes the report unless told otherwise.
    #[serde(default)]
    pub report: Option<std::path::PathBuf>,
}

impl ExploreScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let script: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(format!("explore script: {m}")));
        if self.cameras.is_empty() {
            return bad("needs at least one camera keyframe".into());
        }
        if let Some(w) = self.cameras.windows(2).find(|w| w[1].time <= w[0].time) {
            return bad(format!(
                "camera keyframe times must increase ({} then {})",
                w[0].time, w[1].time
            ));
        }
        if !(self.duration >= 0.0 && self.fps > 0.0 && self.theta > 0.0) {
            return bad("duration must be nonnegative, fps and theta positive".into());
        }
        for c in &self.cameras {
            self.camera_from(c, c)?;
        }
        Ok(())
    }

    fn camera_from(&self, a: &CameraKey, b: &CameraKey) -> Result<CameraState> {
        self.blend(a, b, 0.0)
    }

    fn blend(&self, a: &CameraKey, b: &CameraKey, s: f64) -> Result<CameraState> {
        let pos = Vec3::from_array(a.position).lerp(Vec3::from_array(b.position), s);
        let target = Vec3::from_array(a.target).lerp(Vec3::from_array(b.target), s);
        CameraState::new(
            pos,
            target - pos,
            Vec3::from_array(a.up),
            a.vertical_fov,
            a.aspect,
            a.near,
            a.far,
        )
    }

    /// Camera at script time `t`, interpolating linearly between keyframes.
    pub fn camera_at(&self, t: f64) -> Result<CameraState> {
        let keys = &self.cameras;
        let i = keys.partition_point(|k| k.time <= t);
        if i == 0 {
            return self.camera_from(&keys[0], &keys[0]);
        }
        if i == keys.len() {
            let last = &keys[keys.len() - 1];
            return self.camera_from(last, last);
        }
        let (a, b) = (&keys[i - 1], &keys[i]);
        self.blend(a, b, (t - a.time) / (b.time - a.time))
    }

    pub fn frame_count(&self) -> u32 {
        (self.duration * self.fps + 1e-9).floor() as u32 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: String,
    pub level: u8,
    pub state: String,
    pub triangles: usize,
}

/// Fields that depend only on the script and the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicMetrics {
    pub dataset: String,
    pub frames: u32,
    pub spec_changes: u32,
    pub timestep_changes: u32,
    pub added_per_frame: Vec<u32>,
    pub removed_per_frame: Vec<u32>,
    pub reprioritized_per_frame: Vec<u32>,
    pub abort_acks: u32,
    pub final_version: u32,
    pub final_timestep: u32,
    pub final_cut: Vec<NodeSummary>,
    pub final_fresh: usize,
    pub final_stale: usize,
    pub final_empty: usize,
    pub final_triangles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub node: String,
    pub level: u8,
    pub version: u32,
    pub timestep: u32,
    /// Priority last sent for the node (as on the wire).
    pub priority: f32,
    /// Camera to node-box centre when the node turned fresh.
    pub distance: f64,
    pub latency_ms: f64,
    pub frames_to_fresh: u32,
    pub triangles: usize,
}

/// Wall-clock dependent fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingMetrics {
    pub wall_ms: f64,
    pub settle_ms: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub completions: Vec<Completion>,
    pub median_fresh_distance: Option<f64>,
    pub dropped_frames: u64,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub schema: u32,
    /// Set when the connection failed or the cut did not settle in time.
    pub partial: bool,
    pub deterministic: DeterministicMetrics,
    pub timing: TimingMetrics,
}

struct Run {
    conn: Connection,
    cut: Cut,
    camera: CameraState,
    frame: u32,
    requested: HashMap<(u32, NodeId), (Instant, u32)>,
    completions: Vec<Completion>,
    abort_acks: u32,
    expected_acks: u32,
    errors: Vec<String>,
    closed: bool,
}

impl Run {
    fn handle(&mut self, frame: Frame) {
        match frame {
            Frame::AbortAck { .. } => self.abort_acks += 1,
            Frame::Error { code, message } => self.errors.push(format!("{code}: {message}")),
            Frame::Stats(_) | Frame::DatasetInfo(_) => {}
            other => {
                if let Applied::Completed(node) = self.cut.apply_result(other) {
                    let version = self.cut.version();
                    let (at, frame) = self
                        .requested
                        .remove(&(version, node))
                        .unwrap_or((Instant::now(), self.frame));
                    let bbox = node_bbox(node, self.cut.meta()).expect("cut nodes are valid");
                    let entry = &self.cut.nodes()[&node];
                    self.completions.push(Completion {
                        node: node.to_string(),
                        level: node.level,
                        version,
                        timestep: self.cut.timestep(),
                        priority: entry.priority,
                        distance: (bbox.center() - self.camera.position).length(),
                        latency_ms: at.elapsed().as_secs_f64() * 1e3,
                        frames_to_fresh: self.frame - frame,
                        triangles: entry.triangle_count(),
                    });
                }
            }
        }
    }

    /// Receives until `deadline` or until `done` holds.
    fn pump(&mut self, deadline: Instant, done: impl Fn(&Self) -> bool) {
        while !self.closed && !done(self) {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            match self.conn.recv_timeout(left) {
                Received::Frame(f) => self.handle(f),
                Received::Timeout => break,
                Received::Closed(e) => {
                    if let Some(e) = e {
                        self.errors.push(format!("connection: {e}"));
                    }
                    self.closed = true;
                }
            }
        }
    }

    fn send(&mut self, frame: &Frame) {
        if self.closed {
            return;
        }
        if let Err(e) = self.conn.send(frame) {
            self.errors.push(format!("send failed: {e}"));
            self.closed = true;
        }
    }

    fn send_spec(&mut self) -> Result<()> {
        let wire = WireSpecSet::from_spec_set(self.cut.specs(), self.cut.meta())?;
        self.expected_acks += 1;
        self.send(&Frame::SetSpec(wire));
        Ok(())
    }

    fn settled(&self) -> bool {
        self.abort_acks >= self.expected_acks
            && self
                .cut
                .nodes()
                .values()
                .all(|n| n.state == RenderState::Fresh)
    }
}

/// Runs `script` against the backend at `addr`.
pub fn run_explore(script: &ExploreScript, addr: impl ToSocketAddrs) -> Result<ExploreReport> {
    script.validate()?;
    let started = Instant::now();
    let mut conn = Connection::connect(addr)?;
    conn.send(&Frame::Hello {
        proto: PROTOCOL_VERSION,
    })?;
    let meta = match conn.recv_non_stats(Duration::from_secs(10)) {
        Received::Frame(Frame::DatasetInfo(meta)) => meta,
        Received::Frame(Frame::Error { code, message }) => {
            return Err(Error::InvalidSpec(format!(
                "server refused the session ({code}): {message}"
            )))
        }
        other => {
            return Err(Error::InvalidSpec(format!(
                "expected DATASET_INFO, got {other:?}"
            )));
        }
    };
    conn.send(&Frame::Open {
        dataset: script.dataset.clone(),
    })?;

    let frames = script.frame_count();
    let mut run = Run {
        conn,
        cut: Cut::new(meta, script.theta),
        camera: script.camera_at(0.0)?,
        frame: 0,
        requested: HashMap::new(),
        completions: Vec::new(),
        abort_acks: 0,
        expected_acks: 0,
        errors: Vec::new(),
        closed: false,
    };
    let mut det = DeterministicMetrics {
        dataset: script.dataset.clone(),
        frames,
        spec_changes: 0,
        timestep_changes: 0,
        added_per_frame: Vec::new(),
        removed_per_frame: Vec::new(),
        reprioritized_per_frame: Vec::new(),
        abort_acks: 0,
        final_version: 0,
        final_timestep: 0,
        final_cut: Vec::new(),
        final_fresh: 0,
        final_stale: 0,
        final_empty: 0,
        final_triangles: 0,
    };
    let (mut next_spec, mut next_step) = (0, 0);

    for frame in 0..frames {
        let t = frame as f64 / script.fps;
        run.frame = frame;
        while next_spec < script.specs.len() && script.specs[next_spec].time <= t {
            run.cut
                .set_spec(script.specs[next_spec].subvolumes.clone())?;
            run.send_spec()?;
            det.spec_changes += 1;
            next_spec += 1;
        }
        while next_step < script.timesteps.len() && script.timesteps[next_step].time <= t {
            let ts = script.timesteps[next_step].timestep;
            if ts >= run.cut.meta().timesteps {
                return Err(Error::InvalidSpec(format!(
                    "script timestep {ts} out of range"
                )));
            }
            run.cut.set_timestep(ts);
            run.send_spec()?;
            det.timestep_changes += 1;
            next_step += 1;
        }
        run.camera = script.camera_at(t)?;
        let delta = run.cut.update(&run.camera);
        det.added_per_frame.push(delta.added.len() as u32);
        det.removed_per_frame.push(delta.removed.len() as u32);
        det.reprioritized_per_frame
            .push(delta.reprioritized.len() as u32);
        if !delta.is_empty() {
            let now = Instant::now();
            let version = run.cut.version();
            for (n, _) in &delta.added {
                run.requested.insert((version, *n), (now, frame));
            }
            let frame_msg = Frame::CutDelta {
                version,
                timestep: run.cut.timestep(),
                delta,
            };
            run.send(&frame_msg);
        }
        run.pump(
            Instant::now() + Duration::from_millis(script.frame_wait_ms),
            |_| false,
        );
    }

    let settle_start = Instant::now();
    run.pump(
        settle_start + Duration::from_millis(script.settle_ms),
        Run::settled,
    );
    let settled = run.settled();
    let settle_ms = settle_start.elapsed().as_secs_f64() * 1e3;

    let cut = &run.cut;
    det.abort_acks = run.abort_acks;
    det.final_version = cut.version();
    det.final_timestep = cut.timestep();
    det.final_cut = cut
        .nodes()
        .iter()
        .map(|(n, c)| NodeSummary {
            node: n.to_string(),
            level: n.level,
            state: format!("{:?}", c.state).to_lowercase(),
            triangles: c.triangle_count(),
        })
        .collect();
    det.final_fresh = cut.count(RenderState::Fresh);
    det.final_stale = cut.count(RenderState::Stale);
    det.final_empty = cut.count(RenderState::Empty);
    det.final_triangles = cut.triangle_count();

    let mut distances: Vec<f64> = run.completions.iter().map(|c| c.distance).collect();
    distances.sort_by(f64::total_cmp);
    let median = (!distances.is_empty()).then(|| distances[distances.len() / 2]);
    let timing = TimingMetrics {
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        settle_ms,
        bytes_sent: run.conn.bytes_sent(),
        bytes_received: run.conn.bytes_received(),
        median_fresh_distance: median,
        dropped_frames: cut.dropped_frames(),
        errors: run.errors.clone(),
        completions: std::mem::take(&mut run.completions),
    };
    run.conn.close();
    Ok(ExploreReport {
        schema: REPORT_SCHEMA,
        partial: run.closed || !settled,
        deterministic: det,
        timing,
    })
}

impl ExploreReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
