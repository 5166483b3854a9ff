//! One client session: frame handling, extraction workers and the serializer
//! that owns the outbound stream.

use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use log::{debug, warn};
use parking_lot::RwLock;

use super::queue::{DeltaOutcome, WorkQueue};
use super::{Backend, SessionConfig};
use crate::extract::extract_node;
use crate::model::{ResultMesh, SpecSet, WorkKey};
use crate::protocol::{error_code, Frame, Stats, PROTOCOL_VERSION};

/// Writes one frame to the client.
pub type FrameSink = Box<dyn FnMut(&Frame) -> io::Result<()> + Send>;

/// Whether the transport should keep reading after a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Close,
}

enum WorkResult {
    Meshes(Vec<ResultMesh>),
    Failed(String),
    /// Superseded before extraction started.
    Skipped,
}

enum Outbound {
    Control(Frame),
    AbortAck(u32),
    Done { key: WorkKey, result: WorkResult },
    Close,
}

/// Counters a finished session reports, mostly for tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionReport {
    pub results_sent: u64,
    pub results_suppressed: u64,
    pub errors_sent: u64,
}

pub struct Session {
    backend: Arc<Backend>,
    queue: Arc<WorkQueue>,
    specs: Arc<RwLock<Arc<SpecSet>>>,
    tx: Sender<Outbound>,
    peer_gone: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
    serializer: Option<JoinHandle<SessionReport>>,
}

impl Session {
    pub fn start(backend: Arc<Backend>, sink: FrameSink) -> Self {
        let queue = Arc::new(WorkQueue::new());
        let specs = Arc::new(RwLock::new(Arc::new(SpecSet::default())));
        let (tx, rx) = mpsc::channel();
        let peer_gone = Arc::new(AtomicBool::new(false));
        let config = backend.config;
        let workers = (0..config.workers.max(1))
            .map(|i| {
                let (backend, queue, specs, tx) =
                    (backend.clone(), queue.clone(), specs.clone(), tx.clone());
                thread::Builder::new()
                    .name(format!("worker-{i}"))
                    .spawn(move || worker_loop(&backend, &queue, &specs, &tx))
                    .expect("spawn worker thread")
            })
            .collect();
        let serializer = {
            let (backend, queue, gone) = (backend.clone(), queue.clone(), peer_gone.clone());
            thread::Builder::new()
                .name("serializer".into())
                .spawn(move || serialize(&backend, &queue, config, rx, sink, &gone))
                .expect("spawn serializer thread")
        };
        Self {
            backend,
            queue,
            specs,
            tx,
            peer_gone,
            workers,
            serializer: Some(serializer),
        }
    }

    fn send(&self, frame: Frame) {
        let _ = self.tx.send(Outbound::Control(frame));
    }

    /// Reports a malformed stream to the client before the transport closes.
    pub fn protocol_error(&self, message: impl Into<String>) -> Flow {
        self.send(Frame::error(error_code::PROTOCOL, message));
        Flow::Close
    }

    /// Applies one client frame.
    pub fn handle(&self, frame: Frame) -> Flow {
        let meta = self.backend.store.meta();
        match frame {
            Frame::Hello { proto } => {
                if proto != PROTOCOL_VERSION {
                    self.send(Frame::error(
                        error_code::UNSUPPORTED_VERSION,
                        format!("protocol {proto} not supported, server speaks {PROTOCOL_VERSION}"),
                    ));
                    return Flow::Close;
                }
                self.send(Frame::DatasetInfo(meta.clone()));
            }
            Frame::Open { dataset } => {
                if dataset != self.backend.store.id() {
                    self.send(Frame::error(
                        error_code::UNKNOWN_DATASET,
                        format!(
                            "unknown dataset `{dataset}`, serving `{}`",
                            self.backend.store.id()
                        ),
                    ));
                }
            }
            Frame::SetSpec(wire) => {
                let current = self.queue.version();
                if wire.version <= current {
                    return self.protocol_error(format!(
                        "spec version {} does not increase past {current}",
                        wire.version
                    ));
                }
                let specs = match wire.to_spec_set(meta) {
                    Ok(s) => s,
                    Err(e) => {
                        self.send(Frame::error(error_code::INVALID_SPEC, e.to_string()));
                        return Flow::Continue;
                    }
                };
                // The acknowledgement goes out before any work of the new version
                // can be popped, so every new-version result follows it.
                *self.specs.write() = Arc::new(specs);
                let _ = self.tx.send(Outbound::AbortAck(wire.version));
                let dropped = self.queue.abort_all(wire.version);
                debug!(
                    "spec v{}: dropped {:?} pending items",
                    wire.version, dropped
                );
            }
            Frame::CutDelta {
                version,
                timestep,
                delta,
            } => {
                if timestep >= meta.timesteps {
                    return self.protocol_error(format!("timestep {timestep} out of range"));
                }
                let nodes = delta
                    .added
                    .iter()
                    .map(|(n, _)| n)
                    .chain(&delta.removed)
                    .chain(delta.reprioritized.iter().map(|(n, _)| n));
                for node in nodes {
                    if !meta.contains(*node) {
                        return self.protocol_error(format!("cut delta names invalid node {node}"));
                    }
                }
                match self.queue.apply_delta(version, timestep, &delta) {
                    DeltaOutcome::Applied => {}
                    DeltaOutcome::Stale => debug!("ignored stale cut delta v{version}"),
                    DeltaOutcome::Ahead => {
                        return self.protocol_error(format!(
                            "cut delta version {version} is ahead of spec version {}",
                            self.queue.version()
                        ))
                    }
                }
            }
            other => {
                return self.protocol_error(format!(
                    "unexpected frame type {:#04x} from client",
                    other.type_byte()
                ));
            }
        }
        Flow::Continue
    }

    /// Stops the workers and the serializer. With `peer_gone`, nothing more is
    /// written; otherwise frames already queued (such as a final error) go out.
    pub fn finish(mut self, peer_gone: bool) -> SessionReport {
        self.peer_gone.store(peer_gone, Ordering::SeqCst);
        self.queue.shutdown();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        let _ = self.tx.send(Outbound::Close);
        self.serializer
            .take()
            .and_then(|s| s.join().ok())
            .unwrap_or_default()
    }

    pub fn queue(&self) -> &WorkQueue {
        &self.queue
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.queue.shutdown();
        let _ = self.tx.send(Outbound::Close);
    }
}

fn worker_loop(
    backend: &Backend,
    queue: &WorkQueue,
    specs: &RwLock<Arc<SpecSet>>,
    tx: &Sender<Outbound>,
) {
    let store = &backend.store;
    while let Some(item) = queue.pop() {
        if !backend.config.work_delay.is_zero() {
            thread::sleep(backend.config.work_delay);
        }
        let key = item.key;
        let specs = specs.read().clone();
        let result = if specs.version != key.spec_version || !queue.is_wanted(key) {
            WorkResult::Skipped
        } else {
            let block = backend.cache.get_or_load((key.timestep, key.node), || {
                store.read_block(key.timestep, key.node)
            });
            match block.and_then(|b| extract_node(&b, &specs, store.meta())) {
                Ok(meshes) => WorkResult::Meshes(meshes),
                Err(e) => {
                    warn!("extraction failed for {key}: {e}");
                    WorkResult::Failed(e.to_string())
                }
            }
        };
        if tx.send(Outbound::Done { key, result }).is_err() {
            break;
        }
    }
}

fn serialize(
    backend: &Backend,
    queue: &WorkQueue,
    config: SessionConfig,
    rx: Receiver<Outbound>,
    mut sink: FrameSink,
    peer_gone: &AtomicBool,
) -> SessionReport {
    let mut report = SessionReport::default();
    let mut version = 0u32;
    let mut broken = false;
    let mut last_stats = None;
    let mut last_emit = Instant::now();

    let mut write = |frame: &Frame, broken: &mut bool| {
        if *broken || peer_gone.load(Ordering::SeqCst) {
            return false;
        }
        if let Err(e) = sink(frame) {
            debug!("session write failed: {e}");
            *broken = true;
            queue.shutdown();
            return false;
        }
        true
    };

    loop {
        let msg = match rx.recv_timeout(config.stats_interval) {
            Ok(m) => Some(m),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        match msg {
            Some(Outbound::Close) => break,
            Some(Outbound::Control(frame)) => {
                if matches!(frame, Frame::Error { .. }) {
                    report.errors_sent += 1;
                }
                write(&frame, &mut broken);
            }
            Some(Outbound::AbortAck(v)) => {
                version = version.max(v);
                write(&Frame::AbortAck { version: v }, &mut broken);
            }
            Some(Outbound::Done { key, result }) => {
                let wanted = queue.finish(key) && key.spec_version >= version;
                match result {
                    WorkResult::Meshes(meshes) if wanted => {
                        for mesh in meshes {
                            write(&Frame::ResultMesh(mesh), &mut broken);
                        }
                        write(&Frame::NodeDone(key), &mut broken);
                        report.results_sent += 1;
                    }
                    WorkResult::Failed(message) if wanted => {
                        write(
                            &Frame::error(error_code::EXTRACTION, format!("{key}: {message}")),
                            &mut broken,
                        );
                        report.errors_sent += 1;
                    }
                    _ => report.results_suppressed += 1,
                }
            }
            None => {}
        }
        if last_emit.elapsed() >= config.stats_interval {
            last_emit = Instant::now();
            let q = queue.stats();
            let stats = Stats {
                pending: q.pending,
                running: q.running,
                cache_hits: backend.cache.hits(),
                cache_misses: backend.cache.misses(),
            };
            if last_stats != Some(stats) {
                last_stats = Some(stats);
                write(&Frame::Stats(stats), &mut broken);
            }
        }
    }
    report
}
