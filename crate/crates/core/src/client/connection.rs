//! Blocking TCP client for the framed protocol.

use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::protocol::{read_frame, Frame, ProtocolError};

/// Incoming frames are read on a background thread and queued, so callers can
/// wait with a timeout.
pub struct Connection {
    stream: TcpStream,
    incoming: Receiver<std::result::Result<Frame, ProtocolError>>,
    reader: Option<JoinHandle<()>>,
    bytes_sent: u64,
    bytes_received: Arc<AtomicU64>,
}

/// Outcome of waiting for a frame.
#[derive(Debug)]
pub enum Received {
    Frame(Frame),
    Timeout,
    /// The server closed the stream or it failed.
    Closed(Option<ProtocolError>),
}

impl Connection {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let (tx, incoming) = mpsc::channel();
        let counter = Arc::new(AtomicU64::new(0));
        let bytes = counter.clone();
        let reader = thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(Some(frame)) => {
                    let len = frame.encode().map_or(0, |b| b.len() as u64);
                    bytes.fetch_add(len, Ordering::Relaxed);
                    if tx.send(Ok(frame)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        });
        Ok(Self {
            stream,
            incoming,
            reader: Some(reader),
            bytes_sent: 0,
            bytes_received: counter,
        })
    }

    pub fn send(&mut self, frame: &Frame) -> Result<()> {
        let bytes = frame.encode()?;
        self.stream.write_all(&bytes)?;
        self.bytes_sent += bytes.len() as u64;
        Ok(())
    }

    /// Sends pre-encoded bytes as they are, for malformed-input tests.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes)?;
        Ok(())
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Received {
        match self.incoming.recv_timeout(timeout) {
            Ok(Ok(frame)) => Received::Frame(frame),
            Ok(Err(e)) => Received::Closed(Some(e)),
            Err(RecvTimeoutError::Timeout) => Received::Timeout,
            Err(RecvTimeoutError::Disconnected) => Received::Closed(None),
        }
    }

    /// Waits for the next frame that is not `STATS`.
    pub fn recv_non_stats(&self, timeout: Duration) -> Received {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.recv_timeout(left) {
                Received::Frame(Frame::Stats(_)) => continue,
                other => return other,
            }
        }
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received.load(Ordering::Relaxed)
    }

    /// Half-closes the write side; the server sees a clean end of stream.
    pub fn close(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Write);
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}
