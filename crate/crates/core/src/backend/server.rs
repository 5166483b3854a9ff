//! Listeners: raw framed TCP and WebSocket (one frame per binary message).

use std::io::{self, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use parking_lot::Mutex;
use tungstenite::Message;

use super::session::{Flow, Session};
use super::{Backend, SessionConfig};
use crate::error::Result;
use crate::preprocess::OctreeStore;
use crate::protocol::{read_frame, Frame, ProtocolError};

const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub ws_listen: Option<SocketAddr>,
    pub cache_bytes: usize,
    pub session: SessionConfig,
}

impl ServerConfig {
    pub fn local(session: SessionConfig) -> Self {
        Self {
            listen: "127.0.0.1:0".parse().expect("valid address"),
            ws_listen: None,
            cache_bytes: 256 << 20,
            session,
        }
    }
}

/// A running server. Dropping it stops accepting and closes live sessions.
pub struct Server {
    backend: Arc<Backend>,
    tcp_addr: SocketAddr,
    ws_addr: Option<SocketAddr>,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    pub fn backend(&self) -> &Arc<Backend> {
        &self.backend
    }

    /// Blocks until the listeners exit (they only do on shutdown).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(self) {}
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for c in self.connections.lock().drain(..) {
            let _ = c.shutdown(std::net::Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

pub fn serve(store: Arc<OctreeStore>, config: ServerConfig) -> Result<Server> {
    let backend = Backend::new(store, config.cache_bytes, config.session);
    let stop = Arc::new(AtomicBool::new(false));
    let connections = Arc::new(Mutex::new(Vec::new()));

    let tcp = TcpListener::bind(config.listen)?;
    let tcp_addr = tcp.local_addr()?;
    info!("serving `{}` on tcp://{tcp_addr}", backend.store.id());
    let mut threads = vec![spawn_acceptor(
        tcp,
        backend.clone(),
        stop.clone(),
        connections.clone(),
        false,
    )?];

    let ws_addr = match config.ws_listen {
        Some(addr) => {
            let ws = TcpListener::bind(addr)?;
            let ws_addr = ws.local_addr()?;
            info!("serving `{}` on ws://{ws_addr}", backend.store.id());
            threads.push(spawn_acceptor(
                ws,
                backend.clone(),
                stop.clone(),
                connections.clone(),
                true,
            )?);
            Some(ws_addr)
        }
        None => None,
    };

    Ok(Server {
        backend,
        tcp_addr,
        ws_addr,
        stop,
        connections,
        threads,
    })
}

fn spawn_acceptor(
    listener: TcpListener,
    backend: Arc<Backend>,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    websocket: bool,
) -> io::Result<JoinHandle<()>> {
    listener.set_nonblocking(true)?;
    thread::Builder::new()
        .name("acceptor".into())
        .spawn(move || {
            let mut sessions: Vec<JoinHandle<()>> = Vec::new();
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        debug!("connection from {peer}");
                        if let Err(e) = stream.set_nonblocking(false) {
                            warn!("dropping {peer}: {e}");
                            continue;
                        }
                        let _ = stream.set_nodelay(true);
                        if let Ok(clone) = stream.try_clone() {
                            connections.lock().push(clone);
                        }
                        let (backend, stop) = (backend.clone(), stop.clone());
                        sessions.retain(|s| !s.is_finished());
                        sessions.push(thread::spawn(move || {
                            let result = if websocket {
                                run_websocket(stream, backend, &stop)
                            } else {
                                run_tcp(stream, backend)
                            };
                            if let Err(e) = result {
                                debug!("session with {peer} ended: {e}");
                            }
                        }));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => {
                        warn!("accept failed: {e}");
                        thread::sleep(POLL);
                    }
                }
            }
            for s in sessions {
                let _ = s.join();
            }
        })
}

fn run_tcp(stream: TcpStream, backend: Arc<Backend>) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let session = Session::start(
        backend,
        Box::new(move |frame| {
            let bytes = frame.encode().map_err(io::Error::other)?;
            writer.write_all(&bytes)
        }),
    );
    let mut reader = BufReader::new(stream);
    let peer_gone = loop {
        match read_frame(&mut reader) {
            Ok(Some(frame)) => {
                if session.handle(frame) == Flow::Close {
                    break false;
                }
            }
            Ok(None) => break true,
            Err(ProtocolError::Io(e)) => {
                debug!("read failed: {e}");
                break true;
            }
            Err(e) => {
                session.protocol_error(e.to_string());
                break false;
            }
        }
    };
    let report = session.finish(peer_gone);
    debug!("tcp session closed: {report:?}");
    let _ = reader.get_ref().shutdown(std::net::Shutdown::Both);
    Ok(())
}

fn run_websocket(stream: TcpStream, backend: Arc<Backend>, stop: &AtomicBool) -> io::Result<()> {
    let mut ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let session = Session::start(
        backend,
        Box::new(move |frame| {
            let bytes = frame.encode().map_err(io::Error::other)?;
            tx.send(bytes)
                .map_err(|_| io::Error::from(ErrorKind::BrokenPipe))
        }),
    );

    let flush = |ws: &mut tungstenite::WebSocket<TcpStream>| -> bool {
        let mut wrote = false;
        while let Ok(bytes) = rx.try_recv() {
            if ws.write(Message::Binary(bytes)).is_err() {
                return false;
            }
            wrote = true;
        }
        !wrote || ws.flush().is_ok()
    };

    let peer_gone = loop {
        if stop.load(Ordering::SeqCst) || !flush(&mut ws) {
            break true;
        }
        match ws.read() {
            Ok(Message::Binary(bytes)) => {
                let flow = match Frame::from_bytes(&bytes) {
                    Ok(frame) => session.handle(frame),
                    Err(e) => session.protocol_error(e.to_string()),
                };
                if flow == Flow::Close {
                    break false;
                }
            }
            Ok(Message::Close(_)) => break true,
            Ok(Message::Text(_)) => {
                session.protocol_error("text messages are not part of the protocol");
                break false;
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                debug!("websocket read failed: {e}");
                break true;
            }
        }
    };
    let report = session.finish(peer_gone);
    if !peer_gone {
        flush(&mut ws);
        let _ = ws.close(None);
        let _ = ws.flush();
    }
    debug!("websocket session closed: {report:?}");
    Ok(())
}
