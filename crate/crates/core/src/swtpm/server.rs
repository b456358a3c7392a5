// SPDX-License-Identifier: Apache-2.0

//! Mock backend server: one control listener and, once negotiated, one data
//! listener per vTPM instance. Each listener services a single connection at
//! a time.

use std::fs;
use std::io::{self, Read, Write};
use std::net::Shutdown;
use std::os::unix::io::AsRawFd;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};

use thiserror::Error;

use super::*;
use crate::mock_tpm::MockTpmState;
use crate::wire::{FrameHeader, TPM_HEADER_LEN};

const SERVER_STACK: usize = 128 * 1024;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {path}: {source}")]
    BindFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot spawn server thread: {0}")]
    Spawn(#[source] io::Error),
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub ctrl_path: PathBuf,
    /// Written on `CTRL_SHUTDOWN`.
    pub state_file: Option<PathBuf>,
}

impl ServerConfig {
    pub fn new(ctrl_path: impl Into<PathBuf>) -> Self {
        ServerConfig {
            ctrl_path: ctrl_path.into(),
            state_file: None,
        }
    }

    pub fn with_state_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.state_file = Some(path.into());
        self
    }
}

struct DataChannelState {
    path: PathBuf,
    thread: Option<JoinHandle<()>>,
}

struct Shared {
    tpm: MockTpmState,
    initialized: bool,
    data: Option<DataChannelState>,
}

struct Inner {
    config: ServerConfig,
    shared: Mutex<Shared>,
    stopping: AtomicBool,
    stop_requested: AtomicBool,
    terminated: AtomicBool,
    active_ctrl: Mutex<Option<UnixStream>>,
    active_data: Mutex<Option<UnixStream>>,
    /// Becomes readable once the server stops; interrupts blocked accepts.
    wake_rx: UnixStream,
    wake_tx: UnixStream,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Running server. Dropping the handle stops the server without persisting.
pub struct ServerHandle {
    inner: Arc<Inner>,
    ctrl_thread: Option<JoinHandle<()>>,
}

/// Binds `config.ctrl_path` and starts answering control frames.
pub fn serve(tpm: MockTpmState, config: ServerConfig) -> Result<ServerHandle, ServeError> {
    let listener = UnixListener::bind(&config.ctrl_path).map_err(|source| ServeError::BindFailure {
        path: config.ctrl_path.clone(),
        source,
    })?;
    let (wake_rx, wake_tx) = UnixStream::pair().map_err(ServeError::Spawn)?;
    let inner = Arc::new(Inner {
        config,
        shared: Mutex::new(Shared {
            tpm,
            initialized: false,
            data: None,
        }),
        stopping: AtomicBool::new(false),
        stop_requested: AtomicBool::new(false),
        terminated: AtomicBool::new(false),
        active_ctrl: Mutex::new(None),
        active_data: Mutex::new(None),
        wake_rx,
        wake_tx,
    });
    let worker = inner.clone();
    let ctrl_thread = thread::Builder::new()
        .name("vtpm-ctrl".into())
        .stack_size(SERVER_STACK)
        .spawn(move || {
            ctrl_loop(&worker, listener);
            worker.teardown();
        })
        .map_err(|e| {
            let _ = fs::remove_file(&inner.config.ctrl_path);
            ServeError::Spawn(e)
        })?;
    Ok(ServerHandle {
        inner,
        ctrl_thread: Some(ctrl_thread),
    })
}

impl ServerHandle {
    pub fn ctrl_path(&self) -> &Path {
        &self.inner.config.ctrl_path
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        lock(&self.inner.shared).data.as_ref().map(|d| d.path.clone())
    }

    pub fn is_running(&self) -> bool {
        !self.inner.terminated.load(Ordering::Acquire)
    }

    /// Copy of the responder state, for inspection.
    pub fn tpm_snapshot(&self) -> MockTpmState {
        lock(&self.inner.shared).tpm.clone()
    }

    /// Stops both channels and waits for the server threads. Idempotent.
    pub fn stop(&mut self) {
        self.inner.request_stop();
        self.join();
    }

    /// Waits for the server to terminate, e.g. after `CTRL_SHUTDOWN`.
    pub fn join(&mut self) {
        if let Some(t) = self.ctrl_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

impl Inner {
    fn request_stop(&self) {
        if self.stop_requested.swap(true, Ordering::AcqRel) {
            return;
        }
        self.stopping.store(true, Ordering::Release);
        if let Some(s) = lock(&self.active_ctrl).as_ref() {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.wake();
    }

    fn teardown(&self) {
        self.stopping.store(true, Ordering::Release);
        let data = lock(&self.shared).data.take();
        if let Some(mut data) = data {
            if let Some(s) = lock(&self.active_data).as_ref() {
                let _ = s.shutdown(Shutdown::Both);
            }
            self.wake();
            if let Some(t) = data.thread.take() {
                let _ = t.join();
            }
            let _ = fs::remove_file(&data.path);
        }
        let _ = fs::remove_file(&self.config.ctrl_path);
        self.terminated.store(true, Ordering::Release);
    }

    fn wake(&self) {
        let _ = self.wake_tx.shutdown(Shutdown::Write);
    }

    /// Blocks until a client connects or the server stops.
    fn accept(&self, listener: &UnixListener) -> Option<UnixStream> {
        let mut fds = [
            libc::pollfd {
                fd: listener.as_raw_fd(),
                events: libc::POLLIN,
                revents: 0,
            },
            libc::pollfd {
                fd: self.wake_rx.as_raw_fd(),
                events: libc::POLLIN,
                revents: 0,
            },
        ];
        loop {
            if self.stopping() {
                return None;
            }
            // SAFETY: `fds` is a valid array of two pollfd structs.
            let n = unsafe { libc::poll(fds.as_mut_ptr(), 2, -1) };
            if n < 0 {
                continue;
            }
            if fds[1].revents != 0 || self.stopping() {
                return None;
            }
            if fds[0].revents != 0 {
                if let Ok((stream, _)) = listener.accept() {
                    return Some(stream);
                }
            }
        }
    }

    fn stopping(&self) -> bool {
        self.stopping.load(Ordering::Acquire)
    }
}

enum Next {
    Continue,
    Close,
    Terminate,
}

fn ctrl_loop(inner: &Arc<Inner>, listener: UnixListener) {
    loop {
        let Some(mut stream) = inner.accept(&listener) else {
            return;
        };
        if let Ok(clone) = stream.try_clone() {
            *lock(&inner.active_ctrl) = Some(clone);
        }
        // request_stop may have run between accept and registration.
        if inner.stopping() {
            return;
        }
        let terminate = serve_ctrl_connection(inner, &mut stream);
        *lock(&inner.active_ctrl) = None;
        if terminate {
            drop(listener);
            inner.teardown();
            return;
        }
        if inner.stopping() {
            return;
        }
    }
}

/// Returns true when the server should terminate.
fn serve_ctrl_connection(inner: &Arc<Inner>, stream: &mut UnixStream) -> bool {
    loop {
        let frame = match CtrlFrame::read_from(stream) {
            Ok(Some(f)) => f,
            Ok(None) => return false,
            Err(FrameReadError::PayloadTooLarge(_)) => {
                let _ = CtrlFrame::new(RESULT_PROTOCOL_VIOLATION, Vec::new()).write_to(stream);
                return false;
            }
            Err(FrameReadError::Io(_)) => return false,
        };
        let (resp, next) = handle_ctrl(inner, &frame);
        if resp.write_to(stream).is_err() {
            return matches!(next, Next::Terminate);
        }
        match next {
            Next::Continue => {}
            Next::Close => return false,
            Next::Terminate => {
                // Cleanup waits for the client to hang up, so it does not
                // compete with the client right after the reply.
                let mut sink = [0u8; 256];
                while matches!(stream.read(&mut sink), Ok(n) if n > 0) {}
                return true;
            }
        }
    }
}

fn handle_ctrl(inner: &Arc<Inner>, frame: &CtrlFrame) -> (CtrlResponse, Next) {
    let ok = |payload: Vec<u8>| (CtrlFrame::new(RESULT_OK, payload), Next::Continue);
    let fail = |result| (CtrlFrame::new(result, Vec::new()), Next::Continue);
    let violation = || {
        (
            CtrlFrame::new(RESULT_PROTOCOL_VIOLATION, Vec::new()),
            Next::Close,
        )
    };

    match frame.code {
        CTRL_INIT => {
            let flags = match frame.payload.len() {
                0 => 0,
                4 => u32::from_be_bytes(frame.payload[..].try_into().unwrap()),
                _ => return violation(),
            };
            let mut shared = lock(&inner.shared);
            if flags & INIT_FLAG_PRESERVE_STATE != 0 {
                shared.tpm.power_cycle_preserving();
            } else {
                shared.tpm.reset();
            }
            shared.initialized = true;
            ok(Vec::new())
        }
        CTRL_SET_DATA_CHANNEL => {
            if !lock(&inner.shared).initialized {
                return fail(RESULT_NOT_INITIALIZED);
            }
            if frame.payload.len() > MAX_DATA_PATH {
                return fail(RESULT_PATH_TOO_LONG);
            }
            let Ok(path) = std::str::from_utf8(&frame.payload) else {
                return violation();
            };
            if path.is_empty() {
                return violation();
            }
            match open_data_channel(inner, PathBuf::from(path)) {
                Ok(()) => ok(Vec::new()),
                Err(result) => fail(result),
            }
        }
        CTRL_GET_CAPABILITY => ok(CAPABILITIES.to_be_bytes().to_vec()),
        CTRL_CANCEL => ok(Vec::new()),
        CTRL_SHUTDOWN => {
            let shared = lock(&inner.shared);
            if let Some(path) = &inner.config.state_file {
                if shared.tpm.save(path).is_err() {
                    log_warn(&format!("failed to persist state to {}", path.display()));
                }
            }
            drop(shared);
            // The data channel is closed before the reply; socket cleanup
            // follows it.
            inner.stopping.store(true, Ordering::Release);
            if let Some(s) = lock(&inner.active_data).as_ref() {
                let _ = s.shutdown(Shutdown::Both);
            }
            (CtrlFrame::new(RESULT_OK, Vec::new()), Next::Terminate)
        }
        _ => violation(),
    }
}

fn log_warn(msg: &str) {
    eprintln!("vtpm server: {msg}");
}

fn open_data_channel(inner: &Arc<Inner>, path: PathBuf) -> Result<(), u32> {
    let mut shared = lock(&inner.shared);
    if shared.data.is_some() {
        return Err(RESULT_BUSY);
    }
    let listener = UnixListener::bind(&path).map_err(|_| RESULT_BIND_FAILED)?;
    let worker = inner.clone();
    let thread = thread::Builder::new()
        .name("vtpm-data".into())
        .stack_size(SERVER_STACK)
        .spawn(move || data_loop(&worker, listener))
        .map_err(|_| {
            let _ = fs::remove_file(&path);
            RESULT_BIND_FAILED
        })?;
    shared.data = Some(DataChannelState {
        path,
        thread: Some(thread),
    });
    Ok(())
}

fn data_loop(inner: &Arc<Inner>, listener: UnixListener) {
    while let Some(mut stream) = inner.accept(&listener) {
        if let Ok(clone) = stream.try_clone() {
            *lock(&inner.active_data) = Some(clone);
        }
        if inner.stopping() {
            return;
        }
        serve_data_connection(inner, &mut stream);
        *lock(&inner.active_data) = None;
    }
}

fn serve_data_connection(inner: &Arc<Inner>, stream: &mut UnixStream) {
    let mut frame = Vec::with_capacity(crate::wire::MAX_TPM_FRAME);
    loop {
        let mut header = [0u8; TPM_HEADER_LEN];
        match read_exact_or_eof(stream, &mut header) {
            Ok(true) => {}
            _ => return,
        }
        // Unframeable input leaves no way to resynchronize.
        let Ok(h) = FrameHeader::parse(&header) else {
            return;
        };
        frame.clear();
        frame.extend_from_slice(&header);
        frame.resize(h.size as usize, 0);
        if stream.read_exact(&mut frame[TPM_HEADER_LEN..]).is_err() {
            return;
        }
        let resp = lock(&inner.shared).tpm.execute_frame(&frame);
        if stream.write_all(&resp).is_err() {
            return;
        }
    }
}
