// SPDX-License-Identifier: Apache-2.0

use std::io::{self, Read, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::*;
use crate::wire::{FrameHeader, MAX_TPM_FRAME, TPM_HEADER_LEN};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

fn map_io(e: io::Error, closed: ProtoError) -> ProtoError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ProtoError::Timeout,
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::NotConnected => closed,
        _ => ProtoError::Io(e),
    }
}

fn connect(path: &Path, timeout: Duration) -> Result<UnixStream, ProtoError> {
    let stream = UnixStream::connect(path).map_err(ProtoError::ConnectFailure)?;
    stream
        .set_read_timeout(Some(timeout))
        .and_then(|_| stream.set_write_timeout(Some(timeout)))
        .map_err(ProtoError::Io)?;
    Ok(stream)
}

/// Exclusive handle on a control connection.
#[derive(Debug)]
pub struct CtrlClient {
    stream: Option<UnixStream>,
    /// Held after `ctrl_shutdown` until the handle is dropped; the server
    /// removes its sockets once it is closed.
    hung_up: Option<UnixStream>,
    timeout: Duration,
}

pub fn connect_ctrl(ctrl_path: impl AsRef<Path>) -> Result<CtrlClient, ProtoError> {
    CtrlClient::connect(ctrl_path.as_ref(), DEFAULT_TIMEOUT)
}

impl CtrlClient {
    pub fn connect(ctrl_path: &Path, timeout: Duration) -> Result<Self, ProtoError> {
        Ok(CtrlClient {
            stream: Some(connect(ctrl_path, timeout)?),
            hung_up: None,
            timeout,
        })
    }

    /// One request/response exchange. Nonzero results become `RemoteError`.
    pub fn request(&mut self, code: u32, payload: &[u8]) -> Result<Vec<u8>, ProtoError> {
        let stream = self.stream.as_mut().ok_or_else(closed_handle)?;
        let lost = || ProtoError::ConnectFailure(io::ErrorKind::NotConnected.into());
        CtrlFrame::new(code, payload.to_vec())
            .write_to(stream)
            .map_err(|e| map_io(e, lost()))?;
        let resp = match CtrlFrame::read_from(stream) {
            Ok(Some(r)) => r,
            Ok(None) => {
                self.stream = None;
                return Err(lost());
            }
            Err(FrameReadError::PayloadTooLarge(n)) => {
                self.stream = None;
                return Err(ProtoError::ProtocolViolation(format!(
                    "response payload of {n} bytes"
                )));
            }
            Err(FrameReadError::Io(e)) => return Err(map_io(e, lost())),
        };
        if resp.code != RESULT_OK {
            if !resp.payload.is_empty() {
                return Err(ProtoError::ProtocolViolation(
                    "error result with payload".into(),
                ));
            }
            if resp.code == RESULT_PROTOCOL_VIOLATION {
                self.stream = None;
            }
            return Err(ProtoError::RemoteError(resp.code));
        }
        Ok(resp.payload)
    }

    /// Resets the TPM and marks it ready.
    pub fn ctrl_init(&mut self) -> Result<(), ProtoError> {
        self.request(CTRL_INIT, &[]).map(drop)
    }

    /// Like `ctrl_init`, but keeps PCR values restored from the state file.
    pub fn ctrl_init_preserving(&mut self) -> Result<(), ProtoError> {
        self.request(CTRL_INIT, &INIT_FLAG_PRESERVE_STATE.to_be_bytes())
            .map(drop)
    }

    pub fn ctrl_get_capability(&mut self) -> Result<u32, ProtoError> {
        let p = self.request(CTRL_GET_CAPABILITY, &[])?;
        let word: [u8; 4] = p
            .as_slice()
            .try_into()
            .map_err(|_| ProtoError::ProtocolViolation("capability word".into()))?;
        Ok(u32::from_be_bytes(word))
    }

    pub fn ctrl_cancel(&mut self) -> Result<(), ProtoError> {
        self.request(CTRL_CANCEL, &[]).map(drop)
    }

    /// Asks the server to bind `data_path`, then connects to it.
    pub fn ctrl_set_data_channel(&mut self, data_path: impl AsRef<Path>) -> Result<DataChannel, ProtoError> {
        let path = data_path.as_ref();
        let bytes = path.as_os_str().as_encoded_bytes();
        self.request(CTRL_SET_DATA_CHANNEL, bytes)?;
        DataChannel::connect(path, self.timeout)
    }

    /// Persists state and terminates the server. Returns once the server has
    /// written its state file and closed the data channel. The sockets are
    /// removed after this handle is dropped; no further requests are
    /// possible.
    pub fn ctrl_shutdown(&mut self) -> Result<(), ProtoError> {
        self.request(CTRL_SHUTDOWN, &[])?;
        self.hung_up = self.stream.take();
        Ok(())
    }

    pub fn is_open(&self) -> bool {
        self.stream.is_some()
    }
}

fn closed_handle() -> ProtoError {
    ProtoError::ConnectFailure(io::Error::new(
        io::ErrorKind::NotConnected,
        "control channel already shut down",
    ))
}

/// Exclusive handle on the data channel. `transact` blocks until the full
/// response frame arrives.
#[derive(Debug)]
pub struct DataChannel {
    stream: UnixStream,
    path: PathBuf,
    buf: Vec<u8>,
}

impl DataChannel {
    pub fn connect(path: &Path, timeout: Duration) -> Result<Self, ProtoError> {
        Ok(DataChannel {
            stream: connect(path, timeout)?,
            path: path.to_path_buf(),
            buf: Vec::with_capacity(MAX_TPM_FRAME),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn set_timeout(&mut self, timeout: Duration) -> Result<(), ProtoError> {
        self.stream
            .set_read_timeout(Some(timeout))
            .and_then(|_| self.stream.set_write_timeout(Some(timeout)))
            .map_err(ProtoError::Io)
    }

    /// Bytes reserved for frame buffering, for overhead accounting.
    pub fn buffer_bytes(&self) -> usize {
        self.buf.capacity()
    }

    pub fn transact(&mut self, cmd_frame: &[u8]) -> Result<Vec<u8>, ProtoError> {
        let h = FrameHeader::parse(cmd_frame)?;
        if h.size as usize != cmd_frame.len() {
            return Err(crate::wire::WireError::SizeMismatch {
                declared: h.size,
                actual: cmd_frame.len(),
            }
            .into());
        }
        self.stream
            .write_all(cmd_frame)
            .map_err(|e| map_io(e, ProtoError::TransportClosed))?;

        let mut header = [0u8; TPM_HEADER_LEN];
        match read_exact_or_eof(&mut self.stream, &mut header) {
            Ok(true) => {}
            Ok(false) => return Err(ProtoError::TransportClosed),
            Err(e) => return Err(map_io(e, ProtoError::TransportClosed)),
        }
        let size = u32::from_be_bytes(header[2..6].try_into().unwrap());
        if size as usize > MAX_TPM_FRAME {
            return Err(ProtoError::FrameTooLarge(size));
        }
        if (size as usize) < TPM_HEADER_LEN {
            return Err(ProtoError::ProtocolViolation(format!("response size {size}")));
        }
        self.buf.clear();
        self.buf.extend_from_slice(&header);
        self.buf.resize(size as usize, 0);
        self.stream
            .read_exact(&mut self.buf[TPM_HEADER_LEN..])
            .map_err(|e| map_io(e, ProtoError::TransportClosed))?;
        Ok(self.buf.clone())
    }
}
