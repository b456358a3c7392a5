// SPDX-License-Identifier: Apache-2.0

//! swtpm-style backend: a control channel for lifecycle requests and a data
//! channel for framed TPM commands, both over local stream sockets.
//!
//! Control request: `code: u32 BE | len: u32 BE | payload[len]`.
//! Control response: `result: u32 BE | len: u32 BE | payload[len]`.
//! The data channel carries raw TPM frames delimited by their size field.

mod client;
mod server;

use std::io::{self, Read, Write};

use thiserror::Error;

pub use client::{connect_ctrl, CtrlClient, DataChannel, DEFAULT_TIMEOUT};
pub use server::{serve, ServeError, ServerConfig, ServerHandle};

pub const CTRL_INIT: u32 = 0x01;
pub const CTRL_SET_DATA_CHANNEL: u32 = 0x02;
pub const CTRL_GET_CAPABILITY: u32 = 0x03;
pub const CTRL_CANCEL: u32 = 0x04;
pub const CTRL_SHUTDOWN: u32 = 0x05;

pub const RESULT_OK: u32 = 0x00;
pub const RESULT_PROTOCOL_VIOLATION: u32 = 0x01;
pub const RESULT_NOT_INITIALIZED: u32 = 0x02;
pub const RESULT_PATH_TOO_LONG: u32 = 0x03;
pub const RESULT_BUSY: u32 = 0x04;
/// The server could not bind the requested data socket.
pub const RESULT_BIND_FAILED: u32 = 0x05;

pub const CAP_INIT: u32 = 0x1;
pub const CAP_DATA_CHANNEL: u32 = 0x2;
pub const CAP_CANCEL: u32 = 0x4;
pub const CAPABILITIES: u32 = CAP_INIT | CAP_DATA_CHANNEL | CAP_CANCEL;

/// `CTRL_INIT` flag: keep the restored PCR bank instead of clearing it.
pub const INIT_FLAG_PRESERVE_STATE: u32 = 0x1;

pub const MAX_CTRL_PAYLOAD: usize = 4096;
pub const MAX_DATA_PATH: usize = 1024;

const CTRL_HEADER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("cannot reach control channel: {0}")]
    ConnectFailure(#[source] io::Error),
    #[error("server returned result {0:#x}")]
    RemoteError(u32),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("data channel closed by peer")]
    TransportClosed,
    #[error("response frame of {0} bytes exceeds the maximum")]
    FrameTooLarge(u32),
    #[error("timed out waiting for the backend")]
    Timeout,
    #[error("not a valid TPM command frame: {0}")]
    InvalidCommand(#[from] crate::wire::WireError),
    #[error("io: {0}")]
    Io(#[source] io::Error),
}

/// A control-channel message. Requests carry a code, responses a result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtrlFrame {
    pub code: u32,
    pub payload: Vec<u8>,
}

pub type CtrlResponse = CtrlFrame;

impl CtrlFrame {
    pub fn new(code: u32, payload: impl Into<Vec<u8>>) -> Self {
        CtrlFrame {
            code,
            payload: payload.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CTRL_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.code.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Reads one frame. `Ok(None)` means the peer closed cleanly before a
    /// new frame started.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<CtrlFrame>, FrameReadError> {
        let mut header = [0u8; CTRL_HEADER_LEN];
        if !read_exact_or_eof(r, &mut header)? {
            return Ok(None);
        }
        let code = u32::from_be_bytes(header[0..4].try_into().unwrap());
        let len = u32::from_be_bytes(header[4..8].try_into().unwrap());
        if len as usize > MAX_CTRL_PAYLOAD {
            return Err(FrameReadError::PayloadTooLarge(len));
        }
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload)?;
        Ok(Some(CtrlFrame { code, payload }))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }
}

#[derive(Debug, Error)]
pub enum FrameReadError {
    #[error("payload length {0} exceeds the maximum")]
    PayloadTooLarge(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Like `read_exact`, but reports EOF before the first byte as `false`.
pub(crate) fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut done = 0;
    while done < buf.len() {
        match r.read(&mut buf[done..]) {
            Ok(0) if done == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => done += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ctrl_frame_layout() {
        let f = CtrlFrame::new(CTRL_SET_DATA_CHANNEL, b"/x".to_vec());
        assert_eq!(f.encode(), [0, 0, 0, 2, 0, 0, 0, 2, b'/', b'x']);
        let back = CtrlFrame::read_from(&mut f.encode().as_slice()).unwrap().unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn ctrl_frame_read_edges() {
        assert!(CtrlFrame::read_from(&mut &[][..]).unwrap().is_none());
        assert!(matches!(
            CtrlFrame::read_from(&mut &[0u8, 0, 0][..]),
            Err(FrameReadError::Io(_))
        ));
        let big = [0, 0, 0, 1, 0, 0, 0x10, 0x01];
        assert!(matches!(
            CtrlFrame::read_from(&mut &big[..]),
            Err(FrameReadError::PayloadTooLarge(4097))
        ));
    }
}
