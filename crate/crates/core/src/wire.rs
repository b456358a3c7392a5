// SPDX-License-Identifier: Apache-2.0

//! TPM 2.0 style command and response framing.
//!
//! Every frame starts with a 10-byte header: a 16-bit tag, a 32-bit total
//! size and a 32-bit command code (commands) or response code (responses).
//! All header fields are big-endian. Only the no-sessions tag is accepted.

use std::fmt;

use thiserror::Error;

/// Header length shared by commands and responses.
pub const TPM_HEADER_LEN: usize = 10;

/// Largest frame accepted or produced, header included.
pub const MAX_TPM_FRAME: usize = 4096;

/// `TPM_ST_NO_SESSIONS`.
pub const TPM_ST_NO_SESSIONS: u16 = 0x8001;

/// `TPM_RC_SUCCESS`.
pub const RC_SUCCESS: u32 = 0x0000;
/// `TPM_RC_INITIALIZE`: the TPM has not been started.
pub const RC_INITIALIZE: u32 = 0x0100;
/// `TPM_RC_COMMAND_CODE`: unknown or unimplemented command.
pub const RC_COMMAND_CODE: u32 = 0x0143;
/// `TPM_RC_VALUE` reported against the first handle.
pub const RC_VALUE: u32 = 0x0184;

/// Command codes understood by the mock responder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CommandCode {
    SelfTest,
    Startup,
    Shutdown,
    PcrReadSimple,
    GetRandom,
    PcrExtendSimple,
    /// Any other code. Decoding never rejects a code; the responder does.
    Raw(u32),
}

impl CommandCode {
    pub const fn value(self) -> u32 {
        match self {
            CommandCode::SelfTest => 0x0143,
            CommandCode::Startup => 0x0144,
            CommandCode::Shutdown => 0x0145,
            CommandCode::PcrReadSimple => 0x017E,
            CommandCode::GetRandom => 0x017B,
            CommandCode::PcrExtendSimple => 0x0182,
            CommandCode::Raw(v) => v,
        }
    }
}

impl From<u32> for CommandCode {
    fn from(v: u32) -> Self {
        match v {
            0x0143 => CommandCode::SelfTest,
            0x0144 => CommandCode::Startup,
            0x0145 => CommandCode::Shutdown,
            0x017E => CommandCode::PcrReadSimple,
            0x017B => CommandCode::GetRandom,
            0x0182 => CommandCode::PcrExtendSimple,
            other => CommandCode::Raw(other),
        }
    }
}

impl From<CommandCode> for u32 {
    fn from(c: CommandCode) -> u32 {
        c.value()
    }
}

impl fmt::Display for CommandCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommandCode::Raw(v) => write!(f, "Raw({v:#06x})"),
            other => write!(f, "{other:?}"),
        }
    }
}

/// Framing errors for both directions.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("body of {0} bytes does not fit in a TPM frame")]
    BodyTooLarge(usize),
    #[error("frame truncated: {0} bytes, header needs 10")]
    Truncated(usize),
    #[error("size field {declared} does not match frame length {actual}")]
    SizeMismatch { declared: u32, actual: usize },
    #[error("size field {0} exceeds the maximum frame size")]
    Oversize(u32),
    #[error("unsupported tag {0:#06x}")]
    UnsupportedTag(u16),
    #[error("error response {rc:#x} carries a {len}-byte body")]
    ErrorWithBody { rc: u32, len: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TpmCommand {
    pub tag: u16,
    pub code: CommandCode,
    pub body: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TpmResponse {
    pub tag: u16,
    pub rc: u32,
    pub body: Vec<u8>,
}

impl TpmCommand {
    pub fn new(code: CommandCode, body: impl Into<Vec<u8>>) -> Self {
        TpmCommand {
            tag: TPM_ST_NO_SESSIONS,
            code,
            body: body.into(),
        }
    }

    /// Value of the size field: header plus body.
    pub fn size(&self) -> u32 {
        (TPM_HEADER_LEN + self.body.len()) as u32
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_frame(self.tag, self.code.value(), &self.body)
    }
}

impl TpmResponse {
    pub fn success(body: impl Into<Vec<u8>>) -> Self {
        TpmResponse {
            tag: TPM_ST_NO_SESSIONS,
            rc: RC_SUCCESS,
            body: body.into(),
        }
    }

    pub fn error(rc: u32) -> Self {
        TpmResponse {
            tag: TPM_ST_NO_SESSIONS,
            rc,
            body: Vec::new(),
        }
    }

    pub fn size(&self) -> u32 {
        (TPM_HEADER_LEN + self.body.len()) as u32
    }

    pub fn is_success(&self) -> bool {
        self.rc == RC_SUCCESS
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        if self.rc != RC_SUCCESS && !self.body.is_empty() {
            return Err(WireError::ErrorWithBody {
                rc: self.rc,
                len: self.body.len(),
            });
        }
        encode_frame(self.tag, self.rc, &self.body)
    }
}

fn encode_frame(tag: u16, code: u32, body: &[u8]) -> Result<Vec<u8>, WireError> {
    if body.len() > MAX_TPM_FRAME - TPM_HEADER_LEN {
        return Err(WireError::BodyTooLarge(body.len()));
    }
    let size = (TPM_HEADER_LEN + body.len()) as u32;
    let mut out = Vec::with_capacity(size as usize);
    out.extend_from_slice(&tag.to_be_bytes());
    out.extend_from_slice(&size.to_be_bytes());
    out.extend_from_slice(&code.to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

/// Parsed header fields: tag, declared size, code-or-rc.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub tag: u16,
    pub size: u32,
    pub code: u32,
}

impl FrameHeader {
    /// Parses the first 10 bytes of `buf`. Validates only the size bounds,
    /// which is what a stream reader needs before reading the remainder.
    pub fn parse(buf: &[u8]) -> Result<FrameHeader, WireError> {
        if buf.len() < TPM_HEADER_LEN {
            return Err(WireError::Truncated(buf.len()));
        }
        let tag = u16::from_be_bytes([buf[0], buf[1]]);
        let size = u32::from_be_bytes([buf[2], buf[3], buf[4], buf[5]]);
        let code = u32::from_be_bytes([buf[6], buf[7], buf[8], buf[9]]);
        if size as usize > MAX_TPM_FRAME {
            return Err(WireError::Oversize(size));
        }
        if (size as usize) < TPM_HEADER_LEN {
            return Err(WireError::SizeMismatch {
                declared: size,
                actual: buf.len(),
            });
        }
        Ok(FrameHeader { tag, size, code })
    }
}

fn decode_frame(frame: &[u8]) -> Result<(FrameHeader, &[u8]), WireError> {
    let header = FrameHeader::parse(frame)?;
    if header.size as usize != frame.len() {
        return Err(WireError::SizeMismatch {
            declared: header.size,
            actual: frame.len(),
        });
    }
    if header.tag != TPM_ST_NO_SESSIONS {
        return Err(WireError::UnsupportedTag(header.tag));
    }
    Ok((header, &frame[TPM_HEADER_LEN..]))
}

pub fn encode_command(code: CommandCode, body: &[u8]) -> Result<Vec<u8>, WireError> {
    encode_frame(TPM_ST_NO_SESSIONS, code.value(), body)
}

pub fn decode_command(frame: &[u8]) -> Result<TpmCommand, WireError> {
    let (header, body) = decode_frame(frame)?;
    Ok(TpmCommand {
        tag: header.tag,
        code: CommandCode::from(header.code),
        body: body.to_vec(),
    })
}

pub fn encode_response(resp: &TpmResponse) -> Result<Vec<u8>, WireError> {
    resp.encode()
}

pub fn decode_response(frame: &[u8]) -> Result<TpmResponse, WireError> {
    let (header, body) = decode_frame(frame)?;
    if header.code != RC_SUCCESS && !body.is_empty() {
        return Err(WireError::ErrorWithBody {
            rc: header.code,
            len: body.len(),
        });
    }
    Ok(TpmResponse {
        tag: header.tag,
        rc: header.code,
        body: body.to_vec(),
    })
}
