// SPDX-License-Identifier: Apache-2.0

//! Minimal deterministic TPM responder.
//!
//! Implements a startup state machine, a single SHA-256 PCR bank and a
//! seeded random stream. Command bodies are simplified: PCR commands take a
//! big-endian `u32` index, extend additionally takes a raw 32-byte digest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::wire::{
    self, CommandCode, TpmCommand, TpmResponse, RC_COMMAND_CODE, RC_INITIALIZE, RC_VALUE,
};

pub const PCR_COUNT: usize = 24;
pub const PCR_DIGEST_LEN: usize = 32;
/// Largest `GetRandom` request honored.
pub const MAX_RANDOM_BYTES: u16 = 64;
/// Length of the persisted state: phase byte, PCR bank, little-endian seed.
pub const STATE_FILE_LEN: usize = 1 + PCR_COUNT * PCR_DIGEST_LEN + 8;

pub type PcrValue = [u8; PCR_DIGEST_LEN];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PowerOn,
    Started,
    Shutdown,
}

impl Phase {
    fn to_byte(self) -> u8 {
        match self {
            Phase::PowerOn => 0,
            Phase::Started => 1,
            Phase::Shutdown => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Phase> {
        match b {
            0 => Some(Phase::PowerOn),
            1 => Some(Phase::Started),
            2 => Some(Phase::Shutdown),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PcrBank {
    registers: [PcrValue; PCR_COUNT],
}

impl Default for PcrBank {
    fn default() -> Self {
        PcrBank {
            registers: [[0u8; PCR_DIGEST_LEN]; PCR_COUNT],
        }
    }
}

impl PcrBank {
    pub fn get(&self, index: usize) -> Option<&PcrValue> {
        self.registers.get(index)
    }

    /// `pcr[index] = SHA256(pcr[index] || digest)`. Returns false for an
    /// out-of-range index.
    pub fn extend(&mut self, index: usize, digest: &PcrValue) -> bool {
        let Some(reg) = self.registers.get_mut(index) else {
            return false;
        };
        let mut h = Sha256::new();
        h.update(&reg[..]);
        h.update(digest);
        reg.copy_from_slice(&h.finalize());
        true
    }

    pub fn registers(&self) -> &[PcrValue; PCR_COUNT] {
        &self.registers
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StateFileError {
    #[error("state file io: {0}")]
    Io(#[from] io::Error),
    #[error("state file has {0} bytes, expected {STATE_FILE_LEN}")]
    BadLength(usize),
    #[error("unknown phase byte {0}")]
    BadPhase(u8),
}

/// The responder. Owned by one server; not shared mutably.
#[derive(Clone, Debug)]
pub struct MockTpmState {
    phase: Phase,
    pcr: PcrBank,
    rng_seed: u64,
    rng_counter: u64,
    stats: BTreeMap<u32, u64>,
}

impl MockTpmState {
    pub fn new(rng_seed: u64) -> Self {
        MockTpmState {
            phase: Phase::PowerOn,
            pcr: PcrBank::default(),
            rng_seed,
            rng_counter: 0,
            stats: BTreeMap::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn pcr(&self) -> &PcrBank {
        &self.pcr
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Commands seen, keyed by raw command code.
    pub fn stats(&self) -> &BTreeMap<u32, u64> {
        &self.stats
    }

    /// Back to a fresh power-on state, keeping only the seed.
    pub fn reset(&mut self) {
        *self = MockTpmState::new(self.rng_seed);
    }

    /// Power cycle that keeps the PCR bank, as after restoring saved state.
    pub fn power_cycle_preserving(&mut self) {
        self.phase = Phase::PowerOn;
        self.rng_counter = 0;
    }

    pub fn execute(&mut self, cmd: &TpmCommand) -> TpmResponse {
        *self.stats.entry(cmd.code.value()).or_default() += 1;

        if cmd.code == CommandCode::Startup {
            if self.phase != Phase::PowerOn {
                return TpmResponse::error(RC_INITIALIZE);
            }
            if cmd.body.len() != 2 {
                return TpmResponse::error(RC_VALUE);
            }
            self.phase = Phase::Started;
            return TpmResponse::success(Vec::new());
        }

        if self.phase != Phase::Started {
            return TpmResponse::error(RC_INITIALIZE);
        }

        match cmd.code {
            CommandCode::SelfTest => {
                if cmd.body.len() > 1 {
                    return TpmResponse::error(RC_VALUE);
                }
                TpmResponse::success(Vec::new())
            }
            CommandCode::Shutdown => {
                if cmd.body.len() != 2 {
                    return TpmResponse::error(RC_VALUE);
                }
                self.phase = Phase::Shutdown;
                TpmResponse::success(Vec::new())
            }
            CommandCode::GetRandom => {
                let Ok(n) = <[u8; 2]>::try_from(cmd.body.as_slice()) else {
                    return TpmResponse::error(RC_VALUE);
                };
                let n = u16::from_be_bytes(n);
                if n > MAX_RANDOM_BYTES {
                    return TpmResponse::error(RC_VALUE);
                }
                let mut body = Vec::with_capacity(2 + n as usize);
                body.extend_from_slice(&n.to_be_bytes());
                body.extend_from_slice(&self.random_bytes(n as usize));
                TpmResponse::success(body)
            }
            CommandCode::PcrExtendSimple => {
                if cmd.body.len() != 4 + PCR_DIGEST_LEN {
                    return TpmResponse::error(RC_VALUE);
                }
                let index = read_index(&cmd.body);
                let digest: PcrValue = cmd.body[4..].try_into().expect("length checked");
                if !self.pcr.extend(index, &digest) {
                    return TpmResponse::error(RC_VALUE);
                }
                TpmResponse::success(Vec::new())
            }
            CommandCode::PcrReadSimple => {
                if cmd.body.len() != 4 {
                    return TpmResponse::error(RC_VALUE);
                }
                match self.pcr.get(read_index(&cmd.body)) {
                    Some(v) => TpmResponse::success(v.to_vec()),
                    None => TpmResponse::error(RC_VALUE),
                }
            }
            CommandCode::Startup => unreachable!("handled above"),
            CommandCode::Raw(_) => TpmResponse::error(RC_COMMAND_CODE),
        }
    }

    /// Frame-level entry point. Frames that fail to decode get an `RC_VALUE`
    /// response.
    pub fn execute_frame(&mut self, frame: &[u8]) -> Vec<u8> {
        let resp = match wire::decode_command(frame) {
            Ok(cmd) => self.execute(&cmd),
            Err(_) => TpmResponse::error(RC_VALUE),
        };
        resp.encode().expect("responder frames are always in bounds")
    }

    // Counter mode: block i = SHA256(seed_le || i_le). Each call starts on a
    // fresh block.
    fn random_bytes(&mut self, n: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut h = Sha256::new();
            h.update(self.rng_seed.to_le_bytes());
            h.update(self.rng_counter.to_le_bytes());
            self.rng_counter += 1;
            let block = h.finalize();
            let take = (n - out.len()).min(block.len());
            out.extend_from_slice(&block[..take]);
        }
        out
    }

    pub fn to_state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STATE_FILE_LEN);
        out.push(self.phase.to_byte());
        for reg in self.pcr.registers() {
            out.extend_from_slice(reg);
        }
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out
    }

    pub fn from_state_bytes(bytes: &[u8]) -> Result<Self, StateFileError> {
        if bytes.len() != STATE_FILE_LEN {
            return Err(StateFileError::BadLength(bytes.len()));
        }
        let phase = Phase::from_byte(bytes[0]).ok_or(StateFileError::BadPhase(bytes[0]))?;
        let mut pcr = PcrBank::default();
        for (i, reg) in pcr.registers.iter_mut().enumerate() {
            let off = 1 + i * PCR_DIGEST_LEN;
            reg.copy_from_slice(&bytes[off..off + PCR_DIGEST_LEN]);
        }
        let seed_off = 1 + PCR_COUNT * PCR_DIGEST_LEN;
        let rng_seed = u64::from_le_bytes(bytes[seed_off..].try_into().expect("length checked"));
        Ok(MockTpmState {
            phase,
            pcr,
            rng_seed,
            rng_counter: 0,
            stats: BTreeMap::new(),
        })
    }

    /// Overwrites in place: the file has a fixed length, and truncating an
    /// existing file costs far more than the write itself.
    pub fn save(&self, path: &Path) -> Result<(), StateFileError> {
        let mut f = fs::OpenOptions::new().write(true).create(true).truncate(false).open(path)?;
        f.write_all(&self.to_state_bytes())?;
        if f.metadata()?.len() != STATE_FILE_LEN as u64 {
            f.set_len(STATE_FILE_LEN as u64)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StateFileError> {
        Self::from_state_bytes(&fs::read(path)?)
    }
}

fn read_index(body: &[u8]) -> usize {
    u32::from_be_bytes([body[0], body[1], body[2], body[3]]) as usize
}

/// Body for `PcrExtendSimple`.
pub fn extend_body(index: u32, digest: &PcrValue) -> Vec<u8> {
    let mut b = index.to_be_bytes().to_vec();
    b.extend_from_slice(digest);
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cmd(code: CommandCode, body: &[u8]) -> TpmCommand {
        TpmCommand::new(code, body.to_vec())
    }

    fn started(seed: u64) -> MockTpmState {
        let mut s = MockTpmState::new(seed);
        assert!(s.execute(&cmd(CommandCode::Startup, &[0, 0])).is_success());
        s
    }

    // Hash chain computed with a fresh hasher per step, no PcrBank involved.
    fn fold_oracle(digests: &[PcrValue]) -> PcrValue {
        digests.iter().fold([0u8; 32], |acc, d| {
            let mut buf = acc.to_vec();
            buf.extend_from_slice(d);
            Sha256::digest(&buf).into()
        })
    }

    #[test]
    fn fresh_pcr_reads_zero() {
        let mut s = started(1);
        let r = s.execute(&cmd(CommandCode::PcrReadSimple, &5u32.to_be_bytes()));
        assert!(r.is_success());
        assert_eq!(r.body, vec![0u8; 32]);
    }

    #[test]
    fn extend_then_read() {
        let mut s = started(1);
        let d: PcrValue = Sha256::digest(b"kernel").into();
        assert!(s.execute(&cmd(CommandCode::PcrExtendSimple, &extend_body(5, &d))).is_success());
        let r = s.execute(&cmd(CommandCode::PcrReadSimple, &5u32.to_be_bytes()));
        assert_eq!(r.body, fold_oracle(&[d]).to_vec());
    }

    #[test]
    fn commands_gated_before_startup() {
        let mut s = MockTpmState::new(0);
        let r = s.execute(&cmd(CommandCode::GetRandom, &16u16.to_be_bytes()));
        assert_eq!(r.rc, RC_INITIALIZE);
        assert!(r.body.is_empty());
        assert_eq!(s.phase(), Phase::PowerOn);
    }

    #[test]
    fn phase_transitions() {
        let mut s = started(0);
        assert_eq!(s.execute(&cmd(CommandCode::Startup, &[0, 0])).rc, RC_INITIALIZE);
        assert!(s.execute(&cmd(CommandCode::Shutdown, &[0, 0])).is_success());
        assert_eq!(s.phase(), Phase::Shutdown);
        assert_eq!(s.execute(&cmd(CommandCode::Startup, &[0, 0])).rc, RC_INITIALIZE);
        assert_eq!(s.execute(&cmd(CommandCode::SelfTest, &[])).rc, RC_INITIALIZE);
    }

    #[test]
    fn bad_bodies_and_codes() {
        let mut s = started(0);
        let e = |s: &mut MockTpmState, c, b: &[u8]| s.execute(&cmd(c, b)).rc;
        assert_eq!(e(&mut s, CommandCode::PcrReadSimple, &24u32.to_be_bytes()), RC_VALUE);
        assert_eq!(e(&mut s, CommandCode::PcrReadSimple, &[0, 0]), RC_VALUE);
        assert_eq!(e(&mut s, CommandCode::PcrExtendSimple, &extend_body(24, &[1; 32])), RC_VALUE);
        assert_eq!(e(&mut s, CommandCode::PcrExtendSimple, &[0; 35]), RC_VALUE);
        assert_eq!(e(&mut s, CommandCode::GetRandom, &65u16.to_be_bytes()), RC_VALUE);
        assert_eq!(e(&mut s, CommandCode::GetRandom, &[1]), RC_VALUE);
        assert_eq!(e(&mut s, CommandCode::Raw(0x999), &[]), RC_COMMAND_CODE);
        assert_eq!(MockTpmState::new(0).execute(&cmd(CommandCode::Raw(1), &[])).rc, RC_INITIALIZE);
        assert_eq!(s.pcr(), &PcrBank::default());
    }

    #[test]
    fn get_random_shape() {
        let mut s = started(7);
        let r = s.execute(&cmd(CommandCode::GetRandom, &64u16.to_be_bytes()));
        assert_eq!(&r.body[..2], &[0, 64]);
        assert_eq!(r.body.len(), 66);
        let z = s.execute(&cmd(CommandCode::GetRandom, &0u16.to_be_bytes()));
        assert_eq!(z.body, vec![0, 0]);
    }

    #[test]
    fn reset_gates_and_preserves_seed() {
        let mut s = started(42);
        s.execute(&cmd(CommandCode::PcrExtendSimple, &extend_body(3, &[9; 32])));
        s.reset();
        assert_eq!(s.rng_seed(), 42);
        assert_eq!(s.execute(&cmd(CommandCode::PcrReadSimple, &3u32.to_be_bytes())).rc, RC_INITIALIZE);
        s.execute(&cmd(CommandCode::Startup, &[0, 0]));
        let r = s.execute(&cmd(CommandCode::PcrReadSimple, &3u32.to_be_bytes()));
        assert_eq!(r.body, vec![0u8; 32]);
    }

    #[test]
    fn reset_replay_is_deterministic() {
        let script = [
            cmd(CommandCode::Startup, &[0, 0]),
            cmd(CommandCode::GetRandom, &16u16.to_be_bytes()),
            cmd(CommandCode::GetRandom, &40u16.to_be_bytes()),
            cmd(CommandCode::PcrExtendSimple, &extend_body(0, &[3; 32])),
            cmd(CommandCode::PcrReadSimple, &0u32.to_be_bytes()),
        ];
        let mut s = MockTpmState::new(99);
        s.reset();
        let a: Vec<_> = script.iter().map(|c| s.execute(c)).collect();
        s.reset();
        let b: Vec<_> = script.iter().map(|c| s.execute(c)).collect();
        assert_eq!(a, b);
        let mut other = MockTpmState::new(100);
        let c: Vec<_> = script.iter().map(|c| other.execute(c)).collect();
        assert_ne!(a[1], c[1]);
    }

    #[test]
    fn state_bytes_round_trip() {
        let mut s = started(0x0102_0304_0506_0708);
        s.execute(&cmd(CommandCode::PcrExtendSimple, &extend_body(23, &[5; 32])));
        let bytes = s.to_state_bytes();
        assert_eq!(bytes.len(), STATE_FILE_LEN);
        assert_eq!(bytes[0], 1);
        assert_eq!(&bytes[STATE_FILE_LEN - 8..], &[8, 7, 6, 5, 4, 3, 2, 1]);
        let back = MockTpmState::from_state_bytes(&bytes).unwrap();
        assert_eq!(back.pcr(), s.pcr());
        assert_eq!(back.phase(), Phase::Started);
        assert!(matches!(MockTpmState::from_state_bytes(&bytes[1..]), Err(StateFileError::BadLength(_))));
        let mut bad = bytes.clone();
        bad[0] = 9;
        assert!(matches!(MockTpmState::from_state_bytes(&bad), Err(StateFileError::BadPhase(9))));
    }

    #[test]
    fn save_overwrites_longer_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state");
        fs::write(&path, vec![0xAA; 2000]).unwrap();
        let s = started(42);
        s.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), s.to_state_bytes());
        assert_eq!(MockTpmState::load(&path).unwrap().rng_seed(), 42);
    }

    #[test]
    fn malformed_frame_gets_rc_value() {
        let mut s = started(0);
        let out = s.execute_frame(&[0x80, 0x01, 0, 0]);
        assert_eq!(wire::decode_response(&out).unwrap().rc, RC_VALUE);
    }

    proptest! {
        #[test]
        fn extend_chain_matches_oracle(index in 0usize..PCR_COUNT, digests in proptest::collection::vec(any::<[u8; 32]>(), 0..8)) {
            let mut s = started(0);
            for d in &digests {
                prop_assert!(s.execute(&cmd(CommandCode::PcrExtendSimple, &extend_body(index as u32, d))).is_success());
            }
            prop_assert_eq!(s.pcr().get(index).unwrap(), &fold_oracle(&digests));
        }

        #[test]
        fn failing_commands_leave_state_alone(code in any::<u32>(), body in proptest::collection::vec(any::<u8>(), 0..40), start in any::<bool>()) {
            let mut s = if start { started(5) } else { MockTpmState::new(5) };
            let before = (s.phase(), s.pcr().clone(), s.rng_counter);
            let r = s.execute(&cmd(CommandCode::from(code), &body));
            if !r.is_success() {
                prop_assert!(r.body.is_empty());
                prop_assert_eq!(before, (s.phase(), s.pcr().clone(), s.rng_counter));
            }
        }
    }
}
