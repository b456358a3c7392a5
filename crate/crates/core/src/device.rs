// SPDX-License-Identifier: Apache-2.0

//! virtio TPM device model.
//!
//! The device drains its single queue synchronously: each chain's readable
//! bytes form one TPM command, the backend call blocks the servicing
//! thread, and the response is scattered into the chain's writable
//! descriptors.

use std::fmt;

use thiserror::Error;

use crate::mock_tpm::MockTpmState;
use crate::swtpm::{DataChannel, ProtoError};
use crate::virtio::{DescriptorChain, GuestMemory, MemoryError, QueueError, Virtqueue};
use crate::wire::{self, TpmResponse, MAX_TPM_FRAME, RC_VALUE};

#[derive(Debug, Error)]
#[error("backend transport failure: {0}")]
pub struct BackendError(#[from] pub ProtoError);

/// Executes one complete TPM command frame and returns one complete
/// response frame. Calls block.
pub trait TpmBackend: Send {
    fn execute_command(&mut self, cmd: &[u8]) -> Result<Vec<u8>, BackendError>;

    /// Host bytes held for framing, for overhead accounting.
    fn buffer_bytes(&self) -> usize {
        0
    }
}

impl TpmBackend for DataChannel {
    fn execute_command(&mut self, cmd: &[u8]) -> Result<Vec<u8>, BackendError> {
        Ok(self.transact(cmd)?)
    }

    fn buffer_bytes(&self) -> usize {
        DataChannel::buffer_bytes(self)
    }
}

/// In-process responder, bypassing sockets.
#[derive(Debug, Clone)]
pub struct LocalBackend {
    pub tpm: MockTpmState,
}

impl LocalBackend {
    pub fn new(tpm: MockTpmState) -> Self {
        LocalBackend { tpm }
    }
}

impl TpmBackend for LocalBackend {
    fn execute_command(&mut self, cmd: &[u8]) -> Result<Vec<u8>, BackendError> {
        Ok(self.tpm.execute_frame(cmd))
    }
}

impl<B: TpmBackend + ?Sized> TpmBackend for Box<B> {
    fn execute_command(&mut self, cmd: &[u8]) -> Result<Vec<u8>, BackendError> {
        (**self).execute_command(cmd)
    }

    fn buffer_bytes(&self) -> usize {
        (**self).buffer_bytes()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeviceCounters {
    /// Chains taken from the available ring.
    pub requests: u64,
    /// Chains completed with a response written.
    pub responses: u64,
    /// Responses dropped because the writable buffers were too small.
    pub truncations: u64,
    /// Malformed commands and chains completed after a backend failure.
    pub errors: u64,
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("device is not activated")]
    NotActivated,
    #[error("device is already activated")]
    AlreadyActivated,
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("guest memory: {0}")]
    Memory(#[from] MemoryError),
}

pub type Signaller = Box<dyn FnMut() + Send>;

struct Activation {
    mem: GuestMemory,
    queue: Virtqueue,
    signaller: Signaller,
}

pub struct VtpmDevice<B> {
    backend: B,
    active: Option<Activation>,
    failed: Option<String>,
    counters: DeviceCounters,
}

impl<B> fmt::Debug for VtpmDevice<B> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VtpmDevice")
            .field("activated", &self.active.is_some())
            .field("failed", &self.failed)
            .field("counters", &self.counters)
            .finish()
    }
}

impl<B: TpmBackend> VtpmDevice<B> {
    pub fn new(backend: B) -> Self {
        VtpmDevice {
            backend,
            active: None,
            failed: None,
            counters: DeviceCounters::default(),
        }
    }

    pub fn activate(&mut self, mem: GuestMemory, queue: Virtqueue, signaller: Signaller) -> Result<(), DeviceError> {
        if self.active.is_some() {
            return Err(DeviceError::AlreadyActivated);
        }
        self.active = Some(Activation {
            mem,
            queue,
            signaller,
        });
        Ok(())
    }

    pub fn is_activated(&self) -> bool {
        self.active.is_some()
    }

    /// Set after a backend transport failure; cleared only by `reset`.
    pub fn failure(&self) -> Option<&str> {
        self.failed.as_deref()
    }

    pub fn counters(&self) -> DeviceCounters {
        self.counters
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn queue(&self) -> Option<&Virtqueue> {
        self.active.as_ref().map(|a| &a.queue)
    }

    /// Deactivates and clears the failure flag. Counters are kept.
    pub fn reset(&mut self) -> Option<(GuestMemory, Virtqueue)> {
        self.failed = None;
        self.active.take().map(|a| (a.mem, a.queue))
    }

    /// Host bytes owned by this device instance and its backend client.
    pub fn accounted_bytes(&self) -> usize {
        std::mem::size_of::<Self>()
            + self.active.as_ref().map_or(0, |a| a.queue.shadow_bytes())
            + self.backend.buffer_bytes()
    }

    /// Drains every available chain. Returns how many were completed. The
    /// signaller fires once if at least one chain completed.
    pub fn process_queue(&mut self) -> Result<usize, DeviceError> {
        let act = self.active.as_mut().ok_or(DeviceError::NotActivated)?;
        let mut completed = 0usize;
        let result = loop {
            let chain = match act.queue.pop_chain(&act.mem) {
                Ok(Some(c)) => c,
                Ok(None) => break Ok(()),
                Err(e) => break Err(e.into()),
            };
            self.counters.requests += 1;
            let written = Self::service_chain(
                &mut self.backend,
                &mut self.failed,
                &mut self.counters,
                &act.mem,
                &chain,
            );
            let written = match written {
                Ok(n) => n,
                Err(e) => break Err(e),
            };
            if let Err(e) = act.queue.push_used(&act.mem, chain.head, written) {
                break Err(e.into());
            }
            completed += 1;
        };
        if completed > 0 {
            (act.signaller)();
        }
        result.map(|_| completed)
    }

    fn service_chain(
        backend: &mut B,
        failed: &mut Option<String>,
        counters: &mut DeviceCounters,
        mem: &GuestMemory,
        chain: &DescriptorChain,
    ) -> Result<u32, DeviceError> {
        if failed.is_some() {
            counters.errors += 1;
            return Ok(0);
        }
        let response = if chain.readable_len() > MAX_TPM_FRAME as u64 {
            counters.errors += 1;
            error_frame()
        } else {
            let cmd = chain.read_all(mem)?;
            if wire::decode_command(&cmd).is_err() {
                counters.errors += 1;
                error_frame()
            } else {
                match backend.execute_command(&cmd) {
                    Ok(r) => r,
                    Err(e) => {
                        *failed = Some(e.to_string());
                        counters.errors += 1;
                        return Ok(0);
                    }
                }
            }
        };
        if response.len() as u64 > chain.writable_len() {
            counters.truncations += 1;
            return Ok(0);
        }
        let n = chain.write_all(mem, &response)?;
        counters.responses += 1;
        Ok(n as u32)
    }
}

fn error_frame() -> Vec<u8> {
    TpmResponse::error(RC_VALUE)
        .encode()
        .expect("error frame is in bounds")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::virtio::{GuestDriver, QueueLayout};
    use crate::wire::{encode_command, CommandCode};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Harness {
        drv: GuestDriver,
        dev: VtpmDevice<LocalBackend>,
        signals: Arc<AtomicUsize>,
    }

    fn harness() -> Harness {
        let mem = GuestMemory::new(1 << 22);
        let layout = QueueLayout::contiguous(16, 0x1000).unwrap();
        let drv = GuestDriver::new(mem.clone(), layout, 0x10_0000).unwrap();
        let mut dev = VtpmDevice::new(LocalBackend::new(MockTpmState::new(3)));
        let signals = Arc::new(AtomicUsize::new(0));
        let s = signals.clone();
        dev.activate(mem, Virtqueue::new(layout), Box::new(move || {
            s.fetch_add(1, Ordering::SeqCst);
        }))
        .unwrap();
        Harness { drv, dev, signals }
    }

    struct Broken;
    impl TpmBackend for Broken {
        fn execute_command(&mut self, _: &[u8]) -> Result<Vec<u8>, BackendError> {
            Err(ProtoError::TransportClosed.into())
        }
    }

    #[test]
    fn process_before_activate() {
        let mut dev = VtpmDevice::new(LocalBackend::new(MockTpmState::new(0)));
        assert!(matches!(dev.process_queue(), Err(DeviceError::NotActivated)));
        assert_eq!(dev.counters(), DeviceCounters::default());
    }

    #[test]
    fn activate_twice() {
        let mut h = harness();
        let mem = GuestMemory::new(1 << 20);
        let q = Virtqueue::new(QueueLayout::contiguous(16, 0x1000).unwrap());
        assert!(matches!(
            h.dev.activate(mem, q, Box::new(|| {})),
            Err(DeviceError::AlreadyActivated)
        ));
    }

    #[test]
    fn startup_via_queue_matches_direct() {
        let mut h = harness();
        let cmd = encode_command(CommandCode::Startup, &[0, 0]).unwrap();
        let direct = MockTpmState::new(3).execute_frame(&cmd);
        let head = h.drv.submit(&cmd, 4096).unwrap();
        assert_eq!(h.dev.process_queue().unwrap(), 1);
        let c = h.drv.poll_used().unwrap().unwrap();
        assert_eq!(c.head, head);
        assert_eq!(c.len, 10);
        assert_eq!(c.len as usize, direct.len());
        assert_eq!(c.data, direct);
        assert_eq!(wire::decode_response(&c.data).unwrap().rc, 0);
        assert_eq!(h.signals.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn small_writable_buffer_truncates() {
        let mut h = harness();
        h.drv.submit(&encode_command(CommandCode::SelfTest, &[]).unwrap(), 4).unwrap();
        h.dev.process_queue().unwrap();
        let c = h.drv.poll_used().unwrap().unwrap();
        assert_eq!(c.len, 0);
        assert_eq!(h.dev.counters().truncations, 1);
        assert_eq!(h.dev.counters().responses, 0);
    }

    #[test]
    fn empty_queue_does_not_signal() {
        let mut h = harness();
        assert_eq!(h.dev.process_queue().unwrap(), 0);
        assert_eq!(h.signals.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn batch_signals_once() {
        let mut h = harness();
        for _ in 0..5 {
            h.drv.submit(&encode_command(CommandCode::SelfTest, &[]).unwrap(), 64).unwrap();
        }
        assert_eq!(h.dev.process_queue().unwrap(), 5);
        assert_eq!(h.signals.load(Ordering::SeqCst), 1);
        assert_eq!(h.dev.counters().requests, 5);
    }

    #[test]
    fn malformed_command_gets_rc_value() {
        let mut h = harness();
        h.drv.submit(&[0x80, 0x01, 0, 0, 0, 0x20], 64).unwrap();
        h.dev.process_queue().unwrap();
        let c = h.drv.poll_used().unwrap().unwrap();
        assert_eq!(wire::decode_response(&c.data).unwrap().rc, RC_VALUE);
        assert_eq!(h.dev.counters().errors, 1);
        assert!(h.dev.failure().is_none());
    }

    #[test]
    fn backend_failure_is_sticky() {
        let mem = GuestMemory::new(1 << 22);
        let layout = QueueLayout::contiguous(16, 0x1000).unwrap();
        let mut drv = GuestDriver::new(mem.clone(), layout, 0x10_0000).unwrap();
        let mut dev = VtpmDevice::new(Broken);
        dev.activate(mem.clone(), Virtqueue::new(layout), Box::new(|| {})).unwrap();
        let cmd = encode_command(CommandCode::SelfTest, &[]).unwrap();
        drv.submit(&cmd, 64).unwrap();
        drv.submit(&cmd, 64).unwrap();
        assert_eq!(dev.process_queue().unwrap(), 2);
        assert!(dev.failure().is_some());
        assert_eq!(drv.poll_used().unwrap().unwrap().len, 0);
        assert_eq!(drv.poll_used().unwrap().unwrap().len, 0);
        assert_eq!(dev.counters().errors, 2);
        assert_eq!(dev.counters().responses, 0);
        let (mem, q) = dev.reset().unwrap();
        assert!(dev.failure().is_none());
        dev.activate(mem, q, Box::new(|| {})).unwrap();
    }
}
