// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the criterion benchmarks.

use vtpm_core::mock_tpm::extend_body;
use vtpm_core::virtio::{GuestDriver, GuestMemory, QueueLayout, Virtqueue};
use vtpm_core::wire::encode_command;
use vtpm_core::{CommandCode, LocalBackend, MockTpmState, VtpmDevice};

pub const QUEUE_BASE: u64 = 0x1000;
pub const BUFFER_BASE: u64 = 0x10000;

pub fn startup_frame() -> Vec<u8> {
    encode_command(CommandCode::Startup, &[0, 0]).unwrap()
}

pub fn extend_frame(index: u32, digest: &[u8; 32]) -> Vec<u8> {
    encode_command(CommandCode::PcrExtendSimple, &extend_body(index, digest)).unwrap()
}

pub fn read_frame(index: u32) -> Vec<u8> {
    encode_command(CommandCode::PcrReadSimple, &index.to_be_bytes()).unwrap()
}

/// A started TPM behind an activated device, plus the guest side of its queue.
pub fn device_pair(queue_size: u16) -> (GuestDriver, VtpmDevice<LocalBackend>) {
    let mem = GuestMemory::new(16 << 20);
    let layout = QueueLayout::contiguous(queue_size, QUEUE_BASE).unwrap();
    let driver = GuestDriver::new(mem.clone(), layout, BUFFER_BASE).unwrap();
    let mut tpm = MockTpmState::new(1);
    tpm.execute_frame(&startup_frame());
    let mut device = VtpmDevice::new(LocalBackend::new(tpm));
    device.activate(mem, Virtqueue::new(layout), Box::new(|| {})).unwrap();
    (driver, device)
}
