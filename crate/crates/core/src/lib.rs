// SPDX-License-Identifier: Apache-2.0

//! Virtual TPM support for a simulated microVM.
//!
//! The crate models a virtio TPM device whose single queue is drained
//! synchronously into an swtpm-style backend, a single-use pool of
//! pre-provisioned vTPM instances, a microVM boot simulator and the
//! benchmark harness that compares boot latency and memory overhead across
//! the baseline, on-demand and pooled setups.

pub mod bench;
pub mod device;
pub mod microvm;
pub mod mock_tpm;
pub mod pool;
pub mod swtpm;
pub mod virtio;
pub mod wire;

pub use device::{DeviceCounters, DeviceError, LocalBackend, TpmBackend, VtpmDevice};
pub use microvm::{BootRecord, Setup, VmConfig};
pub use mock_tpm::MockTpmState;
pub use pool::{LocalProvisioner, PoolState, Provisioner, VtpmInstance};
pub use wire::{CommandCode, TpmCommand, TpmResponse, WireError};
