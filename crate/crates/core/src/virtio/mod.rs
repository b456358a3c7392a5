// SPDX-License-Identifier: Apache-2.0

//! Split-ring virtqueue over simulated guest memory.

pub mod driver;
pub mod memory;
pub mod queue;

pub use driver::{Completion, DriverError, GuestDriver};
pub use memory::{GuestMemory, MemoryError};
pub use queue::{Corruption, Descriptor, DescriptorChain, QueueError, QueueLayout, Virtqueue, DEFAULT_QUEUE_SIZE};
