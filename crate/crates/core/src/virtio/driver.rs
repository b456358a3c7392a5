// SPDX-License-Identifier: Apache-2.0

//! Guest-side submit and completion path, standing in for the guest's
//! virtio-tpm driver.
//!
//! Each request uses a fixed descriptor pair `(2k, 2k + 1)`: a readable
//! command buffer followed by a writable response buffer. Buffers for pair
//! `k` live at `buffer_base + k * SLOT_STRIDE`.

use std::collections::VecDeque;
use std::num::Wrapping;

use thiserror::Error;

use super::memory::{GuestMemory, MemoryError};
use super::queue::{Descriptor, QueueLayout, VIRTQ_DESC_F_NEXT, VIRTQ_DESC_F_WRITE};
use crate::wire::MAX_TPM_FRAME;

/// Command buffer then response buffer, one TPM frame each.
pub const SLOT_STRIDE: u64 = 2 * MAX_TPM_FRAME as u64;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DriverError {
    #[error("no free descriptors")]
    QueueFull,
    #[error("buffer of {0} bytes exceeds a descriptor slot")]
    BufferTooLarge(usize),
    #[error("device completed unknown head {0}")]
    UnexpectedCompletion(u32),
    #[error("device reported {len} bytes for a {capacity}-byte buffer")]
    Overrun { len: u32, capacity: u32 },
    #[error("guest memory: {0}")]
    Memory(#[from] MemoryError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub head: u16,
    pub len: u32,
    pub data: Vec<u8>,
}

#[derive(Debug)]
pub struct GuestDriver {
    mem: GuestMemory,
    layout: QueueLayout,
    buffer_base: u64,
    free_pairs: VecDeque<u16>,
    capacity: Vec<Option<u32>>,
    avail_idx: Wrapping<u16>,
    last_used: Wrapping<u16>,
}

impl GuestDriver {
    /// Zeroes the rings and takes ownership of the buffer area starting at
    /// `buffer_base`.
    pub fn new(mem: GuestMemory, layout: QueueLayout, buffer_base: u64) -> Result<Self, DriverError> {
        layout.clear(&mem)?;
        let pairs = layout.size / 2;
        mem.check_range(buffer_base, SLOT_STRIDE * pairs.max(1) as u64)?;
        Ok(GuestDriver {
            mem,
            layout,
            buffer_base,
            free_pairs: (0..pairs).collect(),
            capacity: vec![None; pairs.max(1) as usize],
            avail_idx: Wrapping(0),
            last_used: Wrapping(0),
        })
    }

    /// Maximum requests in flight: one descriptor pair each.
    pub fn max_in_flight(&self) -> usize {
        (self.layout.size / 2) as usize
    }

    pub fn in_flight(&self) -> usize {
        self.max_in_flight() - self.free_pairs.len()
    }

    /// Buffer area footprint needed for a queue of `size`.
    pub fn buffer_bytes(size: u16) -> u64 {
        SLOT_STRIDE * (size / 2).max(1) as u64
    }

    /// Writes `cmd` into a readable descriptor, reserves `resp_capacity`
    /// writable bytes and publishes the chain. Returns the head index.
    pub fn submit(&mut self, cmd: &[u8], resp_capacity: u32) -> Result<u16, DriverError> {
        if cmd.len() > MAX_TPM_FRAME {
            return Err(DriverError::BufferTooLarge(cmd.len()));
        }
        if resp_capacity as usize > MAX_TPM_FRAME {
            return Err(DriverError::BufferTooLarge(resp_capacity as usize));
        }
        let pair = self.free_pairs.pop_front().ok_or(DriverError::QueueFull)?;
        let head = pair * 2;
        let cmd_addr = self.buffer_base + SLOT_STRIDE * pair as u64;
        let resp_addr = cmd_addr + MAX_TPM_FRAME as u64;

        self.mem.write(cmd_addr, cmd)?;
        Descriptor {
            addr: cmd_addr,
            len: cmd.len() as u32,
            flags: VIRTQ_DESC_F_NEXT,
            next: head + 1,
        }
        .write_to(&self.mem, self.layout.desc_addr(head))?;
        Descriptor {
            addr: resp_addr,
            len: resp_capacity,
            flags: VIRTQ_DESC_F_WRITE,
            next: 0,
        }
        .write_to(&self.mem, self.layout.desc_addr(head + 1))?;

        self.mem.write_u16(self.layout.avail_entry_addr(self.avail_idx.0), head)?;
        self.avail_idx += Wrapping(1);
        self.mem.write_u16(self.layout.avail_idx_addr(), self.avail_idx.0)?;
        self.capacity[pair as usize] = Some(resp_capacity);
        Ok(head)
    }

    /// Takes the next used entry, if any, and frees its descriptors.
    pub fn poll_used(&mut self) -> Result<Option<Completion>, DriverError> {
        let used_idx = self.mem.read_u16(self.layout.used_idx_addr())?;
        if used_idx == self.last_used.0 {
            return Ok(None);
        }
        let entry = self.layout.used_entry_addr(self.last_used.0);
        let id = self.mem.read_u32(entry)?;
        let len = self.mem.read_u32(entry + 4)?;
        let pair = id / 2;
        let capacity = match (id % 2, self.capacity.get(pair as usize).copied().flatten()) {
            (0, Some(c)) => c,
            _ => return Err(DriverError::UnexpectedCompletion(id)),
        };
        if len > capacity {
            return Err(DriverError::Overrun { len, capacity });
        }
        self.last_used += Wrapping(1);
        let resp_addr = self.buffer_base + SLOT_STRIDE * pair as u64 + MAX_TPM_FRAME as u64;
        let data = self.mem.read_vec(resp_addr, len as usize)?;
        self.capacity[pair as usize] = None;
        self.free_pairs.push_back(pair as u16);
        Ok(Some(Completion {
            head: id as u16,
            len,
            data,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::virtio::queue::Virtqueue;

    fn setup(size: u16) -> (GuestMemory, GuestDriver, Virtqueue) {
        let mem = GuestMemory::new(4 << 20);
        let layout = QueueLayout::contiguous(size, 0x1000).unwrap();
        let drv = GuestDriver::new(mem.clone(), layout, 0x10_0000).unwrap();
        (mem, drv, Virtqueue::new(layout))
    }

    #[test]
    fn submit_then_pop_loopback() {
        let (mem, mut drv, mut q) = setup(8);
        let head = drv.submit(b"hello", 16).unwrap();
        let chain = q.pop_chain(&mem).unwrap().unwrap();
        assert_eq!(chain.head, head);
        assert_eq!(chain.read_all(&mem).unwrap(), b"hello");
        assert_eq!(chain.writable_len(), 16);
        chain.write_all(&mem, b"world").unwrap();
        q.push_used(&mem, head, 5).unwrap();
        let c = drv.poll_used().unwrap().unwrap();
        assert_eq!((c.head, c.len, c.data.as_slice()), (head, 5, &b"world"[..]));
        assert_eq!(drv.poll_used().unwrap(), None);
    }

    #[test]
    fn queue_full_after_all_pairs_in_flight() {
        let (_mem, mut drv, _q) = setup(64);
        for _ in 0..drv.max_in_flight() {
            drv.submit(&[1, 2, 3], 8).unwrap();
        }
        assert_eq!(drv.submit(&[1], 8), Err(DriverError::QueueFull));
    }

    #[test]
    fn fifo_ids_over_many_round_trips() {
        let (mem, mut drv, mut q) = setup(16);
        let mut expected = VecDeque::new();
        let mut completed = Vec::new();
        for i in 0..1000u32 {
            expected.push_back(drv.submit(&i.to_le_bytes(), 4).unwrap());
            if drv.in_flight() == drv.max_in_flight() || i % 3 == 0 {
                while let Some(chain) = q.pop_chain(&mem).unwrap() {
                    let body = chain.read_all(&mem).unwrap();
                    chain.write_all(&mem, &body).unwrap();
                    q.push_used(&mem, chain.head, 4).unwrap();
                }
                while let Some(c) = drv.poll_used().unwrap() {
                    assert_eq!(Some(c.head), expected.pop_front());
                    completed.push(u32::from_le_bytes(c.data.try_into().unwrap()));
                }
            }
        }
        while let Some(chain) = q.pop_chain(&mem).unwrap() {
            let body = chain.read_all(&mem).unwrap();
            chain.write_all(&mem, &body).unwrap();
            q.push_used(&mem, chain.head, 4).unwrap();
        }
        while let Some(c) = drv.poll_used().unwrap() {
            assert_eq!(Some(c.head), expected.pop_front());
            completed.push(u32::from_le_bytes(c.data.try_into().unwrap()));
        }
        assert_eq!(completed, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_buffers() {
        let (_mem, mut drv, _q) = setup(8);
        assert_eq!(drv.submit(&[0; 4097], 8), Err(DriverError::BufferTooLarge(4097)));
        assert_eq!(drv.submit(&[0; 4], 4097), Err(DriverError::BufferTooLarge(4097)));
    }
}
