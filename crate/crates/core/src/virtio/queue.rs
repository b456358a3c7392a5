// SPDX-License-Identifier: Apache-2.0

//! Device side of a split virtqueue.

use std::num::Wrapping;

use thiserror::Error;

use super::memory::{GuestMemory, MemoryError};

pub const VIRTQ_DESC_F_NEXT: u16 = 0x1;
pub const VIRTQ_DESC_F_WRITE: u16 = 0x2;

/// addr (le64) + len (le32) + flags (le16) + next (le16).
pub const VIRTQ_DESC_SIZE: u64 = 16;
/// flags (le16) + idx (le16).
pub const VIRTQ_RING_HEADER_SIZE: u64 = 4;
pub const VIRTQ_AVAIL_ELEMENT_SIZE: u64 = 2;
/// id (le32) + len (le32).
pub const VIRTQ_USED_ELEMENT_SIZE: u64 = 8;

pub const DEFAULT_QUEUE_SIZE: u16 = 64;
pub const MAX_QUEUE_SIZE: u16 = 32768;

/// Why a ring was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    /// avail.idx is more than queue_size entries ahead of the device.
    AvailIndex { avail_idx: u16, next_avail: u16 },
    HeadOutOfRange(u16),
    HeadInFlight(u16),
    NextOutOfRange(u16),
    Cycle(u16),
    ChainTooLong,
    DescriptorOutOfBounds(u16),
    ReadableAfterWritable(u16),
    RingOutOfBounds,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum QueueError {
    #[error("queue size {0} is not a power of two in 1..=32768")]
    InvalidSize(u16),
    #[error("{0} ring address is misaligned")]
    Misaligned(&'static str),
    #[error("corrupt ring: {0:?}")]
    CorruptRing(Corruption),
    #[error("descriptor head {0} was already returned to the used ring")]
    DoublePush(u16),
    #[error("descriptor head {0} was never popped")]
    UnknownHead(u16),
    #[error("guest memory: {0}")]
    Memory(#[from] MemoryError),
}

/// Guest addresses of the three ring areas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueLayout {
    pub size: u16,
    pub desc_table: u64,
    pub avail_ring: u64,
    pub used_ring: u64,
}

impl QueueLayout {
    pub fn new(size: u16, desc_table: u64, avail_ring: u64, used_ring: u64) -> Result<Self, QueueError> {
        if size == 0 || !size.is_power_of_two() || size > MAX_QUEUE_SIZE {
            return Err(QueueError::InvalidSize(size));
        }
        if !desc_table.is_multiple_of(16) {
            return Err(QueueError::Misaligned("descriptor table"));
        }
        if !avail_ring.is_multiple_of(2) {
            return Err(QueueError::Misaligned("available"));
        }
        if !used_ring.is_multiple_of(4) {
            return Err(QueueError::Misaligned("used"));
        }
        Ok(QueueLayout {
            size,
            desc_table,
            avail_ring,
            used_ring,
        })
    }

    /// Descriptor table, avail ring and used ring packed back to back from a
    /// 16-byte aligned `base`.
    pub fn contiguous(size: u16, base: u64) -> Result<Self, QueueError> {
        let avail = base + VIRTQ_DESC_SIZE * size as u64;
        let avail_end = avail + Self::avail_bytes(size);
        let used = (avail_end + 3) & !3;
        Self::new(size, base, avail, used)
    }

    /// flags, idx, ring[size], used_event.
    pub fn avail_bytes(size: u16) -> u64 {
        VIRTQ_RING_HEADER_SIZE + VIRTQ_AVAIL_ELEMENT_SIZE * size as u64 + 2
    }

    /// flags, idx, ring[size], avail_event.
    pub fn used_bytes(size: u16) -> u64 {
        VIRTQ_RING_HEADER_SIZE + VIRTQ_USED_ELEMENT_SIZE * size as u64 + 2
    }

    pub fn desc_addr(&self, index: u16) -> u64 {
        self.desc_table + VIRTQ_DESC_SIZE * index as u64
    }

    pub fn avail_idx_addr(&self) -> u64 {
        self.avail_ring + 2
    }

    pub fn avail_entry_addr(&self, slot: u16) -> u64 {
        self.avail_ring + VIRTQ_RING_HEADER_SIZE + VIRTQ_AVAIL_ELEMENT_SIZE * (slot % self.size) as u64
    }

    pub fn used_idx_addr(&self) -> u64 {
        self.used_ring + 2
    }

    pub fn used_entry_addr(&self, slot: u16) -> u64 {
        self.used_ring + VIRTQ_RING_HEADER_SIZE + VIRTQ_USED_ELEMENT_SIZE * (slot % self.size) as u64
    }

    /// Zeroes all three areas.
    pub fn clear(&self, mem: &GuestMemory) -> Result<(), MemoryError> {
        mem.write(self.desc_table, &vec![0; (VIRTQ_DESC_SIZE * self.size as u64) as usize])?;
        mem.write(self.avail_ring, &vec![0; Self::avail_bytes(self.size) as usize])?;
        mem.write(self.used_ring, &vec![0; Self::used_bytes(self.size) as usize])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Descriptor {
    pub addr: u64,
    pub len: u32,
    pub flags: u16,
    pub next: u16,
}

impl Descriptor {
    pub fn is_write_only(&self) -> bool {
        self.flags & VIRTQ_DESC_F_WRITE != 0
    }

    pub fn has_next(&self) -> bool {
        self.flags & VIRTQ_DESC_F_NEXT != 0
    }

    pub fn read_from(mem: &GuestMemory, addr: u64) -> Result<Descriptor, MemoryError> {
        let mut raw = [0u8; VIRTQ_DESC_SIZE as usize];
        mem.read(addr, &mut raw)?;
        Ok(Descriptor {
            addr: u64::from_le_bytes(raw[0..8].try_into().unwrap()),
            len: u32::from_le_bytes(raw[8..12].try_into().unwrap()),
            flags: u16::from_le_bytes(raw[12..14].try_into().unwrap()),
            next: u16::from_le_bytes(raw[14..16].try_into().unwrap()),
        })
    }

    pub fn write_to(&self, mem: &GuestMemory, addr: u64) -> Result<(), MemoryError> {
        let mut raw = [0u8; VIRTQ_DESC_SIZE as usize];
        raw[0..8].copy_from_slice(&self.addr.to_le_bytes());
        raw[8..12].copy_from_slice(&self.len.to_le_bytes());
        raw[12..14].copy_from_slice(&self.flags.to_le_bytes());
        raw[14..16].copy_from_slice(&self.next.to_le_bytes());
        mem.write(addr, &raw)
    }
}

/// A validated chain: every descriptor is in bounds and readable descriptors
/// come first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptorChain {
    pub head: u16,
    pub descriptors: Vec<Descriptor>,
}

impl DescriptorChain {
    pub fn readable(&self) -> impl Iterator<Item = &Descriptor> {
        self.descriptors.iter().filter(|d| !d.is_write_only())
    }

    pub fn writable(&self) -> impl Iterator<Item = &Descriptor> {
        self.descriptors.iter().filter(|d| d.is_write_only())
    }

    pub fn readable_len(&self) -> u64 {
        self.readable().map(|d| d.len as u64).sum()
    }

    pub fn writable_len(&self) -> u64 {
        self.writable().map(|d| d.len as u64).sum()
    }

    /// Gathers all device-readable bytes.
    pub fn read_all(&self, mem: &GuestMemory) -> Result<Vec<u8>, MemoryError> {
        let mut out = Vec::with_capacity(self.readable_len() as usize);
        for d in self.readable() {
            out.extend_from_slice(&mem.read_vec(d.addr, d.len as usize)?);
        }
        Ok(out)
    }

    /// Scatters `data` across the writable descriptors. The caller ensures it
    /// fits.
    pub fn write_all(&self, mem: &GuestMemory, data: &[u8]) -> Result<usize, MemoryError> {
        let mut done = 0usize;
        for d in self.writable() {
            if done == data.len() {
                break;
            }
            let n = (d.len as usize).min(data.len() - done);
            mem.write(d.addr, &data[done..done + n])?;
            done += n;
        }
        Ok(done)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HeadState {
    Idle,
    InFlight,
    Completed,
}

/// Device-side ring cursor. Single-threaded; owned by one device.
#[derive(Clone, Debug)]
pub struct Virtqueue {
    layout: QueueLayout,
    next_avail: Wrapping<u16>,
    next_used: Wrapping<u16>,
    heads: Vec<HeadState>,
}

impl Virtqueue {
    pub fn new(layout: QueueLayout) -> Self {
        Virtqueue {
            layout,
            next_avail: Wrapping(0),
            next_used: Wrapping(0),
            heads: vec![HeadState::Idle; layout.size as usize],
        }
    }

    pub fn layout(&self) -> &QueueLayout {
        &self.layout
    }

    pub fn size(&self) -> u16 {
        self.layout.size
    }

    pub fn next_avail(&self) -> u16 {
        self.next_avail.0
    }

    pub fn next_used(&self) -> u16 {
        self.next_used.0
    }

    /// Heap bytes held by the cursor, for overhead accounting.
    pub fn shadow_bytes(&self) -> usize {
        self.heads.capacity() * std::mem::size_of::<HeadState>()
    }

    /// Returns the next available chain without touching the used ring.
    pub fn pop_chain(&mut self, mem: &GuestMemory) -> Result<Option<DescriptorChain>, QueueError> {
        let corrupt = |c| QueueError::CorruptRing(c);
        let avail_idx = mem
            .read_u16(self.layout.avail_idx_addr())
            .map_err(|_| corrupt(Corruption::RingOutOfBounds))?;
        let pending = Wrapping(avail_idx) - self.next_avail;
        if pending.0 == 0 {
            return Ok(None);
        }
        if pending.0 > self.layout.size {
            return Err(corrupt(Corruption::AvailIndex {
                avail_idx,
                next_avail: self.next_avail.0,
            }));
        }
        let head = mem
            .read_u16(self.layout.avail_entry_addr(self.next_avail.0))
            .map_err(|_| corrupt(Corruption::RingOutOfBounds))?;
        if head >= self.layout.size {
            return Err(corrupt(Corruption::HeadOutOfRange(head)));
        }
        if self.heads[head as usize] == HeadState::InFlight {
            return Err(corrupt(Corruption::HeadInFlight(head)));
        }

        let mut visited = vec![false; self.layout.size as usize];
        let mut descriptors = Vec::new();
        let mut seen_writable = false;
        let mut index = head;
        loop {
            if visited[index as usize] {
                return Err(corrupt(Corruption::Cycle(index)));
            }
            visited[index as usize] = true;
            if descriptors.len() >= self.layout.size as usize {
                return Err(corrupt(Corruption::ChainTooLong));
            }
            let desc = Descriptor::read_from(mem, self.layout.desc_addr(index))
                .map_err(|_| corrupt(Corruption::RingOutOfBounds))?;
            if mem.check_range(desc.addr, desc.len as u64).is_err() {
                return Err(corrupt(Corruption::DescriptorOutOfBounds(index)));
            }
            if desc.is_write_only() {
                seen_writable = true;
            } else if seen_writable {
                return Err(corrupt(Corruption::ReadableAfterWritable(index)));
            }
            descriptors.push(desc);
            if !desc.has_next() {
                break;
            }
            if desc.next >= self.layout.size {
                return Err(corrupt(Corruption::NextOutOfRange(desc.next)));
            }
            index = desc.next;
        }

        self.next_avail += Wrapping(1);
        self.heads[head as usize] = HeadState::InFlight;
        Ok(Some(DescriptorChain { head, descriptors }))
    }

    /// Publishes `{head, written_len}` and bumps used.idx.
    pub fn push_used(&mut self, mem: &GuestMemory, head: u16, written_len: u32) -> Result<(), QueueError> {
        match self.heads.get(head as usize) {
            None | Some(HeadState::Idle) => return Err(QueueError::UnknownHead(head)),
            Some(HeadState::Completed) => return Err(QueueError::DoublePush(head)),
            Some(HeadState::InFlight) => {}
        }
        let entry = self.layout.used_entry_addr(self.next_used.0);
        mem.write_u32(entry, head as u32)?;
        mem.write_u32(entry + 4, written_len)?;
        self.next_used += Wrapping(1);
        mem.write_u16(self.layout.used_idx_addr(), self.next_used.0)?;
        self.heads[head as usize] = HeadState::Completed;
        Ok(())
    }
}
