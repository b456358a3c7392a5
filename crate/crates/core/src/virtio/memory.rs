// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MemoryError {
    #[error("guest access of {len} bytes at {addr:#x} is outside the {size:#x}-byte region")]
    OutOfBounds { addr: u64, len: u64, size: u64 },
}

/// Flat guest-physical region. Pages are materialized on first write, so a
/// large nominal size costs nothing until touched. Clones share contents.
#[derive(Clone, Debug)]
pub struct GuestMemory {
    inner: Arc<Mutex<SparsePages>>,
    size: u64,
}

#[derive(Debug, Default)]
struct SparsePages {
    pages: HashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl GuestMemory {
    pub fn new(size: u64) -> Self {
        GuestMemory {
            inner: Arc::new(Mutex::new(SparsePages::default())),
            size,
        }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// Bytes actually backed by host allocations.
    pub fn resident_bytes(&self) -> u64 {
        self.lock().pages.len() as u64 * PAGE_SIZE
    }

    pub fn check_range(&self, addr: u64, len: u64) -> Result<(), MemoryError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.size => Ok(()),
            _ => Err(MemoryError::OutOfBounds {
                addr,
                len,
                size: self.size,
            }),
        }
    }

    pub fn read(&self, addr: u64, buf: &mut [u8]) -> Result<(), MemoryError> {
        self.check_range(addr, buf.len() as u64)?;
        let pages = self.lock();
        let mut done = 0usize;
        while done < buf.len() {
            let cur = addr + done as u64;
            let (page, off) = (cur / PAGE_SIZE, (cur % PAGE_SIZE) as usize);
            let n = (PAGE_SIZE as usize - off).min(buf.len() - done);
            match pages.pages.get(&page) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
        Ok(())
    }

    pub fn write(&self, addr: u64, data: &[u8]) -> Result<(), MemoryError> {
        self.check_range(addr, data.len() as u64)?;
        let mut pages = self.lock();
        let mut done = 0usize;
        while done < data.len() {
            let cur = addr + done as u64;
            let (page, off) = (cur / PAGE_SIZE, (cur % PAGE_SIZE) as usize);
            let n = (PAGE_SIZE as usize - off).min(data.len() - done);
            let p = pages
                .pages
                .entry(page)
                .or_insert_with(|| Box::new([0u8; PAGE_SIZE as usize]));
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
        Ok(())
    }

    pub fn read_vec(&self, addr: u64, len: usize) -> Result<Vec<u8>, MemoryError> {
        let mut v = vec![0u8; len];
        self.read(addr, &mut v)?;
        Ok(v)
    }

    pub fn read_u16(&self, addr: u64) -> Result<u16, MemoryError> {
        let mut b = [0u8; 2];
        self.read(addr, &mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn read_u32(&self, addr: u64) -> Result<u32, MemoryError> {
        let mut b = [0u8; 4];
        self.read(addr, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, MemoryError> {
        let mut b = [0u8; 8];
        self.read(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u16(&self, addr: u64, v: u16) -> Result<(), MemoryError> {
        self.write(addr, &v.to_le_bytes())
    }

    pub fn write_u32(&self, addr: u64, v: u32) -> Result<(), MemoryError> {
        self.write(addr, &v.to_le_bytes())
    }

    pub fn write_u64(&self, addr: u64, v: u64) -> Result<(), MemoryError> {
        self.write(addr, &v.to_le_bytes())
    }

    fn lock(&self) -> MutexGuard<'_, SparsePages> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_reads_zero_and_spans_pages() {
        let mem = GuestMemory::new(512 << 20);
        assert_eq!(mem.resident_bytes(), 0);
        assert_eq!(mem.read_vec(0x1000_0000, 8).unwrap(), vec![0; 8]);
        let data: Vec<u8> = (0..=255).collect();
        mem.write(PAGE_SIZE - 100, &data).unwrap();
        assert_eq!(mem.read_vec(PAGE_SIZE - 100, 256).unwrap(), data);
        assert_eq!(mem.resident_bytes(), 2 * PAGE_SIZE);
    }

    #[test]
    fn bounds_are_checked() {
        let mem = GuestMemory::new(0x2000);
        assert!(mem.write(0x1FFF, &[1]).is_ok());
        assert!(matches!(mem.write(0x1FFF, &[1, 2]), Err(MemoryError::OutOfBounds { .. })));
        assert!(mem.read_u64(u64::MAX - 3).is_err());
        assert!(mem.read(0x2000, &mut []).is_ok());
        assert!(mem.read(0x2001, &mut []).is_err());
    }

    #[test]
    fn little_endian_accessors() {
        let mem = GuestMemory::new(0x100);
        mem.write_u32(0x10, 0x0102_0304).unwrap();
        assert_eq!(mem.read_vec(0x10, 4).unwrap(), vec![4, 3, 2, 1]);
        mem.write_u64(0x20, u64::MAX - 1).unwrap();
        assert_eq!(mem.read_u64(0x20).unwrap(), u64::MAX - 1);
        mem.write_u16(0x30, 0xBEEF).unwrap();
        assert_eq!(mem.read_u16(0x30).unwrap(), 0xBEEF);
    }
}
