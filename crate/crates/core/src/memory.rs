//! The modeled program's writable memory.
//!
//! The heap region is large (256 MiB by default) but sparsely touched, so it
//! is backed by lazily materialized pages. Untouched pages read as zero.
//! Snapshots clone only what has been materialized.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::HeapGeometry;
use crate::error::Fault;

pub const PAGE_SIZE: usize = 4096;
pub const WORD_SIZE: u64 = 8;

/// An address in the modeled address space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualAddress(pub u64);

impl VirtualAddress {
    pub const fn new(value: u64) -> Self {
        VirtualAddress(value)
    }

    pub const fn get(self) -> u64 {
        self.0
    }

    pub const fn word_aligned(self) -> Self {
        VirtualAddress(self.0 & !(WORD_SIZE - 1))
    }

    pub fn offset(self, delta: i64) -> Self {
        VirtualAddress(self.0.wrapping_add_signed(delta))
    }
}

impl Add<u64> for VirtualAddress {
    type Output = VirtualAddress;

    fn add(self, rhs: u64) -> Self::Output {
        VirtualAddress(self.0.wrapping_add(rhs))
    }
}

impl Sub<u64> for VirtualAddress {
    type Output = VirtualAddress;

    fn sub(self, rhs: u64) -> Self::Output {
        VirtualAddress(self.0.wrapping_sub(rhs))
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#012x}", self.0)
    }
}

/// SHA-256 digest of a memory image.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateHash(pub [u8; 32]);

impl fmt::Display for StateHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for StateHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateHash({self})")
    }
}

type Page = Box<[u8; PAGE_SIZE]>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Heap,
    Globals,
}

#[derive(Clone)]
pub struct MemoryImage {
    heap_base: u64,
    heap_size: u64,
    pages: Vec<Option<Page>>,
    globals_base: u64,
    globals: Vec<u8>,
}

impl fmt::Debug for MemoryImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryImage")
            .field("heap_base", &VirtualAddress(self.heap_base))
            .field("heap_size", &self.heap_size)
            .field("materialized_pages", &self.materialized_pages())
            .field("globals_base", &VirtualAddress(self.globals_base))
            .finish()
    }
}

impl MemoryImage {
    pub fn new(geometry: &HeapGeometry) -> Self {
        let page_count = (geometry.heap_size as usize).div_ceil(PAGE_SIZE);
        MemoryImage {
            heap_base: geometry.heap_base,
            heap_size: geometry.heap_size,
            pages: vec![None; page_count],
            globals_base: geometry.globals_base,
            globals: vec![0; (geometry.globals_words * WORD_SIZE) as usize],
        }
    }

    pub fn heap_base(&self) -> VirtualAddress {
        VirtualAddress(self.heap_base)
    }

    pub fn globals_base(&self) -> VirtualAddress {
        VirtualAddress(self.globals_base)
    }

    pub fn globals_words(&self) -> u64 {
        self.globals.len() as u64 / WORD_SIZE
    }

    pub fn materialized_pages(&self) -> usize {
        self.pages.iter().filter(|p| p.is_some()).count()
    }

    pub fn in_heap(&self, addr: VirtualAddress) -> bool {
        addr.0 >= self.heap_base && addr.0 - self.heap_base < self.heap_size
    }

    fn region(&self, addr: VirtualAddress, len: u64) -> Result<Region, Fault> {
        let fault = Fault { addr, len };
        let end = addr.0.checked_add(len).ok_or(fault)?;
        if addr.0 >= self.heap_base && end <= self.heap_base + self.heap_size {
            Ok(Region::Heap)
        } else if addr.0 >= self.globals_base && end <= self.globals_base + self.globals.len() as u64 {
            Ok(Region::Globals)
        } else {
            Err(fault)
        }
    }

    pub fn is_mapped(&self, addr: VirtualAddress, len: u64) -> bool {
        self.region(addr, len).is_ok()
    }

    /// Applies `f` to each maximal in-page chunk of a heap range.
    fn heap_chunks(&self, addr: u64, len: u64, mut f: impl FnMut(usize, usize, usize, usize)) {
        let mut offset = (addr - self.heap_base) as usize;
        let mut remaining = len as usize;
        let mut done = 0usize;
        while remaining > 0 {
            let page = offset / PAGE_SIZE;
            let in_page = offset % PAGE_SIZE;
            let n = remaining.min(PAGE_SIZE - in_page);
            f(page, in_page, n, done);
            offset += n;
            done += n;
            remaining -= n;
        }
    }

    fn page_mut(&mut self, page: usize) -> &mut [u8; PAGE_SIZE] {
        self.pages[page].get_or_insert_with(|| Box::new([0u8; PAGE_SIZE]))
    }

    pub fn fill(&mut self, addr: VirtualAddress, len: u64, byte: u8) -> Result<(), Fault> {
        match self.region(addr, len)? {
            Region::Globals => {
                let start = (addr.0 - self.globals_base) as usize;
                self.globals[start..start + len as usize].fill(byte);
            }
            Region::Heap => {
                let mut chunks = Vec::new();
                self.heap_chunks(addr.0, len, |page, at, n, _| chunks.push((page, at, n)));
                for (page, at, n) in chunks {
                    if byte == 0 && self.pages[page].is_none() {
                        continue;
                    }
                    self.page_mut(page)[at..at + n].fill(byte);
                }
            }
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, addr: VirtualAddress, bytes: &[u8]) -> Result<(), Fault> {
        let len = bytes.len() as u64;
        match self.region(addr, len)? {
            Region::Globals => {
                let start = (addr.0 - self.globals_base) as usize;
                self.globals[start..start + bytes.len()].copy_from_slice(bytes);
            }
            Region::Heap => {
                let mut chunks = Vec::new();
                self.heap_chunks(addr.0, len, |page, at, n, done| chunks.push((page, at, n, done)));
                for (page, at, n, done) in chunks {
                    self.page_mut(page)[at..at + n].copy_from_slice(&bytes[done..done + n]);
                }
            }
        }
        Ok(())
    }

    pub fn read_into(&self, addr: VirtualAddress, out: &mut [u8]) -> Result<(), Fault> {
        match self.region(addr, out.len() as u64)? {
            Region::Globals => {
                let start = (addr.0 - self.globals_base) as usize;
                out.copy_from_slice(&self.globals[start..start + out.len()]);
            }
            Region::Heap => self.heap_chunks(addr.0, out.len() as u64, |page, at, n, done| match &self.pages[page] {
                Some(p) => out[done..done + n].copy_from_slice(&p[at..at + n]),
                None => out[done..done + n].fill(0),
            }),
        }
        Ok(())
    }

    pub fn read_bytes(&self, addr: VirtualAddress, len: u64) -> Result<Vec<u8>, Fault> {
        self.region(addr, len)?;
        let mut out = vec![0u8; len as usize];
        self.read_into(addr, &mut out)?;
        Ok(out)
    }

    pub fn read_u64(&self, addr: VirtualAddress) -> Result<u64, Fault> {
        let mut buf = [0u8; 8];
        self.read_into(addr, &mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write_u64(&mut self, addr: VirtualAddress, value: u64) -> Result<(), Fault> {
        self.write_bytes(addr, &value.to_le_bytes())
    }

    /// Reads one byte; unmapped addresses read as zero.
    pub fn byte(&self, addr: VirtualAddress) -> u8 {
        let mut b = [0u8; 1];
        self.read_into(addr, &mut b).map(|_| b[0]).unwrap_or(0)
    }

    /// Word values of the globals region, in address order.
    pub fn global_words(&self) -> impl Iterator<Item = (VirtualAddress, u64)> + '_ {
        self.globals.chunks_exact(8).enumerate().map(|(i, w)| {
            let addr = VirtualAddress(self.globals_base + i as u64 * WORD_SIZE);
            (addr, u64::from_le_bytes(w.try_into().expect("eight-byte chunk")))
        })
    }

    /// Digest of the logical contents: all-zero pages hash the same as
    /// pages that were never touched.
    pub fn state_hash(&self) -> StateHash {
        let mut hasher = Sha256::new();
        hasher.update(b"heap");
        hasher.update(self.heap_base.to_le_bytes());
        hasher.update(self.heap_size.to_le_bytes());
        for (index, page) in self.pages.iter().enumerate() {
            if let Some(page) = page {
                if page.iter().any(|&b| b != 0) {
                    hasher.update((index as u64).to_le_bytes());
                    hasher.update(&page[..]);
                }
            }
        }
        hasher.update(b"globals");
        hasher.update(self.globals_base.to_le_bytes());
        hasher.update(&self.globals);
        StateHash(hasher.finalize().into())
    }
}
