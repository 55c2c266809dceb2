//! Shadow bitmap of canary locations: one bit per eight-byte heap word.

use std::fmt;

use crate::memory::{VirtualAddress, PAGE_SIZE, WORD_SIZE};

const BITS_PER_CHUNK: usize = PAGE_SIZE / WORD_SIZE as usize;
const CHUNK_WORDS: usize = BITS_PER_CHUNK / 64;

type Chunk = Box<[u64; CHUNK_WORDS]>;

#[derive(Clone)]
pub struct CanaryBitmap {
    base: u64,
    size: u64,
    chunks: Vec<Option<Chunk>>,
    set_bits: usize,
}

/// Work done by one traversal of the bitmap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraversalCost {
    /// 64-bit bitmap words examined.
    pub bitmap_words: u64,
    /// Set bits yielded, i.e. canary words the caller will compare.
    pub set_bits: u64,
}

impl CanaryBitmap {
    pub fn new(heap_base: VirtualAddress, heap_size: u64) -> Self {
        let chunks = (heap_size as usize).div_ceil(PAGE_SIZE);
        CanaryBitmap { base: heap_base.get(), size: heap_size, chunks: vec![None; chunks], set_bits: 0 }
    }

    fn locate(&self, addr: VirtualAddress) -> Option<(usize, usize, u64)> {
        let offset = addr.get().checked_sub(self.base)?;
        if offset >= self.size {
            return None;
        }
        let bit = (offset / WORD_SIZE) as usize;
        let chunk = bit / BITS_PER_CHUNK;
        let in_chunk = bit % BITS_PER_CHUNK;
        Some((chunk, in_chunk / 64, 1u64 << (in_chunk % 64)))
    }

    /// Marks the word containing `addr`. Returns true if it was clear.
    pub fn set(&mut self, addr: VirtualAddress) -> bool {
        let Some((chunk, word, mask)) = self.locate(addr) else { return false };
        let bits = self.chunks[chunk].get_or_insert_with(|| Box::new([0; CHUNK_WORDS]));
        let was_clear = bits[word] & mask == 0;
        bits[word] |= mask;
        if was_clear {
            self.set_bits += 1;
        }
        was_clear
    }

    /// Clears the word containing `addr`. Returns true if it was set.
    pub fn clear(&mut self, addr: VirtualAddress) -> bool {
        let Some((chunk, word, mask)) = self.locate(addr) else { return false };
        let Some(bits) = self.chunks[chunk].as_mut() else { return false };
        let was_set = bits[word] & mask != 0;
        bits[word] &= !mask;
        if was_set {
            self.set_bits -= 1;
        }
        was_set
    }

    pub fn is_set(&self, addr: VirtualAddress) -> bool {
        match self.locate(addr) {
            Some((chunk, word, mask)) => self.chunks[chunk].as_ref().is_some_and(|b| b[word] & mask != 0),
            None => false,
        }
    }

    /// Clears every word that lies entirely inside `[start, end)`.
    pub fn clear_full_words(&mut self, start: VirtualAddress, end: VirtualAddress) {
        let mut w = start.get().next_multiple_of(WORD_SIZE);
        while w + WORD_SIZE <= end.get() {
            self.clear(VirtualAddress(w));
            w += WORD_SIZE;
        }
    }

    /// Sets every word that lies entirely inside `[start, end)`.
    pub fn set_full_words(&mut self, start: VirtualAddress, end: VirtualAddress) {
        let mut w = start.get().next_multiple_of(WORD_SIZE);
        while w + WORD_SIZE <= end.get() {
            self.set(VirtualAddress(w));
            w += WORD_SIZE;
        }
    }

    pub fn count(&self) -> usize {
        self.set_bits
    }

    /// Calls `f` with the address of every set word, in address order,
    /// skipping zero bitmap words whole.
    pub fn for_each_set(&self, mut f: impl FnMut(VirtualAddress)) -> TraversalCost {
        let mut cost = TraversalCost::default();
        for (c, chunk) in self.chunks.iter().enumerate() {
            let Some(bits) = chunk else { continue };
            for (w, &word) in bits.iter().enumerate() {
                cost.bitmap_words += 1;
                let mut rest = word;
                while rest != 0 {
                    let bit = rest.trailing_zeros() as u64;
                    rest &= rest - 1;
                    let index = (c * BITS_PER_CHUNK + w * 64) as u64 + bit;
                    cost.set_bits += 1;
                    f(VirtualAddress(self.base + index * WORD_SIZE));
                }
            }
        }
        cost
    }

    pub fn set_addresses(&self) -> Vec<VirtualAddress> {
        let mut out = Vec::with_capacity(self.set_bits);
        self.for_each_set(|a| out.push(a));
        out
    }
}

impl PartialEq for CanaryBitmap {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base && self.size == other.size && self.set_addresses() == other.set_addresses()
    }
}

impl Eq for CanaryBitmap {}

impl fmt::Debug for CanaryBitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CanaryBitmap").field("base", &VirtualAddress(self.base)).field("set_bits", &self.set_bits).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    const BASE: u64 = 0x1_0000_0000;

    #[test]
    fn set_clear_count() {
        let mut b = CanaryBitmap::new(VirtualAddress(BASE), 1 << 20);
        assert!(b.set(VirtualAddress(BASE + 13)));
        assert!(!b.set(VirtualAddress(BASE + 8)));
        assert!(b.is_set(VirtualAddress(BASE + 15)));
        assert_eq!(b.count(), 1);
        assert!(!b.set(VirtualAddress(BASE - 8)));
        assert!(b.clear(VirtualAddress(BASE + 8)));
        assert_eq!(b.count(), 0);
    }

    #[test]
    fn full_word_ranges_skip_partials() {
        let mut b = CanaryBitmap::new(VirtualAddress(BASE), 1 << 20);
        b.set_full_words(VirtualAddress(BASE + 20), VirtualAddress(BASE + 32));
        assert_eq!(b.set_addresses(), vec![VirtualAddress(BASE + 24)]);
        b.set_full_words(VirtualAddress(BASE + 64), VirtualAddress(BASE + 88));
        b.clear_full_words(VirtualAddress(BASE + 60), VirtualAddress(BASE + 80));
        assert_eq!(b.set_addresses(), vec![VirtualAddress(BASE + 24), VirtualAddress(BASE + 80)]);
    }

    proptest! {
        #[test]
        fn traversal_matches_set_model(ops in proptest::collection::vec((any::<bool>(), 0u64..40_000), 0..300)) {
            let mut b = CanaryBitmap::new(VirtualAddress(BASE), 1 << 20);
            let mut model = BTreeSet::new();
            for (on, word) in ops {
                let a = VirtualAddress(BASE + word * 8);
                if on { b.set(a); model.insert(a); } else { b.clear(a); model.remove(&a); }
            }
            let seen = b.set_addresses();
            prop_assert_eq!(&seen, &model.iter().copied().collect::<Vec<_>>());
            prop_assert_eq!(b.count(), model.len());
            let cost = b.for_each_set(|_| {});
            prop_assert_eq!(cost.set_bits as usize, model.len());
        }
    }
}
