//! Heap buffer overflow tripwires.
//!
//! Every slot's guard word holds canary bytes, and the unrequested tail
//! `[requested, capacity)` of each live object is canary-filled. Fully
//! canaried words are tracked in the [`CanaryBitmap`]; leftover partial
//! words are filled but only verified byte-wise when the object is freed.

use crate::bitmap::{CanaryBitmap, TraversalCost};
use crate::heap::{Allocation, ObjectBounds, Slot, VirtualHeap, GUARD_BYTES};
use crate::memory::{MemoryImage, VirtualAddress, WORD_SIZE};

/// One corrupted canary word. `mask` selects the canary bytes inside the
/// word (bit `i` is byte `addr + i`); it is `0xff` for bitmap-tracked words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CorruptedWord {
    pub addr: VirtualAddress,
    pub mask: u8,
    /// Payload of the slot the word belongs to, if it belongs to one.
    pub owner: Option<VirtualAddress>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OverflowEvidence {
    pub words: Vec<CorruptedWord>,
}

impl OverflowEvidence {
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Raised when a free finds the object already freed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DoubleFree {
    pub payload: VirtualAddress,
}

/// Operation counts for one epoch-end scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub traversal: TraversalCost,
    pub comparisons: u64,
}

/// Mask of the bytes of the word at `word` that fall inside `[start, end)`.
pub fn byte_mask(word: VirtualAddress, start: VirtualAddress, end: VirtualAddress) -> u8 {
    (0..WORD_SIZE).filter(|i| (start..end).contains(&(word + *i))).fold(0u8, |m, i| m | (1 << i))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverflowDetector {
    canary: u8,
}

impl OverflowDetector {
    pub fn new(canary: u8) -> Self {
        OverflowDetector { canary }
    }

    pub fn canary_byte(&self) -> u8 {
        self.canary
    }

    pub fn canary_word(&self) -> u64 {
        u64::from_ne_bytes([self.canary; 8])
    }

    fn plant_guard(&self, image: &mut MemoryImage, bitmap: &mut CanaryBitmap, guard: VirtualAddress) {
        image.fill(guard, GUARD_BYTES, self.canary).expect("guard word is inside the heap");
        bitmap.set(guard);
    }

    /// Plants tripwires for a newly handed-out slot. Guards are planted once
    /// when a slot is first carved (the guard after it becomes the new
    /// frontier), so a reused slot never erases pending guard evidence.
    pub fn plant_on_alloc(
        &self,
        image: &mut MemoryImage,
        bitmap: &mut CanaryBitmap,
        allocation: &Allocation,
        requested: u64,
    ) {
        let slot = allocation.slot;
        if allocation.fresh {
            if !bitmap.is_set(slot.guard()) {
                self.plant_guard(image, bitmap, slot.guard());
            }
            self.plant_guard(image, bitmap, slot.end());
        }
        bitmap.clear_full_words(slot.payload(), slot.end());
        let tail = slot.payload() + requested;
        image.fill(tail, slot.capacity - requested, self.canary).expect("payload is inside the heap");
        bitmap.set_full_words(tail, slot.end());
    }

    /// Free-time check. Objects with unrequested tail bytes have the tail
    /// verified byte-wise plus the following guard word; exact power-of-two
    /// objects are left to the epoch-end scan.
    pub fn check_on_free(
        &self,
        image: &MemoryImage,
        bitmap: &CanaryBitmap,
        heap: &VirtualHeap,
        bounds: &ObjectBounds,
    ) -> Result<OverflowEvidence, DoubleFree> {
        if !bounds.header.allocated {
            return Err(DoubleFree { payload: bounds.payload });
        }
        let mut evidence = OverflowEvidence::default();
        let requested = bounds.header.requested_size;
        if requested >= bounds.capacity {
            return Ok(evidence);
        }
        let tail = bounds.payload + requested;
        let end = bounds.slot.end();
        let bytes = image.read_bytes(tail, bounds.capacity - requested).expect("payload is inside the heap");
        let mut last: Option<VirtualAddress> = None;
        for (i, &b) in bytes.iter().enumerate() {
            let word = (tail + i as u64).word_aligned();
            if b != self.canary && last != Some(word) {
                last = Some(word);
                evidence.words.push(CorruptedWord {
                    addr: word,
                    mask: byte_mask(word, tail, end),
                    owner: Some(bounds.payload),
                });
            }
        }
        if bitmap.is_set(end) && image.read_u64(end).ok() != Some(self.canary_word()) {
            evidence.words.push(CorruptedWord { addr: end, mask: 0xff, owner: heap.slot_at(end).map(|s| s.payload()) });
        }
        Ok(evidence)
    }

    /// Compares every bitmap-tracked word against the canary value.
    pub fn epoch_scan(&self, image: &MemoryImage, bitmap: &CanaryBitmap, heap: &VirtualHeap) -> (OverflowEvidence, ScanStats) {
        let expected = self.canary_word();
        let mut evidence = OverflowEvidence::default();
        let mut comparisons = 0u64;
        let traversal = bitmap.for_each_set(|addr| {
            comparisons += 1;
            if image.read_u64(addr).ok() != Some(expected) {
                evidence.words.push(CorruptedWord { addr, mask: 0xff, owner: heap.slot_at(addr).map(|s| s.payload()) });
            }
        });
        (evidence, ScanStats { traversal, comparisons })
    }

    /// Rewrites the canary bytes of a word after its corruption has been
    /// reported, so the location keeps working as a tripwire.
    pub fn replant(&self, image: &mut MemoryImage, word: &CorruptedWord) {
        for i in 0..WORD_SIZE {
            if word.mask & (1 << i) != 0 {
                let _ = image.fill(word.addr + i, 1, self.canary);
            }
        }
    }
}

/// Whether the byte at `addr` is currently a canary location: inside a
/// bitmap-tracked word, or in the unrequested tail of a live object.
pub fn is_canary_location(image: &MemoryImage, bitmap: &CanaryBitmap, heap: &VirtualHeap, addr: VirtualAddress) -> bool {
    if bitmap.is_set(addr.word_aligned()) {
        return true;
    }
    heap.slot_at(addr).is_some_and(|slot: Slot| {
        let header = heap.header(image, &slot);
        header.allocated && addr >= slot.payload() + header.requested_size && addr < slot.end()
    })
}

/// Recomputes the bitmap contents from heap metadata alone: guard words
/// (including each class frontier), full tail words of live objects, and
/// the full words of each quarantined prefix.
pub fn expected_canary_words(
    image: &MemoryImage,
    heap: &VirtualHeap,
    quarantined: impl Fn(VirtualAddress) -> Option<u64>,
    overflow_enabled: bool,
) -> Vec<VirtualAddress> {
    let mut out = Vec::new();
    let push_full = |out: &mut Vec<VirtualAddress>, start: VirtualAddress, end: VirtualAddress| {
        let mut w = start.get().next_multiple_of(WORD_SIZE);
        while w + WORD_SIZE <= end.get() {
            out.push(VirtualAddress(w));
            w += WORD_SIZE;
        }
    };
    for slot in heap.carved_slots() {
        if overflow_enabled {
            out.push(slot.guard());
        }
        let header = heap.header(image, &slot);
        if header.allocated {
            if overflow_enabled {
                push_full(&mut out, slot.payload() + header.requested_size, slot.end());
            }
        } else if let Some(prefix) = quarantined(slot.payload()) {
            push_full(&mut out, slot.payload(), slot.payload() + prefix.min(slot.capacity));
        }
    }
    if overflow_enabled {
        out.extend(heap.frontier_guards());
    }
    out.sort();
    out.dedup();
    out
}
