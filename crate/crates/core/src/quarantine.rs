//! Use-after-free tripwires: a FIFO quarantine of freed objects whose
//! leading bytes are canary-filled until the object is handed back to the
//! allocator.

use std::collections::{BTreeMap, VecDeque};

use crate::bitmap::CanaryBitmap;
use crate::heap::{ObjectBounds, VirtualHeap};
use crate::memory::{MemoryImage, VirtualAddress};
use crate::overflow::{byte_mask, CorruptedWord, DoubleFree, OverflowEvidence};
use crate::trace::CallStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuarantineLimits {
    pub max_bytes: u64,
    pub max_count: u64,
    pub fill_prefix: u64,
}

impl Default for QuarantineLimits {
    fn default() -> Self {
        QuarantineLimits { max_bytes: 16 << 20, max_count: 1024, fill_prefix: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuarantineEntry {
    pub payload: VirtualAddress,
    pub capacity: u64,
    pub requested: u64,
    pub free_event: usize,
    pub free_stack: CallStack,
}

/// Corrupted canaries found inside one quarantined object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UafFinding {
    pub entry: QuarantineEntry,
    pub words: Vec<CorruptedWord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UafEvidence {
    pub findings: Vec<UafFinding>,
}

impl UafEvidence {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &CorruptedWord> {
        self.findings.iter().flat_map(|f| f.words.iter())
    }

    pub fn merge(&mut self, other: UafEvidence) {
        for finding in other.findings {
            match self.findings.iter_mut().find(|f| f.entry.payload == finding.entry.payload) {
                Some(f) => {
                    f.words.extend(finding.words);
                    f.words.sort();
                    f.words.dedup_by_key(|w| w.addr);
                }
                None => self.findings.push(finding),
            }
        }
        self.findings.sort_by_key(|f| f.entry.payload);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuarantineQueue {
    order: VecDeque<VirtualAddress>,
    entries: BTreeMap<VirtualAddress, QuarantineEntry>,
    total_bytes: u64,
    limits: QuarantineLimits,
    canary: u8,
}

impl QuarantineQueue {
    pub fn new(limits: QuarantineLimits, canary: u8) -> Self {
        QuarantineQueue { order: VecDeque::new(), entries: BTreeMap::new(), total_bytes: 0, limits, canary }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn limits(&self) -> QuarantineLimits {
        self.limits
    }

    pub fn contains(&self, payload: VirtualAddress) -> bool {
        self.entries.contains_key(&payload)
    }

    pub fn entry(&self, payload: VirtualAddress) -> Option<&QuarantineEntry> {
        self.entries.get(&payload)
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &QuarantineEntry> {
        self.order.iter().map(|p| &self.entries[p])
    }

    pub fn prefix_len(&self, capacity: u64) -> u64 {
        self.limits.fill_prefix.min(capacity)
    }

    /// The quarantined entry whose canaried prefix contains `addr`.
    pub fn entry_for(&self, addr: VirtualAddress) -> Option<&QuarantineEntry> {
        let (_, entry) = self.entries.range(..=addr).next_back()?;
        (addr < entry.payload + self.prefix_len(entry.capacity)).then_some(entry)
    }

    /// Moves a live object into quarantine: clears its allocated bit,
    /// canaries its prefix, then evicts until both thresholds hold. Returns
    /// evidence from any evicted object whose canaries were disturbed.
    pub fn quarantine_on_free(
        &mut self,
        image: &mut MemoryImage,
        bitmap: &mut CanaryBitmap,
        heap: &mut VirtualHeap,
        bounds: &ObjectBounds,
        free_event: usize,
        free_stack: CallStack,
    ) -> Result<UafEvidence, DoubleFree> {
        if !bounds.header.allocated || self.contains(bounds.payload) {
            return Err(DoubleFree { payload: bounds.payload });
        }
        let mut header = bounds.header;
        header.allocated = false;
        heap.write_header(image, &bounds.slot, &header);

        let prefix_end = bounds.payload + self.prefix_len(bounds.capacity);
        bitmap.clear_full_words(bounds.payload, bounds.slot.end());
        image.fill(bounds.payload, prefix_end.get() - bounds.payload.get(), self.canary).expect("payload is inside the heap");
        bitmap.set_full_words(bounds.payload, prefix_end);

        self.order.push_back(bounds.payload);
        self.entries.insert(
            bounds.payload,
            QuarantineEntry {
                payload: bounds.payload,
                capacity: bounds.capacity,
                requested: header.requested_size,
                free_event,
                free_stack,
            },
        );
        self.total_bytes += bounds.capacity;

        let mut evidence = UafEvidence::default();
        while self.order.len() as u64 > self.limits.max_count || self.total_bytes > self.limits.max_bytes {
            let Some(oldest) = self.order.pop_front() else { break };
            let entry = self.entries.remove(&oldest).expect("ordered entry is indexed");
            self.total_bytes -= entry.capacity;
            evidence.merge(self.verify_and_release(image, bitmap, heap, entry));
        }
        Ok(evidence)
    }

    /// Verifies an evicted entry's prefix and hands the slot back to the
    /// allocator. Corruption is returned as evidence; the slot is released
    /// either way, since detection rolls the whole epoch back.
    pub fn verify_and_release(
        &self,
        image: &mut MemoryImage,
        bitmap: &mut CanaryBitmap,
        heap: &mut VirtualHeap,
        entry: QuarantineEntry,
    ) -> UafEvidence {
        let prefix_end = entry.payload + self.prefix_len(entry.capacity);
        let bytes = image.read_bytes(entry.payload, prefix_end.get() - entry.payload.get()).expect("payload is inside the heap");
        let mut words: Vec<CorruptedWord> = Vec::new();
        for (i, &b) in bytes.iter().enumerate() {
            let word = (entry.payload + i as u64).word_aligned();
            if b != self.canary && words.last().map(|w| w.addr) != Some(word) {
                words.push(CorruptedWord {
                    addr: word,
                    mask: byte_mask(word, entry.payload, prefix_end),
                    owner: Some(entry.payload),
                });
            }
        }
        bitmap.clear_full_words(entry.payload, prefix_end);
        heap.release_slot(image, entry.payload).expect("quarantined slot is releasable");
        if words.is_empty() {
            UafEvidence::default()
        } else {
            UafEvidence { findings: vec![UafFinding { entry, words }] }
        }
    }

    /// Splits epoch-scan evidence: words inside a quarantined prefix are
    /// use-after-free evidence, everything else stays overflow evidence.
    pub fn epoch_check(&self, scan: OverflowEvidence) -> (UafEvidence, OverflowEvidence) {
        let mut uaf = UafEvidence::default();
        let mut rest = OverflowEvidence::default();
        for word in scan.words {
            match self.entry_for(word.addr) {
                Some(entry) => uaf.merge(UafEvidence {
                    findings: vec![UafFinding { entry: entry.clone(), words: vec![word] }],
                }),
                None => rest.words.push(word),
            }
        }
        (uaf, rest)
    }
}
