//! Conservative reachability scan for leaked heap objects.
//!
//! Marking is breadth-first from the root set (register values and global
//! words). Any word whose value lands inside a carved slot counts as a
//! reference to that slot's object, interior pointers included. Marked and
//! allocated bits live in the object headers.

use std::collections::{BTreeMap, VecDeque};

use crate::heap::VirtualHeap;
use crate::machine::MachineState;
use crate::memory::{MemoryImage, VirtualAddress, WORD_SIZE};
use crate::quarantine::QuarantineQueue;
use crate::replay::{SiteLog, SiteRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct LeakedObject {
    pub payload: VirtualAddress,
    pub requested_size: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LeakEvidence {
    pub leaked: Vec<LeakedObject>,
    /// Freed objects still in quarantine that are reachable from the roots.
    /// Only collected when the dangling option is on.
    pub reachable_freed: Vec<VirtualAddress>,
}

impl LeakEvidence {
    pub fn is_empty(&self) -> bool {
        self.leaked.is_empty() && self.reachable_freed.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MarkStats {
    pub enqueued: u64,
    pub marked: u64,
}

/// Register values followed by every global word.
pub fn root_values(machine: &MachineState, image: &MemoryImage) -> Vec<u64> {
    machine.register_values().chain(image.global_words().map(|(_, v)| v)).collect()
}

/// Marks every object reachable from `roots`.
pub fn mark(
    heap: &VirtualHeap,
    image: &mut MemoryImage,
    roots: impl IntoIterator<Item = u64>,
    quarantine: &QuarantineQueue,
    dangling: bool,
) -> MarkStats {
    let mut stats = MarkStats::default();
    let mut queue: VecDeque<u64> = VecDeque::new();
    for value in roots {
        if heap.in_carved_range(value) {
            queue.push_back(value);
            stats.enqueued += 1;
        }
    }
    let mut buf = Vec::new();
    while let Some(value) = queue.pop_front() {
        let Ok(bounds) = heap.object_bounds(image, VirtualAddress(value)) else { continue };
        let mut header = bounds.header;
        if header.marked {
            continue;
        }
        if !header.allocated {
            if dangling && quarantine.contains(bounds.payload) {
                header.marked = true;
                heap.write_header(image, &bounds.slot, &header);
            }
            continue;
        }
        header.marked = true;
        heap.write_header(image, &bounds.slot, &header);
        stats.marked += 1;

        buf.resize(bounds.capacity as usize, 0);
        image.read_into(bounds.payload, &mut buf).expect("payload is inside the heap");
        for word in buf.chunks_exact(WORD_SIZE as usize) {
            let v = u64::from_le_bytes(word.try_into().expect("eight-byte chunk"));
            if heap.in_carved_range(v) {
                queue.push_back(v);
                stats.enqueued += 1;
            }
        }
    }
    stats
}

/// Collects allocated-but-unmarked objects (and, with `dangling`, marked
/// quarantined ones), then clears every mark.
pub fn sweep(heap: &VirtualHeap, image: &mut MemoryImage, quarantine: &QuarantineQueue, dangling: bool) -> LeakEvidence {
    let mut evidence = LeakEvidence::default();
    let slots: Vec<_> = heap.carved_slots().collect();
    for slot in slots {
        let mut header = heap.header(image, &slot);
        if header.allocated && !header.marked {
            evidence.leaked.push(LeakedObject { payload: slot.payload(), requested_size: header.requested_size });
        }
        if dangling && !header.allocated && header.marked && quarantine.contains(slot.payload()) {
            evidence.reachable_freed.push(slot.payload());
        }
        if header.marked {
            header.marked = false;
            heap.write_header(image, &slot, &header);
        }
    }
    evidence
}

/// Full mark-sweep from the machine's roots.
pub fn scan(
    heap: &VirtualHeap,
    image: &mut MemoryImage,
    machine: &MachineState,
    quarantine: &QuarantineQueue,
    dangling: bool,
) -> LeakEvidence {
    let roots = root_values(machine, image);
    mark(heap, image, roots, quarantine, dangling);
    sweep(heap, image, quarantine, dangling)
}

/// Where each leaked object came from: the last allocation of its address
/// recorded during replay, or `None` when it predates the replayed epoch.
pub fn record_leak_sites(leaked: &[LeakedObject], sites: &SiteLog) -> BTreeMap<VirtualAddress, Option<SiteRecord>> {
    leaked.iter().map(|l| (l.payload, sites.alloc_site(l.payload).cloned())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeapGeometry;
    use crate::quarantine::QuarantineLimits;
    use crate::trace::CallStack;

    struct World {
        heap: VirtualHeap,
        image: MemoryImage,
        machine: MachineState,
        q: QuarantineQueue,
    }

    fn world() -> World {
        let g = HeapGeometry::default();
        World {
            heap: VirtualHeap::new(&g).unwrap(),
            image: MemoryImage::new(&g),
            machine: MachineState::new(),
            q: QuarantineQueue::new(QuarantineLimits::default(), 0xCA),
        }
    }

    impl World {
        fn alloc(&mut self, size: u64) -> VirtualAddress {
            self.heap.allocate(&mut self.image, size).unwrap().slot.payload()
        }

        fn scan(&mut self, dangling: bool) -> LeakEvidence {
            scan(&self.heap, &mut self.image, &self.machine, &self.q, dangling)
        }

        fn leaked(&mut self) -> Vec<VirtualAddress> {
            self.scan(false).leaked.into_iter().map(|l| l.payload).collect()
        }
    }

    #[test]
    fn empty_heap_has_no_leaks() {
        assert!(world().scan(false).is_empty());
    }

    #[test]
    fn unreferenced_object_leaks() {
        let mut w = world();
        let a = w.alloc(24);
        assert_eq!(w.scan(false).leaked, vec![LeakedObject { payload: a, requested_size: 24 }]);
    }

    #[test]
    fn two_hop_reachability() {
        let mut w = world();
        let a = w.alloc(32);
        let b = w.alloc(32);
        w.image.write_u64(a + 8, b.get()).unwrap();
        w.machine.registers.insert("r0".into(), a.get());
        assert!(w.leaked().is_empty());
    }

    #[test]
    fn interior_global_reference() {
        let mut w = world();
        let a = w.alloc(32);
        let g = w.image.globals_base();
        w.image.write_u64(g + 16, a.get() + 17).unwrap();
        assert!(w.leaked().is_empty());
    }

    #[test]
    fn cycles_terminate() {
        let mut w = world();
        let a = w.alloc(16);
        let b = w.alloc(16);
        w.image.write_u64(a, b.get()).unwrap();
        w.image.write_u64(b, a.get()).unwrap();
        assert_eq!(w.leaked(), vec![a, b]);
        w.machine.registers.insert("r1".into(), b.get());
        assert!(w.leaked().is_empty());
    }

    #[test]
    fn marks_cleared_and_idempotent() {
        let mut w = world();
        let a = w.alloc(16);
        let _b = w.alloc(16);
        w.machine.registers.insert("r0".into(), a.get());
        let first = w.scan(false);
        let second = w.scan(false);
        assert_eq!(first, second);
        for slot in w.heap.carved_slots().collect::<Vec<_>>() {
            assert!(!w.heap.header(&w.image, &slot).marked);
        }
    }

    #[test]
    fn integer_lookalike_hides_leak() {
        let mut w = world();
        let a = w.alloc(64);
        // not meant as a pointer, but indistinguishable from one
        w.machine.registers.insert("counter".into(), a.get() + 40);
        assert!(w.leaked().is_empty());
    }

    #[test]
    fn reachable_freed_needs_dangling_option() {
        let mut w = world();
        let a = w.alloc(32);
        let b = w.heap.object_bounds(&w.image, a).unwrap();
        let mut bitmap = crate::bitmap::CanaryBitmap::new(w.image.heap_base(), 256 << 20);
        w.q.quarantine_on_free(&mut w.image, &mut bitmap, &mut w.heap, &b, 0, CallStack::new()).unwrap();
        w.machine.registers.insert("r0".into(), a.get());
        assert!(w.scan(false).is_empty());
        let ev = w.scan(true);
        assert_eq!(ev.reachable_freed, vec![a]);
        assert!(ev.leaked.is_empty());
    }

    #[test]
    fn freed_objects_are_not_traversed() {
        let mut w = world();
        let a = w.alloc(32);
        let b = w.alloc(32);
        w.image.write_u64(a, b.get()).unwrap();
        let bounds = w.heap.object_bounds(&w.image, a).unwrap();
        let mut h = bounds.header;
        h.allocated = false;
        w.heap.write_header(&mut w.image, &bounds.slot, &h);
        w.machine.registers.insert("r0".into(), a.get());
        assert_eq!(w.leaked(), vec![b]);
    }
}
