//! Deterministic BiBOP allocator over the virtual heap region.
//!
//! The heap is split into one equal region per power-of-two size class.
//! Each region is carved into fixed-stride slots laid out as
//!
//! ```text
//! [guard word: 8][header: 24][payload: capacity]
//! ```
//!
//! so the guard word of slot `i + 1` sits directly after the payload of
//! slot `i`. Fresh slots come from a per-class bump cursor; slots returned
//! from quarantine go on a LIFO free list. Addresses are therefore a pure
//! function of the allocate/release history.

use crate::config::HeapGeometry;
use crate::error::{ConfigError, HeapError};
use crate::memory::{MemoryImage, VirtualAddress, PAGE_SIZE};

pub const GUARD_BYTES: u64 = 8;
pub const HEADER_BYTES: u64 = 24;
pub const SLOT_OVERHEAD: u64 = GUARD_BYTES + HEADER_BYTES;

const ALLOCATED: u64 = 1;
const MARKED: u64 = 1 << 1;
const RELEASED: u64 = 1 << 2;

/// Per-object metadata stored in the image just before the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeapObjectHeader {
    pub requested_size: u64,
    pub capacity: u64,
    pub allocated: bool,
    pub marked: bool,
    /// Sitting on its class free list (neither live nor quarantined).
    pub released: bool,
}

impl HeapObjectHeader {
    fn encode(&self) -> [u8; HEADER_BYTES as usize] {
        let mut flags = 0;
        if self.allocated {
            flags |= ALLOCATED;
        }
        if self.marked {
            flags |= MARKED;
        }
        if self.released {
            flags |= RELEASED;
        }
        let mut out = [0u8; HEADER_BYTES as usize];
        out[0..8].copy_from_slice(&self.requested_size.to_le_bytes());
        out[8..16].copy_from_slice(&self.capacity.to_le_bytes());
        out[16..24].copy_from_slice(&flags.to_le_bytes());
        out
    }

    /// Decodes a header. The program can scribble over headers, so sizes are
    /// clamped to the slot geometry rather than trusted.
    fn decode(bytes: &[u8], capacity: u64) -> Self {
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("header word"));
        let requested = word(0);
        let flags = word(2);
        HeapObjectHeader {
            requested_size: if requested == 0 || requested > capacity { capacity } else { requested },
            capacity,
            allocated: flags & ALLOCATED != 0,
            marked: flags & MARKED != 0,
            released: flags & RELEASED != 0,
        }
    }
}

/// A carved slot, identified by class and index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot {
    pub start: VirtualAddress,
    pub class: usize,
    pub index: u64,
    pub capacity: u64,
}

impl Slot {
    pub fn guard(&self) -> VirtualAddress {
        self.start
    }

    pub fn header_addr(&self) -> VirtualAddress {
        self.start + GUARD_BYTES
    }

    pub fn payload(&self) -> VirtualAddress {
        self.start + SLOT_OVERHEAD
    }

    /// One past the payload; also the guard word of the following slot.
    pub fn end(&self) -> VirtualAddress {
        self.payload() + self.capacity
    }

    pub fn contains(&self, addr: VirtualAddress) -> bool {
        addr >= self.start && addr < self.end()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectBounds {
    pub payload: VirtualAddress,
    pub capacity: u64,
    pub header: HeapObjectHeader,
    pub slot: Slot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Allocation {
    pub slot: Slot,
    /// Carved from the bump cursor rather than reused from the free list.
    pub fresh: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SizeClassState {
    pub class_index: u32,
    pub capacity: u64,
    pub region_base: VirtualAddress,
    pub stride: u64,
    pub slot_limit: u64,
    pub carved: u64,
    pub free_list: Vec<VirtualAddress>,
}

impl SizeClassState {
    /// Start address of the next fresh slot.
    pub fn bump_cursor(&self) -> VirtualAddress {
        self.region_base + self.carved * self.stride
    }

    fn slot(&self, class: usize, index: u64) -> Slot {
        Slot { start: self.region_base + index * self.stride, class, index, capacity: self.capacity }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VirtualHeap {
    base: VirtualAddress,
    region_size: u64,
    min_class: u64,
    max_class: u64,
    classes: Vec<SizeClassState>,
}

impl VirtualHeap {
    pub fn new(geometry: &HeapGeometry) -> Result<Self, ConfigError> {
        geometry.validate()?;
        let count = geometry.class_count() as u64;
        let page = PAGE_SIZE as u64;
        let region_size = geometry.heap_size / count / page * page;
        let classes = (0..count)
            .map(|i| {
                let capacity = geometry.min_class << i;
                let stride = capacity + SLOT_OVERHEAD;
                SizeClassState {
                    class_index: capacity.trailing_zeros(),
                    capacity,
                    region_base: VirtualAddress(geometry.heap_base + i * region_size),
                    stride,
                    // Leave room for the guard word after the last slot.
                    slot_limit: (region_size - GUARD_BYTES) / stride,
                    carved: 0,
                    free_list: Vec::new(),
                }
            })
            .collect();
        Ok(VirtualHeap {
            base: VirtualAddress(geometry.heap_base),
            region_size,
            min_class: geometry.min_class,
            max_class: geometry.max_class,
            classes,
        })
    }

    pub fn classes(&self) -> &[SizeClassState] {
        &self.classes
    }

    /// Size-class capacity for a request: the next power of two, at least
    /// the minimum class.
    pub fn capacity_for(&self, size: u64) -> Result<u64, HeapError> {
        if size == 0 {
            return Err(HeapError::ZeroSize);
        }
        if size > self.max_class {
            return Err(HeapError::OversizeRequest { size, max: self.max_class });
        }
        Ok(size.next_power_of_two().max(self.min_class))
    }

    fn class_of_capacity(&self, capacity: u64) -> usize {
        (capacity.trailing_zeros() - self.min_class.trailing_zeros()) as usize
    }

    pub fn allocate(&mut self, image: &mut MemoryImage, size: u64) -> Result<Allocation, HeapError> {
        let capacity = self.capacity_for(size)?;
        let class = self.class_of_capacity(capacity);
        let state = &mut self.classes[class];
        let (slot, fresh) = match state.free_list.pop() {
            Some(start) => {
                let index = (start.get() - state.region_base.get()) / state.stride;
                (state.slot(class, index), false)
            }
            None => {
                if state.carved >= state.slot_limit {
                    return Err(HeapError::OutOfVirtualHeap { capacity });
                }
                let slot = state.slot(class, state.carved);
                state.carved += 1;
                (slot, true)
            }
        };
        let header = HeapObjectHeader { requested_size: size, capacity, allocated: true, marked: false, released: false };
        self.write_header(image, &slot, &header);
        Ok(Allocation { slot, fresh })
    }

    /// Returns a freed slot to its class free list. The slot must be carved,
    /// freed and not already released.
    pub fn release_slot(&mut self, image: &mut MemoryImage, payload: VirtualAddress) -> Result<(), HeapError> {
        let slot = self.slot_at(payload).filter(|s| s.payload() == payload).ok_or(HeapError::NotQuarantined(payload))?;
        let mut header = self.header(image, &slot);
        if header.allocated || header.released {
            return Err(HeapError::NotQuarantined(payload));
        }
        header.released = true;
        header.marked = false;
        self.write_header(image, &slot, &header);
        self.classes[slot.class].free_list.push(slot.start);
        Ok(())
    }

    /// The carved slot containing `addr`, guard and header included.
    pub fn slot_at(&self, addr: VirtualAddress) -> Option<Slot> {
        let offset = addr.get().checked_sub(self.base.get())?;
        let class = (offset / self.region_size) as usize;
        let state = self.classes.get(class)?;
        let index = (offset % self.region_size) / state.stride;
        (index < state.carved).then(|| state.slot(class, index))
    }

    /// Bounds of the object whose slot contains `addr` (interior values
    /// resolve to their object).
    pub fn object_bounds(&self, image: &MemoryImage, addr: VirtualAddress) -> Result<ObjectBounds, HeapError> {
        let slot = self.slot_at(addr).ok_or(HeapError::NotAHeapObject(addr))?;
        Ok(ObjectBounds { payload: slot.payload(), capacity: slot.capacity, header: self.header(image, &slot), slot })
    }

    pub fn header(&self, image: &MemoryImage, slot: &Slot) -> HeapObjectHeader {
        let mut bytes = [0u8; HEADER_BYTES as usize];
        image.read_into(slot.header_addr(), &mut bytes).expect("slot header is inside the heap");
        HeapObjectHeader::decode(&bytes, slot.capacity)
    }

    pub fn write_header(&self, image: &mut MemoryImage, slot: &Slot, header: &HeapObjectHeader) {
        image.write_bytes(slot.header_addr(), &header.encode()).expect("slot header is inside the heap");
    }

    /// Every carved slot in address order.
    pub fn carved_slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(class, state)| (0..state.carved).map(move |i| state.slot(class, i)))
    }

    /// Guard word of the first uncarved slot of each class that has carved
    /// anything; it protects the last carved slot.
    pub fn frontier_guards(&self) -> impl Iterator<Item = VirtualAddress> + '_ {
        self.classes.iter().filter(|s| s.carved > 0).map(|s| s.bump_cursor())
    }

    /// Whether `value` points into some carved slot.
    pub fn in_carved_range(&self, value: u64) -> bool {
        self.slot_at(VirtualAddress(value)).is_some()
    }
}
