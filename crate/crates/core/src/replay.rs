//! Instrumented re-execution support: simulated watchpoints, allocation and
//! free site recording, and conversion of traps into reports.

use std::collections::{BTreeMap, BTreeSet};

use crate::epoch::Evidence;
use crate::memory::{VirtualAddress, WORD_SIZE};
use crate::overflow::CorruptedWord;
use crate::quarantine::QuarantineQueue;
use crate::report::{ErrorReport, EventRef, ReportKind, Site};
use crate::trace::CallStack;

pub type SiteRecord = EventRef;

/// Malloc and free sites seen during replay, every occurrence per address.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SiteLog {
    allocs: BTreeMap<VirtualAddress, Vec<SiteRecord>>,
    frees: BTreeMap<VirtualAddress, Vec<SiteRecord>>,
}

fn last_before(list: Option<&Vec<SiteRecord>>, event: usize) -> Option<&SiteRecord> {
    list?.iter().rev().find(|s| s.event_id < event)
}

impl SiteLog {
    pub fn record_alloc(&mut self, payload: VirtualAddress, event_id: usize, stack: &CallStack) {
        self.allocs.entry(payload).or_default().push(EventRef { event_id, stack: stack.clone() });
    }

    pub fn record_free(&mut self, payload: VirtualAddress, event_id: usize, stack: &CallStack) {
        self.frees.entry(payload).or_default().push(EventRef { event_id, stack: stack.clone() });
    }

    /// Most recent allocation returning `payload`.
    pub fn alloc_site(&self, payload: VirtualAddress) -> Option<&SiteRecord> {
        self.allocs.get(&payload)?.last()
    }

    /// Most recent allocation returning `payload` strictly before `event`.
    pub fn alloc_site_before(&self, payload: VirtualAddress, event: usize) -> Option<&SiteRecord> {
        last_before(self.allocs.get(&payload), event)
    }

    pub fn free_site_before(&self, payload: VirtualAddress, event: usize) -> Option<&SiteRecord> {
        last_before(self.frees.get(&payload), event)
    }

    pub fn alloc_count(&self) -> usize {
        self.allocs.values().map(Vec::len).sum()
    }

    pub fn free_count(&self) -> usize {
        self.frees.values().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum WatchKind {
    Overflow,
    Uaf,
}

/// An armed word. Only the bytes in `mask` are watched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Watchpoint {
    pub word: VirtualAddress,
    pub mask: u8,
    pub kind: WatchKind,
}

/// Arms the lowest `max` corrupted words; the rest come back unwatched.
pub fn arm_watchpoints(
    words: &[(CorruptedWord, WatchKind)],
    max: usize,
) -> (Vec<Watchpoint>, Vec<(CorruptedWord, WatchKind)>) {
    let mut sorted = words.to_vec();
    sorted.sort_by_key(|(w, _)| w.addr);
    let rest = sorted.split_off(max.min(sorted.len()));
    let armed = sorted.iter().map(|(w, kind)| Watchpoint { word: w.addr, mask: w.mask, kind: *kind }).collect();
    (armed, rest)
}

/// Words whose watched bytes are overlapped by a write of `len` bytes at
/// `addr`. A byte only counts while it is still a canary location, so
/// legitimate writes made before a location became a tripwire never trap.
pub fn watch_check(
    watchpoints: &[Watchpoint],
    addr: VirtualAddress,
    len: u64,
    is_canary: impl Fn(VirtualAddress) -> bool,
) -> Vec<VirtualAddress> {
    let end = addr.get().saturating_add(len);
    watchpoints
        .iter()
        .filter(|w| {
            (0..WORD_SIZE).any(|i| {
                let byte = w.word + i;
                w.mask & (1 << i) != 0 && byte.get() >= addr.get() && byte.get() < end && is_canary(byte)
            })
        })
        .map(|w| w.word)
        .collect()
}

/// A replayed write that hit a watchpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trap {
    pub word: VirtualAddress,
    pub event: EventRef,
    /// Object the writing variable points into: payload and requested size.
    pub writer: Option<(VirtualAddress, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DoubleFreeHit {
    pub event: EventRef,
    pub payload: VirtualAddress,
    pub requested: u64,
    pub prior_free: Option<EventRef>,
}

/// Everything observed while replaying one epoch.
#[derive(Clone, Debug, Default)]
pub struct ReplayLog {
    pub traps: Vec<Trap>,
    pub sites: SiteLog,
    pub double_frees: Vec<DoubleFreeHit>,
}

impl ReplayLog {
    fn traps_on<'a>(&'a self, words: &'a BTreeSet<VirtualAddress>) -> impl Iterator<Item = &'a Trap> + 'a {
        self.traps.iter().filter(move |t| words.contains(&t.word))
    }
}

fn distinct_events<'a>(traps: impl Iterator<Item = &'a Trap>) -> Vec<EventRef> {
    let mut seen = BTreeMap::new();
    for t in traps {
        seen.entry(t.event.event_id).or_insert_with(|| t.event.clone());
    }
    seen.into_values().collect()
}

fn alloc_site(found: Option<&SiteRecord>) -> Site {
    match found {
        Some(e) => Site::Recorded(e.clone()),
        None => Site::PriorEpoch,
    }
}

fn unattributed(epoch: usize, kind: ReportKind, word: &CorruptedWord) -> ErrorReport {
    let mut r = ErrorReport::new(kind, epoch);
    r.corrupted_addr = Some(word.addr);
    r.corrupted_words = vec![word.addr];
    r
}

/// Turns one epoch's evidence and the traps collected while replaying it
/// into reports.
pub fn build_reports(
    epoch: usize,
    evidence: &Evidence,
    armed: &[Watchpoint],
    log: &ReplayLog,
    quarantine: &QuarantineQueue,
) -> Vec<ErrorReport> {
    let armed_words: BTreeSet<VirtualAddress> = armed.iter().map(|w| w.word).collect();
    let mut reports = Vec::new();

    // Overflow words, grouped by the first write that trapped on them.
    let mut groups: BTreeMap<usize, BTreeSet<VirtualAddress>> = BTreeMap::new();
    for word in &evidence.overflow.words {
        let first = armed_words
            .contains(&word.addr)
            .then(|| log.traps.iter().find(|t| t.word == word.addr))
            .flatten();
        match first {
            Some(t) => {
                groups.entry(t.event.event_id).or_default().insert(word.addr);
            }
            None => reports.push(unattributed(epoch, ReportKind::Overflow, word)),
        }
    }
    for (first_event, words) in groups {
        let first = log.traps.iter().find(|t| t.event.event_id == first_event).expect("group has a trap");
        let mut r = ErrorReport::new(ReportKind::Overflow, epoch);
        r.corrupted_addr = words.first().copied();
        r.offending = distinct_events(log.traps_on(&words));
        if let Some((payload, size)) = first.writer {
            r.object = Some(payload);
            r.object_size = Some(size);
            r.alloc_site = Some(alloc_site(log.sites.alloc_site_before(payload, first_event)));
        }
        r.corrupted_words = words.into_iter().collect();
        reports.push(r);
    }

    for finding in &evidence.uaf.findings {
        let words: BTreeSet<VirtualAddress> = finding.words.iter().map(|w| w.addr).collect();
        let entry = &finding.entry;
        let mut r = ErrorReport::new(ReportKind::UseAfterFree, epoch);
        r.corrupted_addr = words.first().copied();
        r.offending = distinct_events(log.traps_on(&words));
        r.corrupted_words = words.into_iter().collect();
        r.object = Some(entry.payload);
        r.object_size = Some(entry.requested);
        r.alloc_site = Some(alloc_site(log.sites.alloc_site_before(entry.payload, entry.free_event)));
        r.free_site = Some(EventRef { event_id: entry.free_event, stack: entry.free_stack.clone() });
        reports.push(r);
    }

    for leak in &evidence.leaks.leaked {
        let mut r = ErrorReport::new(ReportKind::Leak, epoch);
        r.object = Some(leak.payload);
        r.object_size = Some(leak.requested_size);
        r.alloc_site = Some(alloc_site(log.sites.alloc_site(leak.payload)));
        reports.push(r);
    }

    for &payload in &evidence.leaks.reachable_freed {
        let mut r = ErrorReport::new(ReportKind::ReachableFreed, epoch);
        r.object = Some(payload);
        if let Some(entry) = quarantine.entry(payload) {
            r.object_size = Some(entry.requested);
            r.alloc_site = Some(alloc_site(log.sites.alloc_site_before(payload, entry.free_event)));
            r.free_site = Some(EventRef { event_id: entry.free_event, stack: entry.free_stack.clone() });
        }
        reports.push(r);
    }

    for hit in &log.double_frees {
        let mut r = ErrorReport::new(ReportKind::DoubleFree, epoch);
        r.corrupted_addr = Some(hit.payload);
        r.object = Some(hit.payload);
        r.object_size = Some(hit.requested);
        r.offending = vec![hit.event.clone()];
        r.alloc_site = Some(alloc_site(log.sites.alloc_site_before(hit.payload, hit.event.event_id)));
        r.free_site = hit.prior_free.clone();
        reports.push(r);
    }

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(addr: u64, mask: u8) -> CorruptedWord {
        CorruptedWord { addr: VirtualAddress(addr), mask, owner: None }
    }

    #[test]
    fn arms_lowest_addresses_first() {
        let words: Vec<_> = [0x50, 0x10, 0x40, 0x30, 0x20].iter().map(|&a| (word(a, 0xff), WatchKind::Overflow)).collect();
        let (armed, rest) = arm_watchpoints(&words, 4);
        let armed: Vec<u64> = armed.iter().map(|w| w.word.get()).collect();
        assert_eq!(armed, vec![0x10, 0x20, 0x30, 0x40]);
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0].0.addr, VirtualAddress(0x50));
    }

    #[test]
    fn write_spanning_two_words_traps_both() {
        let w = [
            Watchpoint { word: VirtualAddress(0x100), mask: 0xff, kind: WatchKind::Overflow },
            Watchpoint { word: VirtualAddress(0x108), mask: 0xff, kind: WatchKind::Overflow },
        ];
        let hits = watch_check(&w, VirtualAddress(0x104), 8, |_| true);
        assert_eq!(hits, vec![VirtualAddress(0x100), VirtualAddress(0x108)]);
        assert!(watch_check(&w, VirtualAddress(0xf8), 8, |_| true).is_empty());
    }

    #[test]
    fn mask_and_canary_state_gate_traps() {
        let w = [Watchpoint { word: VirtualAddress(0x100), mask: 0xf0, kind: WatchKind::Overflow }];
        assert!(watch_check(&w, VirtualAddress(0x100), 4, |_| true).is_empty());
        assert_eq!(watch_check(&w, VirtualAddress(0x100), 5, |_| true).len(), 1);
        assert!(watch_check(&w, VirtualAddress(0x100), 8, |_| false).is_empty());
    }

    #[test]
    fn site_log_keeps_history() {
        let mut log = SiteLog::default();
        let a = VirtualAddress(0x1000);
        log.record_alloc(a, 1, &CallStack(vec!["main".into()]));
        log.record_alloc(a, 7, &CallStack(vec!["main".into(), "g".into()]));
        assert_eq!(log.alloc_site(a).unwrap().event_id, 7);
        assert_eq!(log.alloc_site_before(a, 5).unwrap().event_id, 1);
        assert!(log.alloc_site_before(a, 1).is_none());
        assert_eq!(log.alloc_count(), 2);
    }
}
