//! Epoch lifecycle: snapshot, evidence collection at boundaries, rollback
//! and commit.

use std::collections::BTreeSet;

use crate::bitmap::CanaryBitmap;
use crate::config::EngineConfig;
use crate::error::ConfigError;
use crate::heap::VirtualHeap;
use crate::leak::{self, LeakEvidence};
use crate::machine::MachineState;
use crate::memory::{MemoryImage, StateHash, VirtualAddress};
use crate::overflow::{CorruptedWord, OverflowDetector, OverflowEvidence};
use crate::quarantine::{QuarantineLimits, QuarantineQueue, UafEvidence};
use crate::replay::WatchKind;
use crate::syscall::{execute_deferred, CallContext, FileTable};

/// Everything a rollback restores.
#[derive(Clone, Debug)]
pub struct ProgramState {
    pub image: MemoryImage,
    pub heap: VirtualHeap,
    pub bitmap: CanaryBitmap,
    pub quarantine: QuarantineQueue,
    pub machine: MachineState,
    pub files: FileTable,
    /// Leaked objects already reported, so a leak is reported once.
    pub reported_leaks: BTreeSet<VirtualAddress>,
    pub reported_dangling: BTreeSet<VirtualAddress>,
}

impl ProgramState {
    pub fn new(config: &EngineConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let g = &config.geometry;
        let limits = QuarantineLimits {
            max_bytes: config.quarantine_max_bytes,
            max_count: config.quarantine_max_count,
            fill_prefix: config.uaf_fill_prefix,
        };
        Ok(ProgramState {
            image: MemoryImage::new(g),
            heap: VirtualHeap::new(g)?,
            bitmap: CanaryBitmap::new(VirtualAddress(g.heap_base), g.heap_size),
            quarantine: QuarantineQueue::new(limits, config.canary_byte),
            machine: MachineState::new(),
            files: FileTable::new(),
            reported_leaks: BTreeSet::new(),
            reported_dangling: BTreeSet::new(),
        })
    }

    pub fn state_hash(&self) -> StateHash {
        self.image.state_hash()
    }
}

#[derive(Clone, Debug)]
pub struct EpochSnapshot {
    state: ProgramState,
    hash: StateHash,
}

impl EpochSnapshot {
    pub fn hash(&self) -> StateHash {
        self.hash
    }

    /// Event the epoch started at.
    pub fn start(&self) -> usize {
        self.state.machine.cursor
    }

    pub fn state(&self) -> &ProgramState {
        &self.state
    }
}

pub fn begin_epoch(state: &ProgramState) -> EpochSnapshot {
    EpochSnapshot { state: state.clone(), hash: state.state_hash() }
}

pub fn rollback(state: &mut ProgramState, snapshot: &EpochSnapshot) {
    *state = snapshot.state.clone();
}

/// Evidence gathered for one epoch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Evidence {
    pub overflow: OverflowEvidence,
    pub uaf: UafEvidence,
    pub leaks: LeakEvidence,
    /// Events that freed an already-freed object.
    pub double_frees: Vec<usize>,
}

impl Evidence {
    pub fn is_empty(&self) -> bool {
        self.overflow.is_empty() && self.uaf.is_empty() && self.leaks.is_empty() && self.double_frees.is_empty()
    }

    /// Adds overflow words, merging masks of words already present.
    pub fn add_overflow(&mut self, words: impl IntoIterator<Item = CorruptedWord>) {
        for w in words {
            match self.overflow.words.iter_mut().find(|x| x.addr == w.addr) {
                Some(x) => x.mask |= w.mask,
                None => self.overflow.words.push(w),
            }
        }
        self.overflow.words.sort();
    }

    /// Every corrupted canary word with the kind of watchpoint it needs.
    pub fn watch_candidates(&self) -> Vec<(CorruptedWord, WatchKind)> {
        let mut out: Vec<_> = self.overflow.words.iter().map(|w| (*w, WatchKind::Overflow)).collect();
        out.extend(self.uaf.words().map(|w| (*w, WatchKind::Uaf)));
        out
    }
}

/// Operation counts of one epoch-end canary scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanRecord {
    pub comparisons: u64,
    pub set_bits: u64,
    pub bitmap_words: u64,
}

/// Whether freed objects go through the quarantine. Besides use-after-free
/// detection, the dangling-reference leak option needs it.
pub fn quarantine_active(config: &EngineConfig) -> bool {
    config.detectors.uaf || (config.detectors.leak && config.dangling)
}

/// Runs the enabled boundary checks and merges them with evidence found
/// earlier in the epoch.
pub fn collect_evidence(
    state: &mut ProgramState,
    config: &EngineConfig,
    detector: &OverflowDetector,
    mut evidence: Evidence,
) -> (Evidence, Option<ScanRecord>) {
    let mut record = None;
    if config.detectors.uses_canaries() || quarantine_active(config) {
        let set_bits = state.bitmap.count() as u64;
        let (scan, stats) = detector.epoch_scan(&state.image, &state.bitmap, &state.heap);
        record = Some(ScanRecord { comparisons: stats.comparisons, set_bits, bitmap_words: stats.traversal.bitmap_words });
        let (uaf, rest) = state.quarantine.epoch_check(scan);
        evidence.uaf.merge(uaf);
        evidence.add_overflow(rest.words);
    }
    if !config.detectors.uaf {
        evidence.uaf = UafEvidence::default();
    }
    if !config.detectors.overflow {
        evidence.overflow = OverflowEvidence::default();
    }
    if config.detectors.leak {
        let dangling = config.dangling && quarantine_active(config);
        let mut leaks = leak::scan(&state.heap, &mut state.image, &state.machine, &state.quarantine, dangling);
        leaks.leaked.retain(|l| !state.reported_leaks.contains(&l.payload));
        leaks.reachable_freed.retain(|p| !state.reported_dangling.contains(p));
        evidence.leaks = leaks;
    }
    (evidence, record)
}

/// Issues deferred calls and clears the call log. Returns how many
/// deferred calls ran.
pub fn commit(state: &mut ProgramState, calls: &mut CallContext) -> usize {
    let n = calls.deferred.len();
    for call in calls.deferred.drain(..) {
        execute_deferred(&call, &mut state.files);
    }
    calls.log.clear();
    n
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EpochVerdict {
    Commit,
    RollbackRequested(Evidence),
}

/// Boundary check: commits a clean epoch, otherwise asks for rollback.
pub fn end_epoch(
    state: &mut ProgramState,
    config: &EngineConfig,
    detector: &OverflowDetector,
    calls: &mut CallContext,
    pending: Evidence,
) -> (EpochVerdict, Option<ScanRecord>) {
    let (evidence, record) = collect_evidence(state, config, detector, pending);
    if evidence.is_empty() {
        commit(state, calls);
        (EpochVerdict::Commit, record)
    } else {
        (EpochVerdict::RollbackRequested(evidence), record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Detectors;
    use crate::engine::Mode;
    use crate::syscall::{classify, handle_extcall};

    fn setup(config: &EngineConfig) -> (ProgramState, OverflowDetector, CallContext) {
        (ProgramState::new(config).unwrap(), OverflowDetector::new(config.canary_byte), CallContext::default())
    }

    #[test]
    fn snapshot_rollback_identity() {
        let config = EngineConfig::default();
        let (mut state, _, _) = setup(&config);
        let snap = begin_epoch(&state);
        rollback(&mut state, &snap);
        assert_eq!(state.state_hash(), snap.hash());
    }

    #[test]
    fn rollback_undoes_heap_writes() {
        let config = EngineConfig::default();
        let (mut state, det, _) = setup(&config);
        let a = state.heap.allocate(&mut state.image, 100).unwrap();
        det.plant_on_alloc(&mut state.image, &mut state.bitmap, &a, 100);
        let snap = begin_epoch(&state);
        for i in 0..1000u64 {
            state.image.fill(a.slot.payload() + (i % 100), 1, i as u8).unwrap();
        }
        state.heap.allocate(&mut state.image, 16).unwrap();
        assert_ne!(state.state_hash(), snap.hash());
        rollback(&mut state, &snap);
        assert_eq!(state.state_hash(), snap.hash());
        assert_eq!(state.heap.carved_slots().count(), 1);
    }

    #[test]
    fn clean_epoch_commits_deferred_close_once() {
        let config = EngineConfig::default();
        let (mut state, det, mut calls) = setup(&config);
        let args = vec!["1".to_string()];
        handle_extcall(0, "close", &args, classify("close", &args), Mode::Normal, &mut state.files, &mut calls).unwrap();
        assert!(state.files.is_open(1));
        let (verdict, _) = end_epoch(&mut state, &config, &det, &mut calls, Evidence::default());
        assert_eq!(verdict, EpochVerdict::Commit);
        assert!(!state.files.is_open(1));
        assert!(calls.deferred.is_empty());
        assert!(calls.log.is_empty());
    }

    #[test]
    fn corrupted_guard_requests_rollback() {
        let config = EngineConfig::default();
        let (mut state, det, mut calls) = setup(&config);
        let a = state.heap.allocate(&mut state.image, 16).unwrap();
        det.plant_on_alloc(&mut state.image, &mut state.bitmap, &a, 16);
        state.machine.registers.insert("r0".into(), a.slot.payload().get());
        state.image.fill(a.slot.end(), 1, 0).unwrap();
        let (verdict, record) = end_epoch(&mut state, &config, &det, &mut calls, Evidence::default());
        match verdict {
            EpochVerdict::RollbackRequested(ev) => {
                assert_eq!(ev.overflow.words.len(), 1);
                assert_eq!(ev.overflow.words[0].addr, a.slot.end());
            }
            EpochVerdict::Commit => panic!("expected rollback"),
        }
        let record = record.unwrap();
        assert_eq!(record.comparisons, record.set_bits);
    }

    #[test]
    fn disabled_leak_detector_commits() {
        let config = EngineConfig { detectors: Detectors { leak: false, ..Detectors::ALL }, ..EngineConfig::default() };
        let (mut state, det, mut calls) = setup(&config);
        let a = state.heap.allocate(&mut state.image, 32).unwrap();
        det.plant_on_alloc(&mut state.image, &mut state.bitmap, &a, 32);
        assert_eq!(end_epoch(&mut state, &config, &det, &mut calls, Evidence::default()).0, EpochVerdict::Commit);

        let config = EngineConfig::default();
        let (v, _) = end_epoch(&mut state, &config, &det, &mut calls, Evidence::default());
        assert!(matches!(v, EpochVerdict::RollbackRequested(ev) if ev.leaks.leaked.len() == 1));
    }

    #[test]
    fn rollback_restores_quarantine_order() {
        let config = EngineConfig::default();
        let (mut state, _, _) = setup(&config);
        let mut payloads = Vec::new();
        for _ in 0..3 {
            let a = state.heap.allocate(&mut state.image, 16).unwrap();
            let b = state.heap.object_bounds(&state.image, a.slot.payload()).unwrap();
            state.quarantine
                .quarantine_on_free(&mut state.image, &mut state.bitmap, &mut state.heap, &b, 0, Default::default())
                .unwrap();
            payloads.push(a.slot.payload());
        }
        let snap = begin_epoch(&state);
        let a = state.heap.allocate(&mut state.image, 16).unwrap();
        let b = state.heap.object_bounds(&state.image, a.slot.payload()).unwrap();
        state.quarantine
            .quarantine_on_free(&mut state.image, &mut state.bitmap, &mut state.heap, &b, 1, Default::default())
            .unwrap();
        rollback(&mut state, &snap);
        let order: Vec<_> = state.quarantine.entries().map(|e| e.payload).collect();
        assert_eq!(order, payloads);
    }
}
