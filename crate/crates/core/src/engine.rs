//! The epoch loop: execute at full speed, check evidence at boundaries,
//! and roll back and replay with watchpoints when something turns up.

use std::mem;

use crate::config::EngineConfig;
use crate::epoch::{self, EpochSnapshot, Evidence, ProgramState, ScanRecord};
use crate::error::{EngineError, Fault};
use crate::machine::RESULT_REGISTER;
use crate::memory::{StateHash, VirtualAddress, WORD_SIZE};
use crate::overflow::{is_canary_location, OverflowDetector};
use crate::replay::{arm_watchpoints, build_reports, watch_check, DoubleFreeHit, ReplayLog, Trap, Watchpoint};
use crate::report::{sort_reports, ErrorReport, EventRef, ReportKind, RunMeta};
use crate::syscall::{classify, execute_irrevocable, handle_extcall, CallCategory, CallContext, IrrevocableEffect};
use crate::trace::{EventKind, TraceEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Normal,
    Replay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    /// An irrevocable external call; it runs after the boundary.
    Irrevocable,
    /// `end`, or running off the end of the trace.
    End,
    /// An access outside mapped memory. The faulting event does not run.
    Segfault(Fault),
    /// Evidence found while executing the event itself: a corrupted tail
    /// at free, a disturbed quarantine entry on eviction, or a double free.
    Immediate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Boundary {
    pub event: usize,
    pub kind: BoundaryKind,
}

impl Boundary {
    /// Exclusive end of the event range a replay of this epoch covers.
    pub fn replay_end(&self) -> usize {
        match self.kind {
            BoundaryKind::Immediate => self.event + 1,
            _ => self.event,
        }
    }
}

/// Observable results of one execution of an epoch, for comparing a run
/// with its replay.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EpochRecord {
    pub alloc_addrs: Vec<VirtualAddress>,
    pub call_results: Vec<(usize, u64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub epochs: usize,
    pub rollbacks: usize,
    /// Memory writes executed in Normal mode.
    pub normal_writes: u64,
    /// Canary or watchpoint checks performed on Normal-mode writes.
    pub normal_write_checks: u64,
    /// Watchpoint checks performed on replayed writes.
    pub replay_write_checks: u64,
    pub watchpoints_armed: usize,
    pub unwatched_words: usize,
    pub deferred_executed: usize,
    /// One entry per boundary check that scanned the bitmap.
    pub scans: Vec<ScanRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOutcome {
    /// Sorted by epoch, address, kind, then first event.
    pub reports: Vec<ErrorReport>,
    pub state_hash: StateHash,
    pub epochs: usize,
    /// Status passed to a modeled `exit`, if the trace called it.
    pub exit_status: Option<u64>,
    pub stats: EngineStats,
}

impl RunOutcome {
    pub fn meta(&self, config: &EngineConfig) -> RunMeta {
        RunMeta { config: config.clone(), epochs: self.epochs, state_hash: self.state_hash.to_string() }
    }
}

enum Step {
    Continue,
    Boundary(BoundaryKind),
}

pub struct Engine<'a> {
    events: &'a [TraceEvent],
    config: EngineConfig,
    detector: OverflowDetector,
    state: ProgramState,
    calls: CallContext,
    mode: Mode,
    epoch: usize,
    snapshot: Option<EpochSnapshot>,
    pending: Evidence,
    record: EpochRecord,
    watchpoints: Vec<Watchpoint>,
    replay_log: ReplayLog,
    reports: Vec<ErrorReport>,
    stats: EngineStats,
    finished: bool,
    exit_status: Option<u64>,
}

impl<'a> Engine<'a> {
    pub fn new(events: &'a [TraceEvent], config: &EngineConfig) -> Result<Self, EngineError> {
        let state = ProgramState::new(config)?;
        Ok(Engine {
            events,
            config: config.clone(),
            detector: OverflowDetector::new(config.canary_byte),
            state,
            calls: CallContext::default(),
            mode: Mode::Normal,
            epoch: 0,
            snapshot: None,
            pending: Evidence::default(),
            record: EpochRecord::default(),
            watchpoints: Vec::new(),
            replay_log: ReplayLog::default(),
            reports: Vec::new(),
            stats: EngineStats::default(),
            finished: false,
            exit_status: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn state(&self) -> &ProgramState {
        &self.state
    }

    pub fn state_hash(&self) -> StateHash {
        self.state.state_hash()
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn reports(&self) -> &[ErrorReport] {
        &self.reports
    }

    pub fn epoch_record(&self) -> &EpochRecord {
        &self.record
    }

    pub fn snapshot(&self) -> Option<&EpochSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn replay_log(&self) -> &ReplayLog {
        &self.replay_log
    }

    /// Snapshots the current state; the next epoch starts here.
    pub fn begin_epoch(&mut self) {
        self.mode = Mode::Normal;
        self.snapshot = Some(epoch::begin_epoch(&self.state));
        self.pending = Evidence::default();
        self.record = EpochRecord::default();
    }

    /// Runs events in Normal mode until the next boundary.
    pub fn execute_epoch(&mut self) -> Result<Boundary, EngineError> {
        self.mode = Mode::Normal;
        loop {
            let k = self.state.machine.cursor;
            let Some(event) = self.events.get(k) else {
                return Ok(Boundary { event: k, kind: BoundaryKind::End });
            };
            if let Step::Boundary(kind) = self.step(event)? {
                return Ok(Boundary { event: k, kind });
            }
        }
    }

    /// Restores the epoch snapshot and switches to Replay mode with no
    /// watchpoints armed.
    pub fn rollback(&mut self) {
        let snapshot = self.snapshot.as_ref().expect("rollback needs an epoch in progress");
        epoch::rollback(&mut self.state, snapshot);
        self.calls.log.rewind();
        self.calls.deferred.clear();
        self.watchpoints.clear();
        self.replay_log = ReplayLog::default();
        self.record = EpochRecord::default();
        self.mode = Mode::Replay;
    }

    pub fn arm(&mut self, watchpoints: Vec<Watchpoint>) {
        self.watchpoints = watchpoints;
    }

    /// Re-executes the epoch up to the boundary with the armed watchpoints
    /// and site recording.
    pub fn replay(&mut self, boundary: &Boundary) -> Result<(), EngineError> {
        self.mode = Mode::Replay;
        while self.state.machine.cursor < boundary.replay_end() {
            let event = &self.events[self.state.machine.cursor];
            if let Step::Boundary(_) = self.step(event)? {
                break;
            }
        }
        Ok(())
    }

    /// Boundary processing: evidence checks, rollback and replay if needed,
    /// commit, then whatever the boundary itself does.
    pub fn conclude_epoch(&mut self, boundary: Boundary) -> Result<(), EngineError> {
        self.mode = Mode::Normal;
        let pending = mem::take(&mut self.pending);
        let (evidence, scan) = epoch::collect_evidence(&mut self.state, &self.config, &self.detector, pending);
        self.stats.scans.extend(scan);

        if evidence.is_empty() {
            self.stats.deferred_executed += epoch::commit(&mut self.state, &mut self.calls);
        } else {
            self.rollback();
            let (armed, unwatched) = arm_watchpoints(&evidence.watch_candidates(), self.config.max_watchpoints);
            self.stats.watchpoints_armed += armed.len();
            self.stats.unwatched_words += unwatched.len();
            self.arm(armed);
            self.replay(&boundary)?;
            let mut reports =
                build_reports(self.epoch, &evidence, &self.watchpoints, &self.replay_log, &self.state.quarantine);
            self.reports.append(&mut reports);
            self.heal(&evidence);
            self.stats.deferred_executed += epoch::commit(&mut self.state, &mut self.calls);
            self.stats.rollbacks += 1;
            self.watchpoints.clear();
            self.mode = Mode::Normal;
        }

        let k = boundary.event;
        match boundary.kind {
            BoundaryKind::Irrevocable => {
                let EventKind::ExtCall { name, args } = &self.events[k].kind else {
                    unreachable!("irrevocable boundary is an external call")
                };
                match execute_irrevocable(name, args, &mut self.state.files) {
                    IrrevocableEffect::Continue(value) => {
                        self.state.machine.registers.insert(RESULT_REGISTER.to_string(), value);
                    }
                    IrrevocableEffect::Exit(status) => {
                        self.exit_status = Some(status);
                        self.finished = true;
                    }
                }
                self.state.machine.cursor = k + 1;
            }
            BoundaryKind::End => self.finished = true,
            BoundaryKind::Segfault(fault) => {
                let mut r = ErrorReport::new(ReportKind::Segfault, self.epoch);
                r.corrupted_addr = Some(fault.addr);
                r.offending = vec![self.event_ref(k)];
                self.reports.push(r);
                self.finished = true;
            }
            BoundaryKind::Immediate => {}
        }
        self.stats.epochs += 1;
        self.epoch += 1;
        Ok(())
    }

    /// One full epoch. Returns false once the run is over.
    pub fn run_epoch(&mut self) -> Result<bool, EngineError> {
        self.begin_epoch();
        let boundary = self.execute_epoch()?;
        self.conclude_epoch(boundary)?;
        Ok(!self.finished)
    }

    pub fn run(mut self) -> Result<RunOutcome, EngineError> {
        while self.run_epoch()? {}
        Ok(self.into_outcome())
    }

    pub fn into_outcome(mut self) -> RunOutcome {
        sort_reports(&mut self.reports);
        RunOutcome {
            reports: self.reports,
            state_hash: self.state.state_hash(),
            epochs: self.stats.epochs,
            exit_status: self.exit_status,
            stats: self.stats,
        }
    }

    /// Re-plants reported canary bytes that are still tripwires and marks
    /// reported leaks, so the same evidence is not reported again.
    fn heal(&mut self, evidence: &Evidence) {
        let s = &mut self.state;
        for word in evidence.overflow.words.iter().chain(evidence.uaf.words()) {
            for i in 0..WORD_SIZE {
                let byte = word.addr + i;
                if word.mask & (1 << i) != 0 && is_canary_location(&s.image, &s.bitmap, &s.heap, byte) {
                    let _ = s.image.fill(byte, 1, self.config.canary_byte);
                }
            }
        }
        s.reported_leaks.extend(evidence.leaks.leaked.iter().map(|l| l.payload));
        s.reported_dangling.extend(evidence.leaks.reachable_freed.iter().copied());
    }

    fn var(&self, event: usize, name: &str) -> Result<VirtualAddress, EngineError> {
        self.state.machine.var(name).ok_or_else(|| EngineError::UnboundVariable { event, var: name.to_string() })
    }

    fn eval(&self, event: usize, operand: &crate::trace::Operand) -> Result<u64, EngineError> {
        self.state.machine.eval(operand).ok_or_else(|| match operand {
            crate::trace::Operand::Var { name, .. } => EngineError::UnboundVariable { event, var: name.clone() },
            crate::trace::Operand::Const(_) => unreachable!("constants always evaluate"),
        })
    }

    fn event_ref(&self, event: usize) -> EventRef {
        EventRef { event_id: event, stack: self.state.machine.call_stack.clone() }
    }

    fn step(&mut self, event: &TraceEvent) -> Result<Step, EngineError> {
        let k = event.id;
        let step = match &event.kind {
            EventKind::StackPush { frame } => {
                self.state.machine.call_stack.push(frame.clone());
                Step::Continue
            }
            EventKind::StackPop => {
                self.state.machine.call_stack.pop();
                Step::Continue
            }
            EventKind::Malloc { var, size } => {
                self.malloc(k, var, *size)?;
                Step::Continue
            }
            EventKind::Free { var } => {
                let addr = self.var(k, var)?;
                self.free(k, addr)?
            }
            EventKind::Write { var, offset, len, fill } => {
                let base = self.var(k, var)?;
                self.write(k, base, base + *offset, &vec![*fill; *len as usize])
            }
            EventKind::WriteAbs { var, delta, len, fill } => {
                let base = self.var(k, var)?;
                self.write(k, base, base.offset(*delta), &vec![*fill; *len as usize])
            }
            EventKind::Store { var, offset, value } => {
                let base = self.var(k, var)?;
                let v = self.eval(k, value)?;
                self.write(k, base, base + *offset, &v.to_le_bytes())
            }
            EventKind::Read { var, offset, len } => {
                let addr = self.var(k, var)? + *offset;
                if self.state.image.is_mapped(addr, *len) {
                    Step::Continue
                } else {
                    Step::Boundary(BoundaryKind::Segfault(Fault { addr, len: *len }))
                }
            }
            EventKind::RegSet { reg, value } => {
                let v = self.eval(k, value)?;
                self.state.machine.registers.insert(reg.clone(), v);
                Step::Continue
            }
            EventKind::GlobalSet { index, value } => {
                let v = self.eval(k, value)?;
                let image = &mut self.state.image;
                let addr = image.globals_base() + index.saturating_mul(WORD_SIZE);
                if *index < image.globals_words() && image.write_u64(addr, v).is_ok() {
                    Step::Continue
                } else {
                    Step::Boundary(BoundaryKind::Segfault(Fault { addr, len: WORD_SIZE }))
                }
            }
            EventKind::ExtCall { name, args } => {
                let category = classify(name, args);
                if category == CallCategory::Irrevocable {
                    return Ok(Step::Boundary(BoundaryKind::Irrevocable));
                }
                let result = handle_extcall(k, name, args, category, self.mode, &mut self.state.files, &mut self.calls)?;
                self.state.machine.registers.insert(RESULT_REGISTER.to_string(), result);
                self.record.call_results.push((k, result));
                Step::Continue
            }
            EventKind::End => return Ok(Step::Boundary(BoundaryKind::End)),
        };
        match step {
            Step::Continue | Step::Boundary(BoundaryKind::Immediate) => self.state.machine.cursor = k + 1,
            Step::Boundary(_) => {}
        }
        if self.mode == Mode::Replay {
            if let Step::Boundary(BoundaryKind::Immediate) = step {
                return Ok(Step::Continue);
            }
        }
        Ok(step)
    }

    fn malloc(&mut self, k: usize, var: &str, size: u64) -> Result<(), EngineError> {
        let s = &mut self.state;
        let allocation = s.heap.allocate(&mut s.image, size).map_err(|source| EngineError::Heap { event: k, source })?;
        let slot = allocation.slot;
        if self.config.detectors.overflow {
            self.detector.plant_on_alloc(&mut s.image, &mut s.bitmap, &allocation, size);
        } else {
            s.bitmap.clear_full_words(slot.payload(), slot.end());
        }
        s.reported_leaks.remove(&slot.payload());
        s.reported_dangling.remove(&slot.payload());
        s.machine.vars.insert(var.to_string(), slot.payload());
        self.record.alloc_addrs.push(slot.payload());
        if self.mode == Mode::Replay {
            self.replay_log.sites.record_alloc(slot.payload(), k, &s.machine.call_stack);
        }
        Ok(())
    }

    fn free(&mut self, k: usize, addr: VirtualAddress) -> Result<Step, EngineError> {
        let s = &mut self.state;
        let bounds = match s.heap.object_bounds(&s.image, addr) {
            Ok(b) if b.payload == addr => b,
            _ => return Err(EngineError::InvalidFree { event: k, addr }),
        };
        if !bounds.header.allocated {
            return Ok(match self.mode {
                Mode::Normal => {
                    self.pending.double_frees.push(k);
                    Step::Boundary(BoundaryKind::Immediate)
                }
                Mode::Replay => {
                    let prior_free = match s.quarantine.entry(addr) {
                        Some(e) => Some(EventRef { event_id: e.free_event, stack: e.free_stack.clone() }),
                        None => self.replay_log.sites.free_site_before(addr, k).cloned(),
                    };
                    self.replay_log.double_frees.push(DoubleFreeHit {
                        event: EventRef { event_id: k, stack: s.machine.call_stack.clone() },
                        payload: addr,
                        requested: bounds.header.requested_size,
                        prior_free,
                    });
                    Step::Continue
                }
            });
        }

        let mut immediate = false;
        if self.config.detectors.overflow {
            let evidence = self
                .detector
                .check_on_free(&s.image, &s.bitmap, &s.heap, &bounds)
                .expect("allocated object cannot be a double free");
            if !evidence.is_empty() {
                self.pending.add_overflow(evidence.words);
                immediate = true;
            }
        }
        if self.mode == Mode::Replay {
            self.replay_log.sites.record_free(addr, k, &s.machine.call_stack);
        }
        if epoch::quarantine_active(&self.config) {
            let evicted = s
                .quarantine
                .quarantine_on_free(&mut s.image, &mut s.bitmap, &mut s.heap, &bounds, k, s.machine.call_stack.clone())
                .expect("allocated object cannot be a double free");
            if self.config.detectors.uaf && !evicted.is_empty() {
                self.pending.uaf.merge(evicted);
                immediate = true;
            }
        } else {
            let mut header = bounds.header;
            header.allocated = false;
            s.heap.write_header(&mut s.image, &bounds.slot, &header);
            s.bitmap.clear_full_words(bounds.payload, bounds.slot.end());
            s.heap.release_slot(&mut s.image, addr).map_err(|source| EngineError::Heap { event: k, source })?;
        }
        Ok(if immediate { Step::Boundary(BoundaryKind::Immediate) } else { Step::Continue })
    }

    fn write(&mut self, k: usize, base: VirtualAddress, addr: VirtualAddress, bytes: &[u8]) -> Step {
        let len = bytes.len() as u64;
        let s = &mut self.state;
        if !s.image.is_mapped(addr, len) {
            return Step::Boundary(BoundaryKind::Segfault(Fault { addr, len }));
        }
        match self.mode {
            Mode::Normal => self.stats.normal_writes += 1,
            Mode::Replay => {
                if !self.watchpoints.is_empty() {
                    self.stats.replay_write_checks += 1;
                    let hits = watch_check(&self.watchpoints, addr, len, |b| {
                        is_canary_location(&s.image, &s.bitmap, &s.heap, b)
                    });
                    if !hits.is_empty() {
                        let writer =
                            s.heap.object_bounds(&s.image, base).ok().map(|b| (b.payload, b.header.requested_size));
                        for word in hits {
                            self.replay_log.traps.push(Trap {
                                word,
                                event: EventRef { event_id: k, stack: s.machine.call_stack.clone() },
                                writer,
                            });
                        }
                    }
                }
            }
        }
        s.image.write_bytes(addr, bytes).expect("range checked as mapped");
        Step::Continue
    }
}

/// Executes `events` under `config` to the end of the trace.
pub fn run(events: &[TraceEvent], config: &EngineConfig) -> Result<RunOutcome, EngineError> {
    Engine::new(events, config)?.run()
}
