//! External-call model: classification, a modeled file table, the
//! recordable-result log and the deferral queue.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::engine::Mode;
use crate::error::EngineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CallCategory {
    Repeatable,
    Recordable,
    Revocable,
    Deferrable,
    Irrevocable,
}

impl fmt::Display for CallCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CallCategory::Repeatable => "repeatable",
            CallCategory::Recordable => "recordable",
            CallCategory::Revocable => "revocable",
            CallCategory::Deferrable => "deferrable",
            CallCategory::Irrevocable => "irrevocable",
        };
        f.write_str(s)
    }
}

/// Classifies an external call. Anything not known to be safe to re-run,
/// record, undo or postpone is irrevocable.
pub fn classify<S: AsRef<str>>(name: &str, args: &[S]) -> CallCategory {
    match name {
        "getpid" | "sleep" | "pause" => CallCategory::Repeatable,
        "mmap" | "gettimeofday" | "time" | "clone" | "open" => CallCategory::Recordable,
        "write" | "read" => CallCategory::Revocable,
        "close" | "munmap" => CallCategory::Deferrable,
        "fcntl" if args.iter().any(|a| a.as_ref().starts_with("F_GET")) => CallCategory::Repeatable,
        _ => CallCategory::Irrevocable,
    }
}

/// Value returned by calls that fail, i.e. `-1` as an unsigned word.
pub const CALL_FAILED: u64 = u64::MAX;
pub const MODELED_PID: u64 = 4242;
pub const CLOCK_START: u64 = 1_700_000_000;
pub const FIRST_FD: u64 = 3;
pub const MMAP_BASE: u64 = 0x7f00_0000_0000;

/// Numeric call argument, decimal or `0x` hex.
pub fn parse_arg(token: &str) -> Option<u64> {
    match token.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => token.parse().ok(),
    }
}

fn arg(args: &[String], i: usize) -> Option<u64> {
    args.get(i).and_then(|a| parse_arg(a))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FileState {
    pub position: u64,
    pub open: bool,
}

/// Open descriptors and their positions. Part of the epoch snapshot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileTable {
    files: BTreeMap<u64, FileState>,
}

impl Default for FileTable {
    fn default() -> Self {
        FileTable::new()
    }
}

impl FileTable {
    /// Standard input, output and error start open.
    pub fn new() -> Self {
        let files = (0..FIRST_FD).map(|fd| (fd, FileState { position: 0, open: true })).collect();
        FileTable { files }
    }

    pub fn get(&self, fd: u64) -> Option<FileState> {
        self.files.get(&fd).copied()
    }

    pub fn is_open(&self, fd: u64) -> bool {
        self.get(fd).is_some_and(|f| f.open)
    }

    pub fn position(&self, fd: u64) -> Option<u64> {
        self.get(fd).filter(|f| f.open).map(|f| f.position)
    }

    pub fn open(&mut self, fd: u64) {
        self.files.insert(fd, FileState { position: 0, open: true });
    }

    pub fn close(&mut self, fd: u64) -> bool {
        match self.files.get_mut(&fd) {
            Some(f) if f.open => {
                f.open = false;
                true
            }
            _ => false,
        }
    }

    /// Moves the position forward by `len`, returning the prior position.
    pub fn advance(&mut self, fd: u64, len: u64) -> Option<u64> {
        let f = self.files.get_mut(&fd).filter(|f| f.open)?;
        let prior = f.position;
        f.position += len;
        Some(prior)
    }

    pub fn seek(&mut self, fd: u64, position: u64) -> bool {
        match self.files.get_mut(&fd) {
            Some(f) if f.open => {
                f.position = position;
                true
            }
            _ => false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, FileState)> + '_ {
        self.files.iter().map(|(&fd, &f)| (fd, f))
    }
}

/// Source of recordable results. Deliberately not part of the snapshot:
/// replay takes these values from the log instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeledKernel {
    clock: u64,
    next_fd: u64,
    next_pid: u64,
    mappings: u64,
}

impl Default for ModeledKernel {
    fn default() -> Self {
        ModeledKernel { clock: CLOCK_START, next_fd: FIRST_FD, next_pid: MODELED_PID + 1, mappings: 0 }
    }
}

impl ModeledKernel {
    fn recordable(&mut self, name: &str, files: &mut FileTable) -> u64 {
        match name {
            "open" => {
                let fd = self.next_fd;
                self.next_fd += 1;
                files.open(fd);
                fd
            }
            "mmap" => {
                let addr = MMAP_BASE + self.mappings * 4096;
                self.mappings += 1;
                addr
            }
            "clone" => {
                let pid = self.next_pid;
                self.next_pid += 1;
                pid
            }
            "gettimeofday" => {
                self.clock += 1;
                self.clock * 1_000_000
            }
            _ => {
                self.clock += 1;
                self.clock
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtCallRecord {
    pub event_id: usize,
    pub name: String,
    pub category: CallCategory,
    /// Recordable calls only.
    pub recorded_result: Option<u64>,
    /// Revocable calls only: `(fd, position before the call)`.
    pub revocation_note: Option<(u64, u64)>,
}

/// Calls made during the current epoch, in order. Cleared on commit.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExtCallLog {
    records: Vec<ExtCallRecord>,
    cursor: usize,
}

impl ExtCallLog {
    pub fn records(&self) -> &[ExtCallRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clear(&mut self) {
        self.records.clear();
        self.cursor = 0;
    }

    /// Starts consuming the log from the beginning, for replay.
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    fn next_for(&mut self, event_id: usize) -> Result<&ExtCallRecord, EngineError> {
        let record = self.records.get(self.cursor).ok_or(EngineError::LogUnderrun { event: event_id })?;
        if record.event_id != event_id {
            return Err(EngineError::LogMismatch { event: event_id, logged: record.event_id });
        }
        self.cursor += 1;
        Ok(record)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeferredCall {
    pub event_id: usize,
    pub name: String,
    pub args: Vec<String>,
}

/// Runs one queued call at commit time.
pub fn execute_deferred(call: &DeferredCall, files: &mut FileTable) {
    if call.name == "close" {
        if let Some(fd) = arg(&call.args, 0) {
            files.close(fd);
        }
    }
}

/// Per-epoch call state that lives outside the snapshot.
#[derive(Clone, Debug, Default)]
pub struct CallContext {
    pub kernel: ModeledKernel,
    pub log: ExtCallLog,
    pub deferred: Vec<DeferredCall>,
}

/// Performs a non-irrevocable call and returns its result.
pub fn handle_extcall(
    event_id: usize,
    name: &str,
    args: &[String],
    category: CallCategory,
    mode: Mode,
    files: &mut FileTable,
    ctx: &mut CallContext,
) -> Result<u64, EngineError> {
    debug_assert_ne!(category, CallCategory::Irrevocable);
    let logged = match mode {
        Mode::Replay => Some(ctx.log.next_for(event_id)?.clone()),
        Mode::Normal => None,
    };
    let mut record =
        ExtCallRecord { event_id, name: name.to_string(), category, recorded_result: None, revocation_note: None };
    let result = match category {
        CallCategory::Repeatable => match name {
            "getpid" => MODELED_PID,
            _ => 0,
        },
        CallCategory::Recordable => match &logged {
            Some(rec) => {
                let value = rec.recorded_result.ok_or(EngineError::LogMismatch { event: event_id, logged: rec.event_id })?;
                if name == "open" {
                    files.open(value);
                }
                value
            }
            None => {
                let value = ctx.kernel.recordable(name, files);
                record.recorded_result = Some(value);
                value
            }
        },
        CallCategory::Revocable => {
            let fd = arg(args, 0);
            let len = arg(args, 1).unwrap_or(0);
            match fd.and_then(|fd| files.advance(fd, len).map(|prior| (fd, prior))) {
                Some(note) => {
                    record.revocation_note = Some(note);
                    len
                }
                None => CALL_FAILED,
            }
        }
        CallCategory::Deferrable => {
            ctx.deferred.push(DeferredCall { event_id, name: name.to_string(), args: args.to_vec() });
            0
        }
        CallCategory::Irrevocable => unreachable!("irrevocable calls end the epoch before execution"),
    };
    if mode == Mode::Normal {
        ctx.log.records.push(record);
    }
    Ok(result)
}

/// What an irrevocable call did once executed at the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IrrevocableEffect {
    Continue(u64),
    Exit(u64),
}

pub fn execute_irrevocable(name: &str, args: &[String], files: &mut FileTable) -> IrrevocableEffect {
    match name {
        "exit" | "_exit" | "exit_group" => IrrevocableEffect::Exit(arg(args, 0).unwrap_or(0)),
        "lseek" => match (arg(args, 0), arg(args, 1)) {
            (Some(fd), Some(pos)) if files.seek(fd, pos) => IrrevocableEffect::Continue(pos),
            _ => IrrevocableEffect::Continue(CALL_FAILED),
        },
        _ => IrrevocableEffect::Continue(0),
    }
}
