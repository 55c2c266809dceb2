//! Error reports and their text and JSON renderings.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::memory::VirtualAddress;
use crate::trace::CallStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Overflow,
    UseAfterFree,
    Leak,
    DoubleFree,
    Segfault,
    /// A freed, still-quarantined object that is reachable from the roots.
    ReachableFreed,
}

impl ReportKind {
    pub fn title(&self) -> &'static str {
        match self {
            ReportKind::Overflow => "heap buffer overflow",
            ReportKind::UseAfterFree => "use after free",
            ReportKind::Leak => "memory leak",
            ReportKind::DoubleFree => "double free",
            ReportKind::Segfault => "segmentation fault",
            ReportKind::ReachableFreed => "reachable freed object",
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

/// A trace event together with the call stack active when it ran.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventRef {
    pub event_id: usize,
    pub stack: CallStack,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Recorded(EventRef),
    /// The object was allocated before the replayed epoch.
    PriorEpoch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: ReportKind,
    pub epoch: usize,
    /// Lowest corrupted (or faulting) address.
    pub corrupted_addr: Option<VirtualAddress>,
    /// Every corrupted word this report accounts for, ascending.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrupted_words: Vec<VirtualAddress>,
    pub object: Option<VirtualAddress>,
    pub object_size: Option<u64>,
    /// Writes that hit a watched word, the freeing event of a double free,
    /// the faulting event of a segfault, or the leaking allocation.
    pub offending: Vec<EventRef>,
    pub alloc_site: Option<Site>,
    pub free_site: Option<EventRef>,
}

impl ErrorReport {
    pub fn new(kind: ReportKind, epoch: usize) -> Self {
        ErrorReport {
            kind,
            epoch,
            corrupted_addr: None,
            corrupted_words: Vec::new(),
            object: None,
            object_size: None,
            offending: Vec::new(),
            alloc_site: None,
            free_site: None,
        }
    }

    /// Output order: epoch, then address, then kind, then first event.
    pub fn order(&self, other: &Self) -> Ordering {
        let addr = |r: &ErrorReport| r.corrupted_addr.or(r.object);
        let first = |r: &ErrorReport| r.offending.first().map(|e| e.event_id);
        (self.epoch, addr(self), self.kind, first(self)).cmp(&(other.epoch, addr(other), other.kind, first(other)))
    }
}

pub fn sort_reports(reports: &mut [ErrorReport]) {
    reports.sort_by(|a, b| a.order(b));
}

/// Run-level facts echoed alongside the reports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: EngineConfig,
    pub epochs: usize,
    pub state_hash: String,
}

/// Shape of the JSON document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonDocument {
    pub reports: Vec<ErrorReport>,
    pub config: EngineConfig,
    pub epochs: usize,
    pub state_hash: String,
}

fn write_stack(out: &mut String, stack: &CallStack) {
    if stack.frames().is_empty() {
        out.push_str("    <empty call stack>\n");
    }
    for frame in stack.frames().iter().rev() {
        let _ = writeln!(out, "    {frame}");
    }
}

fn write_event(out: &mut String, label: &str, event: &EventRef) {
    let _ = writeln!(out, "  {label} (event {}):", event.event_id);
    write_stack(out, &event.stack);
}

fn write_report(out: &mut String, r: &ErrorReport) {
    let _ = write!(out, "{} in epoch {}", r.kind, r.epoch);
    if let Some(addr) = r.corrupted_addr {
        let _ = write!(out, " at {addr}");
    }
    out.push('\n');
    if r.corrupted_words.len() > 1 {
        let words: Vec<String> = r.corrupted_words.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(out, "  corrupted words: {}", words.join(" "));
    }
    if let Some(obj) = r.object {
        match r.object_size {
            Some(size) => {
                let _ = writeln!(out, "  object {obj}, {size} bytes");
            }
            None => {
                let _ = writeln!(out, "  object {obj}");
            }
        }
    }
    let label = match r.kind {
        ReportKind::Overflow | ReportKind::UseAfterFree | ReportKind::Leak => "write",
        ReportKind::DoubleFree => "second free",
        ReportKind::Segfault => "faulting access",
        ReportKind::ReachableFreed => "reference",
    };
    if r.offending.is_empty() && matches!(r.kind, ReportKind::Overflow | ReportKind::UseAfterFree) {
        out.push_str("  no watched write reached this word during replay\n");
    }
    for event in &r.offending {
        write_event(out, label, event);
    }
    match &r.alloc_site {
        Some(Site::Recorded(e)) => write_event(out, "allocated", e),
        Some(Site::PriorEpoch) => out.push_str("  allocated in a prior epoch\n"),
        None => {}
    }
    if let Some(e) = &r.free_site {
        write_event(out, "freed", e);
    }
}

/// Human-readable rendering, one block per report.
pub fn emit_text(reports: &[ErrorReport]) -> String {
    if reports.is_empty() {
        return "no errors detected\n".to_string();
    }
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let mut out = String::new();
    for (i, r) in sorted.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        write_report(&mut out, r);
    }
    out
}

pub fn emit_json(reports: &[ErrorReport], meta: &RunMeta) -> String {
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let doc = JsonDocument {
        reports: sorted,
        config: meta.config.clone(),
        epochs: meta.epochs,
        state_hash: meta.state_hash.clone(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("report document serializes");
    s.push('\n');
    s
}
