//! Evidence-based heap error detection over deterministic event traces.
//!
//! A program under test is modeled as a straight-line trace of heap,
//! memory and external-call events. The [`Engine`] executes the trace in
//! epochs against a virtual heap that plants canary tripwires. At every
//! epoch boundary it looks for evidence (corrupted canaries, unreachable
//! objects). When evidence turns up it rolls back to the epoch snapshot and
//! replays the epoch with simulated watchpoints and call-site recording to
//! pinpoint the offending events.
//!
//! ```
//! use tripwire::{parse_trace, run, EngineConfig, ReportKind};
//!
//! let events = parse_trace("stack push main\nmalloc a 24\nwrite a 24 1 ff\nfree a\nend\n").unwrap();
//! let outcome = run(&events, &EngineConfig::default()).unwrap();
//! assert_eq!(outcome.reports.len(), 1);
//! assert_eq!(outcome.reports[0].kind, ReportKind::Overflow);
//! assert_eq!(outcome.reports[0].offending[0].event_id, 2);
//! ```

pub mod bitmap;
pub mod config;
pub mod engine;
pub mod epoch;
pub mod error;
pub mod heap;
pub mod leak;
pub mod machine;
pub mod memory;
pub mod overflow;
pub mod quarantine;
pub mod replay;
pub mod report;
pub mod syscall;
pub mod trace;

pub use bitmap::CanaryBitmap;
pub use config::{Detectors, EngineConfig, HeapGeometry};
pub use engine::{run, Boundary, BoundaryKind, Engine, EngineStats, EpochRecord, Mode, RunOutcome};
pub use error::{ConfigError, EngineError, Fault, HeapError, ParseError, ParseErrorKind};
pub use heap::{HeapObjectHeader, ObjectBounds, VirtualHeap};
pub use memory::{MemoryImage, StateHash, VirtualAddress};
pub use report::{emit_json, emit_text, ErrorReport, EventRef, ReportKind, RunMeta, Site};
pub use syscall::{classify, CallCategory};
pub use trace::{parse_trace, CallStack, EventKind, Operand, TraceEvent};
