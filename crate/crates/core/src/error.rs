use thiserror::Error;

use crate::memory::VirtualAddress;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("variable `{0}` used before malloc")]
    UnboundVariable(String),
    #[error("stack pop on empty call stack")]
    StackUnderflow,
}

/// A rejected trace line. `line` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

/// An access outside every mapped range: the modeled segmentation fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("access of {len} byte(s) at {addr} is outside mapped memory")]
pub struct Fault {
    pub addr: VirtualAddress,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeapError {
    #[error("allocation of zero bytes")]
    ZeroSize,
    #[error("request of {size} bytes exceeds the largest size class ({max} bytes)")]
    OversizeRequest { size: u64, max: u64 },
    #[error("size class {capacity} exhausted its virtual heap region")]
    OutOfVirtualHeap { capacity: u64 },
    #[error("{0} is not a quarantined heap object")]
    NotQuarantined(VirtualAddress),
    #[error("{0} is not inside any carved heap slot")]
    NotAHeapObject(VirtualAddress),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("{name} must be a power of two (got {value})")]
    NotPowerOfTwo { name: &'static str, value: u64 },
    #[error("invalid heap geometry: {0}")]
    Geometry(String),
    #[error("unknown detector `{0}` (expected overflow, uaf or leak)")]
    UnknownDetector(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("event {event}: {source}")]
    Heap {
        event: usize,
        #[source]
        source: HeapError,
    },
    #[error("event {event}: replay requested a recorded result but the call log is exhausted")]
    LogUnderrun { event: usize },
    #[error("event {event}: replay diverged from the call log (logged event {logged})")]
    LogMismatch { event: usize, logged: usize },
    #[error("event {event}: free of {addr}, which is not the start of a heap object")]
    InvalidFree { event: usize, addr: VirtualAddress },
    #[error("event {event}: variable `{var}` is unbound")]
    UnboundVariable { event: usize, var: String },
}
