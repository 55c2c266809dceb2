//! The trace language that models the program under test.
//!
//! One event per line, `#` starts a comment, tokens are whitespace separated:
//!
//! ```text
//! stack push <name>            stack pop
//! malloc <var> <size>          free <var>
//! write <var> <offset> <len> <bytehex>
//! writeabs <var>(+|-)<delta> <len> <bytehex>
//! store <var> <offset> = <var>[(+|-)<delta>] | <u64>
//! read <var> <offset> <len>
//! reg <name> = <var>[(+|-)<delta>] | <u64>
//! global <index> = <var>[(+|-)<delta>] | <u64>
//! call <name> [<arg> ...]
//! end
//! ```
//!
//! Traces are straight-line, so variable binding and call-stack depth are
//! checked statically here.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ParseError, ParseErrorKind};

/// Frame names, innermost last.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CallStack(pub Vec<String>);

impl CallStack {
    pub fn new() -> Self {
        CallStack(Vec::new())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn push(&mut self, frame: impl Into<String>) {
        self.0.push(frame.into());
    }

    pub fn pop(&mut self) -> Option<String> {
        self.0.pop()
    }

    pub fn frames(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for CallStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" > "))
    }
}

/// Right-hand side of `reg`, `global` and `store`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Operand {
    Var { name: String, delta: i64 },
    Const(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    StackPush { frame: String },
    StackPop,
    Malloc { var: String, size: u64 },
    Free { var: String },
    Write { var: String, offset: u64, len: u64, fill: u8 },
    WriteAbs { var: String, delta: i64, len: u64, fill: u8 },
    /// Stores one little-endian eight-byte value, e.g. a pointer.
    Store { var: String, offset: u64, value: Operand },
    Read { var: String, offset: u64, len: u64 },
    RegSet { reg: String, value: Operand },
    GlobalSet { index: u64, value: Operand },
    ExtCall { name: String, args: Vec<String> },
    End,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::StackPush { .. } => "stack push",
            EventKind::StackPop => "stack pop",
            EventKind::Malloc { .. } => "malloc",
            EventKind::Free { .. } => "free",
            EventKind::Write { .. } => "write",
            EventKind::WriteAbs { .. } => "writeabs",
            EventKind::Store { .. } => "store",
            EventKind::Read { .. } => "read",
            EventKind::RegSet { .. } => "reg",
            EventKind::GlobalSet { .. } => "global",
            EventKind::ExtCall { .. } => "call",
            EventKind::End => "end",
        }
    }

    /// Events that write program memory through a heap variable.
    pub fn is_heap_write(&self) -> bool {
        matches!(self, EventKind::Write { .. } | EventKind::WriteAbs { .. } | EventKind::Store { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    /// Dense, 0-based.
    pub id: usize,
    /// 1-based source line.
    pub line: usize,
    pub kind: EventKind,
}

struct LineParser<'a> {
    line: usize,
    tokens: Vec<&'a str>,
}

impl<'a> LineParser<'a> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError { line: self.line, kind: ParseErrorKind::Syntax(msg.into()) }
    }

    fn arity(&self, n: usize, usage: &str) -> Result<(), ParseError> {
        if self.tokens.len() != n {
            return Err(self.err(format!("expected `{usage}`")));
        }
        Ok(())
    }

    fn ident(&self, i: usize) -> Result<String, ParseError> {
        let tok = self.tokens[i];
        if is_ident(tok) {
            Ok(tok.to_string())
        } else {
            Err(self.err(format!("`{tok}` is not a valid name")))
        }
    }

    fn number(&self, i: usize) -> Result<u64, ParseError> {
        parse_u64(self.tokens[i]).ok_or_else(|| self.err(format!("`{}` is not a number", self.tokens[i])))
    }

    fn fill_byte(&self, i: usize) -> Result<u8, ParseError> {
        let tok = self.tokens[i];
        if tok.len() != 2 {
            return Err(self.err(format!("fill byte `{tok}` must be two hex digits")));
        }
        u8::from_str_radix(tok, 16).map_err(|_| self.err(format!("fill byte `{tok}` must be two hex digits")))
    }

    fn length(&self, i: usize) -> Result<u64, ParseError> {
        match self.number(i)? {
            0 => Err(self.err("length must be positive")),
            n => Ok(n),
        }
    }

    fn expect(&self, i: usize, tok: &str) -> Result<(), ParseError> {
        if self.tokens[i] == tok {
            Ok(())
        } else {
            Err(self.err(format!("expected `{tok}`, found `{}`", self.tokens[i])))
        }
    }

    fn operand(&self, i: usize) -> Result<Operand, ParseError> {
        let tok = self.tokens[i];
        if tok.starts_with(|c: char| c.is_ascii_digit()) {
            return Ok(Operand::Const(self.number(i)?));
        }
        let (name, delta) = split_var_delta(tok).ok_or_else(|| self.err(format!("bad operand `{tok}`")))?;
        Ok(Operand::Var { name, delta })
    }
}

fn is_ident(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == ':')
}

fn parse_u64(tok: &str) -> Option<u64> {
    if let Some(hex) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else {
        tok.parse().ok()
    }
}

/// Splits `a`, `a+32` or `a-8` into the variable and a signed delta.
fn split_var_delta(tok: &str) -> Option<(String, i64)> {
    let cut = tok.find(['+', '-']);
    let (name, delta) = match cut {
        None => (tok, 0i64),
        Some(at) => {
            let magnitude = i64::try_from(parse_u64(&tok[at + 1..])?).ok()?;
            let delta = if tok.as_bytes()[at] == b'-' { -magnitude } else { magnitude };
            (&tok[..at], delta)
        }
    };
    // `:` and `.` are allowed in frame names but not variables.
    if !is_ident(name) || name.contains([':', '.']) {
        return None;
    }
    Some((name.to_string(), delta))
}

/// Parses a trace into dense, id-ordered events.
///
/// An empty trace yields no events; the engine treats the end of the event
/// list as `end`.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, ParseError> {
    let mut events = Vec::new();
    let mut bound: HashSet<String> = HashSet::new();
    let mut depth = 0usize;
    let mut ended = false;

    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let p = LineParser { line, tokens };
        if ended {
            return Err(p.err("event after `end`"));
        }
        let require = |name: &str| -> Result<(), ParseError> {
            if bound.contains(name) {
                Ok(())
            } else {
                Err(ParseError { line, kind: ParseErrorKind::UnboundVariable(name.to_string()) })
            }
        };
        let require_operand = |op: &Operand| match op {
            Operand::Var { name, .. } => require(name),
            Operand::Const(_) => Ok(()),
        };

        let kind = match p.tokens[0] {
            "stack" => match p.tokens.get(1).copied() {
                Some("push") => {
                    p.arity(3, "stack push <name>")?;
                    depth += 1;
                    EventKind::StackPush { frame: p.ident(2)? }
                }
                Some("pop") => {
                    p.arity(2, "stack pop")?;
                    if depth == 0 {
                        return Err(ParseError { line, kind: ParseErrorKind::StackUnderflow });
                    }
                    depth -= 1;
                    EventKind::StackPop
                }
                _ => return Err(p.err("expected `stack push <name>` or `stack pop`")),
            },
            "malloc" => {
                p.arity(3, "malloc <var> <size>")?;
                let var = p.ident(1)?;
                let size = p.number(2)?;
                if size == 0 {
                    return Err(p.err("malloc size must be positive"));
                }
                bound.insert(var.clone());
                EventKind::Malloc { var, size }
            }
            "free" => {
                p.arity(2, "free <var>")?;
                let var = p.ident(1)?;
                require(&var)?;
                EventKind::Free { var }
            }
            "write" => {
                p.arity(5, "write <var> <offset> <len> <bytehex>")?;
                let var = p.ident(1)?;
                require(&var)?;
                EventKind::Write { var, offset: p.number(2)?, len: p.length(3)?, fill: p.fill_byte(4)? }
            }
            "writeabs" => {
                p.arity(4, "writeabs <var>(+|-)<delta> <len> <bytehex>")?;
                let (var, delta) =
                    split_var_delta(p.tokens[1]).ok_or_else(|| p.err(format!("bad target `{}`", p.tokens[1])))?;
                require(&var)?;
                EventKind::WriteAbs { var, delta, len: p.length(2)?, fill: p.fill_byte(3)? }
            }
            "store" => {
                p.arity(5, "store <var> <offset> = <value>")?;
                let var = p.ident(1)?;
                require(&var)?;
                p.expect(3, "=")?;
                let value = p.operand(4)?;
                require_operand(&value)?;
                EventKind::Store { var, offset: p.number(2)?, value }
            }
            "read" => {
                p.arity(4, "read <var> <offset> <len>")?;
                let var = p.ident(1)?;
                require(&var)?;
                EventKind::Read { var, offset: p.number(2)?, len: p.length(3)? }
            }
            "reg" => {
                p.arity(4, "reg <name> = <value>")?;
                let reg = p.ident(1)?;
                p.expect(2, "=")?;
                let value = p.operand(3)?;
                require_operand(&value)?;
                EventKind::RegSet { reg, value }
            }
            "global" => {
                p.arity(4, "global <index> = <value>")?;
                let index = p.number(1)?;
                p.expect(2, "=")?;
                let value = p.operand(3)?;
                require_operand(&value)?;
                EventKind::GlobalSet { index, value }
            }
            "call" => {
                if p.tokens.len() < 2 {
                    return Err(p.err("expected `call <name> [<arg> ...]`"));
                }
                EventKind::ExtCall {
                    name: p.ident(1)?,
                    args: p.tokens[2..].iter().map(|s| s.to_string()).collect(),
                }
            }
            "end" => {
                p.arity(1, "end")?;
                ended = true;
                EventKind::End
            }
            other => return Err(p.err(format!("unknown event `{other}`"))),
        };
        events.push(TraceEvent { id: events.len(), line, kind });
    }
    Ok(events)
}
