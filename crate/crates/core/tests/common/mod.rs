#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use tripwire::{ErrorReport, ReportKind, Site};

pub fn corpus_dir(kind: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("corpus").join(kind)
}

pub fn corpus(kind: &str) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(corpus_dir(kind))
        .expect("corpus directory")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "trace"))
        .collect();
    files.sort();
    files
}

/// What a report must look like, reduced to the attributed facts.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Finding {
    pub kind: String,
    pub writes: Vec<usize>,
    pub alloc: Option<String>,
    pub free: Option<usize>,
}

fn kind_name(kind: ReportKind) -> &'static str {
    match kind {
        ReportKind::Overflow => "overflow",
        ReportKind::UseAfterFree => "uaf",
        ReportKind::Leak => "leak",
        ReportKind::DoubleFree => "double_free",
        ReportKind::Segfault => "segfault",
        ReportKind::ReachableFreed => "reachable_freed",
    }
}

pub fn finding_of(r: &ErrorReport) -> Finding {
    Finding {
        kind: kind_name(r.kind).to_string(),
        writes: r.offending.iter().map(|e| e.event_id).collect(),
        alloc: match &r.alloc_site {
            Some(Site::Recorded(e)) => Some(e.event_id.to_string()),
            Some(Site::PriorEpoch) => Some("prior".to_string()),
            None => None,
        },
        free: r.free_site.as_ref().map(|e| e.event_id),
    }
}

/// Parses `# expect ...` header lines. `none` expects a clean run.
pub fn expectations(text: &str) -> Vec<Finding> {
    let mut out = Vec::new();
    for line in text.lines() {
        let Some(rest) = line.strip_prefix("# expect ") else { continue };
        let mut tokens = rest.split_whitespace();
        let kind = tokens.next().expect("expectation kind");
        if kind == "none" {
            continue;
        }
        let mut f = Finding { kind: kind.to_string(), writes: vec![], alloc: None, free: None };
        for tok in tokens {
            let (key, value) = tok.split_once('=').expect("key=value");
            match key {
                "write" => f.writes = value.split(',').map(|v| v.parse().unwrap()).collect(),
                "alloc" => f.alloc = Some(value.to_string()),
                "free" => f.free = Some(value.parse().unwrap()),
                other => panic!("unknown expectation key {other}"),
            }
        }
        out.push(f);
    }
    out.sort();
    out
}

pub fn findings(reports: &[ErrorReport]) -> Vec<Finding> {
    let mut v: Vec<Finding> = reports.iter().map(finding_of).collect();
    v.sort();
    v
}

const CALLS: &[&str] = &[
    "call time",
    "call gettimeofday",
    "call getpid",
    "call open input.dat",
    "call write 1 64",
    "call read 0 16",
    "call clone",
    "call mmap 4096",
    "call fcntl 3 F_GETFD",
    "call sleep 1",
    "call close 9",
    "call munmap 0x7f0000000000 4096",
];

const BOUNDARIES: &[&str] = &["call fork", "call pipe", "call lseek 1 0", "call socket", "call fcntl 1 F_SETFL 0"];

pub struct GeneratedTrace {
    pub text: String,
    /// Irrevocable calls in the trace; the run has this many epochs plus one.
    pub boundaries: usize,
}

/// A random straight-line trace with no heap errors: every access stays in
/// bounds, nothing is freed twice or touched after free, and every live
/// object stays referenced from a global word.
pub fn clean_trace(rng: &mut impl Rng, len: usize) -> GeneratedTrace {
    let mut text = String::from("stack push main\n");
    let mut live: Vec<(usize, u64)> = Vec::new();
    let mut next = 0usize;
    let mut depth = 1;
    let mut boundaries = 0;
    for _ in 0..len {
        let roll = rng.gen_range(0..100);
        match roll {
            0..=19 => {
                let size = match rng.gen_range(0..10) {
                    0 => rng.gen_range(600..6000),
                    1..=3 => rng.gen_range(65..600),
                    _ => rng.gen_range(1..65),
                };
                let _ = writeln!(text, "malloc v{next} {size}\nglobal {next} = v{next}");
                live.push((next, size));
                next += 1;
            }
            20..=44 if !live.is_empty() => {
                let &(v, size) = live.choose(rng).unwrap();
                let off = rng.gen_range(0..size);
                let n = rng.gen_range(1..=(size - off).min(64));
                if rng.gen_bool(0.5) {
                    let _ = writeln!(text, "write v{v} {off} {n} {:02x}", rng.gen::<u8>());
                } else {
                    let _ = writeln!(text, "writeabs v{v}+{off} {n} {:02x}", rng.gen::<u8>());
                }
            }
            45..=54 if !live.is_empty() => {
                let &(v, size) = live.choose(rng).unwrap();
                if size >= 8 {
                    let off = rng.gen_range(0..=size - 8);
                    let &(w, wsize) = live.choose(rng).unwrap();
                    let _ = writeln!(text, "store v{v} {off} = v{w}+{}", rng.gen_range(0..wsize));
                } else {
                    let _ = writeln!(text, "read v{v} 0 {size}");
                }
            }
            55..=61 if !live.is_empty() => {
                let i = rng.gen_range(0..live.len());
                let (v, _) = live.swap_remove(i);
                let _ = writeln!(text, "free v{v}");
            }
            62..=67 => {
                let _ = writeln!(text, "reg r{} = {}", rng.gen_range(0..4), rng.gen_range(0..1000u64));
            }
            68..=72 => {
                if depth > 1 && rng.gen_bool(0.5) {
                    text.push_str("stack pop\n");
                    depth -= 1;
                } else {
                    let _ = writeln!(text, "stack push f{}", rng.gen_range(0..8));
                    depth += 1;
                }
            }
            73..=89 => {
                text.push_str(CALLS.choose(rng).unwrap());
                text.push('\n');
            }
            90..=95 => {
                text.push_str(BOUNDARIES.choose(rng).unwrap());
                text.push('\n');
                boundaries += 1;
            }
            _ => {
                if let Some(&(v, size)) = live.choose(rng) {
                    let _ = writeln!(text, "read v{v} 0 {size}");
                }
            }
        }
    }
    text.push_str("end\n");
    GeneratedTrace { text, boundaries }
}
