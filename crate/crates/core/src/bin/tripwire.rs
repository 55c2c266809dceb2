use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tripwire::{emit_json, emit_text, parse_trace, run, Detectors, EngineConfig, HeapGeometry};

#[derive(Parser)]
#[command(name = "tripwire", version, about = "Evidence-based heap error detection for event traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a trace and report heap errors.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Output {
    Text,
    Json,
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|e| format!("`{s}`: {e}"))
}

fn parse_byte(s: &str) -> Result<u8, String> {
    let v = parse_u64(s)?;
    u8::try_from(v).map_err(|_| format!("`{s}` does not fit in a byte"))
}

#[derive(clap::Args)]
struct RunArgs {
    /// Trace file to execute.
    trace: PathBuf,
    /// Comma-separated subset of overflow,uaf,leak (or `all`).
    #[arg(long, default_value = "overflow,uaf,leak")]
    detectors: Detectors,
    #[arg(long, default_value = "16777216", value_parser = parse_u64)]
    quarantine_bytes: u64,
    #[arg(long, default_value = "1024", value_parser = parse_u64)]
    quarantine_count: u64,
    /// Bytes of each freed object filled with canaries.
    #[arg(long, default_value = "128", value_parser = parse_u64)]
    uaf_fill: u64,
    #[arg(long, default_value = "0xCA", value_parser = parse_byte)]
    canary_byte: u8,
    #[arg(long, default_value_t = 4)]
    max_watchpoints: usize,
    /// Also report freed objects that are still reachable.
    #[arg(long)]
    dangling: bool,
    #[arg(long, value_enum, default_value = "text")]
    output: Output,
    /// Print the final state hash after a text report.
    #[arg(long)]
    dump_state_hash: bool,
    #[arg(long, value_parser = parse_u64)]
    heap_base: Option<u64>,
    #[arg(long, value_parser = parse_u64)]
    heap_size: Option<u64>,
    #[arg(long, value_parser = parse_u64)]
    globals_base: Option<u64>,
    #[arg(long, value_parser = parse_u64)]
    globals_words: Option<u64>,
}

impl RunArgs {
    fn config(&self) -> EngineConfig {
        let d = HeapGeometry::default();
        EngineConfig {
            detectors: self.detectors,
            quarantine_max_bytes: self.quarantine_bytes,
            quarantine_max_count: self.quarantine_count,
            uaf_fill_prefix: self.uaf_fill,
            canary_byte: self.canary_byte,
            max_watchpoints: self.max_watchpoints,
            dangling: self.dangling,
            geometry: HeapGeometry {
                heap_base: self.heap_base.unwrap_or(d.heap_base),
                heap_size: self.heap_size.unwrap_or(d.heap_size),
                globals_base: self.globals_base.unwrap_or(d.globals_base),
                globals_words: self.globals_words.unwrap_or(d.globals_words),
                ..d
            },
        }
    }
}

fn execute(args: &RunArgs) -> Result<bool, String> {
    let path = args.trace.display();
    let text = fs::read_to_string(&args.trace).map_err(|e| format!("{path}: {e}"))?;
    let events = parse_trace(&text).map_err(|e| format!("{path}:{}: {}", e.line, e.kind))?;
    let config = args.config();
    let outcome = run(&events, &config).map_err(|e| format!("{path}: {e}"))?;
    match args.output {
        Output::Text => {
            print!("{}", emit_text(&outcome.reports));
            if args.dump_state_hash {
                println!("state hash: {}", outcome.state_hash);
            }
        }
        Output::Json => print!("{}", emit_json(&outcome.reports, &outcome.meta(&config))),
    }
    Ok(!outcome.reports.is_empty())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Run(args) => match execute(&args) {
            Ok(false) => ExitCode::SUCCESS,
            Ok(true) => ExitCode::from(1),
            Err(msg) => {
                eprintln!("tripwire: {msg}");
                ExitCode::from(2)
            }
        },
    }
}
