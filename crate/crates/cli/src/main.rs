// SPDX-License-Identifier: Apache-2.0

//! `bridgesim` command-line front end.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use bridgesim::scenario::{self, DumpKind, RunOptions, Scenario, ScenarioError, BUILTINS, DUMP_FORMAT_VERSION};
use clap::{Parser, Subcommand};

const EXIT_FAIL: u8 = 1;
const EXIT_INVALID: u8 = 2;

#[derive(Parser)]
#[command(name = "bridgesim", version, about = "Simulate hybrid SPB / SDN bridged networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios and evaluate their assertions.
    Run {
        /// Scenario files, or `builtin:<name>`.
        #[arg(required = true)]
        files: Vec<String>,
        /// Write the event trace here (single scenario only).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop time in seconds, overriding the file.
        #[arg(long)]
        until: Option<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run a scenario to a time and print a state dump.
    Dump {
        file: String,
        #[arg(long)]
        at: f64,
        /// fdb, topology, lsdb or bindings
        what: DumpKind,
    },
    /// Check scenarios without running them.
    Validate {
        #[arg(required = true)]
        files: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// List the built-in scenarios.
    Builtins,
}

fn load(name: &str) -> Result<Scenario, String> {
    let text = match name.strip_prefix("builtin:") {
        Some(b) => scenario::builtin(b)
            .ok_or_else(|| format!("no built-in scenario {b:?}; try one of {}", BUILTINS.join(", ")))?
            .to_string(),
        None => fs::read_to_string(name).map_err(|e| format!("cannot read {name}: {e}"))?,
    };
    scenario::parse(&text).map_err(|e| e.to_string())
}

fn diagnostics(file: &str, errs: &[ScenarioError]) -> String {
    errs.iter().map(|e| format!("{file}: error: {e}\n")).collect()
}

/// Runs `work` over `items` on up to `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = work(&items[i]);
                out.lock().expect("no panics while held")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

struct Outcome {
    code: u8,
    stdout: String,
    stderr: String,
}

fn run_one(file: &str, opts: &RunOptions, trace: Option<&PathBuf>) -> Outcome {
    let invalid = |stderr| Outcome {
        code: EXIT_INVALID,
        stdout: String::new(),
        stderr,
    };
    let sc = match load(file) {
        Ok(s) => s,
        Err(e) => return invalid(format!("{file}: error: {e}\n")),
    };
    let out = match scenario::run(&sc, opts) {
        Ok(o) => o,
        Err(errs) => return invalid(diagnostics(file, &errs)),
    };
    let mut stderr = String::new();
    if let (Some(path), Some(lines)) = (trace, out.sim.trace().lines()) {
        let mut text = lines.join("\n");
        text.push('\n');
        if let Err(e) = fs::write(path, text) {
            stderr = format!("{}: error: cannot write trace: {e}\n", path.display());
        }
    }
    let mut stdout: String = out.report().into_iter().map(|l| l + "\n").collect();
    if !stdout.is_empty() && file.starts_with("builtin:") {
        stdout.insert_str(0, &format!("# {file}\n"));
    }
    Outcome {
        code: if !stderr.is_empty() {
            EXIT_INVALID
        } else if out.passed() {
            0
        } else {
            EXIT_FAIL
        },
        stdout,
        stderr,
    }
}

fn validate_one(file: &str) -> Outcome {
    let res = load(file)
        .map_err(|e| format!("{file}: error: {e}\n"))
        .and_then(|sc| scenario::validate(&sc).map_err(|errs| diagnostics(file, &errs)));
    match res {
        Ok(()) => Outcome {
            code: 0,
            stdout: format!("{file}: ok\n"),
            stderr: String::new(),
        },
        Err(stderr) => Outcome {
            code: EXIT_INVALID,
            stdout: String::new(),
            stderr,
        },
    }
}

fn emit(outcomes: Vec<Outcome>) -> ExitCode {
    let mut code = 0;
    let (mut so, mut se) = (std::io::stdout().lock(), std::io::stderr().lock());
    for o in outcomes {
        let _ = so.write_all(o.stdout.as_bytes());
        let _ = se.write_all(o.stderr.as_bytes());
        code = code.max(o.code);
    }
    ExitCode::from(code)
}

fn check_format_pin() -> Result<(), String> {
    match std::env::var("BRIDGESIM_FORMAT_VERSION") {
        Ok(v) if v.trim() != DUMP_FORMAT_VERSION.to_string() => Err(format!(
            "BRIDGESIM_FORMAT_VERSION={v} but this build writes format {DUMP_FORMAT_VERSION}"
        )),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = check_format_pin() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_INVALID);
    }
    match cli.command {
        Command::Run {
            files,
            trace,
            seed,
            until,
            jobs,
        } => {
            if trace.is_some() && files.len() > 1 {
                eprintln!("error: --trace takes a single scenario");
                return ExitCode::from(EXIT_INVALID);
            }
            let opts = RunOptions {
                seed,
                until,
                keep_trace: trace.is_some(),
            };
            emit(par_map(&files, jobs, |f| run_one(f, &opts, trace.as_ref())))
        }
        Command::Validate { files, jobs } => emit(par_map(&files, jobs, |f| validate_one(f))),
        Command::Dump { file, at, what } => {
            let lines = load(&file)
                .map_err(|e| format!("{file}: error: {e}\n"))
                .and_then(|sc| scenario::dump(&sc, at, what).map_err(|errs| diagnostics(&file, &errs)));
            match lines {
                Ok(lines) => emit(vec![Outcome {
                    code: 0,
                    stdout: lines.into_iter().map(|l| l + "\n").collect(),
                    stderr: String::new(),
                }]),
                Err(stderr) => emit(vec![Outcome {
                    code: EXIT_INVALID,
                    stdout: String::new(),
                    stderr,
                }]),
            }
        }
        Command::Builtins => {
            for b in BUILTINS {
                println!("builtin:{b}");
            }
            ExitCode::SUCCESS
        }
    }
}
