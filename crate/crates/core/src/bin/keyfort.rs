// SPDX-License-Identifier: Apache-2.0

//! `keyfort` command-line harness.
//!
//! Exit status: 0 all predicates hold, 2 predicate violation, 3 schema or
//! usage error, 4 step budget exceeded, 5 violation detected while running
//! against a rollback-vulnerable store (the expected negative result).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use keyfort::predicates::check_predicates;
use keyfort::scenario::{run_scenario, Scenario, ScenarioError};
use keyfort::sweep::{sweep_faults, SweepSpec};
use keyfort::trace::Trace;
use keyfort::world::WorldError;

const EXIT_OK: u8 = 0;
const EXIT_VIOLATION: u8 = 2;
const EXIT_USAGE: u8 = 3;
const EXIT_BUDGET: u8 = 4;
const EXIT_NEGATIVE: u8 = 5;

#[derive(Parser)]
#[command(name = "keyfort", version, about = "Security-monitor simulation harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and check the predicates over its trace.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run every single-fault placement of an update or migration scenario.
    Sweep {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        spec: SweepSpec,
        #[arg(long)]
        jobs: Option<usize>,
        /// Write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check the predicates over a recorded trace.
    Predicates { trace: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    ExitCode::from(match cli.cmd {
        Cmd::Run { scenario, seed, trace } => cmd_run(scenario, seed, trace),
        Cmd::Sweep { scenario, spec, jobs, report } => cmd_sweep(scenario, spec, jobs, report),
        Cmd::Predicates { trace } => cmd_predicates(trace),
    })
}

fn error_code(e: &ScenarioError) -> u8 {
    eprintln!("error: {e}");
    match e {
        ScenarioError::World(WorldError::StepBudgetExceeded(_)) => EXIT_BUDGET,
        _ => EXIT_USAGE,
    }
}

fn violation_code(violations: usize, negative: bool) -> u8 {
    match (violations, negative) {
        (0, _) => EXIT_OK,
        (_, true) => EXIT_NEGATIVE,
        (_, false) => EXIT_VIOLATION,
    }
}

fn write_file(path: &PathBuf, contents: &str) -> Result<(), u8> {
    fs::write(path, contents).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        EXIT_USAGE
    })
}

fn cmd_run(path: PathBuf, seed: Option<u64>, trace_out: Option<PathBuf>) -> u8 {
    let mut s = match Scenario::load(&path) {
        Ok(s) => s,
        Err(e) => return error_code(&e),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let r = match run_scenario(&s) {
        Ok(r) => r,
        Err(e) => return error_code(&e),
    };
    if let Some(out) = &trace_out {
        if let Err(code) = write_file(out, &r.trace.to_jsonl()) {
            return code;
        }
    }
    match &r.reason {
        Some(reason) => println!("outcome: {} ({reason})", r.outcome),
        None => println!("outcome: {}", r.outcome),
    }
    for (k, v) in &r.final_versions {
        println!("v_latest {k} = {v}");
    }
    println!("events: {}", r.trace.len());
    for v in &r.violations {
        println!("violation: {v}");
    }
    if r.negative_mode && !r.violations.is_empty() {
        println!("rollback-vulnerable store: violation detected as expected");
    }
    violation_code(r.violations.len(), r.negative_mode)
}

fn cmd_sweep(path: PathBuf, spec: SweepSpec, jobs: Option<usize>, report_out: Option<PathBuf>) -> u8 {
    let s = match Scenario::load(&path) {
        Ok(s) => s,
        Err(e) => return error_code(&e),
    };
    let r = match sweep_faults(&s, spec, jobs) {
        Ok(r) => r,
        Err(e) => return error_code(&e),
    };
    if let Some(out) = &report_out {
        let json = serde_json::to_string_pretty(&r).expect("report serializes");
        if let Err(code) = write_file(out, &json) {
            return code;
        }
    }
    println!("{} sweep over {}: {}", r.operation, path.display(), r.arithmetic);
    for (k, n) in &r.outcomes {
        println!("  {k}: {n}");
    }
    for c in r.cases.iter().filter(|c| !c.violations.is_empty()) {
        for v in &c.violations {
            println!("case {} [{}]: {v}", c.index, c.label);
        }
    }
    println!("cases with violations: {} of {}", r.violation_count, r.total_cases);
    println!("digest: {}", r.digest);
    println!("wall time: {} ms", r.wall_ms);
    violation_code(r.violation_count, r.negative_mode)
}

fn cmd_predicates(path: PathBuf) -> u8 {
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return EXIT_USAGE;
        }
    };
    let trace = match Trace::from_jsonl(&text) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: malformed trace: {e}");
            return EXIT_USAGE;
        }
    };
    let violations = check_predicates(&trace);
    for v in &violations {
        println!("violation: {v}");
    }
    println!("{} events, {} violations", trace.len(), violations.len());
    violation_code(violations.len(), false)
}
