// SPDX-License-Identifier: Apache-2.0

//! Exhaustive single-fault sweeps over a protocol scenario.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{CommitCrash, CrashPoint, CrashWhen, FaultAction, MessageFault, MsgKind};
use crate::crypto::hash;
use crate::scenario::{run_scenario, OperationDef, Scenario, ScenarioError};
use crate::trace::{Detail, Trace};

/// Delay applied by the `delay` fault; longer than the default ack timeout.
pub const SWEEP_DELAY_TICKS: u64 = 2_500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepSpec {
    SingleFaults,
    Crashes,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCase {
    pub index: usize,
    pub label: String,
    #[serde(skip)]
    fault: CaseFault,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
enum CaseFault {
    #[default]
    None,
    Message(MessageFault),
    Crash(CrashPoint),
    Commit(CommitCrash),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseResult {
    pub index: usize,
    pub label: String,
    pub outcome: String,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub spec: SweepSpec,
    pub operation: String,
    /// Envelopes per kind in the fault-free run.
    pub happy_path: BTreeMap<String, usize>,
    pub message_cases: usize,
    /// Deliveries per receiving component in the fault-free run, the party excluded.
    pub components: BTreeMap<String, usize>,
    pub crash_cases: usize,
    pub commit_crash_cases: usize,
    pub total_cases: usize,
    pub arithmetic: String,
    pub outcomes: BTreeMap<String, usize>,
    pub cases: Vec<CaseResult>,
    pub violation_count: usize,
    pub negative_mode: bool,
    /// Hex digest over the case results; reproducible for a given scenario and spec.
    pub digest: String,
    pub wall_ms: u128,
}

impl SweepReport {
    pub fn is_clean(&self) -> bool {
        self.violation_count == 0
    }
}

const ACTIONS: [(&str, FaultAction); 4] = [
    ("drop", FaultAction::Drop),
    ("delay", FaultAction::Delay { ticks: SWEEP_DELAY_TICKS }),
    ("duplicate", FaultAction::Duplicate),
    ("corrupt", FaultAction::CorruptByte { offset: 0, mask: 0x01 }),
];

struct Baseline {
    kinds: BTreeMap<MsgKind, usize>,
    /// Receiver of each delivery, in order.
    receivers: Vec<String>,
    components: BTreeMap<String, usize>,
}

fn baseline(trace: &Trace) -> Baseline {
    let mut kinds = BTreeMap::new();
    let mut components = BTreeMap::new();
    let mut receivers = Vec::new();
    for ev in &trace.events {
        if !matches!(ev.detail, Some(Detail::Delivery { .. })) {
            continue;
        }
        if let Some(k) = MsgKind::parse(&ev.kind) {
            *kinds.entry(k).or_insert(0) += 1;
        }
        if ev.dst != "P" {
            *components.entry(ev.dst.clone()).or_insert(0) += 1;
        }
        receivers.push(ev.dst.clone());
    }
    Baseline { kinds, receivers, components }
}

fn commit_substeps(s: &Scenario) -> Vec<(String, u8)> {
    let src_dev = s.enclaves[source_of(s)].device;
    match &s.operation {
        OperationDef::Update { .. } => (1..=3).map(|k| (format!("dev{src_dev}"), k)).collect(),
        OperationDef::Migration { dst_device, .. } => {
            let mut v: Vec<_> = (1..=2).map(|k| (format!("dev{src_dev}"), k)).collect();
            v.push((format!("dev{dst_device}"), 1));
            v
        }
        _ => Vec::new(),
    }
}

fn source_of(s: &Scenario) -> usize {
    match &s.operation {
        OperationDef::Update { source, .. } | OperationDef::Migration { source, .. } => *source,
        _ => 0,
    }
}

fn enumerate(s: &Scenario, spec: SweepSpec, base: &Baseline) -> (Vec<SweepCase>, usize, usize, usize) {
    let mut cases = Vec::new();
    let mut push = |label: String, fault: CaseFault| {
        let index = cases.len();
        cases.push(SweepCase { index, label, fault });
    };
    let mut n_msg = 0;
    if spec != SweepSpec::Crashes {
        for (&kind, &count) in &base.kinds {
            for occurrence in 0..count {
                for (name, action) in ACTIONS {
                    push(format!("{name} {kind}#{occurrence}"), CaseFault::Message(MessageFault { kind, occurrence, action }));
                    n_msg += 1;
                }
            }
        }
    }
    let (mut n_crash, mut n_commit) = (0, 0);
    if spec != SweepSpec::SingleFaults {
        // Monitors may crash at any step; enclaves only around their own deliveries.
        let devices: Vec<String> = (0..s.devices.len()).map(|i| format!("dev{i}")).collect();
        for (step, receiver) in base.receivers.iter().enumerate() {
            let enclave = receiver.contains('/').then(|| receiver.clone());
            for component in devices.iter().cloned().chain(enclave) {
                for (name, when) in [("before", CrashWhen::BeforeHandling), ("after", CrashWhen::AfterHandling)] {
                    let label = format!("crash {component} {name} delivery {step} (to {receiver})");
                    push(label, CaseFault::Crash(CrashPoint { component: component.clone(), step, when }));
                    n_crash += 1;
                }
            }
        }
        for (device, substep) in commit_substeps(s) {
            push(format!("crash {device} at commit substep {substep}"), CaseFault::Commit(CommitCrash { device, substep }));
            n_commit += 1;
        }
    }
    (cases, n_msg, n_crash, n_commit)
}

fn run_case(s: &Scenario, case: &SweepCase) -> CaseResult {
    let mut sc = s.clone();
    match &case.fault {
        CaseFault::None => {}
        CaseFault::Message(f) => sc.faults.messages.push(f.clone()),
        CaseFault::Crash(c) => sc.faults.crashes.push(c.clone()),
        CaseFault::Commit(c) => sc.faults.commit_crashes.push(c.clone()),
    }
    let alarm_allowed = lost_acks(&sc) > sc.devices.iter().map(|d| d.resend_limit as usize).min().unwrap_or(0);
    match run_scenario(&sc) {
        Ok(r) => {
            let mut violations: Vec<String> = r.violations.iter().map(|v| v.to_string()).collect();
            if r.outcome == "AlarmNeitherActive" && !alarm_allowed {
                violations.push("alarm raised without 4o/4q loss beyond the resend limit".into());
            }
            if r.kind().is_none() {
                violations.push(format!("unexpected outcome {}", r.outcome));
            }
            CaseResult { index: case.index, label: case.label.clone(), outcome: r.outcome, violations }
        }
        Err(e) => CaseResult {
            index: case.index,
            label: case.label.clone(),
            outcome: "Error".into(),
            violations: vec![e.to_string()],
        },
    }
}

/// Number of 4o/4q transmissions the plan drops or corrupts.
fn lost_acks(s: &Scenario) -> usize {
    s.faults
        .messages
        .iter()
        .filter(|f| matches!(f.kind, MsgKind::Ok4o | MsgKind::Ok4q))
        .filter(|f| matches!(f.action, FaultAction::Drop | FaultAction::CorruptByte { .. }))
        .count()
}

/// Enumerates every fault placement for `spec`, runs each case to
/// quiescence on `jobs` threads, and merges results by case index.
pub fn sweep_faults(s: &Scenario, spec: SweepSpec, jobs: Option<usize>) -> Result<SweepReport, ScenarioError> {
    let started = Instant::now();
    let op = match &s.operation {
        OperationDef::Update { .. } => "update",
        OperationDef::Migration { .. } => "migration",
        _ => return Err(ScenarioError::Schema("sweeps need an update or migration operation".into())),
    };
    let happy = run_scenario(s)?;
    let base = baseline(&happy.trace);
    let (cases, n_msg, n_crash, n_commit) = enumerate(s, spec, &base);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| ScenarioError::Schema(format!("thread pool: {e}")))?;
    let results: Vec<CaseResult> = pool.install(|| cases.par_iter().map(|c| run_case(s, c)).collect());

    let happy_total: usize = base.kinds.values().sum();
    let enclave_deliveries: usize = base.components.iter().filter(|(c, _)| c.contains('/')).map(|(_, n)| n).sum();
    let crash_arith = if spec == SweepSpec::SingleFaults {
        "no crash points".to_string()
    } else {
        format!(
            "({} monitors x {} deliveries + {enclave_deliveries} enclave deliveries) x 2 = {n_crash} crash points; \
             {n_commit} commit substeps",
            s.devices.len(),
            base.receivers.len()
        )
    };
    let msg_arith = if spec == SweepSpec::Crashes {
        "no message faults".to_string()
    } else {
        format!("{happy_total} happy-path envelopes x {} actions = {n_msg}", ACTIONS.len())
    };
    let arithmetic = format!("{msg_arith}; {crash_arith}; total {}", n_msg + n_crash + n_commit);
    let mut outcomes = BTreeMap::new();
    for r in &results {
        *outcomes.entry(r.outcome.clone()).or_insert(0) += 1;
    }
    let violation_count = results.iter().filter(|r| !r.violations.is_empty()).count();
    let canon = serde_json::to_vec(&results).expect("results serialize");
    Ok(SweepReport {
        spec,
        operation: op.into(),
        happy_path: base.kinds.iter().map(|(k, v)| (k.name().to_string(), *v)).collect(),
        message_cases: n_msg,
        components: base.components,
        crash_cases: n_crash,
        commit_crash_cases: n_commit,
        total_cases: results.len(),
        arithmetic,
        outcomes,
        cases: results,
        violation_count,
        negative_mode: s.negative_mode(),
        digest: hex::encode(hash(&[&canon])),
        wall_ms: started.elapsed().as_millis(),
    })
}
