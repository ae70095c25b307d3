// SPDX-License-Identifier: Apache-2.0

//! Declarative scenarios (TOML, `.scn`) and their execution.
//!
//! ```toml
//! seed = 7
//!
//! [[devices]]
//! store_mode = "rollback_resistant"
//!
//! [[enclaves]]
//! device = 0
//! id = "counter-app"
//! v = 1
//! binary = "counter-app v1"
//! state = "genesis"
//! inputs = ["a", "b"]
//!
//! [operation]
//! kind = "update"
//! v = 2
//! binary = "counter-app v2"
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{FaultAction, FaultPlan, MessageFault, MsgKind};
use crate::clock::ContextDirection;
use crate::model::{EnclaveId, SoftwareId, Version};
use crate::monitor::SmConfig;
use crate::orchestrator::{classify_outcome, OpKind, OutcomeKind};
use crate::persistence::StoreMode;
use crate::predicates::{check_predicates, Predicate, Violation};
use crate::trace::Trace;
use crate::world::{Adversary, DeviceConfig, OperationSpec, World, WorldConfig, WorldError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    World(#[from] WorldError),
}

impl ScenarioError {
    fn schema(msg: impl Into<String>) -> Self {
        ScenarioError::Schema(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    #[serde(default)]
    pub store_mode: StoreMode,
    #[serde(default = "defaults::timeout_sm")]
    pub timeout_sm: u64,
    #[serde(default = "defaults::ack_timeout")]
    pub ack_timeout: u64,
    #[serde(default = "defaults::resend_limit")]
    pub resend_limit: u32,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        let sm = SmConfig::default();
        Self { store_mode: StoreMode::default(), timeout_sm: sm.timeout_sm, ack_timeout: sm.ack_timeout, resend_limit: sm.resend_limit }
    }
}

mod defaults {
    use crate::monitor::SmConfig;

    pub fn timeout_sm() -> u64 {
        SmConfig::default().timeout_sm
    }
    pub fn ack_timeout() -> u64 {
        SmConfig::default().ack_timeout
    }
    pub fn resend_limit() -> u32 {
        SmConfig::default().resend_limit
    }
    pub fn inputs() -> usize {
        3
    }
    pub fn attempts() -> usize {
        1
    }
    pub fn switches() -> usize {
        20
    }
    pub fn devices() -> Vec<super::DeviceSpec> {
        vec![super::DeviceSpec::default()]
    }
}

/// An enclave installed before the operation starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnclaveSpec {
    #[serde(default)]
    pub device: usize,
    pub id: String,
    pub v: u64,
    #[serde(default)]
    pub n: Option<u32>,
    pub binary: String,
    /// Initial state as UTF-8 text.
    #[serde(default)]
    pub state: Option<String>,
    /// Initial state of this many seeded random bytes; exclusive with `state`.
    #[serde(default)]
    pub state_size: Option<usize>,
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperationDef {
    Update {
        #[serde(default)]
        source: usize,
        v: u64,
        binary: String,
        #[serde(default)]
        n: Option<u32>,
        #[serde(default = "defaults::inputs")]
        inputs: usize,
    },
    Migration {
        #[serde(default)]
        source: usize,
        dst_device: usize,
        #[serde(default)]
        n: Option<u32>,
        #[serde(default = "defaults::inputs")]
        inputs: usize,
    },
    /// Initialize `attempts` extra copies of the source binary.
    CloneAttack {
        #[serde(default)]
        source: usize,
        #[serde(default = "defaults::attempts")]
        attempts: usize,
    },
    /// Update to `v`, optionally crash the monitor, then re-init the old binary.
    RollbackAttack {
        #[serde(default)]
        source: usize,
        v: u64,
        binary: String,
        #[serde(default)]
        crash: bool,
    },
    /// Abort one migration after export, then replay its blob into a second one.
    StateReplayAttack {
        #[serde(default)]
        source: usize,
        dst_device: usize,
    },
    /// Random enter/exit schedule; local time must equal the summed intervals.
    TimeAccounting {
        #[serde(default)]
        source: usize,
        #[serde(default = "defaults::switches")]
        switches: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adversary: Adversary,
    #[serde(default)]
    pub hop_latency: Option<u64>,
    #[serde(default)]
    pub step_budget: Option<usize>,
    #[serde(default)]
    pub party_timeout: Option<u64>,
    #[serde(default = "defaults::devices")]
    pub devices: Vec<DeviceSpec>,
    pub enclaves: Vec<EnclaveSpec>,
    pub operation: OperationDef,
    #[serde(default)]
    pub faults: FaultPlan,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.devices.is_empty() {
            return Err(ScenarioError::schema("at least one device is required"));
        }
        if self.enclaves.is_empty() {
            return Err(ScenarioError::schema("at least one enclave is required"));
        }
        for (i, e) in self.enclaves.iter().enumerate() {
            if e.device >= self.devices.len() {
                return Err(ScenarioError::schema(format!("enclaves[{i}].device {} out of range", e.device)));
            }
            if e.state.is_some() && e.state_size.is_some() {
                return Err(ScenarioError::schema(format!("enclaves[{i}] sets both state and state_size")));
            }
            SoftwareId::new(e.id.as_bytes()).map_err(|err| ScenarioError::schema(format!("enclaves[{i}].id: {err}")))?;
            if e.binary.is_empty() {
                return Err(ScenarioError::schema(format!("enclaves[{i}].binary is empty")));
            }
        }
        let (source, dst) = match &self.operation {
            OperationDef::Update { source, binary, .. } | OperationDef::RollbackAttack { source, binary, .. } => {
                if binary.is_empty() {
                    return Err(ScenarioError::schema("operation.binary is empty"));
                }
                (*source, None)
            }
            OperationDef::Migration { source, dst_device, .. } | OperationDef::StateReplayAttack { source, dst_device } => {
                (*source, Some(*dst_device))
            }
            OperationDef::CloneAttack { source, .. } | OperationDef::TimeAccounting { source, .. } => (*source, None),
        };
        if source >= self.enclaves.len() {
            return Err(ScenarioError::schema(format!("operation.source {source} out of range")));
        }
        if let Some(d) = dst {
            if d >= self.devices.len() {
                return Err(ScenarioError::schema(format!("operation.dst_device {d} out of range")));
            }
        }
        for c in &self.faults.crashes {
            if !c.component.starts_with("dev") {
                return Err(ScenarioError::schema(format!("crash component {:?} is not a device or enclave", c.component)));
            }
        }
        Ok(())
    }

    /// True when some device runs the store without rollback protection,
    /// so predicate violations are the expected result.
    pub fn negative_mode(&self) -> bool {
        self.devices.iter().any(|d| d.store_mode == StoreMode::RollbackVulnerable)
    }

    pub fn is_protocol_operation(&self) -> bool {
        matches!(self.operation, OperationDef::Update { .. } | OperationDef::Migration { .. })
    }

    pub fn world_config(&self) -> WorldConfig {
        let mut cfg = WorldConfig::new(self.seed, self.devices.len());
        cfg.devices = self
            .devices
            .iter()
            .map(|d| DeviceConfig {
                store_mode: d.store_mode,
                sm: SmConfig { timeout_sm: d.timeout_sm, ack_timeout: d.ack_timeout, resend_limit: d.resend_limit },
            })
            .collect();
        cfg.faults = self.faults.clone();
        cfg.adversary = self.adversary;
        if let Some(h) = self.hop_latency {
            cfg.hop_latency = h;
        }
        if let Some(b) = self.step_budget {
            cfg.step_budget = b;
        }
        if let Some(t) = self.party_timeout {
            cfg.party_timeout = t;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    /// Outcome kind name, or `AttackSucceeded` when an attack was not stopped.
    pub outcome: String,
    pub reason: Option<String>,
    pub final_versions: BTreeMap<String, u64>,
    pub violations: Vec<Violation>,
    pub negative_mode: bool,
    #[serde(skip)]
    pub trace: Trace,
}

impl ScenarioReport {
    pub fn kind(&self) -> Option<OutcomeKind> {
        [
            OutcomeKind::Committed,
            OutcomeKind::AbortedSourceActive,
            OutcomeKind::AlarmNeitherActive,
            OutcomeKind::RejectedAtInit,
        ]
        .into_iter()
        .find(|k| k.name() == self.outcome)
    }
}

fn gen_inputs(rng: &mut ChaCha8Rng, count: usize) -> Vec<Vec<u8>> {
    (0..count)
        .map(|_| {
            let len = rng.gen_range(1..=32);
            (0..len).map(|_| rng.gen()).collect()
        })
        .collect()
}

struct Installed {
    dev: usize,
    eid: EnclaveId,
    id: SoftwareId,
    v: Version,
    n: Option<u32>,
    binary: Vec<u8>,
}

fn install_all(s: &Scenario, w: &mut World, rng: &mut ChaCha8Rng) -> Result<Vec<Installed>, ScenarioError> {
    let mut out = Vec::new();
    for e in &s.enclaves {
        let state = match (&e.state, e.state_size) {
            (Some(text), _) => text.as_bytes().to_vec(),
            (None, Some(n)) => (0..n).map(|_| rng.gen()).collect(),
            (None, None) => Vec::new(),
        };
        let inputs: Vec<Vec<u8>> = e.inputs.iter().map(|i| i.as_bytes().to_vec()).collect();
        let id = SoftwareId::new(e.id.as_bytes()).expect("validated");
        let eid = w.install(e.device, id.clone(), Version(e.v), e.n, e.binary.as_bytes(), state, &inputs)?;
        out.push(Installed { dev: e.device, eid, id, v: Version(e.v), n: e.n, binary: e.binary.as_bytes().to_vec() });
    }
    Ok(out)
}

fn finish(w: &mut World, negative_mode: bool) -> Result<ScenarioReport, ScenarioError> {
    let o = w.outcome()?;
    let violations = check_predicates(&o.trace);
    Ok(ScenarioReport {
        outcome: o.kind.name().to_string(),
        reason: o.reject_reason,
        final_versions: o.final_versions,
        violations,
        negative_mode,
        trace: o.trace,
    })
}

/// Runs a scenario to quiescence and evaluates the predicates.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioReport, ScenarioError> {
    s.validate()?;
    let mut w = World::new(&s.world_config());
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5ce7_a210);
    let installed = install_all(s, &mut w, &mut rng)?;
    let negative = s.negative_mode();
    match &s.operation {
        OperationDef::Update { source, v, binary, n, inputs } => {
            let src = &installed[*source];
            let spec = OperationSpec {
                op: OpKind::Update,
                src_dev: src.dev,
                eid_s: src.eid,
                dst_dev: src.dev,
                id: src.id.clone(),
                v: Version(*v),
                n: n.or(src.n),
                binary: binary.as_bytes().to_vec(),
                inputs: gen_inputs(&mut rng, *inputs),
            };
            w.begin(spec)?;
            w.run_until_quiescent()?;
            rollback_probe(&mut w, src);
            finish(&mut w, negative)
        }
        OperationDef::Migration { source, dst_device, n, inputs } => {
            let src = &installed[*source];
            let spec = migration_spec(src, *dst_device, n.or(src.n), gen_inputs(&mut rng, *inputs));
            w.begin(spec)?;
            w.run_until_quiescent()?;
            finish(&mut w, negative)
        }
        OperationDef::CloneAttack { source, attempts } => clone_attack(&mut w, &installed[*source], *attempts, negative),
        OperationDef::RollbackAttack { source, v, binary, crash } => {
            let src = &installed[*source];
            let spec = OperationSpec {
                op: OpKind::Update,
                src_dev: src.dev,
                eid_s: src.eid,
                dst_dev: src.dev,
                id: src.id.clone(),
                v: Version(*v),
                n: src.n,
                binary: binary.as_bytes().to_vec(),
                inputs: Vec::new(),
            };
            w.begin(spec)?;
            w.run_until_quiescent()?;
            let update = w.outcome()?;
            if update.kind != OutcomeKind::Committed {
                w.note(format!("attack: update did not commit ({})", update.kind.name()));
                return finish(&mut w, negative);
            }
            if *crash {
                w.crash_device(src.dev, "injected");
            }
            let r = w.sm_call(src.dev, |w, now| w.devices[src.dev].sm.init(src.id.clone(), src.v, src.n, &src.binary, now));
            attack_report(&mut w, "re-init of the old version", r.map(|_| ()), negative)
        }
        OperationDef::StateReplayAttack { source, dst_device } => {
            state_replay_attack(&mut w, &installed[*source], *dst_device, &mut rng, negative)
        }
        OperationDef::TimeAccounting { source, switches } => {
            time_accounting(&mut w, &installed[*source], *switches, &mut rng, negative)
        }
    }
}

/// After a committed update, try to initialize the replaced version again.
/// Success shows up as a rollback predicate violation.
fn rollback_probe(w: &mut World, src: &Installed) {
    if classify_outcome(&w.trace) != Ok(OutcomeKind::Committed) {
        return;
    }
    let r = w.sm_call(src.dev, |w, now| w.devices[src.dev].sm.init(src.id.clone(), src.v, src.n, &src.binary, now));
    let verdict = match r {
        Ok(_) => "accepted".to_string(),
        Err(e) => format!("rejected:{}", e.code()),
    };
    w.note(format!("probe: re-init of {} v{}: {verdict}", src.id, src.v.0));
}

fn migration_spec(src: &Installed, dst_dev: usize, n: Option<u32>, inputs: Vec<Vec<u8>>) -> OperationSpec {
    OperationSpec {
        op: OpKind::Migration,
        src_dev: src.dev,
        eid_s: src.eid,
        dst_dev,
        id: src.id.clone(),
        v: src.v,
        n,
        binary: src.binary.clone(),
        inputs,
    }
}

fn attack_report(
    w: &mut World,
    what: &str,
    r: Result<(), crate::monitor::SmError>,
    negative: bool,
) -> Result<ScenarioReport, ScenarioError> {
    let (outcome, reason) = match r {
        Ok(()) => ("AttackSucceeded".to_string(), None),
        Err(e) => (OutcomeKind::RejectedAtInit.name().to_string(), Some(e.code().to_string())),
    };
    w.note(format!("attack: {what}: {}", reason.as_deref().unwrap_or("accepted")));
    let final_versions = final_versions(w);
    let trace = w.trace.clone();
    Ok(ScenarioReport { outcome, reason, final_versions, violations: check_predicates(&trace), negative_mode: negative, trace })
}

fn final_versions(w: &World) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for d in &w.devices {
        for e in d.sm.sw_versions() {
            out.insert(format!("{}:{}", d.name, e.id), e.v_latest.0);
        }
    }
    out
}

fn clone_attack(w: &mut World, src: &Installed, attempts: usize, negative: bool) -> Result<ScenarioReport, ScenarioError> {
    let mut last = Ok(());
    for _ in 0..attempts {
        last = w
            .sm_call(src.dev, |w, now| w.devices[src.dev].sm.init(src.id.clone(), src.v, src.n, &src.binary, now))
            .map(|_| ());
        if last.is_err() {
            break;
        }
    }
    attack_report(w, "clone init", last, negative)
}

fn state_replay_attack(
    w: &mut World,
    src: &Installed,
    dst_dev: usize,
    rng: &mut ChaCha8Rng,
    negative: bool,
) -> Result<ScenarioReport, ScenarioError> {
    // First session: the blob never reaches E_D, so both monitors time out.
    w.add_message_fault(MessageFault { kind: MsgKind::ImportState, occurrence: 0, action: FaultAction::Drop });
    w.begin(migration_spec(src, dst_dev, src.n, Vec::new()))?;
    w.run_until_quiescent()?;
    let first = w.outcome()?;
    let Some(blob) = w.last_blob.clone() else {
        w.note("attack: first session produced no blob");
        return finish(w, negative);
    };
    if first.kind != OutcomeKind::AbortedSourceActive {
        w.note(format!("attack: first session ended {}", first.kind.name()));
        return finish(w, negative);
    }
    w.replay_blob = Some(blob);
    w.begin(migration_spec(src, dst_dev, src.n, gen_inputs(rng, 2)))?;
    w.run_until_quiescent()?;
    let replay_rejected = w.trace.events.iter().any(|e| e.kind == "ImportState" && e.verdict.starts_with("rejected:"));
    let mut report = finish(w, negative)?;
    if !replay_rejected {
        report.outcome = "AttackSucceeded".into();
    } else {
        report.reason = Some("AuthFailure".into());
    }
    Ok(report)
}

fn time_accounting(
    w: &mut World,
    src: &Installed,
    switches: usize,
    rng: &mut ChaCha8Rng,
    negative: bool,
) -> Result<ScenarioReport, ScenarioError> {
    let mut expected = w.devices[src.dev].sm.enclave(src.eid).map(|r| r.t_e).unwrap_or(0);
    let (dev, eid) = (src.dev, src.eid);
    for _ in 0..switches {
        w.clock.advance(rng.gen_range(0..500));
        let enter = w.clock.rdtime();
        let r = w.sm_call(dev, |w, now| w.devices[dev].sm.context_switch(eid, ContextDirection::HostToEnclave, now));
        if let Err(e) = r {
            return attack_report(w, "enter", Err(e), negative);
        }
        w.clock.advance(rng.gen_range(0..500));
        let exit = w.clock.rdtime();
        w.sm_call(dev, |w, now| w.devices[dev].sm.context_switch(eid, ContextDirection::EnclaveToHost, now))
            .map_err(|e| WorldError::Setup { device: format!("dev{dev}"), source: e })?;
        expected += exit - enter;
    }
    let got = w.devices[dev].sm.enclave(eid).map(|r| r.t_e).unwrap_or(0);
    w.note(format!("time: local {got} expected {expected}"));
    let trace = w.trace.clone();
    let mut violations = check_predicates(&trace);
    if got != expected {
        violations.push(Violation {
            predicate: Predicate::TimeAccounting,
            index: trace.len().saturating_sub(1),
            message: format!("enclave local time {got} differs from summed intervals {expected}"),
        });
    }
    Ok(ScenarioReport {
        outcome: "TimeAccounted".into(),
        reason: None,
        final_versions: final_versions(w),
        violations,
        negative_mode: negative,
        trace,
    })
}
