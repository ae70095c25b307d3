// SPDX-License-Identifier: Apache-2.0

//! Simulated world: devices, the party P, the message fabric, the virtual
//! clock and the trace. [`World::run_until_quiescent`] is the event loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{CrashPoint, CrashWhen, Envelope, Fabric, FaultPlan, MsgKind, DEFAULT_HOP_LATENCY};
use crate::clock::{ContextDirection, VirtualClock};
use crate::crypto::{hash, measure, KeyMaterial, Mac, PublicKeyId};
use crate::enclave::{EnclaveMode, SimEnclave};
use crate::model::{EnclaveId, Phase, SoftwareId, Version};
use crate::monitor::{Effect, KeyDirectory, SecurityMonitor, SmConfig, SmError};
use crate::orchestrator::{classify_outcome, ClassifyError, OpKind, OperationOutcome, Party, PartyPlan, PartyStatus};
use crate::persistence::{SecureStore, StoreMode};
use crate::trace::{Detail, FinalEnclave, Trace, TraceEvent};
use crate::wire::Payload;

pub const DEFAULT_STEP_BUDGET: usize = 100_000;
pub const DEFAULT_INPUT_INTERVAL: u64 = 100;
pub const DEFAULT_PARTY_TIMEOUT: u64 = 20_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("step budget of {0} exceeded")]
    StepBudgetExceeded(usize),
    #[error("setup failed on {device}: {source}")]
    Setup { device: String, source: SmError },
    #[error("no such device {0}")]
    NoDevice(usize),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

/// Stale-snapshot adversary, consulted whenever a monitor restarts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    #[default]
    None,
    /// Present the snapshot one write before the latest.
    OneBack,
    /// Present the snapshot in force when the operation began.
    PreOperation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeviceConfig {
    pub store_mode: StoreMode,
    pub sm: SmConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldConfig {
    pub seed: u64,
    pub devices: Vec<DeviceConfig>,
    pub faults: FaultPlan,
    pub hop_latency: u64,
    pub input_interval: u64,
    pub party_timeout: u64,
    pub step_budget: usize,
    pub adversary: Adversary,
}

impl WorldConfig {
    pub fn new(seed: u64, devices: usize) -> Self {
        Self {
            seed,
            devices: vec![DeviceConfig::default(); devices],
            faults: FaultPlan::default(),
            hop_latency: DEFAULT_HOP_LATENCY,
            input_interval: DEFAULT_INPUT_INTERVAL,
            party_timeout: DEFAULT_PARTY_TIMEOUT,
            step_budget: DEFAULT_STEP_BUDGET,
            adversary: Adversary::None,
        }
    }
}

#[derive(Debug)]
pub struct Device {
    pub name: String,
    pub sm: SecurityMonitor,
    pub enclaves: BTreeMap<EnclaveId, SimEnclave>,
}

/// Operation handed to P.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperationSpec {
    pub op: OpKind,
    pub src_dev: usize,
    pub eid_s: EnclaveId,
    pub dst_dev: usize,
    pub id: SoftwareId,
    pub v: Version,
    pub n: Option<u32>,
    pub binary: Vec<u8>,
    /// Inputs fed to whichever pair enclave is running while the operation proceeds.
    pub inputs: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Deliver,
    SmTimer(usize),
    PartyTimer,
    Feed,
}

#[derive(Debug, Default)]
struct Feeder {
    inputs: Vec<Vec<u8>>,
    next: usize,
    next_at: Option<u64>,
}

type PhaseSnapshot = BTreeMap<EnclaveId, (Phase, bool)>;

pub struct World {
    pub clock: VirtualClock,
    keys: Arc<KeyDirectory>,
    fabric: Fabric,
    pub devices: Vec<Device>,
    party_key: KeyMaterial,
    party: Option<Party>,
    pub trace: Trace,
    crashes: Vec<CrashPoint>,
    delivery_index: usize,
    feeder: Feeder,
    source: Option<(usize, EnclaveId)>,
    dest: Option<(usize, EnclaveId)>,
    input_seq: u64,
    input_interval: u64,
    party_timeout: u64,
    step_budget: usize,
    adversary: Adversary,
    op_marks: Vec<u64>,
    rng: ChaCha8Rng,
    /// Most recent `(C, M)` produced by an export.
    pub last_blob: Option<(Vec<u8>, Mac)>,
    /// When set, the next import uses this blob instead of the one P sent.
    pub replay_blob: Option<(Vec<u8>, Mac)>,
}

impl World {
    pub fn new(cfg: &WorldConfig) -> Self {
        let root = KeyMaterial::from_bytes(hash(&[b"keyfort/world", &cfg.seed.to_be_bytes()]));
        let keys = Arc::new(KeyDirectory::new(root.derive("channels", &[])));
        let party_key = root.derive("party", &[]);
        let party_pk = party_key.public_id();
        let devices = cfg
            .devices
            .iter()
            .enumerate()
            .map(|(i, dc)| {
                let dk = root.derive("device", &(i as u64).to_be_bytes());
                let store = SecureStore::new(dc.store_mode, dk.derive("store", &[]));
                let rng_seed = cfg.seed ^ ((i as u64 + 1) << 48);
                let mut sm = SecurityMonitor::new(dk, keys.clone(), dc.sm, store, [party_pk], rng_seed);
                for cc in cfg.faults.commit_crashes.iter().filter(|c| c.device == format!("dev{i}")) {
                    sm.arm_commit_crash(cc.substep);
                }
                Device { name: format!("dev{i}"), sm, enclaves: BTreeMap::new() }
            })
            .collect();
        Self {
            clock: VirtualClock::default(),
            keys,
            fabric: Fabric::new(cfg.faults.messages.clone()).with_hop_latency(cfg.hop_latency),
            devices,
            party_key,
            party: None,
            trace: Trace::default(),
            crashes: cfg.faults.crashes.clone(),
            delivery_index: 0,
            feeder: Feeder::default(),
            source: None,
            dest: None,
            input_seq: 0,
            input_interval: cfg.input_interval,
            party_timeout: cfg.party_timeout,
            step_budget: cfg.step_budget,
            adversary: cfg.adversary,
            op_marks: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            last_blob: None,
            replay_blob: None,
        }
    }

    pub fn party_pk(&self) -> PublicKeyId {
        self.party_key.public_id()
    }

    pub fn keys(&self) -> &Arc<KeyDirectory> {
        &self.keys
    }

    pub fn party(&self) -> Option<&Party> {
        self.party.as_ref()
    }

    pub fn source(&self) -> Option<(usize, EnclaveId)> {
        self.source
    }

    pub fn dest(&self) -> Option<(usize, EnclaveId)> {
        self.dest
    }

    pub fn enclave_name(&self, dev: usize, eid: EnclaveId) -> String {
        format!("{}/{}", self.devices[dev].name, eid)
    }

    fn name_of(&self, pk: &PublicKeyId) -> String {
        if *pk == self.party_pk() {
            return "P".into();
        }
        match self.device_index(pk) {
            Some(i) => self.devices[i].name.clone(),
            None => format!("pk:{}", pk.short()),
        }
    }

    pub fn device_index(&self, pk: &PublicKeyId) -> Option<usize> {
        self.devices.iter().position(|d| d.sm.device_pk() == *pk)
    }

    fn event(&self, kind: &str, src: String, dst: String, verdict: &str, digest: String, detail: Option<Detail>) -> TraceEvent {
        TraceEvent {
            t: self.clock.rdtime(),
            seq: 0,
            kind: kind.to_string(),
            src,
            dst,
            verdict: verdict.to_string(),
            sm_state_digest: digest,
            detail,
        }
    }

    fn digest(&self, dev: usize) -> String {
        hex::encode(self.devices[dev].sm.digest())
    }

    fn log(&mut self, kind: &str, src: String, dst: String, verdict: &str, dev: Option<usize>, detail: Option<Detail>) {
        let digest = dev.map(|d| self.digest(d)).unwrap_or_default();
        let ev = self.event(kind, src, dst, verdict, digest, detail);
        self.trace.push(ev);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.log("note", String::new(), String::new(), "ok", None, Some(Detail::Note { text: text.into() }));
    }

    // ---- monitor calls with trace bookkeeping ------------------------------

    fn snapshot(&self, dev: usize) -> (PhaseSnapshot, BTreeMap<SoftwareId, Version>) {
        let sm = &self.devices[dev].sm;
        let phases = sm.enclaves().map(|r| (r.eid, (r.phase, r.resume_ok))).collect();
        let versions = sm.sw_versions().iter().map(|e| (e.id.clone(), e.v_latest)).collect();
        (phases, versions)
    }

    fn emit_diff(&mut self, dev: usize, before: (PhaseSnapshot, BTreeMap<SoftwareId, Version>)) {
        let (after_phases, after_versions) = self.snapshot(dev);
        let dname = self.devices[dev].name.clone();
        for (eid, (phase, resume_ok)) in &after_phases {
            let prev = before.0.get(eid);
            if prev.is_none() {
                let rec = self.devices[dev].sm.enclave(*eid).expect("listed").clone();
                self.devices[dev].enclaves.entry(*eid).or_insert_with(|| SimEnclave::new(*eid, Vec::new()));
                let detail = Detail::Init { id: rec.id.to_string(), v: rec.v.0, eid: eid.0, bypass: !rec.resume_ok };
                self.log("init", dname.clone(), self.enclave_name(dev, *eid), "ok", Some(dev), Some(detail));
            }
            if prev != Some(&(*phase, *resume_ok)) {
                let name = self.enclave_name(dev, *eid);
                let detail = Detail::Phase { enclave: name.clone(), phase: *phase, resume_ok: *resume_ok };
                self.log("phase", dname.clone(), name, "ok", Some(dev), Some(detail));
            }
        }
        for (id, v) in &after_versions {
            if before.1.get(id) != Some(v) {
                let detail = Detail::VersionCommit { id: id.to_string(), v_latest: v.0 };
                self.log("version_commit", dname.clone(), dname.clone(), "ok", Some(dev), Some(detail));
            }
        }
    }

    /// Runs `f` against a monitor, routes its effects, handles a crash it
    /// reports, and records phase and version changes in the trace.
    pub fn sm_call<T>(
        &mut self,
        dev: usize,
        f: impl FnOnce(&mut Self, u64) -> Result<T, SmError>,
    ) -> Result<T, SmError> {
        let before = self.snapshot(dev);
        let now = self.clock.rdtime();
        let r = f(self, now);
        self.route_effects(dev);
        if matches!(r, Err(SmError::Crashed)) {
            self.emit_diff(dev, before);
            self.crash_device(dev, "commit");
            return r;
        }
        self.emit_diff(dev, before);
        r
    }

    fn route_effects(&mut self, dev: usize) {
        let pk = self.devices[dev].sm.device_pk();
        for eff in self.devices[dev].sm.drain_effects() {
            match eff {
                Effect::Send { dst, to_enclave, payload } => {
                    if let Payload::Alarm { session, sent_4o } = payload {
                        let detail = Detail::Alarm { session, sent_4o };
                        let dname = self.name_of(&dst);
                        self.log("alarm", self.devices[dev].name.clone(), dname, "raised", Some(dev), Some(detail));
                    }
                    self.send(pk, dst, None, to_enclave, &payload);
                }
                Effect::HostResume(eid) => {
                    let d = &mut self.devices[dev];
                    if d.sm.run(eid).is_ok() {
                        if let Some(e) = d.enclaves.get_mut(&eid) {
                            if e.mode == EnclaveMode::ExportedHalted {
                                e.release();
                            }
                        }
                    }
                }
            }
        }
    }

    fn send(
        &mut self,
        src: PublicKeyId,
        dst: PublicKeyId,
        from_enclave: Option<EnclaveId>,
        to_enclave: Option<EnclaveId>,
        payload: &Payload,
    ) {
        let key = self.keys.pair_key(&src, &dst);
        let env = Envelope::new(&key, src, dst, payload.kind(), from_enclave, to_enclave, payload.encode());
        let now = self.clock.rdtime();
        let (_, fault) = self.fabric.send(env, now);
        if let Some(f) = fault {
            let detail = Detail::Fault { msg_seq: f.seq, action: f.action };
            let (s, d) = (self.name_of(&src), self.name_of(&dst));
            self.log(f.kind.name(), s, d, f.action.label(), None, Some(detail));
        }
    }

    /// Crash and immediately restart a monitor, letting the configured
    /// adversary choose the snapshot it sees.
    pub fn crash_device(&mut self, dev: usize, why: &str) {
        let dname = self.devices[dev].name.clone();
        self.log("crash", dname.clone(), dname.clone(), why, Some(dev), None);
        let counter = self.devices[dev].sm.store().write_counter();
        match self.adversary {
            Adversary::None => {}
            Adversary::OneBack => self.devices[dev].sm.store_mut().present_stale(1),
            Adversary::PreOperation => {
                let mark = self.op_marks.get(dev).copied().unwrap_or(0);
                self.devices[dev].sm.store_mut().present_stale((counter - mark) as usize);
            }
        }
        let before = self.snapshot(dev);
        let now = self.clock.rdtime();
        let r = self.devices[dev].sm.recover(now);
        let verdict = match &r {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("rejected:{}", e.code()),
        };
        self.log("recover", dname.clone(), dname, &verdict, Some(dev), None);
        self.route_effects(dev);
        self.emit_diff(dev, before);
    }

    // ---- setup -------------------------------------------------------------

    /// Initializes and runs an enclave, then applies `inputs` to it.
    #[allow(clippy::too_many_arguments)]
    pub fn install(
        &mut self,
        dev: usize,
        id: SoftwareId,
        v: Version,
        n: Option<u32>,
        binary: &[u8],
        state: Vec<u8>,
        inputs: &[Vec<u8>],
    ) -> Result<EnclaveId, WorldError> {
        if dev >= self.devices.len() {
            return Err(WorldError::NoDevice(dev));
        }
        let setup = |e| WorldError::Setup { device: format!("dev{dev}"), source: e };
        let eid = self.sm_call(dev, |w, now| {
            let eid = w.devices[dev].sm.init(id, v, n, binary, now)?;
            w.devices[dev].sm.run(eid)?;
            Ok(eid)
        });
        let eid = eid.map_err(setup)?;
        let name = self.enclave_name(dev, eid);
        let detail = Detail::Boot { enclave: name.clone(), state: hex::encode(&state) };
        self.log("boot", self.devices[dev].name.clone(), name, "ok", Some(dev), Some(detail));
        self.devices[dev].enclaves.insert(eid, SimEnclave::new(eid, state));
        for input in inputs {
            self.feed_one(dev, eid, input.clone());
        }
        Ok(eid)
    }

    fn feed_one(&mut self, dev: usize, eid: EnclaveId, input: Vec<u8>) -> bool {
        let r = self.sm_call(dev, |w, now| {
            w.devices[dev].sm.context_switch(eid, ContextDirection::HostToEnclave, now)?;
            let out = w.devices[dev].enclaves.get_mut(&eid).map(|e| e.process_input(&input));
            w.devices[dev].sm.context_switch(eid, ContextDirection::EnclaveToHost, now)?;
            Ok(out)
        });
        let name = self.enclave_name(dev, eid);
        match r {
            Ok(Some(Ok(state))) => {
                let detail = Detail::Input {
                    enclave: name.clone(),
                    index: self.input_seq,
                    input: hex::encode(&input),
                    state: hex::encode(state),
                };
                self.input_seq += 1;
                self.log("input", "host".into(), name, "ok", Some(dev), Some(detail));
                true
            }
            Ok(Some(Err(e))) => {
                self.log("input", "host".into(), name, &format!("rejected:{}", e.code()), Some(dev), None);
                false
            }
            Ok(None) => false,
            Err(e) => {
                self.log("input", "host".into(), name, &format!("rejected:{}", e.code()), Some(dev), None);
                false
            }
        }
    }

    /// Hands the operation to P and starts the input feeder.
    pub fn begin(&mut self, spec: OperationSpec) -> Result<(), WorldError> {
        for d in [spec.src_dev, spec.dst_dev] {
            if d >= self.devices.len() {
                return Err(WorldError::NoDevice(d));
            }
        }
        let m_s = self.devices[spec.src_dev]
            .sm
            .enclave(spec.eid_s)
            .map(|r| r.m)
            .or_else(|| measure(&spec.binary).ok())
            .expect("binary is non-empty");
        let plan = PartyPlan {
            op: spec.op,
            id: spec.id.clone(),
            v: spec.v,
            n: spec.n,
            binary: spec.binary.clone(),
            src_dev: self.devices[spec.src_dev].sm.device_pk(),
            dst_dev: self.devices[spec.dst_dev].sm.device_pk(),
            eid_s: spec.eid_s,
            m_s,
            session: self.rng.gen(),
            t_p: self.party_timeout,
        };
        self.op_marks = self.devices.iter().map(|d| d.sm.store().write_counter()).collect();
        self.source = Some((spec.src_dev, spec.eid_s));
        let op = match spec.op {
            OpKind::Update => "update",
            OpKind::Migration => "migration",
        };
        let detail = Detail::Config {
            operation: op.into(),
            resend_limit: self.devices[spec.src_dev].sm.config().resend_limit,
            devices: self.devices.iter().map(|d| d.name.clone()).collect(),
        };
        self.log("config", "P".into(), String::new(), "ok", None, Some(detail));
        let pair = Detail::Pair { source: self.enclave_name(spec.src_dev, spec.eid_s), dest: String::new() };
        self.log("pair", "P".into(), String::new(), "ok", None, Some(pair));
        let mut party = Party::new(self.party_pk(), plan);
        let now = self.clock.rdtime();
        let out = party.start(now);
        self.party = Some(party);
        self.party_sends(out);
        self.feeder = Feeder { inputs: spec.inputs, next: 0, next_at: Some(now + self.input_interval) };
        Ok(())
    }

    fn party_sends(&mut self, out: Vec<crate::orchestrator::PartySend>) {
        let pk = self.party_pk();
        for s in out {
            self.send(pk, s.dst, None, s.to_enclave, &s.payload);
        }
    }

    // ---- event loop --------------------------------------------------------

    fn feed_target(&self) -> Option<(usize, EnclaveId)> {
        [self.source, self.dest].into_iter().flatten().find(|(dev, eid)| {
            let d = &self.devices[*dev];
            d.sm.enclave(*eid).is_some_and(|r| r.phase == Phase::Running && r.resume_ok)
                && d.enclaves.get(eid).is_some_and(|e| e.mode == EnclaveMode::Normal)
        })
    }

    fn next_event(&self) -> Option<(u64, Event)> {
        let mut cands: Vec<(u64, Event)> = Vec::new();
        if let Some(t) = self.fabric.next_delivery_time() {
            cands.push((t, Event::Deliver));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if let Some(t) = d.sm.next_deadline() {
                cands.push((t, Event::SmTimer(i)));
            }
        }
        if let Some(t) = self.party.as_ref().and_then(Party::deadline) {
            cands.push((t, Event::PartyTimer));
        }
        let others = !cands.is_empty();
        if let Some(t) = self.feeder.next_at {
            if self.feeder.next < self.feeder.inputs.len() && (others || self.feed_target().is_some()) {
                cands.push((t, Event::Feed));
            }
        }
        cands.into_iter().min()
    }

    pub fn run_until_quiescent(&mut self) -> Result<(), WorldError> {
        let mut steps = 0usize;
        while let Some((t, ev)) = self.next_event() {
            steps += 1;
            if steps > self.step_budget {
                self.note(format!("step budget {} exceeded", self.step_budget));
                return Err(WorldError::StepBudgetExceeded(self.step_budget));
            }
            self.clock.advance_to(t);
            match ev {
                Event::Deliver => {
                    if let Some(env) = self.fabric.step() {
                        self.deliver(env);
                    }
                }
                Event::SmTimer(i) => {
                    let dname = self.devices[i].name.clone();
                    let r = self.sm_call(i, |w, now| w.devices[i].sm.timeout_tick(now));
                    let verdict = r.err().map(|e| format!("rejected:{}", e.code())).unwrap_or_else(|| "ok".into());
                    self.log("timer", dname.clone(), dname, &verdict, Some(i), None);
                }
                Event::PartyTimer => {
                    let now = self.clock.rdtime();
                    if let Some(p) = self.party.as_mut() {
                        p.on_timer(now);
                    }
                    self.log_party_status();
                }
                Event::Feed => {
                    let now = self.clock.rdtime();
                    if let Some((dev, eid)) = self.feed_target() {
                        let input = self.feeder.inputs[self.feeder.next].clone();
                        if self.feed_one(dev, eid, input) {
                            self.feeder.next += 1;
                        }
                    }
                    self.feeder.next_at = Some(now + self.input_interval);
                }
            }
        }
        self.finish();
        Ok(())
    }

    fn log_party_status(&mut self) {
        let Some(p) = &self.party else { return };
        let text = match p.status() {
            PartyStatus::Idle | PartyStatus::Running => return,
            PartyStatus::Committed => "party: committed".to_string(),
            PartyStatus::RejectedAtInit(r) => format!("party: rejected_at_init: {r}"),
            PartyStatus::Aborted => "party: aborted".to_string(),
            PartyStatus::Alarmed => "party: alarmed".to_string(),
            PartyStatus::TimedOut => "party: timed_out".to_string(),
        };
        let already = self.trace.events.iter().any(|e| matches!(&e.detail, Some(Detail::Note { text: t }) if t.starts_with("party: ")));
        if !already {
            self.note(text);
        }
    }

    /// Crash points scheduled around the next delivery.
    fn take_crash_points(&mut self) -> Vec<CrashPoint> {
        let step = self.delivery_index;
        self.delivery_index += 1;
        self.crashes.iter().filter(|c| c.step == step).cloned().collect()
    }

    fn deliver(&mut self, env: Envelope) {
        let points = self.take_crash_points();
        let src_name = match env.from_enclave {
            Some(e) => format!("{}/{}", self.name_of(&env.src), e),
            None => self.name_of(&env.src),
        };
        let kind = env.kind;
        let dev = self.device_index(&env.dst);
        let receiver = match (dev, env.to_enclave) {
            _ if env.dst == self.party_pk() => "P".to_string(),
            (Some(d), Some(eid)) => self.enclave_name(d, eid),
            (Some(d), None) => self.devices[d].name.clone(),
            (None, _) => self.name_of(&env.dst),
        };
        let before = |c: &&CrashPoint| c.when == CrashWhen::BeforeHandling;
        for c in points.iter().filter(before).filter(|c| c.component != receiver) {
            self.crash_named(&c.component);
        }
        let lost = points.iter().filter(before).any(|c| c.component == receiver);
        let digest_before = dev.map(|d| self.digest(d)).unwrap_or_default();
        let detail = Some(Detail::Delivery { msg_seq: env.seq, digest_before });
        let verdict = if lost {
            "lost:crash".to_string()
        } else if receiver == "P" {
            self.deliver_to_party(&env)
        } else {
            match (dev, env.to_enclave) {
                (None, _) => "unroutable".to_string(),
                (Some(d), Some(eid)) => self.deliver_to_enclave(d, eid, &env),
                (Some(d), None) => {
                    let r = self.sm_call(d, |w, now| w.devices[d].sm.handle_envelope(&env, now));
                    match r {
                        Ok(()) => "ok".to_string(),
                        Err(SmError::AuthFailure) => "auth_failed".to_string(),
                        Err(e) => format!("rejected:{}", e.code()),
                    }
                }
            }
        };
        self.log(kind.name(), src_name, receiver.clone(), &verdict, dev, detail);
        if receiver == "P" {
            self.log_party_status();
        }
        if lost {
            self.crash_named(&receiver);
        }
        for c in points.iter().filter(|c| c.when == CrashWhen::AfterHandling) {
            self.crash_named(&c.component);
        }
    }

    /// Crashes a device monitor (`dev1`) or an enclave (`dev1/e2`). An
    /// enclave crash only loses the message it was about to handle.
    fn crash_named(&mut self, component: &str) {
        let (dev_name, enclave) = match component.split_once('/') {
            Some((d, e)) => (d, Some(e)),
            None => (component, None),
        };
        let Some(dev) = self.devices.iter().position(|d| d.name == dev_name) else { return };
        match enclave {
            None => self.crash_device(dev, "injected"),
            Some(_) => self.log("crash", component.to_string(), component.to_string(), "enclave", Some(dev), None),
        }
    }

    fn deliver_to_party(&mut self, env: &Envelope) -> String {
        let pk = self.party_pk();
        if env.kind.is_authenticated() && !env.verify(&self.keys.pair_key(&env.src, &pk)) {
            return "auth_failed".into();
        }
        let Ok(payload) = Payload::decode(env.kind, &env.payload) else {
            return "rejected:Malformed".into();
        };
        let Some(party) = self.party.as_mut() else {
            return "ignored".into();
        };
        let out = party.on_message(env.src, payload);
        let eid_d = party.eid_d();
        let dst_pk = party.plan().dst_dev;
        self.party_sends(out);
        if self.dest.is_none() {
            if let (Some(eid), Some(dev)) = (eid_d, self.device_index(&dst_pk)) {
                self.dest = Some((dev, eid));
                let src = self.source.map(|(d, e)| self.enclave_name(d, e)).unwrap_or_default();
                let detail = Detail::Pair { source: src, dest: self.enclave_name(dev, eid) };
                self.log("pair", "P".into(), String::new(), "ok", None, Some(detail));
            }
        }
        "ok".into()
    }

    fn deliver_to_enclave(&mut self, dev: usize, eid: EnclaveId, env: &Envelope) -> String {
        if !self.devices[dev].enclaves.contains_key(&eid) {
            return "rejected:UnknownEnclave".into();
        }
        let payload = match Payload::decode(env.kind, &env.payload) {
            Ok(p) => p,
            Err(_) => return "rejected:Malformed".into(),
        };
        let dev_pk = self.devices[dev].sm.device_pk();
        match payload {
            Payload::ExportState { eid: target } if target == eid => self.enclave_export(dev, eid, env.src),
            Payload::ImportState { eid: target, c, mac } if target == eid => self.enclave_import(dev, eid, &c, &mac),
            Payload::Ok4p => {
                if env.src != dev_pk || !env.verify(&self.keys.pair_key(&dev_pk, &dev_pk)) {
                    return "auth_failed".into();
                }
                let r = self.sm_call(dev, |w, _| {
                    w.devices[dev].sm.run(eid)?;
                    if let Some(e) = w.devices[dev].enclaves.get_mut(&eid) {
                        e.release();
                    }
                    Ok(())
                });
                verdict(r)
            }
            other => format!("rejected:Unexpected({})", other.kind()),
        }
    }

    fn enclave_export(&mut self, dev: usize, eid: EnclaveId, requester: PublicKeyId) -> String {
        let r = self.sm_call(dev, |w, now| {
            let sm = &mut w.devices[dev].sm;
            sm.context_switch(eid, ContextDirection::HostToEnclave, now)?;
            let res = sm.get_transport_key(eid).map_err(EnclaveOrSm::Sm).and_then(|(k, bind)| {
                let e = w.devices[dev].enclaves.get_mut(&eid).expect("checked");
                e.export_state(&k, &bind.aad()).map_err(EnclaveOrSm::Enclave).map(|blob| (blob, hash(&[&e.state])))
            });
            w.devices[dev].sm.context_switch(eid, ContextDirection::EnclaveToHost, now)?;
            Ok(res)
        });
        match r {
            Ok(Ok(((c, mac), digest))) => {
                let name = self.enclave_name(dev, eid);
                let detail = Detail::Export { enclave: name.clone(), digest: hex::encode(digest) };
                self.log("export", name, String::new(), "ok", Some(dev), Some(detail));
                self.last_blob = Some((c.clone(), mac));
                let pk = self.devices[dev].sm.device_pk();
                self.send(pk, requester, Some(eid), None, &Payload::StateBlob { c, mac });
                "ok".into()
            }
            Ok(Err(e)) => format!("rejected:{}", e.code()),
            Err(e) => format!("rejected:{}", e.code()),
        }
    }

    fn enclave_import(&mut self, dev: usize, eid: EnclaveId, c: &[u8], mac: &Mac) -> String {
        let replayed = self.replay_blob.take();
        let (c, mac) = match &replayed {
            Some((rc, rm)) => {
                self.note(format!("host: replaying an earlier blob into {}", self.enclave_name(dev, eid)));
                (rc.as_slice(), rm)
            }
            None => (c, mac),
        };
        let r = self.sm_call(dev, |w, now| {
            let sm = &mut w.devices[dev].sm;
            sm.context_switch(eid, ContextDirection::HostToEnclave, now)?;
            let res = sm.get_transport_key(eid).map_err(EnclaveOrSm::Sm).and_then(|(k, bind)| {
                let e = w.devices[dev].enclaves.get_mut(&eid).expect("checked");
                e.import_state(c, mac, &k, &bind.aad()).map_err(EnclaveOrSm::Enclave).map(|()| hash(&[&e.state]))
            });
            w.devices[dev].sm.context_switch(eid, ContextDirection::EnclaveToHost, now)?;
            Ok(res)
        });
        match r {
            Ok(Ok(digest)) => {
                let name = self.enclave_name(dev, eid);
                let detail = Detail::Import { enclave: name.clone(), digest: hex::encode(digest) };
                self.log("import", name, String::new(), "ok", Some(dev), Some(detail));
                let pk = self.devices[dev].sm.device_pk();
                self.send(pk, pk, Some(eid), None, &Payload::Commit);
                "ok".into()
            }
            Ok(Err(e)) => format!("rejected:{}", e.code()),
            Err(e) => format!("rejected:{}", e.code()),
        }
    }

    fn finish(&mut self) {
        let mut enclaves = Vec::new();
        let mut pending = 0;
        for (i, d) in self.devices.iter().enumerate() {
            pending += d.sm.migrations().len();
            for rec in d.sm.enclaves() {
                let sim = d.enclaves.get(&rec.eid);
                enclaves.push(FinalEnclave {
                    enclave: self.enclave_name(i, rec.eid),
                    phase: rec.phase,
                    resume_ok: rec.resume_ok,
                    mode: sim.map(|e| e.mode).unwrap_or(EnclaveMode::Normal),
                    state: sim.map(|e| hex::encode(hash(&[&e.state]))).unwrap_or_default(),
                });
            }
        }
        let detail = Detail::Final { enclaves, pending_migrations: pending };
        self.log("final", String::new(), String::new(), "ok", None, Some(detail));
    }

    /// Classifies the finished run and appends the outcome to the trace.
    pub fn outcome(&mut self) -> Result<OperationOutcome, WorldError> {
        let kind = classify_outcome(&self.trace);
        let label = match &kind {
            Ok(k) => k.name().to_string(),
            Err(e) => e.to_string(),
        };
        self.log("outcome", String::new(), String::new(), if kind.is_ok() { "ok" } else { "ambiguous" }, None, Some(Detail::Outcome { outcome: label }));
        let kind = kind?;
        let mut final_versions = BTreeMap::new();
        for d in &self.devices {
            for e in d.sm.sw_versions() {
                final_versions.insert(format!("{}:{}", d.name, e.id), e.v_latest.0);
            }
        }
        let reject_reason = match self.party.as_ref().map(Party::status) {
            Some(PartyStatus::RejectedAtInit(r)) => Some(r.clone()),
            _ => None,
        };
        Ok(OperationOutcome { kind, final_versions, reject_reason, trace: self.trace.clone() })
    }

    /// Adds a message fault; occurrences count from the start of the run.
    pub fn add_message_fault(&mut self, fault: crate::channel::MessageFault) {
        self.fabric.add_fault(fault);
    }

    /// Number of envelopes of `kind` handed to the fabric so far.
    pub fn sent_count(&self, kind: MsgKind) -> usize {
        self.fabric.sent_count(kind)
    }
}

enum EnclaveOrSm {
    Sm(SmError),
    Enclave(crate::enclave::EnclaveError),
}

impl EnclaveOrSm {
    fn code(&self) -> &'static str {
        match self {
            EnclaveOrSm::Sm(e) => e.code(),
            EnclaveOrSm::Enclave(e) => e.code(),
        }
    }
}

fn verdict(r: Result<(), SmError>) -> String {
    match r {
        Ok(()) => "ok".into(),
        Err(e) => format!("rejected:{}", e.code()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::OutcomeKind;

    fn sid() -> SoftwareId {
        SoftwareId::new("app").unwrap()
    }

    fn world_with_source(devices: usize) -> (World, EnclaveId) {
        let mut w = World::new(&WorldConfig::new(7, devices));
        let eid = w.install(0, sid(), Version(1), Some(1), b"bin-v1", b"genesis".to_vec(), &[b"a".to_vec()]).unwrap();
        (w, eid)
    }

    fn spec(op: OpKind, eid_s: EnclaveId, dst_dev: usize, v: u64, binary: &[u8]) -> OperationSpec {
        OperationSpec {
            op,
            src_dev: 0,
            eid_s,
            dst_dev,
            id: sid(),
            v: Version(v),
            n: Some(1),
            binary: binary.to_vec(),
            inputs: vec![b"x".to_vec(), b"y".to_vec(), b"z".to_vec()],
        }
    }

    #[test]
    fn update_happy_path_commits() {
        let (mut w, eid) = world_with_source(1);
        w.begin(spec(OpKind::Update, eid, 0, 2, b"bin-v2")).unwrap();
        w.run_until_quiescent().unwrap();
        let out = w.outcome().unwrap();
        assert_eq!(out.kind, OutcomeKind::Committed);
        assert_eq!(crate::predicates::check_predicates(&out.trace), vec![]);
        assert_eq!(out.final_versions.get("dev0:app"), Some(&2));
    }

    #[test]
    fn migration_happy_path_commits() {
        let (mut w, eid) = world_with_source(2);
        w.begin(spec(OpKind::Migration, eid, 1, 1, b"bin-v1")).unwrap();
        w.run_until_quiescent().unwrap();
        let out = w.outcome().unwrap();
        assert_eq!(out.kind, OutcomeKind::Committed);
        assert_eq!(crate::predicates::check_predicates(&out.trace), vec![]);
        let (dev, eid_d) = w.dest().unwrap();
        assert_eq!(dev, 1);
        assert_eq!(w.devices[1].sm.enclave(eid_d).unwrap().phase, Phase::Running);
        assert!(w.devices[0].sm.enclave(eid).is_none_or(|r| r.phase == Phase::Destroyed));
    }

    #[test]
    fn downgrade_is_rejected_at_init() {
        let (mut w, eid) = world_with_source(1);
        w.begin(spec(OpKind::Update, eid, 0, 1, b"bin-v1b")).unwrap();
        w.run_until_quiescent().unwrap();
        assert_eq!(w.outcome().unwrap().kind, OutcomeKind::RejectedAtInit);
    }

    #[test]
    fn runs_are_deterministic() {
        let run = || {
            let (mut w, eid) = world_with_source(2);
            w.begin(spec(OpKind::Migration, eid, 1, 1, b"bin-v1")).unwrap();
            w.run_until_quiescent().unwrap();
            w.trace.to_jsonl()
        };
        assert_eq!(run(), run());
    }
}
