// SPDX-License-Identifier: Apache-2.0

//! The operating party P and classification of operation outcomes.
//!
//! P is sequential: it sends one protocol step, waits for the matching
//! reply, then sends the next. It never retries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::MsgKind;
use crate::crypto::{measure, Mac, PublicKeyId};
use crate::model::{EnclaveId, Measurement, SoftwareId, Version};
use crate::trace::{Detail, Trace};
use crate::wire::{Payload, StateMigrationRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Update,
    Migration,
}

/// What P is asked to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartyPlan {
    pub op: OpKind,
    pub id: SoftwareId,
    /// Version of the destination enclave.
    pub v: Version,
    pub n: Option<u32>,
    pub binary: Vec<u8>,
    pub src_dev: PublicKeyId,
    pub dst_dev: PublicKeyId,
    pub eid_s: EnclaveId,
    pub m_s: Measurement,
    pub session: u64,
    /// `T_P`, armed when the first request is sent.
    pub t_p: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum PartyStatus {
    Idle,
    Running,
    Committed,
    RejectedAtInit(String),
    /// A monitor reported that the operation was rolled back.
    Aborted,
    Alarmed,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Schedule,
    Init,
    Migrate { acks: u8 },
    Export,
    Switch,
    Import,
    Done,
}

/// One outgoing message from P.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartySend {
    pub dst: PublicKeyId,
    pub to_enclave: Option<EnclaveId>,
    pub payload: Payload,
}

#[derive(Debug, Clone)]
pub struct Party {
    pk: PublicKeyId,
    plan: PartyPlan,
    step: Step,
    status: PartyStatus,
    deadline: Option<u64>,
    eid_d: Option<EnclaveId>,
    blob: Option<(Vec<u8>, Mac)>,
}

impl Party {
    pub fn new(pk: PublicKeyId, plan: PartyPlan) -> Self {
        Self { pk, plan, step: Step::Schedule, status: PartyStatus::Idle, deadline: None, eid_d: None, blob: None }
    }

    pub fn pk(&self) -> PublicKeyId {
        self.pk
    }

    pub fn plan(&self) -> &PartyPlan {
        &self.plan
    }

    pub fn status(&self) -> &PartyStatus {
        &self.status
    }

    pub fn eid_d(&self) -> Option<EnclaveId> {
        self.eid_d
    }

    /// Pending `T_P` deadline while the operation is unfinished.
    pub fn deadline(&self) -> Option<u64> {
        self.deadline
    }

    fn send(dst: PublicKeyId, payload: Payload) -> PartySend {
        PartySend { dst, to_enclave: None, payload }
    }

    fn finish(&mut self, status: PartyStatus) {
        self.status = status;
        self.step = Step::Done;
        self.deadline = None;
    }

    pub fn start(&mut self, now: u64) -> Vec<PartySend> {
        self.status = PartyStatus::Running;
        self.deadline = Some(now + self.plan.t_p);
        let p = &self.plan;
        vec![match p.op {
            OpKind::Update => Self::send(p.src_dev, Payload::ScheduleUpdate { id: p.id.clone(), v: p.v }),
            OpKind::Migration => Self::send(p.dst_dev, Payload::ScheduleMigration { id: p.id.clone() }),
        }]
    }

    pub fn on_timer(&mut self, now: u64) {
        if self.deadline.is_some_and(|d| now >= d) {
            self.finish(PartyStatus::TimedOut);
        }
    }

    fn awaited_request(&self) -> Option<MsgKind> {
        match self.step {
            Step::Schedule => Some(match self.plan.op {
                OpKind::Update => MsgKind::ScheduleUpdate,
                OpKind::Migration => MsgKind::ScheduleMigration,
            }),
            Step::Init => Some(MsgKind::Init),
            Step::Migrate { .. } => Some(MsgKind::StateMigration),
            _ => None,
        }
    }

    /// Handles a reply. Anything that does not match the current step is
    /// ignored.
    pub fn on_message(&mut self, src: PublicKeyId, payload: Payload) -> Vec<PartySend> {
        if self.step == Step::Done {
            return Vec::new();
        }
        let p = self.plan.clone();
        match (self.step, payload) {
            (Step::Schedule, Payload::ScheduleAck { id }) if id == p.id => {
                self.step = Step::Init;
                vec![Self::send(p.dst_dev, Payload::Init { id: p.id, v: p.v, n: p.n, binary: p.binary })]
            }
            (Step::Init, Payload::InitReply { eid }) if src == p.dst_dev => {
                self.eid_d = Some(eid);
                self.step = Step::Migrate { acks: 0 };
                let req = StateMigrationRequest {
                    pk_s: p.src_dev,
                    pk_d: p.dst_dev,
                    eid_s: p.eid_s,
                    eid_d: eid,
                    m_s: p.m_s,
                    m_d: measure(&p.binary).expect("plan binary is non-empty"),
                    session: p.session,
                };
                let mut out = vec![Self::send(p.src_dev, Payload::StateMigration(req.clone()))];
                if p.op == OpKind::Migration {
                    out.push(Self::send(p.dst_dev, Payload::StateMigration(req)));
                }
                out
            }
            (Step::Migrate { acks }, Payload::MigrationAck { session }) if session == p.session => {
                let needed = if p.op == OpKind::Migration { 2 } else { 1 };
                if acks + 1 < needed {
                    self.step = Step::Migrate { acks: acks + 1 };
                    return Vec::new();
                }
                self.step = Step::Export;
                vec![PartySend {
                    dst: p.src_dev,
                    to_enclave: Some(p.eid_s),
                    payload: Payload::ExportState { eid: p.eid_s },
                }]
            }
            (Step::Export, Payload::StateBlob { c, mac }) if src == p.src_dev => {
                self.blob = Some((c, mac));
                self.step = Step::Switch;
                let eid_d = self.eid_d.expect("set at init");
                vec![Self::send(p.src_dev, Payload::ExecSwitch { eid_s: p.eid_s, eid_d, session: p.session })]
            }
            (Step::Switch, Payload::SwitchAck { session }) if session == p.session => {
                self.step = Step::Import;
                let eid = self.eid_d.expect("set at init");
                let (c, mac) = self.blob.take().expect("blob received before switch");
                vec![PartySend { dst: p.dst_dev, to_enclave: Some(eid), payload: Payload::ImportState { eid, c, mac } }]
            }
            (_, Payload::Ok5 { session }) if session == p.session => {
                self.finish(PartyStatus::Committed);
                Vec::new()
            }
            (_, Payload::TimeoutNotice { session }) if session == p.session => {
                self.finish(PartyStatus::Aborted);
                Vec::new()
            }
            (_, Payload::Alarm { session, .. }) if session == p.session => {
                self.finish(PartyStatus::Alarmed);
                Vec::new()
            }
            (_, Payload::Reject { request, reason }) if Some(request) == self.awaited_request() => {
                self.finish(PartyStatus::RejectedAtInit(reason));
                Vec::new()
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Committed,
    AbortedSourceActive,
    AlarmNeitherActive,
    RejectedAtInit,
}

impl OutcomeKind {
    pub fn name(self) -> &'static str {
        match self {
            OutcomeKind::Committed => "Committed",
            OutcomeKind::AbortedSourceActive => "AbortedSourceActive",
            OutcomeKind::AlarmNeitherActive => "AlarmNeitherActive",
            OutcomeKind::RejectedAtInit => "RejectedAtInit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("ambiguous terminal state: {0}")]
    AmbiguousTerminalState(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperationOutcome {
    pub kind: OutcomeKind,
    /// `device:ID` → latest version on that device.
    pub final_versions: BTreeMap<String, u64>,
    /// Reason given by the monitor when the operation was rejected.
    pub reject_reason: Option<String>,
    pub trace: Trace,
}

/// Classifies a quiescent trace from the terminal enclave states, alarms,
/// and P's recorded status.
pub fn classify_outcome(trace: &Trace) -> Result<OutcomeKind, ClassifyError> {
    let mut pair: Option<(String, String)> = None;
    let mut source: Option<String> = None;
    let mut final_state = None;
    let mut alarm = false;
    let mut rejected = false;
    for (_, d) in trace.details() {
        match d {
            Detail::Pair { source: s, dest } => pair = Some((s.clone(), dest.clone())),
            Detail::Boot { enclave, .. } if source.is_none() => source = Some(enclave.clone()),
            Detail::Alarm { .. } => alarm = true,
            Detail::Final { enclaves, .. } => final_state = Some(enclaves.clone()),
            Detail::Note { text } if text.starts_with("party: rejected_at_init") => rejected = true,
            _ => {}
        }
    }
    let enclaves = final_state.ok_or_else(|| ClassifyError::AmbiguousTerminalState("no final state".into()))?;
    let (src_name, dst_name) = match pair {
        Some((s, d)) => (s, Some(d).filter(|d| !d.is_empty())),
        None => (source.ok_or_else(|| ClassifyError::AmbiguousTerminalState("no source enclave".into()))?, None),
    };
    let active = |name: &str| {
        enclaves
            .iter()
            .any(|e| e.enclave == name && e.phase != crate::model::Phase::Destroyed && e.resume_ok)
    };
    let src_active = active(&src_name);
    let dst_active = dst_name.as_deref().is_some_and(active);
    match (src_active, dst_active) {
        (false, true) => Ok(OutcomeKind::Committed),
        (true, false) if rejected => Ok(OutcomeKind::RejectedAtInit),
        (true, false) => Ok(OutcomeKind::AbortedSourceActive),
        (false, false) if alarm => Ok(OutcomeKind::AlarmNeitherActive),
        (s, d) => Err(ClassifyError::AmbiguousTerminalState(format!("source active {s}, destination active {d}, alarm {alarm}"))),
    }
}
