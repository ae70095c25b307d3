// SPDX-License-Identifier: Apache-2.0

//! Discrete-event message fabric with first-class fault injection.
//!
//! Delivery is ordered by `(deliver_at, seq)`. With uniform latency the base
//! channel is FIFO per `(src, dst)`; reordering only comes from injected
//! delays.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{mac_sign, mac_verify, KeyMaterial, Mac, PublicKeyId};
use crate::model::EnclaveId;

pub const DEFAULT_HOP_LATENCY: u64 = 30;
pub const LOCAL_HOP_LATENCY: u64 = 1;

/// One kind per protocol step, plus a few acknowledgements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MsgKind {
    /// 1 (migration)
    ScheduleMigration,
    /// 1 (update)
    ScheduleUpdate,
    ScheduleAck,
    /// 2
    Init,
    /// 3
    InitReply,
    /// 4
    StateMigration,
    MigrationAck,
    /// 4b
    ExportState,
    /// 4e
    StateBlob,
    /// 4f from the party, 4g between monitors
    ExecSwitch,
    SwitchAck,
    /// 4h
    ImportState,
    /// 4m
    Commit,
    /// 4n
    CommitForward,
    Ok4o,
    Ok4p,
    Ok4q,
    Ok5,
    TimeoutNotice,
    Alarm,
    /// An authenticated request was refused.
    Reject,
}

impl MsgKind {
    pub const ALL: [MsgKind; 21] = [
        MsgKind::ScheduleMigration,
        MsgKind::ScheduleUpdate,
        MsgKind::ScheduleAck,
        MsgKind::Init,
        MsgKind::InitReply,
        MsgKind::StateMigration,
        MsgKind::MigrationAck,
        MsgKind::ExportState,
        MsgKind::StateBlob,
        MsgKind::ExecSwitch,
        MsgKind::SwitchAck,
        MsgKind::ImportState,
        MsgKind::Commit,
        MsgKind::CommitForward,
        MsgKind::Ok4o,
        MsgKind::Ok4p,
        MsgKind::Ok4q,
        MsgKind::Ok5,
        MsgKind::TimeoutNotice,
        MsgKind::Alarm,
        MsgKind::Reject,
    ];

    /// State export/import requests and the blob carrying `(C, M)` travel
    /// without a channel MAC; the AEAD tag and the monitor's migration
    /// record gate them instead.
    pub fn is_authenticated(self) -> bool {
        !matches!(self, MsgKind::ExportState | MsgKind::StateBlob | MsgKind::ImportState)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::ScheduleMigration => "ScheduleMigration",
            MsgKind::ScheduleUpdate => "ScheduleUpdate",
            MsgKind::ScheduleAck => "ScheduleAck",
            MsgKind::Init => "Init",
            MsgKind::InitReply => "InitReply",
            MsgKind::StateMigration => "StateMigration",
            MsgKind::MigrationAck => "MigrationAck",
            MsgKind::ExportState => "ExportState",
            MsgKind::StateBlob => "StateBlob",
            MsgKind::ExecSwitch => "ExecSwitch",
            MsgKind::SwitchAck => "SwitchAck",
            MsgKind::ImportState => "ImportState",
            MsgKind::Commit => "Commit",
            MsgKind::CommitForward => "CommitForward",
            MsgKind::Ok4o => "Ok4o",
            MsgKind::Ok4p => "Ok4p",
            MsgKind::Ok4q => "Ok4q",
            MsgKind::Ok5 => "Ok5",
            MsgKind::TimeoutNotice => "TimeoutNotice",
            MsgKind::Alarm => "Alarm",
            MsgKind::Reject => "Reject",
        }
    }

    pub fn parse(s: &str) -> Option<MsgKind> {
        MsgKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub seq: u64,
    pub src: PublicKeyId,
    pub dst: PublicKeyId,
    pub kind: MsgKind,
    pub from_enclave: Option<EnclaveId>,
    pub to_enclave: Option<EnclaveId>,
    pub payload: Vec<u8>,
    pub tag: Mac,
    pub sent_at: u64,
    pub deliver_at: u64,
}

fn tag_input(
    src: &PublicKeyId,
    dst: &PublicKeyId,
    kind: MsgKind,
    from: Option<EnclaveId>,
    to: Option<EnclaveId>,
    payload: &[u8],
) -> Vec<u8> {
    let mut m = Vec::with_capacity(80 + payload.len());
    m.extend_from_slice(&src.0);
    m.extend_from_slice(&dst.0);
    m.push(kind as u8);
    for e in [from, to] {
        match e {
            None => m.push(0),
            Some(id) => {
                m.push(1);
                m.extend_from_slice(&id.0.to_be_bytes());
            }
        }
    }
    m.extend_from_slice(payload);
    m
}

impl Envelope {
    /// Builds an envelope tagged under the `(src, dst)` pair key.
    pub fn new(
        pair_key: &KeyMaterial,
        src: PublicKeyId,
        dst: PublicKeyId,
        kind: MsgKind,
        from_enclave: Option<EnclaveId>,
        to_enclave: Option<EnclaveId>,
        payload: Vec<u8>,
    ) -> Self {
        let tag = mac_sign(pair_key, &tag_input(&src, &dst, kind, from_enclave, to_enclave, &payload));
        Self { seq: 0, src, dst, kind, from_enclave, to_enclave, payload, tag, sent_at: 0, deliver_at: 0 }
    }

    pub fn verify(&self, pair_key: &KeyMaterial) -> bool {
        let msg = tag_input(&self.src, &self.dst, self.kind, self.from_enclave, self.to_enclave, &self.payload);
        mac_verify(pair_key, &msg, &self.tag.0)
    }

    /// Length of the corruptible region `payload ∥ tag`.
    pub fn body_len(&self) -> usize {
        self.payload.len() + self.tag.0.len()
    }

    /// XORs `mask` into byte `offset` (mod body length) of `payload ∥ tag`.
    pub fn corrupt(&mut self, offset: usize, mask: u8) {
        let i = offset % self.body_len();
        if i < self.payload.len() {
            self.payload[i] ^= mask;
        } else {
            self.tag.0[i - self.payload.len()] ^= mask;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum FaultAction {
    Drop,
    Delay { ticks: u64 },
    Duplicate,
    CorruptByte { offset: usize, mask: u8 },
}

impl FaultAction {
    pub fn label(&self) -> &'static str {
        match self {
            FaultAction::Drop => "drop",
            FaultAction::Delay { .. } => "delay",
            FaultAction::Duplicate => "duplicate",
            FaultAction::CorruptByte { .. } => "corrupt",
        }
    }
}

/// Applies `action` to the `occurrence`-th (0-based) envelope of `kind`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageFault {
    pub kind: MsgKind,
    #[serde(default)]
    pub occurrence: usize,
    pub action: FaultAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashWhen {
    BeforeHandling,
    AfterHandling,
}

/// Crashes `component` (`dev0`, `dev1/e2`) around the `step`-th (0-based)
/// delivery of the run, whoever receives it. A component that crashes before
/// handling a delivery addressed to it loses that message.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CrashPoint {
    pub component: String,
    pub step: usize,
    pub when: CrashWhen,
}

/// Crash a monitor between two effects of its commit handling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommitCrash {
    pub device: String,
    pub substep: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    #[serde(default)]
    pub messages: Vec<MessageFault>,
    #[serde(default)]
    pub crashes: Vec<CrashPoint>,
    #[serde(default)]
    pub commit_crashes: Vec<CommitCrash>,
}

impl FaultPlan {
    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.crashes.is_empty() && self.commit_crashes.is_empty()
    }
}

/// What the fabric did with a sent envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultApplied {
    pub seq: u64,
    pub kind: MsgKind,
    pub action: FaultAction,
}

#[derive(Debug, Default)]
pub struct Fabric {
    next_seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending: BTreeMap<u64, Envelope>,
    faults: Vec<MessageFault>,
    sent_per_kind: BTreeMap<MsgKind, usize>,
    hop_latency: u64,
}

impl Fabric {
    pub fn new(faults: Vec<MessageFault>) -> Self {
        Self { faults, hop_latency: DEFAULT_HOP_LATENCY, ..Default::default() }
    }

    pub fn with_hop_latency(mut self, ticks: u64) -> Self {
        self.hop_latency = ticks;
        self
    }

    fn latency(&self, env: &Envelope) -> u64 {
        if env.src == env.dst {
            LOCAL_HOP_LATENCY
        } else {
            self.hop_latency
        }
    }

    fn enqueue(&mut self, mut env: Envelope) -> u64 {
        self.next_seq += 1;
        env.seq = self.next_seq;
        self.queue.push(Reverse((env.deliver_at, env.seq)));
        let seq = env.seq;
        self.pending.insert(seq, env);
        seq
    }

    /// Enqueues `env` sent at `now`, applying any matching fault. Returns the
    /// assigned sequence number (0 when dropped) and the fault, if any.
    pub fn send(&mut self, mut env: Envelope, now: u64) -> (u64, Option<FaultApplied>) {
        let occurrence = {
            let c = self.sent_per_kind.entry(env.kind).or_insert(0);
            *c += 1;
            *c - 1
        };
        env.sent_at = now;
        env.deliver_at = now + self.latency(&env);
        let action = self.faults.iter().find(|f| f.kind == env.kind && f.occurrence == occurrence).map(|f| f.action);
        let kind = env.kind;
        let seq = match action {
            None => self.enqueue(env),
            Some(FaultAction::Drop) => {
                self.next_seq += 1;
                self.next_seq
            }
            Some(FaultAction::Delay { ticks }) => {
                env.deliver_at += ticks;
                self.enqueue(env)
            }
            Some(FaultAction::Duplicate) => {
                let seq = self.enqueue(env.clone());
                self.enqueue(env);
                seq
            }
            Some(FaultAction::CorruptByte { offset, mask }) => {
                env.corrupt(offset, mask);
                self.enqueue(env)
            }
        };
        (seq, action.map(|action| FaultApplied { seq, kind, action }))
    }

    pub fn add_fault(&mut self, fault: MessageFault) {
        self.faults.push(fault);
    }

    pub fn next_delivery_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    /// Pops the minimal `(deliver_at, seq)` envelope.
    pub fn step(&mut self) -> Option<Envelope> {
        let Reverse((_, seq)) = self.queue.pop()?;
        self.pending.remove(&seq)
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn sent_count(&self, kind: MsgKind) -> usize {
        self.sent_per_kind.get(&kind).copied().unwrap_or(0)
    }
}
