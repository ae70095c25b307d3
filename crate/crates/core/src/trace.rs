// SPDX-License-Identifier: Apache-2.0

//! Simulation trace: one JSON object per line.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::channel::FaultAction;
use crate::enclave::EnclaveMode;
use crate::model::Phase;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalEnclave {
    pub enclave: String,
    pub phase: Phase,
    pub resume_ok: bool,
    pub mode: EnclaveMode,
    /// Hex digest of the enclave's state.
    pub state: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Detail {
    Config { operation: String, resend_limit: u32, devices: Vec<String> },
    /// Source and destination enclave of the operation under test.
    Pair { source: String, dest: String },
    Boot { enclave: String, state: String },
    Delivery { msg_seq: u64, digest_before: String },
    Fault { msg_seq: u64, action: FaultAction },
    Phase { enclave: String, phase: Phase, resume_ok: bool },
    Input { enclave: String, index: u64, input: String, state: String },
    Export { enclave: String, digest: String },
    Import { enclave: String, digest: String },
    Init { id: String, v: u64, eid: u64, bypass: bool },
    VersionCommit { id: String, v_latest: u64 },
    Alarm { session: u64, sent_4o: u32 },
    Final { enclaves: Vec<FinalEnclave>, pending_migrations: usize },
    Outcome { outcome: String },
    Note { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: u64,
    pub seq: u64,
    pub kind: String,
    pub src: String,
    pub dst: String,
    pub verdict: String,
    pub sm_state_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Detail>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, mut ev: TraceEvent) {
        ev.seq = self.events.len() as u64;
        self.events.push(ev);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            let line = serde_json::to_string(ev).expect("trace events serialize");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<TraceEvent>, _>>()?;
        Ok(Self { events })
    }

    pub fn details(&self) -> impl Iterator<Item = (usize, &Detail)> {
        self.events.iter().enumerate().filter_map(|(i, e)| e.detail.as_ref().map(|d| (i, d)))
    }
}
