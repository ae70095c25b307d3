// SPDX-License-Identifier: Apache-2.0

//! Per-device security monitor.
//!
//! The monitor is a synchronous state machine. Every entry point takes the
//! current virtual time as an argument and queues outgoing messages as
//! [`Effect`]s, which the world drains after the call returns.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{Envelope, MsgKind};
use crate::clock::{self, ContextDirection};
use crate::codec::{Canonical, Encoder};
use crate::crypto::{self, attest_sign, derive_transport_key, measure, KeyMaterial, PublicKeyId, SEED_LEN};
use crate::model::{
    new_enclave_record, AttestationReport, EnclaveId, EnclaveRecord, MigrationRecord, MigrationStage,
    MonotonicCounter, Phase, SoftwareId, TargetOp, Version, VersionEntry,
};
use crate::persistence::{
    load_migration_metadata, persist_migration_metadata, SecureStore, StoreError, KEY_COUNTERS, KEY_SCHEDULED,
    KEY_VERSIONS,
};
use crate::wire::{Payload, StateMigrationRequest};

const KEY_COUNTER_NEXT: &str = "counter_next";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmError {
    #[error("version mismatch: v_latest is {expected:?}, requested {got:?}")]
    VersionMismatch { expected: Version, got: Version },
    #[error("clone limit reached ({live} live, bound {bound})")]
    CloneLimitExceeded { live: u32, bound: u32 },
    #[error("clone bound must be at least 1")]
    InvalidCloneBound,
    #[error("binary must not be empty")]
    EmptyBinary,
    #[error("store: {0}")]
    StoreFault(StoreError),
    #[error("stale persistent state (counter {found}, expected {expected})")]
    RollbackDetected { found: u64, expected: u64 },
    #[error("monitor crashed")]
    Crashed,
    #[error("enclave may not resume")]
    ResumeDenied,
    #[error("unknown enclave {0}")]
    UnknownEnclave(EnclaveId),
    #[error("enclave already entered")]
    AlreadyEntered,
    #[error("enclave is not entered")]
    NotEntered,
    #[error("caller is not an authorized party")]
    Unauthorized,
    #[error("software id already scheduled")]
    AlreadyScheduled,
    #[error("an enclave with this software id exists")]
    EnclaveExists,
    #[error("no enclave eligible for update")]
    NoEligibleEnclave,
    #[error("more than one live instance")]
    TooManyInstances,
    #[error("neither endpoint key belongs to this device")]
    NotMyKey,
    #[error("measurement mismatch")]
    MeasurementMismatch,
    #[error("destination version must exceed source version")]
    VersionOrderViolation,
    #[error("enclave already part of a migration")]
    AlreadyMigrating,
    #[error("destination enclave has already been allowed to run")]
    DestinationActive,
    #[error("no active migration")]
    NoActiveMigration,
    #[error("caller is not the migration destination")]
    NotDestination,
    #[error("unknown counter {0}")]
    UnknownCounter(u64),
    #[error("counter owned by another software id")]
    OwnerMismatch,
    #[error("message authentication failed")]
    AuthFailure,
    #[error("malformed payload")]
    Malformed,
    #[error("message kind {0} not handled by a monitor")]
    Unexpected(MsgKind),
}

impl SmError {
    /// Stable variant name, used as the reject reason and trace verdict.
    pub fn code(&self) -> &'static str {
        match self {
            SmError::VersionMismatch { .. } => "VersionMismatch",
            SmError::CloneLimitExceeded { .. } => "CloneLimitExceeded",
            SmError::InvalidCloneBound => "InvalidCloneBound",
            SmError::EmptyBinary => "EmptyBinary",
            SmError::StoreFault(_) => "StoreFault",
            SmError::RollbackDetected { .. } => "RollbackDetected",
            SmError::Crashed => "Crashed",
            SmError::ResumeDenied => "ResumeDenied",
            SmError::UnknownEnclave(_) => "UnknownEnclave",
            SmError::AlreadyEntered => "AlreadyEntered",
            SmError::NotEntered => "NotEntered",
            SmError::Unauthorized => "Unauthorized",
            SmError::AlreadyScheduled => "AlreadyScheduled",
            SmError::EnclaveExists => "EnclaveExists",
            SmError::NoEligibleEnclave => "NoEligibleEnclave",
            SmError::TooManyInstances => "TooManyInstances",
            SmError::NotMyKey => "NotMyKey",
            SmError::MeasurementMismatch => "MeasurementMismatch",
            SmError::VersionOrderViolation => "VersionOrderViolation",
            SmError::AlreadyMigrating => "AlreadyMigrating",
            SmError::DestinationActive => "DestinationActive",
            SmError::NoActiveMigration => "NoActiveMigration",
            SmError::NotDestination => "NotDestination",
            SmError::UnknownCounter(_) => "UnknownCounter",
            SmError::OwnerMismatch => "OwnerMismatch",
            SmError::AuthFailure => "AuthFailure",
            SmError::Malformed => "Malformed",
            SmError::Unexpected(_) => "Unexpected",
        }
    }
}

impl From<StoreError> for SmError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Crashed(_) => SmError::Crashed,
            StoreError::RollbackDetected { found, expected } => SmError::RollbackDetected { found, expected },
            other => SmError::StoreFault(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmConfig {
    /// Migration deadline `T_SM`, relative to the state-migration request.
    pub timeout_sm: u64,
    /// Wait `T` for the final acknowledgment after the source has destroyed its enclave.
    pub ack_timeout: u64,
    pub resend_limit: u32,
}

impl Default for SmConfig {
    fn default() -> Self {
        Self { timeout_sm: 10_000, ack_timeout: 2_000, resend_limit: 3 }
    }
}

/// Symmetric keys standing in for the authenticated channels between
/// devices and parties.
#[derive(Debug)]
pub struct KeyDirectory {
    master: KeyMaterial,
}

impl KeyDirectory {
    pub fn new(master: KeyMaterial) -> Self {
        Self { master }
    }

    fn sorted(a: &PublicKeyId, b: &PublicKeyId) -> Vec<u8> {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        [lo.0, hi.0].concat()
    }

    pub fn pair_key(&self, a: &PublicKeyId, b: &PublicKeyId) -> KeyMaterial {
        self.master.derive("pair", &Self::sorted(a, b))
    }

    /// Per-session key between two monitors. A fresh session number gives a
    /// fresh key, so material from an earlier session never opens later.
    pub fn session_key(&self, a: &PublicKeyId, b: &PublicKeyId, session: u64) -> KeyMaterial {
        let mut ctx = Self::sorted(a, b);
        ctx.extend_from_slice(&session.to_be_bytes());
        self.master.derive("session", &ctx)
    }
}

/// Outgoing action queued by a monitor call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send { dst: PublicKeyId, to_enclave: Option<EnclaveId>, payload: Payload },
    /// The monitor re-allowed an enclave; the host may schedule it again.
    HostResume(EnclaveId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchOrigin {
    Party(PublicKeyId),
    RemoteSm(PublicKeyId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitCaller {
    Enclave(EnclaveId),
    RemoteSm { pk: PublicKeyId, session: u64 },
}

/// Values the export/import associated data is bound to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportBinding {
    pub id: SoftwareId,
    pub eid_s: EnclaveId,
    pub eid_d: EnclaveId,
}

impl TransportBinding {
    pub fn aad(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.value(&self.id).value(&self.eid_s).value(&self.eid_d);
        enc.finish()
    }
}

#[derive(Debug)]
pub struct SecurityMonitor {
    device_key: KeyMaterial,
    device_pk: PublicKeyId,
    keys: Arc<KeyDirectory>,
    config: SmConfig,
    store: SecureStore,
    enclaves: BTreeMap<EnclaveId, EnclaveRecord>,
    next_eid: u64,
    sw_versions: Vec<VersionEntry>,
    counters: Vec<MonotonicCounter>,
    next_ctr_id: u64,
    scheduled: Vec<SoftwareId>,
    migrations: Vec<MigrationRecord>,
    /// Destination side: sessions committed since boot, used to re-ack a
    /// resent OK from the source.
    completed_sessions: BTreeSet<(PublicKeyId, u64)>,
    authorized: BTreeSet<PublicKeyId>,
    rng: ChaCha8Rng,
    outbox: Vec<Effect>,
    commit_crash: Option<u8>,
    halted: bool,
}

impl SecurityMonitor {
    pub fn new(
        device_key: KeyMaterial,
        keys: Arc<KeyDirectory>,
        config: SmConfig,
        store: SecureStore,
        authorized: impl IntoIterator<Item = PublicKeyId>,
        rng_seed: u64,
    ) -> Self {
        let device_pk = device_key.public_id();
        Self {
            device_key,
            device_pk,
            keys,
            config,
            store,
            enclaves: BTreeMap::new(),
            next_eid: 1,
            sw_versions: Vec::new(),
            counters: Vec::new(),
            next_ctr_id: 1,
            scheduled: Vec::new(),
            migrations: Vec::new(),
            completed_sessions: BTreeSet::new(),
            authorized: authorized.into_iter().collect(),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            outbox: Vec::new(),
            commit_crash: None,
            halted: false,
        }
    }

    pub fn device_pk(&self) -> PublicKeyId {
        self.device_pk
    }

    pub fn config(&self) -> &SmConfig {
        &self.config
    }

    pub fn store(&self) -> &SecureStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut SecureStore {
        &mut self.store
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn enclave(&self, eid: EnclaveId) -> Option<&EnclaveRecord> {
        self.enclaves.get(&eid)
    }

    pub fn enclaves(&self) -> impl Iterator<Item = &EnclaveRecord> {
        self.enclaves.values()
    }

    pub fn migrations(&self) -> &[MigrationRecord] {
        &self.migrations
    }

    pub fn scheduled(&self) -> &[SoftwareId] {
        &self.scheduled
    }

    pub fn v_latest(&self, id: &SoftwareId) -> Option<Version> {
        self.sw_versions.iter().find(|e| &e.id == id).map(|e| e.v_latest)
    }

    pub fn sw_versions(&self) -> &[VersionEntry] {
        &self.sw_versions
    }

    /// Crash the monitor after the given sub-step of the next commit handler.
    pub fn arm_commit_crash(&mut self, substep: u8) {
        self.commit_crash = Some(substep);
    }

    pub fn drain_effects(&mut self) -> Vec<Effect> {
        std::mem::take(&mut self.outbox)
    }

    /// Digest of the canonical monitor state. Seeds and keys are excluded,
    /// as is the entry timestamp of an enclave that is not entered.
    pub fn digest(&self) -> [u8; 32] {
        let mut enc = Encoder::new();
        enc.value(&self.device_pk).u64(self.next_eid).bool(self.halted);
        let recs: Vec<EnclaveRecord> = self
            .enclaves
            .values()
            .map(|r| EnclaveRecord { t_e_entry: if r.entered { r.t_e_entry } else { 0 }, ..r.clone() })
            .collect();
        enc.seq(recs.iter());
        enc.seq(self.sw_versions.iter());
        enc.seq(self.counters.iter()).u64(self.next_ctr_id);
        enc.seq(self.scheduled.iter());
        let recs: Vec<MigrationRecord> = self.migrations.iter().map(MigrationRecord::without_seed).collect();
        enc.seq(recs.iter());
        enc.u32(self.completed_sessions.len() as u32);
        for (pk, s) in &self.completed_sessions {
            enc.value(pk).u64(*s);
        }
        crypto::hash(&[&enc.finish()])
    }

    fn ensure_running(&self) -> Result<(), SmError> {
        if self.halted {
            let c = self.store.write_counter();
            return Err(SmError::RollbackDetected { found: c, expected: c });
        }
        Ok(())
    }

    fn send(&mut self, dst: PublicKeyId, to_enclave: Option<EnclaveId>, payload: Payload) {
        self.outbox.push(Effect::Send { dst, to_enclave, payload });
    }

    fn live(&self, eid: EnclaveId) -> Result<&EnclaveRecord, SmError> {
        self.enclaves.get(&eid).filter(|r| r.is_live()).ok_or(SmError::UnknownEnclave(eid))
    }

    fn live_mut(&mut self, eid: EnclaveId) -> Result<&mut EnclaveRecord, SmError> {
        self.enclaves.get_mut(&eid).filter(|r| r.is_live()).ok_or(SmError::UnknownEnclave(eid))
    }

    fn is_live(&self, eid: EnclaveId) -> bool {
        self.live(eid).is_ok()
    }

    fn persist_versions(&mut self) -> Result<(), SmError> {
        Ok(self.store.put_list(KEY_VERSIONS, &self.sw_versions)?)
    }

    fn persist_scheduled(&mut self) -> Result<(), SmError> {
        Ok(self.store.put_list(KEY_SCHEDULED, &self.scheduled)?)
    }

    fn persist_counters(&mut self) -> Result<(), SmError> {
        Ok(self.store.put_list(KEY_COUNTERS, &self.counters)?)
    }

    fn persist_migrations(&mut self) -> Result<(), SmError> {
        Ok(persist_migration_metadata(&mut self.store, &self.migrations)?)
    }

    fn check_authorized(&self, caller: &PublicKeyId) -> Result<(), SmError> {
        if self.authorized.contains(caller) {
            Ok(())
        } else {
            Err(SmError::Unauthorized)
        }
    }

    // ---- lifecycle -------------------------------------------------------

    pub fn init(
        &mut self,
        id: SoftwareId,
        v: Version,
        n: Option<u32>,
        binary: &[u8],
        now: u64,
    ) -> Result<EnclaveId, SmError> {
        self.ensure_running()?;
        let m = measure(binary).map_err(|_| SmError::EmptyBinary)?;
        let bypass = self.scheduled.contains(&id);
        if !bypass {
            if let Some(latest) = self.v_latest(&id) {
                if latest != v {
                    return Err(SmError::VersionMismatch { expected: latest, got: v });
                }
            }
        }
        let eid = EnclaveId(self.next_eid);
        let mut rec = new_enclave_record(id.clone(), v, n, m, eid, now).map_err(|_| SmError::InvalidCloneBound)?;
        let live = self.enclaves.values().filter(|r| r.is_live() && r.m == m).count() as u32;
        if live >= rec.n {
            return Err(SmError::CloneLimitExceeded { live, bound: rec.n });
        }

        if self.v_latest(&id).is_none() {
            self.sw_versions.push(VersionEntry { id: id.clone(), v_latest: v });
            if let Err(e) = self.persist_versions() {
                self.sw_versions.pop();
                return Err(e);
            }
        }
        if bypass {
            let before = self.scheduled.clone();
            self.scheduled.retain(|s| s != &id);
            if let Err(e) = self.persist_scheduled() {
                self.scheduled = before;
                return Err(e);
            }
            rec.resume_ok = false;
        }
        self.next_eid += 1;
        self.enclaves.insert(eid, rec);
        Ok(eid)
    }

    /// Host schedules the enclave. Also used to resume a paused one.
    pub fn run(&mut self, eid: EnclaveId) -> Result<(), SmError> {
        self.ensure_running()?;
        let rec = self.live_mut(eid)?;
        if !rec.resume_ok {
            return Err(SmError::ResumeDenied);
        }
        rec.phase = Phase::Running;
        Ok(())
    }

    pub fn resume(&mut self, eid: EnclaveId) -> Result<(), SmError> {
        self.run(eid)
    }

    pub fn attest(&self, eid: EnclaveId) -> Result<AttestationReport, SmError> {
        let rec = self.live(eid)?;
        Ok(attest_sign(&self.device_key, rec.m, rec.id.clone(), rec.v, rec.n))
    }

    pub fn destroy(&mut self, eid: EnclaveId) -> Result<(), SmError> {
        self.ensure_running()?;
        let rec = self.live_mut(eid)?;
        rec.phase = Phase::Destroyed;
        rec.resume_ok = false;
        rec.entered = false;
        Ok(())
    }

    fn force_destroy(&mut self, eid: EnclaveId) {
        if let Some(rec) = self.enclaves.get_mut(&eid) {
            rec.phase = Phase::Destroyed;
            rec.resume_ok = false;
            rec.entered = false;
        }
    }

    /// Key bound to this device and the caller's measurement.
    pub fn sealing_key(&self, caller: EnclaveId) -> Result<KeyMaterial, SmError> {
        let rec = self.live(caller)?;
        Ok(self.device_key.derive("seal", &rec.m.0))
    }

    // ---- trusted time ----------------------------------------------------

    pub fn context_switch(&mut self, eid: EnclaveId, dir: ContextDirection, now: u64) -> Result<(), SmError> {
        self.ensure_running()?;
        match dir {
            ContextDirection::HostToEnclave => {
                if self.enclaves.values().any(|r| r.entered) {
                    return Err(SmError::AlreadyEntered);
                }
                let rec = self.live_mut(eid)?;
                if !rec.resume_ok {
                    return Err(SmError::ResumeDenied);
                }
                clock::record_entry(rec, now);
            }
            ContextDirection::EnclaveToHost => {
                let rec = self.enclaves.get_mut(&eid).ok_or(SmError::UnknownEnclave(eid))?;
                if !rec.entered {
                    return Err(SmError::NotEntered);
                }
                clock::record_exit(rec, now);
            }
        }
        Ok(())
    }

    pub fn enclave_local_time(&self, eid: EnclaveId, now: u64) -> Result<u64, SmError> {
        let rec = self.live(eid)?;
        if !rec.entered {
            return Err(SmError::NotEntered);
        }
        Ok(clock::local_time(rec, now))
    }

    // ---- monotonic counters ----------------------------------------------

    pub fn allocate_mc(&mut self, caller: EnclaveId) -> Result<u64, SmError> {
        self.ensure_running()?;
        let owner = self.live(caller)?.id.clone();
        let ctr_id = self.next_ctr_id;
        self.store.put(KEY_COUNTER_NEXT, (ctr_id + 1).to_bytes())?;
        self.next_ctr_id = ctr_id + 1;
        self.counters.push(MonotonicCounter { ctr_id, ctr_val: 0, owner });
        if let Err(e) = self.persist_counters() {
            self.counters.pop();
            return Err(e);
        }
        Ok(ctr_id)
    }

    fn owned_counter(&self, caller: EnclaveId, ctr_id: u64) -> Result<usize, SmError> {
        let owner = &self.live(caller)?.id;
        let idx = self.counters.iter().position(|c| c.ctr_id == ctr_id).ok_or(SmError::UnknownCounter(ctr_id))?;
        if &self.counters[idx].owner != owner {
            return Err(SmError::OwnerMismatch);
        }
        Ok(idx)
    }

    pub fn get_mc_value(&self, caller: EnclaveId, ctr_id: u64) -> Result<u64, SmError> {
        self.ensure_running()?;
        let idx = self.owned_counter(caller, ctr_id)?;
        Ok(self.counters[idx].ctr_val)
    }

    pub fn inc_mc(&mut self, caller: EnclaveId, ctr_id: u64) -> Result<u64, SmError> {
        self.ensure_running()?;
        let idx = self.owned_counter(caller, ctr_id)?;
        self.counters[idx].ctr_val += 1;
        if let Err(e) = self.persist_counters() {
            self.counters[idx].ctr_val -= 1;
            return Err(e);
        }
        Ok(self.counters[idx].ctr_val)
    }

    pub fn free_mc(&mut self, caller: EnclaveId, ctr_id: u64) -> Result<(), SmError> {
        self.ensure_running()?;
        let idx = self.owned_counter(caller, ctr_id)?;
        let removed = self.counters.remove(idx);
        if let Err(e) = self.persist_counters() {
            self.counters.insert(idx, removed);
            return Err(e);
        }
        Ok(())
    }

    // ---- scheduling ------------------------------------------------------

    pub fn schedule_migration(&mut self, caller: PublicKeyId, id: SoftwareId) -> Result<(), SmError> {
        self.ensure_running()?;
        self.check_authorized(&caller)?;
        if self.scheduled.contains(&id) {
            return Err(SmError::AlreadyScheduled);
        }
        if self.enclaves.values().any(|r| r.is_live() && r.id == id) {
            return Err(SmError::EnclaveExists);
        }
        self.push_scheduled(id)
    }

    pub fn schedule_update(&mut self, caller: PublicKeyId, id: SoftwareId, v: Version) -> Result<(), SmError> {
        self.ensure_running()?;
        self.check_authorized(&caller)?;
        if self.scheduled.contains(&id) {
            return Err(SmError::AlreadyScheduled);
        }
        let live: Vec<&EnclaveRecord> = self.enclaves.values().filter(|r| r.is_live() && r.id == id).collect();
        if live.len() > 1 {
            return Err(SmError::TooManyInstances);
        }
        if !live.iter().any(|r| r.v < v) {
            return Err(SmError::NoEligibleEnclave);
        }
        self.push_scheduled(id)
    }

    fn push_scheduled(&mut self, id: SoftwareId) -> Result<(), SmError> {
        self.scheduled.push(id);
        if let Err(e) = self.persist_scheduled() {
            self.scheduled.pop();
            return Err(e);
        }
        Ok(())
    }

    // ---- migration protocol ----------------------------------------------

    fn local_eids(rec: &MigrationRecord) -> Vec<EnclaveId> {
        match rec.target_op {
            TargetOp::Update => vec![rec.eid_s, rec.eid_d],
            TargetOp::MigrationSource => vec![rec.eid_s],
            TargetOp::MigrationDestination => vec![rec.eid_d],
        }
    }

    fn peer(rec: &MigrationRecord) -> Option<PublicKeyId> {
        match rec.target_op {
            TargetOp::Update => None,
            TargetOp::MigrationSource => Some(rec.pk_d),
            TargetOp::MigrationDestination => Some(rec.pk_s),
        }
    }

    fn check_fresh_destination(rec: &EnclaveRecord) -> Result<(), SmError> {
        if rec.resume_ok || rec.phase != Phase::Created {
            return Err(SmError::DestinationActive);
        }
        Ok(())
    }

    pub fn state_migration(
        &mut self,
        caller: PublicKeyId,
        req: &StateMigrationRequest,
        now: u64,
    ) -> Result<(), SmError> {
        self.ensure_running()?;
        self.check_authorized(&caller)?;
        let me = self.device_pk;
        let op = match (req.pk_s == me, req.pk_d == me) {
            (true, true) => TargetOp::Update,
            (true, false) => TargetOp::MigrationSource,
            (false, true) => TargetOp::MigrationDestination,
            (false, false) => return Err(SmError::NotMyKey),
        };
        if op != TargetOp::Update && req.m_s != req.m_d {
            return Err(SmError::MeasurementMismatch);
        }
        let duplicate = self.migrations.iter().any(|r| {
            r.session == req.session
                && r.party == caller
                && r.target_op == op
                && r.eid_s == req.eid_s
                && r.eid_d == req.eid_d
        });
        if duplicate {
            self.send(caller, None, Payload::MigrationAck { session: req.session });
            return Ok(());
        }
        let id = match op {
            TargetOp::Update => {
                let s = self.live(req.eid_s)?;
                let d = self.live(req.eid_d)?;
                if s.m != req.m_s || d.m != req.m_d {
                    return Err(SmError::MeasurementMismatch);
                }
                if s.id != d.id || s.v >= d.v {
                    return Err(SmError::VersionOrderViolation);
                }
                Self::check_fresh_destination(d)?;
                s.id.clone()
            }
            TargetOp::MigrationSource => {
                let s = self.live(req.eid_s)?;
                if s.m != req.m_s {
                    return Err(SmError::MeasurementMismatch);
                }
                s.id.clone()
            }
            TargetOp::MigrationDestination => {
                let d = self.live(req.eid_d)?;
                if d.m != req.m_d {
                    return Err(SmError::MeasurementMismatch);
                }
                Self::check_fresh_destination(d)?;
                d.id.clone()
            }
        };
        let rec = MigrationRecord {
            id,
            target_op: op,
            eid_s: req.eid_s,
            eid_d: req.eid_d,
            m_s: req.m_s,
            m_d: req.m_d,
            pk_s: req.pk_s,
            pk_d: req.pk_d,
            party: caller,
            seed: None,
            t_sm: now + self.config.timeout_sm,
            session: req.session,
            stage: MigrationStage::Active,
            resends: 0,
            ack_deadline: None,
        };
        let mine = Self::local_eids(&rec);
        let busy = self
            .migrations
            .iter()
            .any(|r| r.id == rec.id || Self::local_eids(r).iter().any(|e| mine.contains(e)));
        if busy {
            return Err(SmError::AlreadyMigrating);
        }
        self.migrations.push(rec);
        if let Err(e) = self.persist_migrations() {
            self.migrations.pop();
            return Err(e);
        }
        self.send(caller, None, Payload::MigrationAck { session: req.session });
        Ok(())
    }

    pub fn get_transport_key(&mut self, caller: EnclaveId) -> Result<(KeyMaterial, TransportBinding), SmError> {
        self.ensure_running()?;
        self.live(caller)?;
        let idx = self
            .migrations
            .iter()
            .position(|r| {
                r.stage == MigrationStage::Active
                    && match r.target_op {
                        TargetOp::Update => r.eid_s == caller || r.eid_d == caller,
                        TargetOp::MigrationSource => r.eid_s == caller,
                        TargetOp::MigrationDestination => r.eid_d == caller,
                    }
            })
            .ok_or(SmError::NoActiveMigration)?;
        let seed = match self.migrations[idx].seed {
            Some(s) => s,
            None => {
                let rec = &self.migrations[idx];
                let s = match rec.target_op {
                    TargetOp::Update => {
                        let mut s = [0u8; SEED_LEN];
                        self.rng.fill_bytes(&mut s);
                        s
                    }
                    _ => *self.keys.session_key(&rec.pk_s, &rec.pk_d, rec.session).expose(),
                };
                self.migrations[idx].seed = Some(s);
                s
            }
        };
        let rec = &self.migrations[idx];
        let k = derive_transport_key(&seed, &rec.m_s, &rec.m_d).expect("seed has fixed length");
        Ok((k, TransportBinding { id: rec.id.clone(), eid_s: rec.eid_s, eid_d: rec.eid_d }))
    }

    fn pause(&mut self, eid: EnclaveId) -> Result<(), SmError> {
        let rec = self.live_mut(eid)?;
        rec.resume_ok = false;
        if rec.phase == Phase::Running {
            rec.phase = Phase::Paused;
        }
        Ok(())
    }

    fn allow(&mut self, eid: EnclaveId) -> Result<(), SmError> {
        self.live_mut(eid)?.resume_ok = true;
        Ok(())
    }

    pub fn execution_switch(&mut self, origin: SwitchOrigin, eid_s: EnclaveId, eid_d: EnclaveId) -> Result<(), SmError> {
        self.ensure_running()?;
        if let SwitchOrigin::Party(pk) = origin {
            self.check_authorized(&pk)?;
        }
        let idx = self
            .migrations
            .iter()
            .position(|r| {
                r.stage == MigrationStage::Active
                    && r.eid_s == eid_s
                    && r.eid_d == eid_d
                    && match origin {
                        SwitchOrigin::Party(pk) => r.party == pk && r.target_op != TargetOp::MigrationDestination,
                        SwitchOrigin::RemoteSm(pk) => r.target_op == TargetOp::MigrationDestination && r.pk_s == pk,
                    }
            })
            .ok_or(SmError::NoActiveMigration)?;
        let rec = self.migrations[idx].clone();
        match rec.target_op {
            TargetOp::Update => {
                self.live(eid_d)?;
                self.pause(eid_s)?;
                self.allow(eid_d)?;
                self.send(rec.party, None, Payload::SwitchAck { session: rec.session });
            }
            TargetOp::MigrationSource => {
                self.pause(eid_s)?;
                self.send(rec.pk_d, None, Payload::ExecSwitch { eid_s, eid_d, session: rec.session });
            }
            TargetOp::MigrationDestination => {
                self.allow(eid_d)?;
                self.send(rec.party, None, Payload::SwitchAck { session: rec.session });
            }
        }
        Ok(())
    }

    fn checkpoint(&mut self, substep: u8) -> Result<(), SmError> {
        if self.commit_crash == Some(substep) {
            self.commit_crash = None;
            return Err(SmError::Crashed);
        }
        Ok(())
    }

    pub fn migration_commit(&mut self, caller: CommitCaller, now: u64) -> Result<(), SmError> {
        self.ensure_running()?;
        match caller {
            CommitCaller::Enclave(eid) => {
                let idx = self.migrations.iter().position(|r| r.target_op != TargetOp::MigrationSource && r.eid_d == eid);
                let Some(idx) = idx else {
                    if self.migrations.iter().any(|r| r.target_op != TargetOp::MigrationDestination && r.eid_s == eid) {
                        return Err(SmError::NotDestination);
                    }
                    return Err(SmError::NoActiveMigration);
                };
                if !self.live(eid)?.resume_ok {
                    return Err(SmError::NoActiveMigration);
                }
                let rec = self.migrations[idx].clone();
                match (rec.target_op, rec.stage) {
                    (TargetOp::Update, MigrationStage::Active) => self.commit_update(idx),
                    (TargetOp::MigrationDestination, MigrationStage::Active) => {
                        self.migrations[idx].stage = MigrationStage::CommitForwarded;
                        self.persist_migrations()?;
                        self.checkpoint(1)?;
                        self.forward_commit(&rec);
                        Ok(())
                    }
                    (TargetOp::MigrationDestination, MigrationStage::CommitForwarded) => {
                        self.forward_commit(&rec);
                        Ok(())
                    }
                    _ => Err(SmError::NoActiveMigration),
                }
            }
            CommitCaller::RemoteSm { pk, session } => {
                let idx = self
                    .migrations
                    .iter()
                    .position(|r| r.target_op == TargetOp::MigrationSource && r.session == session && r.pk_d == pk)
                    .ok_or(SmError::NoActiveMigration)?;
                let rec = self.migrations[idx].clone();
                match rec.stage {
                    MigrationStage::Active => {
                        // Out of sequence unless execution already moved away from E_S.
                        if self.live(rec.eid_s)?.resume_ok {
                            return Err(SmError::NoActiveMigration);
                        }
                        self.force_destroy(rec.eid_s);
                        self.checkpoint(1)?;
                        self.mark_source_destroyed(idx, now)?;
                        self.checkpoint(2)?;
                        self.send(rec.pk_d, None, Payload::Ok4o { session });
                        Ok(())
                    }
                    MigrationStage::SourceDestroyed => {
                        self.send(rec.pk_d, None, Payload::Ok4o { session });
                        Ok(())
                    }
                    MigrationStage::CommitForwarded => Err(SmError::NoActiveMigration),
                }
            }
        }
    }

    fn forward_commit(&mut self, rec: &MigrationRecord) {
        self.send(
            rec.pk_s,
            None,
            Payload::CommitForward { session: rec.session, eid_s: rec.eid_s, eid_d: rec.eid_d },
        );
    }

    fn mark_source_destroyed(&mut self, idx: usize, now: u64) -> Result<(), SmError> {
        let rec = &mut self.migrations[idx];
        rec.stage = MigrationStage::SourceDestroyed;
        rec.resends = 0;
        rec.ack_deadline = Some(now + self.config.ack_timeout);
        self.persist_migrations()
    }

    /// Update commit: version bump, source destruction, metadata clear, then
    /// the success signals. Each step is durable before the next starts.
    fn commit_update(&mut self, idx: usize) -> Result<(), SmError> {
        let rec = self.migrations[idx].clone();
        let v_d = self.enclaves.get(&rec.eid_d).map(|r| r.v).ok_or(SmError::UnknownEnclave(rec.eid_d))?;
        match self.sw_versions.iter_mut().find(|e| e.id == rec.id) {
            Some(e) if e.v_latest < v_d => e.v_latest = v_d,
            Some(_) => {}
            None => self.sw_versions.push(VersionEntry { id: rec.id.clone(), v_latest: v_d }),
        }
        self.persist_versions()?;
        self.checkpoint(1)?;
        self.force_destroy(rec.eid_s);
        self.checkpoint(2)?;
        self.migrations.remove(idx);
        self.persist_migrations()?;
        self.checkpoint(3)?;
        self.send(self.device_pk, Some(rec.eid_d), Payload::Ok4p);
        self.send(rec.party, None, Payload::Ok5 { session: rec.session });
        Ok(())
    }

    fn handle_ok4o(&mut self, src: PublicKeyId, session: u64) -> Result<(), SmError> {
        let idx = self
            .migrations
            .iter()
            .position(|r| r.target_op == TargetOp::MigrationDestination && r.session == session && r.pk_s == src);
        match idx {
            Some(idx) if self.migrations[idx].stage == MigrationStage::CommitForwarded => {
                let rec = self.migrations.remove(idx);
                self.persist_migrations()?;
                self.completed_sessions.insert((src, session));
                self.checkpoint(1)?;
                self.send(self.device_pk, Some(rec.eid_d), Payload::Ok4p);
                self.send(src, None, Payload::Ok4q { session });
                Ok(())
            }
            None if self.completed_sessions.contains(&(src, session)) => {
                self.send(src, None, Payload::Ok4q { session });
                Ok(())
            }
            _ => Err(SmError::NoActiveMigration),
        }
    }

    fn handle_ok4q(&mut self, src: PublicKeyId, session: u64) -> Result<(), SmError> {
        let idx = self
            .migrations
            .iter()
            .position(|r| {
                r.target_op == TargetOp::MigrationSource
                    && r.session == session
                    && r.pk_d == src
                    && r.stage == MigrationStage::SourceDestroyed
            })
            .ok_or(SmError::NoActiveMigration)?;
        let rec = self.migrations.remove(idx);
        self.persist_migrations()?;
        self.checkpoint(1)?;
        self.send(rec.party, None, Payload::Ok5 { session });
        Ok(())
    }

    fn handle_timeout_notice(&mut self, src: PublicKeyId, session: u64) -> Result<(), SmError> {
        let idx = self
            .migrations
            .iter()
            .position(|r| r.session == session && Self::peer(r) == Some(src))
            .ok_or(SmError::NoActiveMigration)?;
        if self.migrations[idx].stage == MigrationStage::SourceDestroyed {
            return Ok(());
        }
        self.fail(idx, false)
    }

    /// Failure path for record `idx`: the source enclave is re-allowed, the
    /// destination enclave destroyed, metadata cleared, and P (plus the peer
    /// monitor when `notify_peer`) told. An update whose version bump or
    /// source destruction already happened is completed instead.
    fn fail(&mut self, idx: usize, notify_peer: bool) -> Result<(), SmError> {
        let rec = self.migrations[idx].clone();
        if rec.target_op == TargetOp::Update {
            let bumped = self.enclaves.get(&rec.eid_d).is_some_and(|d| self.v_latest(&rec.id).is_some_and(|v| v >= d.v));
            if bumped || !self.is_live(rec.eid_s) {
                return self.commit_update(idx);
            }
        }
        if rec.target_op != TargetOp::MigrationDestination && self.is_live(rec.eid_s) {
            self.allow(rec.eid_s)?;
            self.outbox.push(Effect::HostResume(rec.eid_s));
        }
        if rec.target_op != TargetOp::MigrationSource {
            self.force_destroy(rec.eid_d);
        }
        self.migrations.remove(idx);
        self.persist_migrations()?;
        self.send(rec.party, None, Payload::TimeoutNotice { session: rec.session });
        if notify_peer {
            if let Some(peer) = Self::peer(&rec) {
                self.send(peer, None, Payload::TimeoutNotice { session: rec.session });
            }
        }
        Ok(())
    }

    /// Earliest pending deadline, if any record is waiting on one.
    pub fn next_deadline(&self) -> Option<u64> {
        if self.halted {
            return None;
        }
        self.migrations
            .iter()
            .filter_map(|r| match r.stage {
                MigrationStage::SourceDestroyed => r.ack_deadline,
                _ => Some(r.t_sm),
            })
            .min()
    }

    /// Fires every expired deadline. Idempotent when nothing has expired.
    pub fn timeout_tick(&mut self, now: u64) -> Result<(), SmError> {
        self.ensure_running()?;
        let mut i = 0;
        while i < self.migrations.len() {
            let rec = self.migrations[i].clone();
            match rec.stage {
                MigrationStage::Active | MigrationStage::CommitForwarded if now >= rec.t_sm => {
                    self.fail(i, true)?;
                }
                MigrationStage::SourceDestroyed if rec.ack_deadline.is_some_and(|d| now >= d) => {
                    if rec.resends < self.config.resend_limit {
                        let r = &mut self.migrations[i];
                        r.resends += 1;
                        r.ack_deadline = Some(now + self.config.ack_timeout);
                        self.persist_migrations()?;
                        self.send(rec.pk_d, None, Payload::Ok4o { session: rec.session });
                        i += 1;
                    } else {
                        self.migrations.remove(i);
                        self.persist_migrations()?;
                        self.send(rec.party, None, Payload::Alarm { session: rec.session, sent_4o: rec.resends + 1 });
                    }
                }
                _ => i += 1,
            }
        }
        Ok(())
    }

    // ---- crash and recovery ----------------------------------------------

    /// Drops all volatile state. The enclave table is kept: enclaves are
    /// paused by the crash, not erased.
    pub fn crash(&mut self) {
        self.outbox.clear();
        self.completed_sessions.clear();
        self.commit_crash = None;
        self.sw_versions.clear();
        self.counters.clear();
        self.scheduled.clear();
        self.migrations.clear();
        for rec in self.enclaves.values_mut() {
            rec.entered = false;
        }
    }

    fn reload(&mut self) -> Result<(), SmError> {
        self.sw_versions = self.store.get_list(KEY_VERSIONS)?;
        self.counters = self.store.get_list(KEY_COUNTERS)?;
        self.next_ctr_id = match self.store.get(KEY_COUNTER_NEXT)? {
            Some(b) => u64::from_bytes(&b).map_err(|e| SmError::StoreFault(e.into()))?,
            None => 1,
        };
        self.scheduled = self.store.get_list(KEY_SCHEDULED)?;
        self.migrations = load_migration_metadata(&self.store)?;
        Ok(())
    }

    /// Reloads persistent state and settles every restored record. A stale
    /// snapshot halts the monitor.
    pub fn recover(&mut self, now: u64) -> Result<(), SmError> {
        self.crash();
        self.halted = false;
        if let Err(e) = self.reload() {
            self.crash();
            self.halted = true;
            return Err(e);
        }
        let mut i = 0;
        while i < self.migrations.len() {
            let rec = self.migrations[i].clone();
            match (rec.target_op, rec.stage) {
                (TargetOp::MigrationSource, MigrationStage::SourceDestroyed) => {
                    if rec.ack_deadline.is_none() {
                        self.migrations[i].ack_deadline = Some(now + self.config.ack_timeout);
                    }
                    i += 1;
                }
                (TargetOp::MigrationSource, _) if !self.is_live(rec.eid_s) => {
                    self.mark_source_destroyed(i, now)?;
                    self.send(rec.pk_d, None, Payload::Ok4o { session: rec.session });
                    i += 1;
                }
                (TargetOp::MigrationDestination, MigrationStage::CommitForwarded) => {
                    self.forward_commit(&rec);
                    i += 1;
                }
                _ => self.fail(i, true)?,
            }
        }
        Ok(())
    }

    // ---- message dispatch ------------------------------------------------

    fn party_request(
        &mut self,
        src: PublicKeyId,
        kind: MsgKind,
        f: impl FnOnce(&mut Self) -> Result<(), SmError>,
    ) -> Result<(), SmError> {
        let r = f(self);
        if let Err(e) = &r {
            if *e != SmError::Crashed {
                self.send(src, None, Payload::Reject { request: kind, reason: e.code().to_string() });
            }
        }
        r
    }

    /// Handles one envelope addressed to this monitor.
    pub fn handle_envelope(&mut self, env: &Envelope, now: u64) -> Result<(), SmError> {
        self.ensure_running()?;
        let me = self.device_pk;
        if env.dst != me {
            return Err(SmError::NotMyKey);
        }
        if env.kind.is_authenticated() && !env.verify(&self.keys.pair_key(&env.src, &me)) {
            return Err(SmError::AuthFailure);
        }
        let payload = Payload::decode(env.kind, &env.payload).map_err(|_| SmError::Malformed)?;
        let src = env.src;
        match payload {
            Payload::ScheduleMigration { id } => self.party_request(src, env.kind, |sm| {
                sm.schedule_migration(src, id.clone())?;
                sm.send(src, None, Payload::ScheduleAck { id });
                Ok(())
            }),
            Payload::ScheduleUpdate { id, v } => self.party_request(src, env.kind, |sm| {
                sm.schedule_update(src, id.clone(), v)?;
                sm.send(src, None, Payload::ScheduleAck { id });
                Ok(())
            }),
            Payload::Init { id, v, n, binary } => self.party_request(src, env.kind, |sm| {
                sm.check_authorized(&src)?;
                let eid = sm.init(id, v, n, &binary, now)?;
                sm.send(src, None, Payload::InitReply { eid });
                Ok(())
            }),
            Payload::StateMigration(req) => {
                self.party_request(src, env.kind, |sm| sm.state_migration(src, &req, now))
            }
            Payload::ExecSwitch { eid_s, eid_d, .. } => {
                if self.authorized.contains(&src) {
                    self.party_request(src, env.kind, |sm| sm.execution_switch(SwitchOrigin::Party(src), eid_s, eid_d))
                } else {
                    self.execution_switch(SwitchOrigin::RemoteSm(src), eid_s, eid_d)
                }
            }
            Payload::Commit => match env.from_enclave {
                Some(eid) if src == me => self.migration_commit(CommitCaller::Enclave(eid), now),
                _ => Err(SmError::Unauthorized),
            },
            Payload::CommitForward { session, .. } => {
                self.migration_commit(CommitCaller::RemoteSm { pk: src, session }, now)
            }
            Payload::Ok4o { session } => self.handle_ok4o(src, session),
            Payload::Ok4q { session } => self.handle_ok4q(src, session),
            Payload::TimeoutNotice { session } => self.handle_timeout_notice(src, session),
            other => Err(SmError::Unexpected(other.kind())),
        }
    }
}
