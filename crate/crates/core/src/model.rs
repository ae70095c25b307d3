// SPDX-License-Identifier: Apache-2.0

//! Domain types shared by the monitor, persistence, and the wire layer.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{Mac, PublicKeyId, SEED_LEN};

pub const SOFTWARE_ID_MAX: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("software id must be 1..={SOFTWARE_ID_MAX} bytes, got {0}")]
    BadSoftwareId(usize),
    #[error("clone bound N must be at least 1")]
    InvalidCloneBound,
}

/// Identifier of an enclave software, shared by all its versions.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SoftwareId(Vec<u8>);

impl SoftwareId {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, ModelError> {
        let bytes = bytes.into();
        if bytes.is_empty() || bytes.len() > SOFTWARE_ID_MAX {
            return Err(ModelError::BadSoftwareId(bytes.len()));
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for SoftwareId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) => write!(f, "{s:?}"),
            Err(_) => write!(f, "0x{}", hex::encode(&self.0)),
        }
    }
}

impl fmt::Display for SoftwareId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&self.0))
    }
}

impl Canonical for SoftwareId {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Self::new(dec.bytes()?).map_err(|_| CodecError::InvalidValue("SoftwareId"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Version(pub u64);

impl Canonical for Version {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.u64()?))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Measurement(pub [u8; 32]);

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m:{}", hex::encode(&self.0[..4]))
    }
}

impl Canonical for Measurement {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.array()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EnclaveId(pub u64);

impl fmt::Display for EnclaveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl Canonical for EnclaveId {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.u64()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Created,
    Running,
    Paused,
    Destroyed,
}

impl Canonical for Phase {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(*self as u8);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            0 => Phase::Created,
            1 => Phase::Running,
            2 => Phase::Paused,
            3 => Phase::Destroyed,
            tag => return Err(CodecError::InvalidTag { what: "Phase", tag }),
        })
    }
}

/// Per-enclave monitor metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveRecord {
    pub eid: EnclaveId,
    pub id: SoftwareId,
    pub v: Version,
    /// Allowed concurrent instances.
    pub n: u32,
    pub m: Measurement,
    /// Accumulated in-enclave ticks.
    pub t_e: u64,
    pub t_e_entry: u64,
    pub resume_ok: bool,
    pub phase: Phase,
    /// True between a host-to-enclave and the matching enclave-to-host switch.
    pub entered: bool,
}

pub const DEFAULT_CLONE_BOUND: u32 = 1;

pub fn new_enclave_record(
    id: SoftwareId,
    v: Version,
    n: Option<u32>,
    m: Measurement,
    eid: EnclaveId,
    now: u64,
) -> Result<EnclaveRecord, ModelError> {
    let n = n.unwrap_or(DEFAULT_CLONE_BOUND);
    if n == 0 {
        return Err(ModelError::InvalidCloneBound);
    }
    Ok(EnclaveRecord {
        eid,
        id,
        v,
        n,
        m,
        t_e: 0,
        t_e_entry: now,
        resume_ok: true,
        phase: Phase::Created,
        entered: false,
    })
}

impl EnclaveRecord {
    pub fn is_live(&self) -> bool {
        self.phase != Phase::Destroyed
    }
}

impl Canonical for EnclaveRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.eid)
            .value(&self.id)
            .value(&self.v)
            .u32(self.n)
            .value(&self.m)
            .u64(self.t_e)
            .u64(self.t_e_entry)
            .bool(self.resume_ok)
            .value(&self.phase)
            .bool(self.entered);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            eid: dec.value()?,
            id: dec.value()?,
            v: dec.value()?,
            n: dec.u32()?,
            m: dec.value()?,
            t_e: dec.u64()?,
            t_e_entry: dec.u64()?,
            resume_ok: dec.bool()?,
            phase: dec.value()?,
            entered: dec.bool()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetOp {
    Update,
    MigrationSource,
    MigrationDestination,
}

impl Canonical for TargetOp {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(*self as u8);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            0 => TargetOp::Update,
            1 => TargetOp::MigrationSource,
            2 => TargetOp::MigrationDestination,
            tag => return Err(CodecError::InvalidTag { what: "TargetOp", tag }),
        })
    }
}

/// Progress of a record through the commit phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MigrationStage {
    Active,
    /// Destination: commit forwarded to the source monitor, awaiting its OK.
    CommitForwarded,
    /// Source: local enclave destroyed and OK sent, awaiting the final ack.
    SourceDestroyed,
}

impl Canonical for MigrationStage {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(*self as u8);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            0 => MigrationStage::Active,
            1 => MigrationStage::CommitForwarded,
            2 => MigrationStage::SourceDestroyed,
            tag => return Err(CodecError::InvalidTag { what: "MigrationStage", tag }),
        })
    }
}

/// Metadata of one in-flight update or migration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationRecord {
    pub id: SoftwareId,
    pub target_op: TargetOp,
    pub eid_s: EnclaveId,
    pub eid_d: EnclaveId,
    pub m_s: Measurement,
    pub m_d: Measurement,
    pub pk_s: PublicKeyId,
    pub pk_d: PublicKeyId,
    /// Party that issued the state-migration request; receives notices.
    pub party: PublicKeyId,
    pub seed: Option<[u8; SEED_LEN]>,
    /// Absolute deadline (ticks).
    pub t_sm: u64,
    /// Party-chosen session number; binds inter-monitor session keys.
    pub session: u64,
    pub stage: MigrationStage,
    pub resends: u32,
    pub ack_deadline: Option<u64>,
}

impl MigrationRecord {
    /// Copy suitable for persistence: the seed never leaves runtime memory.
    pub fn without_seed(&self) -> Self {
        Self { seed: None, ..self.clone() }
    }
}

struct Seed([u8; SEED_LEN]);

impl Canonical for Seed {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.array()?))
    }
}

impl Canonical for MigrationRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.id)
            .value(&self.target_op)
            .value(&self.eid_s)
            .value(&self.eid_d)
            .value(&self.m_s)
            .value(&self.m_d)
            .value(&self.pk_s)
            .value(&self.pk_d)
            .value(&self.party)
            .option(&self.seed.map(Seed))
            .u64(self.t_sm)
            .u64(self.session)
            .value(&self.stage)
            .u32(self.resends)
            .option(&self.ack_deadline);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            id: dec.value()?,
            target_op: dec.value()?,
            eid_s: dec.value()?,
            eid_d: dec.value()?,
            m_s: dec.value()?,
            m_d: dec.value()?,
            pk_s: dec.value()?,
            pk_d: dec.value()?,
            party: dec.value()?,
            seed: dec.option::<Seed>()?.map(|s| s.0),
            t_sm: dec.u64()?,
            session: dec.u64()?,
            stage: dec.value()?,
            resends: dec.u32()?,
            ack_deadline: dec.option()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonotonicCounter {
    pub ctr_id: u64,
    pub ctr_val: u64,
    pub owner: SoftwareId,
}

impl Canonical for MonotonicCounter {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.ctr_id).u64(self.ctr_val).value(&self.owner);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self { ctr_id: dec.u64()?, ctr_val: dec.u64()?, owner: dec.value()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionEntry {
    pub id: SoftwareId,
    pub v_latest: Version,
}

impl Canonical for VersionEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.id).value(&self.v_latest);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self { id: dec.value()?, v_latest: dec.value()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationReport {
    pub m: Measurement,
    pub id: SoftwareId,
    pub v: Version,
    pub n: u32,
    pub sig: [u8; 32],
}

impl Canonical for AttestationReport {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.m).value(&self.id).value(&self.v).u32(self.n).raw(&self.sig);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self { m: dec.value()?, id: dec.value()?, v: dec.value()?, n: dec.u32()?, sig: dec.array()? })
    }
}

/// Sealed enclave state. The counter value is part of the encrypted plaintext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub ciphertext: Vec<u8>,
    pub tag: Mac,
}

impl Canonical for SealedBlob {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.ciphertext).value(&self.tag);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self { ciphertext: dec.bytes()?, tag: dec.value()? })
    }
}
