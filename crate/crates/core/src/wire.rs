// SPDX-License-Identifier: Apache-2.0

//! Envelope payloads, one variant per message kind.

use crate::channel::MsgKind;
use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{Mac, PublicKeyId};
use crate::model::{EnclaveId, Measurement, SoftwareId, Version};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateMigrationRequest {
    pub pk_s: PublicKeyId,
    pub pk_d: PublicKeyId,
    pub eid_s: EnclaveId,
    pub eid_d: EnclaveId,
    pub m_s: Measurement,
    pub m_d: Measurement,
    pub session: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    ScheduleMigration { id: SoftwareId },
    ScheduleUpdate { id: SoftwareId, v: Version },
    ScheduleAck { id: SoftwareId },
    Init { id: SoftwareId, v: Version, n: Option<u32>, binary: Vec<u8> },
    InitReply { eid: EnclaveId },
    StateMigration(StateMigrationRequest),
    MigrationAck { session: u64 },
    ExportState { eid: EnclaveId },
    StateBlob { c: Vec<u8>, mac: Mac },
    ExecSwitch { eid_s: EnclaveId, eid_d: EnclaveId, session: u64 },
    SwitchAck { session: u64 },
    ImportState { eid: EnclaveId, c: Vec<u8>, mac: Mac },
    Commit,
    CommitForward { session: u64, eid_s: EnclaveId, eid_d: EnclaveId },
    Ok4o { session: u64 },
    Ok4p,
    Ok4q { session: u64 },
    Ok5 { session: u64 },
    TimeoutNotice { session: u64 },
    Alarm { session: u64, sent_4o: u32 },
    Reject { request: MsgKind, reason: String },
}

impl Payload {
    pub fn kind(&self) -> MsgKind {
        match self {
            Payload::ScheduleMigration { .. } => MsgKind::ScheduleMigration,
            Payload::ScheduleUpdate { .. } => MsgKind::ScheduleUpdate,
            Payload::ScheduleAck { .. } => MsgKind::ScheduleAck,
            Payload::Init { .. } => MsgKind::Init,
            Payload::InitReply { .. } => MsgKind::InitReply,
            Payload::StateMigration(_) => MsgKind::StateMigration,
            Payload::MigrationAck { .. } => MsgKind::MigrationAck,
            Payload::ExportState { .. } => MsgKind::ExportState,
            Payload::StateBlob { .. } => MsgKind::StateBlob,
            Payload::ExecSwitch { .. } => MsgKind::ExecSwitch,
            Payload::SwitchAck { .. } => MsgKind::SwitchAck,
            Payload::ImportState { .. } => MsgKind::ImportState,
            Payload::Commit => MsgKind::Commit,
            Payload::CommitForward { .. } => MsgKind::CommitForward,
            Payload::Ok4o { .. } => MsgKind::Ok4o,
            Payload::Ok4p => MsgKind::Ok4p,
            Payload::Ok4q { .. } => MsgKind::Ok4q,
            Payload::Ok5 { .. } => MsgKind::Ok5,
            Payload::TimeoutNotice { .. } => MsgKind::TimeoutNotice,
            Payload::Alarm { .. } => MsgKind::Alarm,
            Payload::Reject { .. } => MsgKind::Reject,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            Payload::ScheduleMigration { id } | Payload::ScheduleAck { id } => {
                e.value(id);
            }
            Payload::ScheduleUpdate { id, v } => {
                e.value(id).value(v);
            }
            Payload::Init { id, v, n, binary } => {
                e.value(id).value(v).option(&n.map(u64::from)).bytes(binary);
            }
            Payload::InitReply { eid } | Payload::ExportState { eid } => {
                e.value(eid);
            }
            Payload::StateMigration(r) => {
                e.value(&r.pk_s).value(&r.pk_d).value(&r.eid_s).value(&r.eid_d).value(&r.m_s).value(&r.m_d).u64(r.session);
            }
            Payload::MigrationAck { session }
            | Payload::SwitchAck { session }
            | Payload::Ok4o { session }
            | Payload::Ok4q { session }
            | Payload::Ok5 { session }
            | Payload::TimeoutNotice { session } => {
                e.u64(*session);
            }
            Payload::StateBlob { c, mac } => {
                e.bytes(c).value(mac);
            }
            Payload::ExecSwitch { eid_s, eid_d, session } => {
                e.value(eid_s).value(eid_d).u64(*session);
            }
            Payload::ImportState { eid, c, mac } => {
                e.value(eid).bytes(c).value(mac);
            }
            Payload::Commit | Payload::Ok4p => {}
            Payload::CommitForward { session, eid_s, eid_d } => {
                e.u64(*session).value(eid_s).value(eid_d);
            }
            Payload::Alarm { session, sent_4o } => {
                e.u64(*session).u32(*sent_4o);
            }
            Payload::Reject { request, reason } => {
                e.u8(*request as u8).bytes(reason.as_bytes());
            }
        }
        e.finish()
    }

    pub fn decode(kind: MsgKind, bytes: &[u8]) -> Result<Payload, CodecError> {
        let mut d = Decoder::new(bytes);
        let p = match kind {
            MsgKind::ScheduleMigration => Payload::ScheduleMigration { id: d.value()? },
            MsgKind::ScheduleAck => Payload::ScheduleAck { id: d.value()? },
            MsgKind::ScheduleUpdate => Payload::ScheduleUpdate { id: d.value()?, v: d.value()? },
            MsgKind::Init => {
                let id = d.value()?;
                let v = d.value()?;
                let n = match d.option::<u64>()? {
                    None => None,
                    Some(n) => Some(u32::try_from(n).map_err(|_| CodecError::InvalidValue("clone bound"))?),
                };
                Payload::Init { id, v, n, binary: d.bytes()? }
            }
            MsgKind::InitReply => Payload::InitReply { eid: d.value()? },
            MsgKind::ExportState => Payload::ExportState { eid: d.value()? },
            MsgKind::StateMigration => Payload::StateMigration(StateMigrationRequest {
                pk_s: d.value()?,
                pk_d: d.value()?,
                eid_s: d.value()?,
                eid_d: d.value()?,
                m_s: d.value()?,
                m_d: d.value()?,
                session: d.u64()?,
            }),
            MsgKind::MigrationAck => Payload::MigrationAck { session: d.u64()? },
            MsgKind::SwitchAck => Payload::SwitchAck { session: d.u64()? },
            MsgKind::Ok4o => Payload::Ok4o { session: d.u64()? },
            MsgKind::Ok4q => Payload::Ok4q { session: d.u64()? },
            MsgKind::Ok5 => Payload::Ok5 { session: d.u64()? },
            MsgKind::TimeoutNotice => Payload::TimeoutNotice { session: d.u64()? },
            MsgKind::StateBlob => Payload::StateBlob { c: d.bytes()?, mac: d.value()? },
            MsgKind::ExecSwitch => Payload::ExecSwitch { eid_s: d.value()?, eid_d: d.value()?, session: d.u64()? },
            MsgKind::ImportState => Payload::ImportState { eid: d.value()?, c: d.bytes()?, mac: d.value()? },
            MsgKind::Commit => Payload::Commit,
            MsgKind::Ok4p => Payload::Ok4p,
            MsgKind::CommitForward => Payload::CommitForward { session: d.u64()?, eid_s: d.value()?, eid_d: d.value()? },
            MsgKind::Alarm => Payload::Alarm { session: d.u64()?, sent_4o: d.u32()? },
            MsgKind::Reject => {
                let tag = d.u8()?;
                let request = MsgKind::ALL
                    .into_iter()
                    .find(|k| *k as u8 == tag)
                    .ok_or(CodecError::InvalidTag { what: "MsgKind", tag })?;
                let reason = String::from_utf8(d.bytes()?).map_err(|_| CodecError::InvalidValue("reason"))?;
                Payload::Reject { request, reason }
            }
        };
        d.finish()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn payload_round_trips(session in any::<u64>(), eid in any::<u64>(), c in proptest::collection::vec(any::<u8>(), 0..64), n in proptest::option::of(1u32..9)) {
            let id = SoftwareId::new(b"app".to_vec()).unwrap();
            let samples = vec![
                Payload::Init { id: id.clone(), v: Version(eid), n, binary: c.clone() },
                Payload::ImportState { eid: EnclaveId(eid), c: c.clone(), mac: Mac([7; 16]) },
                Payload::CommitForward { session, eid_s: EnclaveId(eid), eid_d: EnclaveId(eid ^ 1) },
                Payload::Alarm { session, sent_4o: 4 },
                Payload::Reject { request: MsgKind::StateMigration, reason: "MeasurementMismatch".into() },
                Payload::Ok4p,
            ];
            for p in samples {
                prop_assert_eq!(Payload::decode(p.kind(), &p.encode()).unwrap(), p);
            }
        }
    }
}
