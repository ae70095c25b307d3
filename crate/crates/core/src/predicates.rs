// SPDX-License-Identifier: Apache-2.0

//! Security predicates evaluated over a finished trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::hash;
use crate::enclave::chain_step;
use crate::model::Phase;
use crate::trace::{Detail, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    /// Never both pair enclaves running; terminal state is one active, or none plus an alarm.
    Atomicity,
    /// Alarms carry the expected resend count.
    AlarmLegality,
    /// No init below the highest version committed for that software on that device.
    Rollback,
    /// Rejected or unauthenticated requests leave the monitor state unchanged.
    Authenticity,
    /// Every input is applied exactly once along the surviving state chain.
    StateContinuity,
    /// Trace time never decreases.
    TimeMonotonic,
    /// Enclave-local time equals the sum of its in-enclave intervals.
    TimeAccounting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub predicate: Predicate,
    pub index: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at event {}: {}", self.predicate, self.index, self.message)
    }
}

/// Evaluates all predicates. Each predicate reports at most its first violation.
pub fn check_predicates(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    out.extend(time_monotonic(trace));
    out.extend(authenticity(trace));
    out.extend(rollback(trace));
    out.extend(atomicity(trace));
    out.extend(alarm_legality(trace));
    out.extend(state_continuity(trace));
    out
}

fn violation(predicate: Predicate, index: usize, message: impl Into<String>) -> Option<Violation> {
    Some(Violation { predicate, index, message: message.into() })
}

fn time_monotonic(trace: &Trace) -> Option<Violation> {
    trace.events.windows(2).enumerate().find_map(|(i, w)| {
        (w[1].t < w[0].t).then(|| Violation {
            predicate: Predicate::TimeMonotonic,
            index: i + 1,
            message: format!("t went from {} to {}", w[0].t, w[1].t),
        })
    })
}

fn authenticity(trace: &Trace) -> Option<Violation> {
    for (i, ev) in trace.events.iter().enumerate() {
        let guarded = ev.verdict == "auth_failed" || ev.verdict == "rejected:Unauthorized";
        if !guarded {
            continue;
        }
        if let Some(Detail::Delivery { digest_before, .. }) = &ev.detail {
            if !digest_before.is_empty() && *digest_before != ev.sm_state_digest {
                return violation(Predicate::Authenticity, i, format!("{} to {} mutated monitor state", ev.kind, ev.dst));
            }
        }
    }
    None
}

fn rollback(trace: &Trace) -> Option<Violation> {
    let mut highest: BTreeMap<(String, String), u64> = BTreeMap::new();
    for (i, ev) in trace.events.iter().enumerate() {
        match &ev.detail {
            Some(Detail::VersionCommit { id, v_latest }) => {
                let e = highest.entry((ev.src.clone(), id.clone())).or_insert(0);
                *e = (*e).max(*v_latest);
            }
            Some(Detail::Init { id, v, .. }) => {
                if let Some(h) = highest.get(&(ev.src.clone(), id.clone())) {
                    if v < h {
                        return violation(Predicate::Rollback, i, format!("{id} v{v} initialized on {} after v{h}", ev.src));
                    }
                }
            }
            _ => {}
        }
    }
    None
}

fn current_pair(trace: &Trace, upto: usize) -> Option<(String, Option<String>)> {
    trace.events[..upto].iter().rev().find_map(|e| match &e.detail {
        Some(Detail::Pair { source, dest }) => Some((source.clone(), (!dest.is_empty()).then(|| dest.clone()))),
        _ => None,
    })
}

fn atomicity(trace: &Trace) -> Option<Violation> {
    let mut phases: BTreeMap<String, (Phase, bool)> = BTreeMap::new();
    let mut alarm = false;
    for (i, ev) in trace.events.iter().enumerate() {
        match &ev.detail {
            Some(Detail::Phase { enclave, phase, resume_ok }) => {
                phases.insert(enclave.clone(), (*phase, *resume_ok));
                if let Some((s, Some(d))) = current_pair(trace, i + 1) {
                    let running = |n: &str| phases.get(n).is_some_and(|p| p.0 == Phase::Running);
                    if running(&s) && running(&d) {
                        return violation(Predicate::Atomicity, i, format!("{s} and {d} both running"));
                    }
                }
            }
            Some(Detail::Alarm { .. }) => alarm = true,
            Some(Detail::Final { enclaves, .. }) => {
                let Some((s, d)) = current_pair(trace, i) else { continue };
                let active = |n: &str| {
                    enclaves.iter().any(|e| e.enclave == n && e.phase != Phase::Destroyed && e.resume_ok)
                };
                let n_active = usize::from(active(&s)) + d.as_deref().map_or(0, |d| usize::from(active(d)));
                let ok = n_active == 1 || (n_active == 0 && alarm);
                if !ok {
                    return violation(
                        Predicate::Atomicity,
                        i,
                        format!("terminal state has {n_active} active enclaves (alarm raised: {alarm})"),
                    );
                }
            }
            _ => {}
        }
    }
    None
}

fn alarm_legality(trace: &Trace) -> Option<Violation> {
    let mut limit = None;
    for (i, ev) in trace.events.iter().enumerate() {
        match &ev.detail {
            Some(Detail::Config { resend_limit, .. }) => limit = Some(*resend_limit),
            Some(Detail::Alarm { sent_4o, .. }) => {
                let Some(l) = limit else {
                    return violation(Predicate::AlarmLegality, i, "alarm before any operation was configured");
                };
                if *sent_4o != l + 1 {
                    return violation(
                        Predicate::AlarmLegality,
                        i,
                        format!("alarm after {sent_4o} transmissions, expected {}", l + 1),
                    );
                }
            }
            _ => {}
        }
    }
    None
}

fn state_continuity(trace: &Trace) -> Option<Violation> {
    let mut replay: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut exported: Option<(String, Vec<u8>)> = None;
    let mut seen = BTreeSet::new();
    let mut next_index = 0u64;
    let sc = Predicate::StateContinuity;
    for (i, ev) in trace.events.iter().enumerate() {
        match &ev.detail {
            Some(Detail::Boot { enclave, state }) => {
                let Ok(bytes) = hex::decode(state) else {
                    return violation(sc, i, "boot state is not hex");
                };
                replay.insert(enclave.clone(), bytes);
            }
            Some(Detail::Input { enclave, index, input, state }) => {
                if !seen.insert(*index) {
                    return violation(sc, i, format!("input {index} processed twice"));
                }
                if *index != next_index {
                    return violation(sc, i, format!("input {index} processed, expected {next_index}"));
                }
                next_index += 1;
                let (Ok(input), Some(prev)) = (hex::decode(input), replay.get(enclave)) else {
                    return violation(sc, i, format!("input to {enclave} without a known prior state"));
                };
                let next = chain_step(prev, &input);
                if hex::encode(&next) != *state {
                    return violation(sc, i, format!("{enclave} state diverged from replay at input {index}"));
                }
                replay.insert(enclave.clone(), next);
            }
            Some(Detail::Export { enclave, digest }) => {
                let Some(st) = replay.get(enclave) else {
                    return violation(sc, i, format!("export from {enclave} without a known state"));
                };
                if hex::encode(hash(&[st])) != *digest {
                    return violation(sc, i, format!("export from {enclave} does not match replayed state"));
                }
                exported = Some((enclave.clone(), st.clone()));
            }
            Some(Detail::Import { enclave, digest }) => {
                let Some((src, st)) = &exported else {
                    return violation(sc, i, format!("import into {enclave} with no prior export"));
                };
                if hex::encode(hash(&[st])) != *digest {
                    return violation(sc, i, format!("import into {enclave} differs from exported state"));
                }
                if replay.get(src) != Some(st) {
                    return violation(sc, i, format!("{src} processed input after export; it would be lost"));
                }
                replay.insert(enclave.clone(), st.clone());
            }
            Some(Detail::Final { enclaves, .. }) => {
                for e in enclaves {
                    if e.phase == Phase::Destroyed || !e.resume_ok {
                        continue;
                    }
                    if let Some(st) = replay.get(&e.enclave) {
                        if hex::encode(hash(&[st])) != e.state {
                            return violation(sc, i, format!("final state of {} differs from replay", e.enclave));
                        }
                    }
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::EnclaveMode;
    use crate::trace::{FinalEnclave, TraceEvent};

    fn ev(t: u64, detail: Detail) -> TraceEvent {
        TraceEvent {
            t,
            seq: 0,
            kind: "x".into(),
            src: "dev0".into(),
            dst: String::new(),
            verdict: "ok".into(),
            sm_state_digest: String::new(),
            detail: Some(detail),
        }
    }

    fn phase(t: u64, enclave: &str, p: Phase, resume_ok: bool) -> TraceEvent {
        ev(t, Detail::Phase { enclave: enclave.into(), phase: p, resume_ok })
    }

    fn pair(dest: &str) -> TraceEvent {
        ev(0, Detail::Pair { source: "dev0/e1".into(), dest: dest.into() })
    }

    fn fin(enclave: &str, p: Phase, resume_ok: bool, state: &[u8]) -> FinalEnclave {
        FinalEnclave {
            enclave: enclave.into(),
            phase: p,
            resume_ok,
            mode: EnclaveMode::Normal,
            state: hex::encode(hash(&[state])),
        }
    }

    fn trace(events: Vec<TraceEvent>) -> Trace {
        let mut t = Trace::default();
        for e in events {
            t.push(e);
        }
        t
    }

    #[test]
    fn both_running_is_flagged_at_that_index() {
        let tr = trace(vec![
            pair("dev1/e1"),
            phase(1, "dev0/e1", Phase::Running, true),
            phase(2, "dev1/e1", Phase::Running, true),
        ]);
        let v = check_predicates(&tr);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].predicate, v[0].index), (Predicate::Atomicity, 2));
    }

    #[test]
    fn neither_active_needs_an_alarm() {
        let body = |with_alarm: bool| {
            let mut evs = vec![
                ev(0, Detail::Config { operation: "migration".into(), resend_limit: 3, devices: vec![] }),
                pair("dev1/e1"),
            ];
            if with_alarm {
                evs.push(ev(5, Detail::Alarm { session: 1, sent_4o: 4 }));
            }
            evs.push(ev(
                6,
                Detail::Final {
                    enclaves: vec![
                        fin("dev0/e1", Phase::Destroyed, false, b""),
                        fin("dev1/e1", Phase::Created, false, b""),
                    ],
                    pending_migrations: 0,
                },
            ));
            check_predicates(&trace(evs))
        };
        assert!(body(true).is_empty());
        let v = body(false);
        assert_eq!(v[0].predicate, Predicate::Atomicity);
    }

    #[test]
    fn alarm_with_wrong_count_is_flagged() {
        let tr = trace(vec![
            ev(0, Detail::Config { operation: "migration".into(), resend_limit: 3, devices: vec![] }),
            ev(1, Detail::Alarm { session: 1, sent_4o: 2 }),
        ]);
        assert_eq!(check_predicates(&tr)[0].predicate, Predicate::AlarmLegality);
    }

    #[test]
    fn init_below_committed_version_is_flagged() {
        let tr = trace(vec![
            ev(0, Detail::VersionCommit { id: "app".into(), v_latest: 2 }),
            ev(1, Detail::Init { id: "app".into(), v: 1, eid: 3, bypass: false }),
        ]);
        let v = check_predicates(&tr);
        assert_eq!((v[0].predicate, v[0].index), (Predicate::Rollback, 1));
    }

    #[test]
    fn rejected_request_that_mutates_is_flagged() {
        let mut e = ev(0, Detail::Delivery { msg_seq: 1, digest_before: "aa".into() });
        e.verdict = "rejected:Unauthorized".into();
        e.sm_state_digest = "bb".into();
        assert_eq!(check_predicates(&trace(vec![e.clone()]))[0].predicate, Predicate::Authenticity);
        e.sm_state_digest = "aa".into();
        assert!(check_predicates(&trace(vec![e])).is_empty());
    }

    #[test]
    fn time_going_backwards_is_flagged() {
        let tr = trace(vec![ev(5, Detail::Note { text: String::new() }), ev(4, Detail::Note { text: String::new() })]);
        let v = check_predicates(&tr);
        assert_eq!((v[0].predicate, v[0].index), (Predicate::TimeMonotonic, 1));
    }

    fn input(t: u64, enclave: &str, index: u64, prev: &[u8], data: &[u8]) -> (TraceEvent, Vec<u8>) {
        let next = chain_step(prev, data);
        let e = ev(
            t,
            Detail::Input { enclave: enclave.into(), index, input: hex::encode(data), state: hex::encode(&next) },
        );
        (e, next)
    }

    #[test]
    fn input_processed_by_both_instances_is_flagged() {
        let boot = b"genesis".to_vec();
        let (i0, s1) = input(1, "dev0/e1", 0, &boot, b"a");
        let export = ev(2, Detail::Export { enclave: "dev0/e1".into(), digest: hex::encode(hash(&[&s1])) });
        let import = ev(3, Detail::Import { enclave: "dev1/e1".into(), digest: hex::encode(hash(&[&s1])) });
        let (i1_src, _) = input(4, "dev0/e1", 1, &s1, b"b");
        let (mut i1_dst, _) = input(5, "dev1/e1", 1, &s1, b"b");
        let base = vec![ev(0, Detail::Boot { enclave: "dev0/e1".into(), state: hex::encode(&boot) }), i0, export, import];

        let mut ok = base.clone();
        ok.push(i1_dst.clone());
        assert!(check_predicates(&trace(ok)).is_empty());

        let mut dup = base;
        dup.push(i1_src);
        i1_dst.t = 5;
        dup.push(i1_dst);
        let v = check_predicates(&trace(dup));
        assert_eq!((v[0].predicate, v[0].index), (Predicate::StateContinuity, 5));
    }

    #[test]
    fn input_after_export_is_flagged_at_import() {
        let boot = b"g".to_vec();
        let export = ev(1, Detail::Export { enclave: "dev0/e1".into(), digest: hex::encode(hash(&[&boot])) });
        let (late, _) = input(2, "dev0/e1", 0, &boot, b"late");
        let import = ev(3, Detail::Import { enclave: "dev1/e1".into(), digest: hex::encode(hash(&[&boot])) });
        let tr = trace(vec![ev(0, Detail::Boot { enclave: "dev0/e1".into(), state: hex::encode(&boot) }), export, late, import]);
        let v = check_predicates(&tr);
        assert_eq!((v[0].predicate, v[0].index), (Predicate::StateContinuity, 3));
    }
}
