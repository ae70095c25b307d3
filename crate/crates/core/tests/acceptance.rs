// SPDX-License-Identifier: Apache-2.0

//! Acceptance checks. Runs without the libtest harness so that each
//! criterion prints exactly one PASS or FAIL line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use keyfort::channel::{Envelope, FaultAction, MessageFault, MsgKind};
use keyfort::clock::ContextDirection;
use keyfort::crypto::{hash, measure, KeyMaterial};
use keyfort::enclave::{chain_step, SimEnclave};
use keyfort::model::{EnclaveId, Phase, SealedBlob, SoftwareId, Version};
use keyfort::monitor::{CommitCaller, SmError, SwitchOrigin};
use keyfort::orchestrator::{OpKind, OutcomeKind};
use keyfort::predicates::{check_predicates, Predicate};
use keyfort::scenario::{run_scenario, EnclaveSpec, OperationDef, Scenario};
use keyfort::sweep::{sweep_faults, SweepReport, SweepSpec};
use keyfort::trace::Detail;
use keyfort::wire::{Payload, StateMigrationRequest};
use keyfort::world::{OperationSpec, World, WorldConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    Scenario::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn sid(s: &str) -> SoftwareId {
    SoftwareId::new(s).unwrap()
}

fn random_inputs(rng: &mut ChaCha8Rng, count: usize) -> Vec<Vec<u8>> {
    (0..count)
        .map(|_| {
            let len = rng.gen_range(1..=48);
            (0..len).map(|_| rng.gen()).collect()
        })
        .collect()
}

// ---- 1: happy-path equivalence ---------------------------------------------

const MAX_STATE: usize = 64 * 1024;

/// Runs one randomized update or migration and returns its trace.
fn happy_run(seed: u64, op: OpKind) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = match seed {
        0 => 0,
        1 => MAX_STATE,
        _ => rng.gen_range(0..=MAX_STATE),
    };
    let state: Vec<u8> = (0..size).map(|_| rng.gen()).collect();
    let n_before = rng.gen_range(0..5);
    let before = random_inputs(&mut rng, n_before);
    let n_during = rng.gen_range(0..6);
    let during = random_inputs(&mut rng, n_during);
    let (devices, dst_dev, v, binary): (usize, usize, u64, &[u8]) = match op {
        OpKind::Update => (1, 0, 2, b"app v2"),
        OpKind::Migration => (2, 1, 1, b"app v1"),
    };
    let mut w = World::new(&WorldConfig::new(seed, devices));
    let eid_s = w.install(0, sid("app"), Version(1), None, b"app v1", state, &before).map_err(|e| e.to_string())?;
    w.begin(OperationSpec {
        op,
        src_dev: 0,
        eid_s,
        dst_dev,
        id: sid("app"),
        v: Version(v),
        n: None,
        binary: binary.to_vec(),
        inputs: during,
    })
    .map_err(|e| e.to_string())?;
    w.run_until_quiescent().map_err(|e| e.to_string())?;
    let out = w.outcome().map_err(|e| e.to_string())?;
    let tag = format!("seed {seed} {op:?} ({size} B)");
    ensure(out.kind == OutcomeKind::Committed, || format!("{tag}: outcome {:?}", out.kind))?;
    let source_gone = w.devices[0].sm.enclave(eid_s).is_none_or(|r| r.phase == Phase::Destroyed);
    ensure(source_gone, || format!("{tag}: source enclave not destroyed"))?;

    // D_D at import must equal D_S byte for byte: replay E_D's own inputs on
    // top of the exported source state and compare with E_D's final state.
    let (dd, eid_d) = w.dest().ok_or_else(|| format!("{tag}: no destination"))?;
    let d_s = w.devices[0].enclaves[&eid_s].state.clone();
    let dest = w.enclave_name(dd, eid_d);
    let mut replay = d_s.clone();
    for (_, d) in out.trace.details() {
        match d {
            Detail::Import { enclave, digest } if *enclave == dest => {
                ensure(*digest == hex::encode(hash(&[&d_s])), || format!("{tag}: imported digest differs"))?;
            }
            Detail::Input { enclave, input, .. } if *enclave == dest => {
                replay = chain_step(&replay, &hex::decode(input).unwrap());
            }
            _ => {}
        }
    }
    ensure(replay == w.devices[dd].enclaves[&eid_d].state, || format!("{tag}: destination state differs"))?;
    let v = check_predicates(&out.trace);
    ensure(v.is_empty(), || format!("{tag}: {v:?}"))?;
    Ok(out.trace.to_jsonl())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    for seed in 0..50 {
        for op in [OpKind::Update, OpKind::Migration] {
            happy_run(seed, op)?;
            runs += 1;
        }
    }
    let el = start.elapsed();
    ensure(el < Duration::from_secs(10), || format!("took {el:?}"))?;
    Ok(format!("{runs} runs committed byte-exact in {:.2} s", el.as_secs_f64()))
}

// ---- 2 and 3: atomicity sweep, state continuity ------------------------------

fn sweeps() -> &'static (Vec<SweepReport>, Duration) {
    static CELL: OnceLock<(Vec<SweepReport>, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let reports = ["update_happy.scn", "migration_happy.scn"]
            .into_iter()
            .map(|n| sweep_faults(&scenario(n), SweepSpec::Both, None).unwrap())
            .collect();
        (reports, start.elapsed())
    })
}

/// Drops the first `k` transmissions of `kind` in a migration and returns
/// the outcome and whether the source raised an alarm.
fn ack_loss(kind: MsgKind, k: usize) -> Result<(String, bool), String> {
    let mut s = scenario("migration_happy.scn");
    for occurrence in 0..k {
        s.faults.messages.push(MessageFault { kind, occurrence, action: FaultAction::Drop });
    }
    let r = run_scenario(&s).map_err(|e| e.to_string())?;
    ensure(r.violations.is_empty(), || format!("{kind} x{k}: {:?}", r.violations))?;
    let alarm = r.trace.events.iter().any(|e| e.kind == "Alarm" && e.dst == "P");
    Ok((r.outcome, alarm))
}

fn criterion_2() -> Outcome {
    let (reports, el) = sweeps();
    let total: usize = reports.iter().map(|r| r.total_cases).sum();
    for r in reports {
        if let Some(c) = r.cases.iter().find(|c| !c.violations.is_empty()) {
            return Err(format!("{} case {} [{}]: {:?}", r.operation, c.index, c.label, c.violations));
        }
        ensure(!r.outcomes.contains_key("AlarmNeitherActive"), || format!("{} sweep raised an alarm", r.operation))?;
        ensure(r.total_cases == r.message_cases + r.crash_cases + r.commit_crash_cases, || "case arithmetic".into())?;
    }
    ensure(total >= 200, || format!("only {total} cases"))?;
    ensure(*el < Duration::from_secs(60), || format!("sweeps took {el:?}"))?;
    let limit = 3;
    // Losing every 4o leaves neither enclave running. Losing every 4q happens
    // after E_D was released, so the alarm fires with E_D still committed.
    for (kind, exhausted) in [(MsgKind::Ok4o, "AlarmNeitherActive"), (MsgKind::Ok4q, "Committed")] {
        for k in 1..=limit + 1 {
            let (outcome, alarm) = ack_loss(kind, k)?;
            let want = if k > limit { exhausted } else { "Committed" };
            ensure(outcome == want && alarm == (k > limit), || {
                format!("{kind} lost {k} times: {outcome} (alarm {alarm}), expected {want}")
            })?;
        }
    }
    Ok(format!(
        "{total} sweep cases clean in {:.2} s; alarm only after {} lost 4o/4q",
        el.as_secs_f64(),
        limit + 1
    ))
}

fn criterion_3() -> Outcome {
    let (reports, _) = sweeps();
    let cases: usize = reports.iter().map(|r| r.total_cases).sum();
    for r in reports {
        for c in &r.cases {
            let sc = c.violations.iter().find(|v| v.starts_with(&format!("{:?}", Predicate::StateContinuity)));
            ensure(sc.is_none(), || format!("{} case {}: {sc:?}", r.operation, c.label))?;
        }
    }
    let base = scenario("state_replay_attack.scn");
    let mut decrypted = 0;
    for seed in 0..100 {
        let mut s = base.clone();
        s.seed = seed;
        let r = run_scenario(&s).map_err(|e| e.to_string())?;
        let replay_at = r
            .trace
            .events
            .iter()
            .position(|e| matches!(&e.detail, Some(Detail::Note { text }) if text.starts_with("host: replaying")))
            .ok_or_else(|| format!("seed {seed}: replay never attempted"))?;
        if r.trace.events[replay_at..].iter().any(|e| e.kind == "import") {
            decrypted += 1;
        }
        ensure(r.violations.is_empty(), || format!("seed {seed}: {:?}", r.violations))?;
    }
    ensure(decrypted == 0, || format!("{decrypted}/100 stale blobs decrypted"))?;
    Ok(format!("continuity held in {cases} sweep cases; 0/100 stale blobs decrypted under fresh k"))
}

// ---- 4: software rollback --------------------------------------------------

fn committed_update(seed: u64) -> Result<World, String> {
    let mut w = World::new(&WorldConfig::new(seed, 1));
    let eid = w.install(0, sid("wallet"), Version(1), None, b"wallet v1", b"k".to_vec(), &[]).map_err(|e| e.to_string())?;
    w.begin(OperationSpec {
        op: OpKind::Update,
        src_dev: 0,
        eid_s: eid,
        dst_dev: 0,
        id: sid("wallet"),
        v: Version(2),
        n: None,
        binary: b"wallet v2".to_vec(),
        inputs: Vec::new(),
    })
    .map_err(|e| e.to_string())?;
    w.run_until_quiescent().map_err(|e| e.to_string())?;
    let o = w.outcome().map_err(|e| e.to_string())?;
    ensure(o.kind == OutcomeKind::Committed, || format!("update ended {:?}", o.kind))?;
    Ok(w)
}

fn criterion_4() -> Outcome {
    let mut w = committed_update(4)?;
    let mut rejected = 0;
    for attempt in 0..100 {
        if attempt % 2 == 1 {
            w.crash_device(0, "test");
        }
        let r = w.sm_call(0, |w, now| w.devices[0].sm.init(sid("wallet"), Version(1), None, b"wallet v1", now));
        match r {
            Err(SmError::VersionMismatch { .. }) => rejected += 1,
            other => return Err(format!("attempt {attempt}: {other:?}")),
        }
    }
    let v = check_predicates(&w.trace);
    ensure(v.is_empty(), || format!("{v:?}"))?;

    let bin = env!("CARGO_BIN_EXE_keyfort");
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let status = |name: &str| Command::new(bin).arg("run").arg(dir.join(name)).output().map(|o| o.status.code());
    let safe = status("rollback_attack.scn").map_err(|e| e.to_string())?;
    let unsafe_ = status("rollback_vulnerable.scn").map_err(|e| e.to_string())?;
    ensure(safe == Some(0), || format!("rollback_attack.scn exited {safe:?}"))?;
    ensure(unsafe_ == Some(5), || format!("rollback_vulnerable.scn exited {unsafe_:?}"))?;
    let sweep = sweep_faults(&scenario("update_vulnerable.scn"), SweepSpec::Crashes, None).map_err(|e| e.to_string())?;
    ensure(sweep.negative_mode && sweep.violation_count > 0, || "vulnerable sweep found nothing".into())?;
    Ok(format!(
        "{rejected}/100 re-inits rejected with VersionMismatch (50 after crash+recover); vulnerable store: exit 5, \
         {} sweep cases flagged",
        sweep.violation_count
    ))
}

// ---- 5: cloning bound ------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut report = Vec::new();
    for (n, bound) in [(Some(1), 1), (Some(2), 2), (Some(5), 5), (None, 1)] {
        let mut w = World::new(&WorldConfig::new(5, 1));
        for i in 0..bound {
            w.devices[0]
                .sm
                .init(sid("signer"), Version(1), n, b"signer", 0)
                .map_err(|e| format!("N={n:?}: init {} failed: {e}", i + 1))?;
        }
        match w.devices[0].sm.init(sid("signer"), Version(1), n, b"signer", 0) {
            Err(SmError::CloneLimitExceeded { .. }) => {}
            other => return Err(format!("N={n:?}: init {} gave {other:?}", bound + 1)),
        }
        report.push(format!("{}:{bound}", n.map_or("default".to_string(), |n| n.to_string())));
    }
    Ok(format!("exactly N inits succeed for N in {}", report.join(", ")))
}

// ---- 6: monotonic counters -------------------------------------------------

#[derive(Debug, Clone)]
enum CtrOp {
    Alloc(usize),
    Inc(usize, usize),
    Get(usize, usize),
    Free(usize, usize),
    Seal(usize, usize),
    Unseal(usize),
    Crash,
}

fn ctr_op() -> impl Strategy<Value = CtrOp> {
    prop_oneof![
        2 => (0..2usize).prop_map(CtrOp::Alloc),
        4 => (0..2usize, 0..8usize).prop_map(|(e, k)| CtrOp::Inc(e, k)),
        2 => (0..2usize, 0..8usize).prop_map(|(e, k)| CtrOp::Get(e, k)),
        1 => (0..2usize, 0..8usize).prop_map(|(e, k)| CtrOp::Free(e, k)),
        2 => (0..2usize, 0..8usize).prop_map(|(e, k)| CtrOp::Seal(e, k)),
        2 => (0..8usize).prop_map(CtrOp::Unseal),
        1 => Just(CtrOp::Crash),
    ]
}

struct Counter {
    id: u64,
    owner: usize,
    value: u64,
}

fn expect_code<T: std::fmt::Debug>(r: Result<T, String>, code: &str, what: &str) -> Result<(), TestCaseError> {
    match r {
        Err(c) if c == code => Ok(()),
        other => Err(TestCaseError::fail(format!("{what}: expected {code}, got {other:?}"))),
    }
}

fn counter_sequence(ops: Vec<CtrOp>) -> Result<(), TestCaseError> {
    let mut w = World::new(&WorldConfig::new(6, 1));
    let eids: Vec<EnclaveId> = ["alpha", "beta"]
        .iter()
        .map(|id| w.install(0, sid(id), Version(1), None, id.as_bytes(), id.as_bytes().to_vec(), &[]).unwrap())
        .collect();
    let mut ctrs: Vec<Counter> = Vec::new();
    let mut sealed: Vec<(u64, u64, usize, SealedBlob)> = Vec::new();
    let code = |e: SmError| e.code().to_string();
    for op in ops {
        let d = &mut w.devices[0];
        match op {
            CtrOp::Alloc(e) => {
                let id = d.sm.allocate_mc(eids[e]).map_err(|e| TestCaseError::fail(format!("alloc: {e}")))?;
                ctrs.push(Counter { id, owner: e, value: 0 });
            }
            CtrOp::Inc(e, k) | CtrOp::Get(e, k) | CtrOp::Free(e, k) if !ctrs.is_empty() => {
                let i = k % ctrs.len();
                let c = &mut ctrs[i];
                let r = match op {
                    CtrOp::Inc(..) => d.sm.inc_mc(eids[e], c.id).map_err(code),
                    CtrOp::Get(..) => d.sm.get_mc_value(eids[e], c.id).map_err(code),
                    _ => d.sm.free_mc(eids[e], c.id).map(|()| c.value).map_err(code),
                };
                if e != c.owner {
                    expect_code(r, "OwnerMismatch", "cross-owner access")?;
                    continue;
                }
                let got = r.map_err(|e| TestCaseError::fail(format!("{op:?}: {e}")))?;
                match op {
                    CtrOp::Inc(..) => {
                        prop_assert!(got > c.value, "inc went from {} to {got}", c.value);
                        c.value = got;
                    }
                    CtrOp::Get(..) => prop_assert_eq!(got, c.value),
                    _ => {
                        ctrs.remove(i);
                    }
                }
            }
            CtrOp::Seal(e, k) if !ctrs.is_empty() => {
                let i = k % ctrs.len();
                let c = &mut ctrs[i];
                let r = d.enclaves[&eids[e]].seal_state(&mut d.sm, c.id).map_err(|e| e.code().to_string());
                if e != c.owner {
                    expect_code(r, "OwnerMismatch", "cross-owner seal")?;
                    continue;
                }
                let blob = r.map_err(TestCaseError::fail)?;
                c.value += 1;
                sealed.push((c.id, c.value, e, blob));
            }
            CtrOp::Unseal(j) if !sealed.is_empty() => {
                let (ctr, value, e, blob) = &sealed[j % sealed.len()];
                let Some(c) = ctrs.iter().find(|c| c.id == *ctr) else { continue };
                let r = d.enclaves[&eids[*e]].unseal_state(&d.sm, blob).map_err(|e| e.code().to_string());
                if c.value > *value {
                    expect_code(r, "RollbackDetected", "stale blob")?;
                } else {
                    let state = r.map_err(|e| TestCaseError::fail(format!("fresh blob: {e}")))?;
                    prop_assert_eq!(&state, &d.enclaves[&eids[*e]].state);
                }
            }
            CtrOp::Crash => {
                w.crash_device(0, "test");
                for c in &ctrs {
                    let v = w.devices[0].sm.get_mc_value(eids[c.owner], c.id);
                    prop_assert_eq!(v, Ok(c.value), "counter {} after recovery", c.id);
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn criterion_6() -> Outcome {
    let config = Config { cases: 1000, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner
        .run(&proptest::collection::vec(ctr_op(), 1..60), counter_sequence)
        .map_err(|e| e.to_string())?;
    Ok("1000 random op sequences: monotone values, OwnerMismatch across IDs, stale blobs RollbackDetected".into())
}

// ---- 7: trusted time -------------------------------------------------------

fn criterion_7() -> Outcome {
    let mut intervals = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = World::new(&WorldConfig::new(seed, 1));
        let eid = w.install(0, sid("timer"), Version(1), None, b"timer v1", Vec::new(), &[]).map_err(|e| e.to_string())?;
        let start = w.devices[0].sm.enclave(eid).unwrap().t_e;
        let mut expected = 0u64;
        let switches = rng.gen_range(1..=30);
        let mut at_final_exit = None;
        for i in 0..switches {
            w.clock.advance(rng.gen_range(0..1_000));
            let enter = w.clock.rdtime();
            w.sm_call(0, |w, now| w.devices[0].sm.context_switch(eid, ContextDirection::HostToEnclave, now))
                .map_err(|e| format!("seed {seed}: enter: {e}"))?;
            w.clock.advance(rng.gen_range(0..1_000));
            expected += w.clock.rdtime() - enter;
            if i + 1 == switches {
                at_final_exit = Some(w.devices[0].sm.enclave_local_time(eid, w.clock.rdtime()).map_err(|e| e.to_string())?);
            }
            w.sm_call(0, |w, now| w.devices[0].sm.context_switch(eid, ContextDirection::EnclaveToHost, now))
                .map_err(|e| format!("seed {seed}: exit: {e}"))?;
            intervals += 1;
        }
        ensure(at_final_exit == Some(start + expected), || {
            format!("seed {seed}: local time {at_final_exit:?}, expected {}", start + expected)
        })?;

        // An enclave created for an update cannot be entered before the switch.
        let party = w.party_pk();
        w.devices[0].sm.schedule_update(party, sid("timer"), Version(2)).map_err(|e| e.to_string())?;
        let now = w.clock.rdtime();
        let fresh = w.devices[0].sm.init(sid("timer"), Version(2), None, b"timer v2", now).map_err(|e| e.to_string())?;
        let r = w.devices[0].sm.context_switch(fresh, ContextDirection::HostToEnclave, now);
        ensure(r == Err(SmError::ResumeDenied), || format!("seed {seed}: entry to resume_ok=false gave {r:?}"))?;

        let v = check_predicates(&w.trace);
        ensure(v.is_empty(), || format!("seed {seed}: {v:?}"))?;
    }
    Ok(format!("200 schedules ({intervals} intervals) exact; entry denied when resume_ok is false"))
}

// ---- 8: authenticity and integrity -----------------------------------------

/// Flips every bit in the first `len` bytes of the first `kind` envelope's
/// body and checks each flip is refused without touching monitor state.
fn flip_sweep(base: &Scenario, kind: MsgKind, len: usize) -> Result<usize, String> {
    let mut flips = 0;
    for offset in 0..len {
        for bit in 0..8 {
            let mut s = base.clone();
            s.faults.messages.push(MessageFault {
                kind,
                occurrence: 0,
                action: FaultAction::CorruptByte { offset, mask: 1 << bit },
            });
            let r = run_scenario(&s).map_err(|e| e.to_string())?;
            let seq = r
                .trace
                .details()
                .find_map(|(_, d)| match d {
                    Detail::Fault { msg_seq, .. } => Some(*msg_seq),
                    _ => None,
                })
                .ok_or("fault not applied")?;
            let ev = r
                .trace
                .events
                .iter()
                .find(|e| matches!(&e.detail, Some(Detail::Delivery { msg_seq, .. }) if *msg_seq == seq))
                .ok_or("corrupted envelope never delivered")?;
            let Some(Detail::Delivery { digest_before, .. }) = &ev.detail else { unreachable!() };
            let tag = format!("{kind} byte {offset} bit {bit}");
            ensure(ev.verdict != "ok", || format!("{tag}: accepted"))?;
            ensure(*digest_before == ev.sm_state_digest, || format!("{tag}: monitor state changed"))?;
            ensure(r.violations.is_empty(), || format!("{tag}: {:?}", r.violations))?;
            flips += 1;
        }
    }
    Ok(flips)
}

fn criterion_8() -> Outcome {
    let migration = scenario("migration_happy.scn");
    let env_flips = flip_sweep(&migration, MsgKind::StateMigration, 64)?;

    // 64-byte state: flip every bit of the ImportState payload carrying (C, M).
    let mut blob_scn = migration.clone();
    blob_scn.enclaves = vec![EnclaveSpec {
        device: 0,
        id: "ledger".into(),
        v: 1,
        n: None,
        binary: "ledger v1".into(),
        state: None,
        state_size: Some(64),
        inputs: Vec::new(),
    }];
    if let OperationDef::Migration { inputs, .. } = &mut blob_scn.operation {
        *inputs = 0;
    }
    let mut probe = SimEnclave::new(EnclaveId(1), vec![0; 64]);
    let (c, mac) = probe.export_state(&KeyMaterial::from_bytes([3; 32]), b"").map_err(|e| e.to_string())?;
    let payload_len = Payload::ImportState { eid: EnclaveId(1), c, mac }.encode().len();
    let blob_flips = flip_sweep(&blob_scn, MsgKind::ImportState, payload_len)?;

    // Unauthorized callers at the five schedule/migration entry points.
    let mut w = World::new(&WorldConfig::new(8, 2));
    let eid = w.install(0, sid("ledger"), Version(1), None, b"ledger v1", b"s".to_vec(), &[]).map_err(|e| e.to_string())?;
    let rogue = KeyMaterial::from_bytes([0xEE; 32]).public_id();
    let req = StateMigrationRequest {
        pk_s: w.devices[0].sm.device_pk(),
        pk_d: w.devices[1].sm.device_pk(),
        eid_s: eid,
        eid_d: EnclaveId(1),
        m_s: measure(b"ledger v1").unwrap(),
        m_d: measure(b"ledger v1").unwrap(),
        session: 77,
    };
    let sm = &mut w.devices[0].sm;
    let before = sm.digest();
    let results = [
        ("schedule_migration", sm.schedule_migration(rogue, sid("ledger"))),
        ("schedule_update", sm.schedule_update(rogue, sid("ledger"), Version(2))),
        ("state_migration", sm.state_migration(rogue, &req, 0)),
        ("execution_switch", sm.execution_switch(SwitchOrigin::Party(rogue), eid, EnclaveId(1))),
        ("migration_commit", sm.migration_commit(CommitCaller::RemoteSm { pk: rogue, session: 77 }, 0)),
    ];
    for (name, r) in &results {
        ensure(r.is_err(), || format!("{name} accepted an unauthorized caller"))?;
    }
    ensure(sm.digest() == before, || "unauthorized calls changed monitor state".into())?;

    // The same requests over the wire, validly tagged by an unknown key.
    let dst = w.devices[0].sm.device_pk();
    let key = w.keys().pair_key(&rogue, &dst);
    let wire = [
        Payload::ScheduleMigration { id: sid("ledger") },
        Payload::ScheduleUpdate { id: sid("ledger"), v: Version(2) },
        Payload::StateMigration(req),
        Payload::ExecSwitch { eid_s: eid, eid_d: EnclaveId(1), session: 77 },
        Payload::CommitForward { session: 77, eid_s: eid, eid_d: EnclaveId(1) },
    ];
    for p in wire {
        let env = Envelope::new(&key, rogue, dst, p.kind(), None, None, p.encode());
        let r = w.devices[0].sm.handle_envelope(&env, 0);
        ensure(r.is_err(), || format!("{} from an unknown key accepted", p.kind()))?;
    }
    ensure(w.devices[0].sm.digest() == before, || "unauthorized envelopes changed monitor state".into())?;
    let codes: Vec<&str> = results.iter().map(|(_, r)| r.as_ref().unwrap_err().code()).collect();
    Ok(format!(
        "{env_flips} envelope and {blob_flips} blob bit flips rejected, digests unchanged; unauthorized calls: {}",
        codes.join("/")
    ))
}

// ---- 9: determinism --------------------------------------------------------

fn criterion_9() -> Outcome {
    for seed in [0, 7, 31] {
        for op in [OpKind::Update, OpKind::Migration] {
            ensure(happy_run(seed, op)? == happy_run(seed, op)?, || format!("seed {seed} {op:?}: traces differ"))?;
        }
    }
    for name in ["update_happy.scn", "migration_lost_4o.scn", "state_replay_attack.scn", "time_accounting.scn"] {
        let s = scenario(name);
        let (a, b) = (run_scenario(&s).unwrap(), run_scenario(&s).unwrap());
        ensure(a.trace.to_jsonl() == b.trace.to_jsonl() && a.outcome == b.outcome, || format!("{name} differs"))?;
    }
    let (reports, _) = sweeps();
    for r in reports {
        let name = format!("{}_happy.scn", r.operation);
        let again = sweep_faults(&scenario(&name), SweepSpec::Both, Some(2)).map_err(|e| e.to_string())?;
        ensure(again.digest == r.digest && again.cases == r.cases, || format!("{name} sweep differs"))?;
    }
    Ok("repeated runs and sweeps are byte-identical".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("happy-path equivalence", criterion_1),
        ("atomicity sweep", criterion_2),
        ("state continuity", criterion_3),
        ("software rollback", criterion_4),
        ("cloning bound", criterion_5),
        ("monotonic counters", criterion_6),
        ("trusted time", criterion_7),
        ("authenticity and integrity", criterion_8),
        ("determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
