// SPDX-License-Identifier: Apache-2.0

//! Simulated replay-protected non-volatile memory.
//!
//! The store keeps a whole-map snapshot MAC'd under the monitor's storage
//! key. Writes go to the inactive of two slots and then flip the active
//! pointer, so a crash at any write step leaves exactly the old or the new
//! snapshot visible. A hardware write counter, which an adversary cannot roll
//! back, is bumped together with the pointer flip; in
//! [`StoreMode::RollbackResistant`] every load checks the snapshot's counter
//! against it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{mac_sign, mac_verify, KeyMaterial, MAC_LEN};
use crate::model::MigrationRecord;

pub const KEY_VERSIONS: &str = "versions";
pub const KEY_COUNTERS: &str = "counters";
pub const KEY_MIGRATIONS: &str = "migrations";
pub const KEY_SCHEDULED: &str = "scheduled";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("injected I/O fault")]
    IoFault,
    #[error("crashed during write at step {0:?}")]
    Crashed(WriteStep),
    #[error("stale snapshot presented (counter {found}, expected {expected})")]
    RollbackDetected { found: u64, expected: u64 },
    #[error("snapshot integrity check failed")]
    Corrupt,
    #[error("decode: {0}")]
    Codec(#[from] CodecError),
    #[error("file backing: {0}")]
    Backing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreMode {
    #[default]
    RollbackResistant,
    RollbackVulnerable,
}

/// Points inside one write at which a crash can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WriteStep {
    BeforeSlotWrite,
    AfterSlotWrite,
    AfterFlip,
}

impl WriteStep {
    pub const ALL: [WriteStep; 3] = [WriteStep::BeforeSlotWrite, WriteStep::AfterSlotWrite, WriteStep::AfterFlip];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteFault {
    Io,
    Crash(WriteStep),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Snapshot {
    write_counter: u64,
    entries: BTreeMap<String, Vec<u8>>,
    mac: [u8; MAC_LEN],
}

fn snapshot_body(write_counter: u64, entries: &BTreeMap<String, Vec<u8>>) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.u64(write_counter).u32(entries.len() as u32);
    for (k, v) in entries {
        enc.bytes(k.as_bytes()).bytes(v);
    }
    enc.finish()
}

#[derive(Debug)]
pub struct SecureStore {
    mode: StoreMode,
    key: KeyMaterial,
    slots: [Option<Snapshot>; 2],
    active: usize,
    /// Hardware replay counter; survives crashes and cannot be rewound.
    hw_counter: u64,
    history: Vec<Snapshot>,
    presented: Option<Snapshot>,
    armed: Option<WriteFault>,
    dir: Option<PathBuf>,
}

impl SecureStore {
    pub fn new(mode: StoreMode, key: KeyMaterial) -> Self {
        let empty = BTreeMap::new();
        let mac = mac_sign(&key, &snapshot_body(0, &empty)).0;
        let genesis = Snapshot { write_counter: 0, entries: empty, mac };
        Self {
            mode,
            key,
            slots: [Some(genesis.clone()), None],
            active: 0,
            hw_counter: 0,
            history: vec![genesis],
            presented: None,
            armed: None,
            dir: None,
        }
    }

    /// Mirrors every committed snapshot into `dir` as one file per key:
    /// `write_counter (u64 BE) ∥ MAC ∥ value`.
    pub fn with_backing_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| StoreError::Backing(e.to_string()))?;
        self.dir = Some(dir);
        Ok(self)
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn write_counter(&self) -> u64 {
        self.hw_counter
    }

    pub fn arm(&mut self, fault: WriteFault) {
        self.armed = Some(fault);
    }

    pub fn disarm(&mut self) {
        self.armed = None;
    }

    /// Adversary: make subsequent loads observe the snapshot `back` commits
    /// before the latest one.
    pub fn present_stale(&mut self, back: usize) {
        let idx = self.history.len().saturating_sub(1 + back);
        self.presented = Some(self.history[idx].clone());
    }

    pub fn withdraw_stale(&mut self) {
        self.presented = None;
    }

    pub fn stale_presented(&self) -> bool {
        self.presented.is_some()
    }

    fn current(&self) -> Result<&Snapshot, StoreError> {
        let snap = match &self.presented {
            Some(s) => s,
            None => self.slots[self.active].as_ref().ok_or(StoreError::Corrupt)?,
        };
        if !mac_verify(&self.key, &snapshot_body(snap.write_counter, &snap.entries), &snap.mac) {
            return Err(StoreError::Corrupt);
        }
        if self.mode == StoreMode::RollbackResistant && snap.write_counter != self.hw_counter {
            return Err(StoreError::RollbackDetected { found: snap.write_counter, expected: self.hw_counter });
        }
        Ok(snap)
    }

    pub fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        Ok(self.current()?.entries.get(key).cloned())
    }

    pub fn put(&mut self, key: &str, value: Vec<u8>) -> Result<(), StoreError> {
        let fault = self.armed.take();
        if fault == Some(WriteFault::Io) {
            return Err(StoreError::IoFault);
        }
        if fault == Some(WriteFault::Crash(WriteStep::BeforeSlotWrite)) {
            return Err(StoreError::Crashed(WriteStep::BeforeSlotWrite));
        }
        // A vulnerable store writes on top of whatever the adversary showed us.
        let mut entries = self.current()?.entries.clone();
        entries.insert(key.to_string(), value);
        let write_counter = self.hw_counter + 1;
        let mac = mac_sign(&self.key, &snapshot_body(write_counter, &entries)).0;
        let snap = Snapshot { write_counter, entries, mac };

        let shadow = 1 - self.active;
        self.slots[shadow] = Some(snap.clone());
        if fault == Some(WriteFault::Crash(WriteStep::AfterSlotWrite)) {
            return Err(StoreError::Crashed(WriteStep::AfterSlotWrite));
        }
        self.active = shadow;
        self.hw_counter = write_counter;
        self.presented = None;
        self.history.push(snap);
        self.mirror_to_dir()?;
        if fault == Some(WriteFault::Crash(WriteStep::AfterFlip)) {
            return Err(StoreError::Crashed(WriteStep::AfterFlip));
        }
        Ok(())
    }

    pub fn put_list<T: Canonical>(&mut self, key: &str, items: &[T]) -> Result<(), StoreError> {
        let mut enc = Encoder::new();
        enc.seq(items.iter());
        self.put(key, enc.finish())
    }

    pub fn get_list<T: Canonical>(&self, key: &str) -> Result<Vec<T>, StoreError> {
        match self.get(key)? {
            None => Ok(Vec::new()),
            Some(bytes) => {
                let mut dec = Decoder::new(&bytes);
                let items = dec.seq()?;
                dec.finish()?;
                Ok(items)
            }
        }
    }

    fn mirror_to_dir(&self) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let snap = &self.history[self.history.len() - 1];
        for (k, v) in &snap.entries {
            let mut body = Vec::with_capacity(8 + MAC_LEN + v.len());
            body.extend_from_slice(&snap.write_counter.to_be_bytes());
            let mut macced = body.clone();
            macced.extend_from_slice(k.as_bytes());
            macced.extend_from_slice(v);
            body.extend_from_slice(&mac_sign(&self.key, &macced).0);
            body.extend_from_slice(v);
            write_atomic(&dir.join(format!("{k}.bin")), &body).map_err(|e| StoreError::Backing(e.to_string()))?;
        }
        Ok(())
    }

    /// Reads one mirrored file back, verifying its MAC.
    pub fn read_backing_file(&self, key: &str) -> Result<Option<(u64, Vec<u8>)>, StoreError> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = dir.join(format!("{key}.bin"));
        let raw = match fs::read(&path) {
            Ok(r) => r,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(StoreError::Backing(e.to_string())),
        };
        if raw.len() < 8 + MAC_LEN {
            return Err(StoreError::Corrupt);
        }
        let counter = u64::from_be_bytes(raw[..8].try_into().expect("8 bytes"));
        let tag = &raw[8..8 + MAC_LEN];
        let value = raw[8 + MAC_LEN..].to_vec();
        let mut macced = raw[..8].to_vec();
        macced.extend_from_slice(key.as_bytes());
        macced.extend_from_slice(&value);
        if !mac_verify(&self.key, &macced, tag) {
            return Err(StoreError::Corrupt);
        }
        Ok(Some((counter, value)))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("bin.new");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)
}

pub fn persist_migration_metadata(store: &mut SecureStore, recs: &[MigrationRecord]) -> Result<(), StoreError> {
    let stripped: Vec<_> = recs.iter().map(MigrationRecord::without_seed).collect();
    store.put_list(KEY_MIGRATIONS, &stripped)
}

pub fn load_migration_metadata(store: &SecureStore) -> Result<Vec<MigrationRecord>, StoreError> {
    store.get_list(KEY_MIGRATIONS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::PublicKeyId;
    use crate::model::*;

    fn store(mode: StoreMode) -> SecureStore {
        SecureStore::new(mode, KeyMaterial::from_bytes([3; 32]))
    }

    fn record() -> MigrationRecord {
        MigrationRecord {
            id: SoftwareId::new(b"app".to_vec()).unwrap(),
            target_op: TargetOp::MigrationSource,
            eid_s: EnclaveId(1),
            eid_d: EnclaveId(4),
            m_s: Measurement([1; 32]),
            m_d: Measurement([1; 32]),
            pk_s: PublicKeyId([8; 32]),
            pk_d: PublicKeyId([9; 32]),
            party: PublicKeyId([2; 32]),
            seed: Some([5; 32]),
            t_sm: 10_030,
            session: 77,
            stage: MigrationStage::Active,
            resends: 0,
            ack_deadline: None,
        }
    }

    #[test]
    fn put_get_last_writer_wins() {
        let mut s = store(StoreMode::RollbackResistant);
        assert_eq!(s.get("k").unwrap(), None);
        s.put("k", b"one".to_vec()).unwrap();
        assert_eq!(s.get("k").unwrap().unwrap(), b"one");
        s.put("k", b"two".to_vec()).unwrap();
        assert_eq!(s.get("k").unwrap().unwrap(), b"two");
        assert_eq!(s.write_counter(), 2);
    }

    #[test]
    fn crash_at_every_write_step_yields_old_or_new() {
        for step in WriteStep::ALL {
            let mut s = store(StoreMode::RollbackResistant);
            s.put("k", b"old".to_vec()).unwrap();
            s.arm(WriteFault::Crash(step));
            assert_eq!(s.put("k", b"new".to_vec()), Err(StoreError::Crashed(step)));
            let seen = s.get("k").unwrap().unwrap();
            let expected: &[u8] = if step == WriteStep::AfterFlip { b"new" } else { b"old" };
            assert_eq!(seen, expected, "{step:?}");
        }
    }

    #[test]
    fn io_fault_leaves_store_untouched() {
        let mut s = store(StoreMode::RollbackResistant);
        s.arm(WriteFault::Io);
        assert_eq!(s.put("k", vec![1]), Err(StoreError::IoFault));
        assert_eq!(s.get("k").unwrap(), None);
        assert_eq!(s.write_counter(), 0);
    }

    #[test]
    fn stale_snapshot_detected_only_in_resistant_mode() {
        for mode in [StoreMode::RollbackResistant, StoreMode::RollbackVulnerable] {
            let mut s = store(mode);
            s.put("v", vec![1]).unwrap();
            s.put("v", vec![2]).unwrap();
            s.present_stale(1);
            match mode {
                StoreMode::RollbackResistant => {
                    assert_eq!(s.get("v"), Err(StoreError::RollbackDetected { found: 1, expected: 2 }))
                }
                StoreMode::RollbackVulnerable => assert_eq!(s.get("v").unwrap().unwrap(), vec![1]),
            }
        }
    }

    #[test]
    fn migration_metadata_round_trip_and_clear() {
        let mut s = store(StoreMode::RollbackResistant);
        persist_migration_metadata(&mut s, &[record()]).unwrap();
        assert_eq!(load_migration_metadata(&s).unwrap(), vec![record().without_seed()]);
        persist_migration_metadata(&mut s, &[]).unwrap();
        assert!(load_migration_metadata(&s).unwrap().is_empty());
    }

    #[test]
    fn stale_metadata_replay_resurrects_record_when_vulnerable() {
        let mut s = store(StoreMode::RollbackVulnerable);
        persist_migration_metadata(&mut s, &[record()]).unwrap();
        persist_migration_metadata(&mut s, &[]).unwrap();
        s.present_stale(1);
        assert_eq!(load_migration_metadata(&s).unwrap().len(), 1);
    }

    #[test]
    fn file_backing_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(StoreMode::RollbackResistant).with_backing_dir(dir.path().join("dev0")).unwrap();
        persist_migration_metadata(&mut s, &[record()]).unwrap();
        let (ctr, bytes) = s.read_backing_file(KEY_MIGRATIONS).unwrap().unwrap();
        assert_eq!(ctr, 1);
        let raw = std::fs::read(dir.path().join("dev0/migrations.bin")).unwrap();
        assert_eq!(&raw[..8], &1u64.to_be_bytes());
        assert_eq!(raw.len(), 8 + MAC_LEN + bytes.len());
        // Seed material is never written out.
        assert!(!raw.windows(32).any(|w| w == [5u8; 32]));
    }
}
