// SPDX-License-Identifier: Apache-2.0

//! Enclave application model: a digest-chain workload plus the enclave side
//! of state export, import and sealing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{aead_open, aead_seal, hash, KeyMaterial, Mac};
use crate::model::{EnclaveId, SealedBlob};
use crate::monitor::{SecurityMonitor, SmError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnclaveError {
    #[error("enclave halted during migration")]
    HaltedDuringMigration,
    #[error("state already imported")]
    AlreadyImported,
    #[error("authentication failed")]
    AuthFailure,
    #[error("sealed blob is stale")]
    RollbackDetected,
    #[error(transparent)]
    Monitor(#[from] SmError),
}

impl EnclaveError {
    pub fn code(&self) -> &'static str {
        match self {
            EnclaveError::HaltedDuringMigration => "HaltedDuringMigration",
            EnclaveError::AlreadyImported => "AlreadyImported",
            EnclaveError::AuthFailure => "AuthFailure",
            EnclaveError::RollbackDetected => "RollbackDetected",
            EnclaveError::Monitor(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnclaveMode {
    Normal,
    ExportedHalted,
    ImportedWaiting,
}

/// `H(state ∥ len(input) ∥ input)`.
pub fn chain_step(state: &[u8], input: &[u8]) -> Vec<u8> {
    hash(&[state, &(input.len() as u64).to_be_bytes(), input]).to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEnclave {
    pub eid: EnclaveId,
    pub state: Vec<u8>,
    pub input_log: Vec<Vec<u8>>,
    pub mode: EnclaveMode,
    imported: bool,
}

impl SimEnclave {
    pub fn new(eid: EnclaveId, state: Vec<u8>) -> Self {
        Self { eid, state, input_log: Vec::new(), mode: EnclaveMode::Normal, imported: false }
    }

    pub fn process_input(&mut self, input: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        if self.mode != EnclaveMode::Normal {
            return Err(EnclaveError::HaltedDuringMigration);
        }
        self.state = chain_step(&self.state, input);
        self.input_log.push(input.to_vec());
        Ok(self.state.clone())
    }

    pub fn export_state(&mut self, k: &KeyMaterial, aad: &[u8]) -> Result<(Vec<u8>, Mac), EnclaveError> {
        if self.mode != EnclaveMode::Normal {
            return Err(EnclaveError::HaltedDuringMigration);
        }
        let out = aead_seal(k, &self.state, aad);
        self.mode = EnclaveMode::ExportedHalted;
        Ok(out)
    }

    /// On success the enclave holds the imported state and waits for the
    /// monitor's go-ahead. On failure nothing changes.
    pub fn import_state(&mut self, c: &[u8], mac: &Mac, k: &KeyMaterial, aad: &[u8]) -> Result<(), EnclaveError> {
        if self.imported {
            return Err(EnclaveError::AlreadyImported);
        }
        let plain = aead_open(k, c, mac, aad).map_err(|_| EnclaveError::AuthFailure)?;
        self.state = plain;
        self.imported = true;
        self.mode = EnclaveMode::ImportedWaiting;
        Ok(())
    }

    /// Final success signal from the monitor, or resumption after an abort.
    pub fn release(&mut self) {
        self.mode = EnclaveMode::Normal;
    }

    pub fn seal_state(&self, sm: &mut SecurityMonitor, ctr_id: u64) -> Result<SealedBlob, EnclaveError> {
        let key = sm.sealing_key(self.eid)?;
        let value = sm.inc_mc(self.eid, ctr_id)?;
        let mut plain = Vec::with_capacity(16 + self.state.len());
        plain.extend_from_slice(&ctr_id.to_be_bytes());
        plain.extend_from_slice(&value.to_be_bytes());
        plain.extend_from_slice(&self.state);
        let (ciphertext, tag) = aead_seal(&key, &plain, b"seal");
        Ok(SealedBlob { ciphertext, tag })
    }

    pub fn unseal_state(&self, sm: &SecurityMonitor, blob: &SealedBlob) -> Result<Vec<u8>, EnclaveError> {
        let key = sm.sealing_key(self.eid)?;
        let plain = aead_open(&key, &blob.ciphertext, &blob.tag, b"seal").map_err(|_| EnclaveError::AuthFailure)?;
        if plain.len() < 16 {
            return Err(EnclaveError::AuthFailure);
        }
        let ctr_id = u64::from_be_bytes(plain[..8].try_into().expect("8 bytes"));
        let embedded = u64::from_be_bytes(plain[8..16].try_into().expect("8 bytes"));
        if embedded != sm.get_mc_value(self.eid, ctr_id)? {
            return Err(EnclaveError::RollbackDetected);
        }
        Ok(plain[16..].to_vec())
    }
}
