// SPDX-License-Identifier: Apache-2.0

//! Deterministic model of a security monitor providing trusted time, state
//! continuity, and enclave update/migration, with a fault-injecting harness.

pub mod channel;
pub mod clock;
pub mod codec;
pub mod crypto;
pub mod enclave;
pub mod model;
pub mod monitor;
pub mod orchestrator;
pub mod persistence;
pub mod predicates;
pub mod scenario;
pub mod sweep;
pub mod trace;
pub mod wire;
pub mod world;
