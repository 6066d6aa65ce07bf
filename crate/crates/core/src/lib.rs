//! Deterministic simulator and liveness checkers for the HotStuff protocol
//! family (Basic, 2-Phase, early Sync) under Twins-style fault scenarios.
//!
//! The crate is `no_std` + `alloc`: everything here is pure, allocation-based
//! and deterministic. IO, file formats and parallel campaign execution live in
//! the companion `hotcheck` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod chain;
pub mod monitor;
pub mod replica;
pub mod scenario;
pub mod sim;

pub use chain::{
    Block, BlockDigest, BlockStore, ChainError, Message, MessageKind, Phase, ProcessId,
    ProtocolConfig, ProtocolKind, QuorumCertificate, Recipient, TwinTag, Vote,
};
pub use monitor::{
    CheckerKind, PartialProcessState, PartialSystemState, StateTransitionGraph, TemperatureState,
    Verdict,
};
pub use scenario::{DelayRule, GeneratorConfig, Scenario};
pub use sim::{Execution, ExecutionResult, RoundBoundary, SimTime};
