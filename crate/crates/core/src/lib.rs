//! Contract-aware secure compilation workbench.
//!
//! A toy ISA is executed under three kinds of semantics: the sequential
//! architectural semantics ([`isa`]), leakage contracts ([`contracts`]) and
//! microarchitectural hardware models ([`hardware`]). The [`compiler`] inserts
//! speculation barriers parametrically in a target contract, and the
//! [`checker`] tests hardware/contract satisfaction, compiler security and
//! their end-to-end composition relationally over pairs of data segments.

pub mod isa;
pub mod contracts;
pub mod hardware;
pub mod compiler;
pub mod checker;
pub mod config;
pub mod corpus;
