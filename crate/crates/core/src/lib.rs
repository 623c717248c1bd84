//! Pseudonymized sharing of electronic health records.
//!
//! Identities live in the [`registry`], medical data lives in one or more
//! [`ehr`] stores keyed by a random patient identifier, and the only bridge
//! between them is a per-doctor encryption of that identifier. The
//! [`als`] server brokers every flow without holding any key; the
//! [`terminal`] clients do all the cryptography.

pub mod als;
pub mod clock;
pub mod crypto;
pub mod ehr;
pub mod error;
mod hexser;
pub mod journal;
pub mod protocol;
pub mod registry;
pub mod terminal;

pub use error::{Error, ErrorCode, Result};
