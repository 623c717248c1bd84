//! Test bed for a nusa deployment: scripted multi-party scenarios, the
//! privacy-separation scanner and the periodic sweep.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;
pub mod scan;
pub mod scenario;
pub mod sweep;

pub use error::{HarnessError, HarnessResult};
