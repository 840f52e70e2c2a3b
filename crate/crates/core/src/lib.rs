//! Indoor localization from WiFi channel state information.

pub mod config;
pub mod csi;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod hypothesis;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod sim;
pub mod walk;

pub use error::{Error, Result};
