//! Proximity-bound passwordless login: a phone app vouches for a desktop
//! browser via NFC and a Bluetooth presence check, with a rotating
//! per-installation secret.
//!
//! The crate contains the primitives ([`crypto`], [`biometric`],
//! [`messages`]), the three protocol parties ([`server`], [`device`]), a
//! deterministic simulator ([`sim`]), a symbolic attacker ([`adversary`])
//! and the scenario harness ([`harness`]).

pub mod adversary;
pub mod biometric;
pub mod crypto;
pub mod device;
pub mod harness;
mod hexfmt;
pub mod messages;
pub mod server;
pub mod sim;
