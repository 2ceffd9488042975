//! Deterministic discrete-event simulation: virtual clock, channels,
//! physical placement and the world that wires agents together.

mod address;
mod queue;
mod topology;
pub mod transcript;
mod world;

use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};

pub use address::{AddressParseError, BluetoothAddress};
pub use queue::{DeliveryHandle, EventQueue};
pub use topology::{Topology, TopologyError};
pub use world::{
    Action, Agent, Crash, Delivery, InvariantViolation, LoginRecord, TapError, World, WorldConfig,
};

/// Virtual time in milliseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, ms: u64) -> SimTime {
        SimTime(self.0.saturating_add(ms))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Confidential and authentic between its two endpoints.
    Https,
    /// One-shot tap; needs proximity at send time.
    Nfc,
    /// Presence query, no payload.
    BleScan,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 3] = [ChannelKind::Https, ChannelKind::Nfc, ChannelKind::BleScan];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Https => "https",
            ChannelKind::Nfc => "nfc",
            ChannelKind::BleScan => "ble_scan",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Latencies {
    pub https_ms: u64,
    pub nfc_ms: u64,
    pub ble_ms: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Self {
            https_ms: 20,
            nfc_ms: 100,
            ble_ms: 800,
        }
    }
}

impl Latencies {
    pub fn of(&self, kind: ChannelKind) -> u64 {
        match kind {
            ChannelKind::Https => self.https_ms,
            ChannelKind::Nfc => self.nfc_ms,
            ChannelKind::BleScan => self.ble_ms,
        }
    }
}
