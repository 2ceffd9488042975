//! Client-side state machines: the phone app (first device) and the
//! desktop browser (second device).
//!
//! Agents never touch the network or the clock directly. Each input returns
//! a list of [`Effect`]s that the simulator carries out, which keeps the
//! agents deterministic and trivially restartable.

mod first;
mod second;

pub use first::{FdPhase, FirstDevice, FirstDeviceStorage, RotationJournal};
pub use second::{SdPhase, SecondDevice};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::messages::{ErrorCode, MessageBody, MessageKind, Phase, PrincipalId, SessionId};
use crate::sim::{BluetoothAddress, ChannelKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("{kind} not expected in phase {phase}")]
    UnexpectedMessage { kind: MessageKind, phase: String },
    #[error("device is not registered")]
    NotRegistered,
    #[error("device is busy in phase {0}")]
    Busy(String),
    #[error("nothing staged for NFC transfer")]
    NothingStaged,
    #[error("no authentication string received")]
    NothingReceived,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DeviceOutcome {
    Registered { em: String },
    RegistrationFailed { reason: String },
    LoginSucceeded { sid: SessionId },
    LoginFailed { reason: String },
    ServerError { code: ErrorCode },
    RotationAborted,
    Bt1NotFound,
    MatchRejected,
    TimedOut,
}

/// What an agent asks the simulator to do.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Send {
        channel: ChannelKind,
        to: PrincipalId,
        body: MessageBody,
    },
    BleSearch {
        target: BluetoothAddress,
    },
    Timer {
        delay_ms: u64,
        tag: u64,
    },
    /// An authentication string is staged and the user may tap.
    ReadyToTap,
    /// Text shown on the device screen.
    Ui(String),
    Step {
        phase: Phase,
        step: u8,
    },
    Outcome(DeviceOutcome),
}

impl Effect {
    pub(crate) fn https(to: &PrincipalId, body: MessageBody) -> Self {
        Effect::Send {
            channel: ChannelKind::Https,
            to: to.clone(),
            body,
        }
    }
}

fn unexpected(kind: MessageKind, phase: impl std::fmt::Debug) -> DeviceError {
    DeviceError::UnexpectedMessage {
        kind,
        phase: format!("{phase:?}"),
    }
}
