//! JSON-lines run transcript.
//!
//! Every line is one JSON object with a `type` field. A complete transcript
//! starts with `header` and ends with `end`; anything else is treated as
//! truncated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChannelKind, SimTime};
use crate::adversary::term::Term;
use crate::adversary::{AcceptedOk, DeclaredSecret};
use crate::crypto::sha256;
use crate::device::DeviceOutcome;
use crate::messages::{Phase, PrincipalId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Line {
    Header {
        scenario: String,
        seed: u64,
        capabilities: Vec<String>,
        format: u32,
    },
    /// A delivered transport event.
    Event {
        seq: u64,
        t: SimTime,
        sent_at: SimTime,
        channel: ChannelKind,
        kind: String,
        from: PrincipalId,
        to: PrincipalId,
        payload_digest: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload_hex: Option<String>,
    },
    /// A send the channel refused, e.g. an NFC tap out of range.
    Refused {
        t: SimTime,
        channel: ChannelKind,
        kind: String,
        from: PrincipalId,
        to: PrincipalId,
        reason: String,
    },
    Ui {
        t: SimTime,
        device: PrincipalId,
        text: String,
    },
    Observe {
        t: SimTime,
        source: String,
        term: Term,
    },
    Step {
        t: SimTime,
        phase: Phase,
        step: u8,
    },
    Outcome {
        t: SimTime,
        device: PrincipalId,
        outcome: DeviceOutcome,
    },
    AcceptOk {
        t: SimTime,
        em: String,
        sealed_by: Option<PrincipalId>,
        old_aid_holder: Option<PrincipalId>,
        holder: Option<PrincipalId>,
    },
    Crash {
        t: SimTime,
        after_step: u8,
    },
    Secrets {
        secrets: Vec<DeclaredSecret>,
    },
    End {
        t: SimTime,
        outcome: String,
        authenticated_as_victim: bool,
    },
}

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error("transcript is empty")]
    Empty,
    #[error("transcript does not start with a header")]
    MissingHeader,
    #[error("transcript is truncated (no end line)")]
    Truncated,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    lines: Vec<Line>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, line: Line) {
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&serde_json::to_string(l).expect("transcript lines always serialize"));
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the serialized transcript, hex.
    pub fn digest(&self) -> String {
        hex::encode(sha256(self.to_jsonl().as_bytes()))
    }

    /// Parses a complete transcript; a missing header or end line is an error.
    pub fn parse(text: &str) -> Result<Self, TranscriptError> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let l = serde_json::from_str(raw).map_err(|source| TranscriptError::Malformed {
                line: i + 1,
                source,
            })?;
            lines.push(l);
        }
        match (lines.first(), lines.last()) {
            (None, _) => Err(TranscriptError::Empty),
            (Some(Line::Header { .. }), Some(Line::End { .. })) => Ok(Self { lines }),
            (Some(Line::Header { .. }), _) => Err(TranscriptError::Truncated),
            _ => Err(TranscriptError::MissingHeader),
        }
    }

    pub fn observed_terms(&self) -> Vec<Term> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                Line::Observe { term, .. } => Some(term.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn declared_secrets(&self) -> Vec<DeclaredSecret> {
        self.lines
            .iter()
            .flat_map(|l| match l {
                Line::Secrets { secrets } => secrets.clone(),
                _ => Vec::new(),
            })
            .collect()
    }

    pub fn accepted_oks(&self) -> Vec<AcceptedOk> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                Line::AcceptOk {
                    em,
                    sealed_by,
                    old_aid_holder,
                    ..
                } => Some(AcceptedOk {
                    em: em.clone(),
                    sealed_by: sealed_by.clone(),
                    old_aid_holder: old_aid_holder.clone(),
                }),
                _ => None,
            })
            .collect()
    }

    pub fn steps(&self) -> impl Iterator<Item = (SimTime, Phase, u8)> + '_ {
        self.lines.iter().filter_map(|l| match l {
            Line::Step { t, phase, step } => Some((*t, *phase, *step)),
            _ => None,
        })
    }
}
