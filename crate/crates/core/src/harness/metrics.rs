use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::messages::{MessageKind, Phase, LOGIN_STEPS, REGISTRATION_STEPS};
use crate::sim::transcript::{Line, Transcript};
use crate::sim::{ChannelKind, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTiming {
    pub phase: Phase,
    pub step: u8,
    pub at_ms: u64,
    /// Time since the previous step of the same phase (or the phase start).
    pub duration_ms: u64,
}

/// Simulated timings of the first complete registration and login in a
/// transcript, plus message counts per channel over the whole run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub registration_total_ms: Option<u64>,
    pub login_total_ms: Option<u64>,
    pub ble_search_ms: Option<u64>,
    pub nfc_tap_ms: Option<u64>,
    pub biometric_match_ms: Option<u64>,
    pub steps: Vec<StepTiming>,
    pub messages: BTreeMap<ChannelKind, u64>,
}

impl RunMetrics {
    pub fn from_transcript(t: &Transcript) -> Self {
        let mut messages = BTreeMap::new();
        for c in ChannelKind::ALL {
            messages.insert(c, 0);
        }
        for l in t.lines() {
            if let Line::Event { channel, .. } = l {
                *messages.entry(*channel).or_insert(0) += 1;
            }
        }
        let (reg_steps, reg_total) = phase_timings(
            t,
            Phase::Registration,
            MessageKind::SignUp,
            REGISTRATION_STEPS,
        );
        let (login_steps, login_total) =
            phase_timings(t, Phase::Login, MessageKind::LoginBiometric, LOGIN_STEPS);
        let dur = |n: u8| {
            login_steps
                .iter()
                .find(|s| s.step == n)
                .map(|s| s.duration_ms)
        };
        let mut steps = reg_steps;
        let (ble, nfc, bio) = (dur(10), dur(6), dur(8));
        steps.extend(login_steps);
        Self {
            registration_total_ms: reg_total,
            login_total_ms: login_total,
            ble_search_ms: ble,
            nfc_tap_ms: nfc,
            biometric_match_ms: bio,
            steps,
            messages,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics always serialize")
    }
}

/// Walks the step markers of `phase` from the send time of its first
/// message, taking 1, 2, ... in order. The total is only reported when the
/// last step was reached.
fn phase_timings(
    t: &Transcript,
    phase: Phase,
    opener: MessageKind,
    count: usize,
) -> (Vec<StepTiming>, Option<u64>) {
    let start = t.lines().iter().find_map(|l| match l {
        Line::Event { kind, sent_at, .. } if kind == opener.as_str() => Some(*sent_at),
        _ => None,
    });
    // Registration step 1 happens on the device before the opener is sent.
    let first_marker = t
        .steps()
        .find(|(_, p, s)| *p == phase && *s == 1)
        .map(|(at, _, _)| at);
    let Some(start) = min_opt(start, first_marker) else {
        return (Vec::new(), None);
    };
    let mut out = Vec::new();
    let mut prev = start;
    let mut want = 1u8;
    for (at, p, s) in t.steps() {
        if p != phase || at < start || s != want {
            continue;
        }
        out.push(StepTiming {
            phase,
            step: s,
            at_ms: at.as_millis(),
            duration_ms: at.saturating_sub(prev),
        });
        prev = at;
        want += 1;
        if usize::from(s) == count {
            break;
        }
    }
    let total = (out.len() == count).then(|| out.iter().map(|s| s.duration_ms).sum());
    (out, total)
}

fn min_opt(a: Option<SimTime>, b: Option<SimTime>) -> Option<SimTime> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}
