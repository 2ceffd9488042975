use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::{unexpected, DeviceError, DeviceOutcome, Effect};
use crate::adversary::provenance::{seal_traced, SealRecord};
use crate::adversary::term::{terms, Term};
use crate::crypto::{derive_bt_key, open, Envelope, ReplayToken};
use crate::messages::{MatchMessage, MessageBody, Phase, PrincipalId, ProtocolMessage, SessionId};
use crate::sim::{BluetoothAddress, ChannelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdPhase {
    Idle,
    Received,
    Submitted,
    Scanning,
    TokenSent,
}

/// The desktop browser. Receives the tapped string, forwards it with its
/// own address, and proves the phone is nearby before returning TOKEN.
#[derive(Debug, Clone)]
pub struct SecondDevice {
    id: PrincipalId,
    server: PrincipalId,
    bt2: BluetoothAddress,
    phase: SdPhase,
    received_auth_string: Option<Envelope>,
    match_token: Option<ReplayToken>,
    bt1: Option<BluetoothAddress>,
    sid: Option<SessionId>,
    timeout_ms: u64,
    timer_tag: u64,
    /// Send TOKEN whatever the scan says. Only for demonstrating what the
    /// proximity check prevents.
    skip_proximity_check: bool,
    /// Where a compromised page sends the tapped string instead of the server.
    submit_to: Option<PrincipalId>,
    seals: Vec<SealRecord>,
}

impl SecondDevice {
    pub fn new(
        id: PrincipalId,
        server: PrincipalId,
        bt2: BluetoothAddress,
        timeout_ms: u64,
    ) -> Self {
        Self {
            id,
            server,
            bt2,
            phase: SdPhase::Idle,
            received_auth_string: None,
            match_token: None,
            bt1: None,
            sid: None,
            timeout_ms,
            timer_tag: 0,
            skip_proximity_check: false,
            submit_to: None,
            seals: Vec::new(),
        }
    }

    pub fn restarted(&self) -> Self {
        let mut d = Self::new(
            self.id.clone(),
            self.server.clone(),
            self.bt2,
            self.timeout_ms,
        );
        d.skip_proximity_check = self.skip_proximity_check;
        d.submit_to = self.submit_to.clone();
        d.timer_tag = self.timer_tag;
        d
    }

    pub fn id(&self) -> &PrincipalId {
        &self.id
    }

    pub fn bt2(&self) -> BluetoothAddress {
        self.bt2
    }

    pub fn phase(&self) -> SdPhase {
        self.phase
    }

    pub fn received_auth_string(&self) -> Option<&Envelope> {
        self.received_auth_string.as_ref()
    }

    pub fn set_skip_proximity_check(&mut self, skip: bool) {
        self.skip_proximity_check = skip;
    }

    pub fn set_submit_to(&mut self, target: Option<PrincipalId>) {
        self.submit_to = target;
    }

    pub fn take_seals(&mut self) -> Vec<SealRecord> {
        std::mem::take(&mut self.seals)
    }

    fn clear(&mut self) {
        self.phase = SdPhase::Idle;
        self.received_auth_string = None;
        self.match_token = None;
        self.bt1 = None;
        self.sid = None;
    }

    fn finish(&mut self, outcome: DeviceOutcome, ui: &str) -> Vec<Effect> {
        self.clear();
        vec![Effect::Ui(ui.into()), Effect::Outcome(outcome)]
    }

    /// Login step 7: forward the tapped string with BT2.
    pub fn submit(&mut self) -> Result<Vec<Effect>, DeviceError> {
        if self.phase != SdPhase::Received {
            return Err(DeviceError::NothingReceived);
        }
        let auth = self
            .received_auth_string
            .clone()
            .ok_or(DeviceError::NothingReceived)?;
        self.phase = SdPhase::Submitted;
        let to = self
            .submit_to
            .clone()
            .unwrap_or_else(|| self.server.clone());
        Ok(vec![Effect::https(
            &to,
            MessageBody::AuthStringSubmit {
                auth,
                bt2: self.bt2,
            },
        )])
    }

    pub fn handle<R: RngCore + CryptoRng>(
        &mut self,
        msg: &ProtocolMessage,
        channel: ChannelKind,
        _rng: &mut R,
    ) -> Result<Vec<Effect>, DeviceError> {
        if msg.to != self.id {
            return Err(unexpected(msg.kind(), self.phase));
        }
        let from_server = channel == ChannelKind::Https && msg.from == self.server;
        match (&msg.msg, self.phase) {
            (MessageBody::NfcAuthString { auth }, SdPhase::Idle) if channel == ChannelKind::Nfc => {
                self.received_auth_string = Some(auth.clone());
                self.phase = SdPhase::Received;
                self.timer_tag += 1;
                let mut out = vec![Effect::Timer {
                    delay_ms: self.timeout_ms,
                    tag: self.timer_tag,
                }];
                out.extend(self.submit()?);
                Ok(out)
            }
            (MessageBody::MatchResponse { sid, matched }, SdPhase::Submitted) if from_server => {
                let parsed = open(&derive_bt_key(&self.bt2, sid.as_bytes()), matched)
                    .ok()
                    .and_then(|pt| MatchMessage::decode(&pt).ok());
                let Some(m) = parsed else {
                    return Ok(self.finish(DeviceOutcome::MatchRejected, "login failed"));
                };
                self.match_token = Some(m.token);
                self.bt1 = Some(m.bt1);
                self.sid = Some(*sid);
                self.phase = SdPhase::Scanning;
                Ok(vec![
                    Effect::Ui("looking for your phone".into()),
                    Effect::BleSearch { target: m.bt1 },
                ])
            }
            (MessageBody::LoginResult { success: true, .. }, SdPhase::TokenSent) if from_server => {
                Ok(self.finish(
                    DeviceOutcome::LoginSucceeded {
                        sid: self.sid.expect("set with token"),
                    },
                    "logged in",
                ))
            }
            (
                MessageBody::LoginResult {
                    success: false,
                    reason,
                    ..
                },
                SdPhase::TokenSent,
            ) if from_server => Ok(self.finish(
                DeviceOutcome::LoginFailed {
                    reason: reason.clone().unwrap_or_default(),
                },
                "login failed",
            )),
            (MessageBody::ErrorReply { code, .. }, SdPhase::Submitted | SdPhase::TokenSent)
                if from_server =>
            {
                Ok(self.finish(DeviceOutcome::ServerError { code: *code }, "login failed"))
            }
            (_, phase) => Err(unexpected(msg.kind(), phase)),
        }
    }

    /// Login steps 10-11: TOKEN goes out only if BT1 was seen nearby.
    pub fn on_scan_result<R: RngCore + CryptoRng>(
        &mut self,
        found: bool,
        rng: &mut R,
    ) -> Result<Vec<Effect>, DeviceError> {
        if self.phase != SdPhase::Scanning {
            return Err(DeviceError::Busy(format!("{:?}", self.phase)));
        }
        let mut out = vec![Effect::Step {
            phase: Phase::Login,
            step: 10,
        }];
        if !(found || self.skip_proximity_check) {
            out.extend(self.finish(DeviceOutcome::Bt1NotFound, "phone not found nearby"));
            return Ok(out);
        }
        let (Some(token), Some(bt1), Some(sid)) = (self.match_token.take(), self.bt1, self.sid)
        else {
            return Err(DeviceError::NothingReceived);
        };
        let proof = seal_traced(
            &derive_bt_key(&bt1, sid.as_bytes()),
            terms::bt_key(&bt1, &sid),
            token.as_bytes(),
            Term::atom(token.as_bytes()),
            rng,
            &mut self.seals,
        );
        self.phase = SdPhase::TokenSent;
        out.push(Effect::https(
            &self.server,
            MessageBody::ProximityToken { proof },
        ));
        Ok(out)
    }

    pub fn on_timer(&mut self, tag: u64) -> Vec<Effect> {
        if tag != self.timer_tag || self.phase == SdPhase::Idle {
            return Vec::new();
        }
        self.finish(DeviceOutcome::TimedOut, "login timed out")
    }
}
