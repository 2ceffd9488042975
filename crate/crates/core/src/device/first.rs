use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::{unexpected, DeviceError, DeviceOutcome, Effect};
use crate::adversary::provenance::{seal_traced, SealRecord};
use crate::adversary::term::{terms, Atom, Term};
use crate::biometric::{capture, FbUrl, IdentityProfile};
use crate::crypto::{
    aid_keys, derive_keys, gen_nonce10, open, salted_keys, Envelope, Nonce10, Salt, SecretKey,
};
use crate::messages::{
    encode_auth_string, AuthString, ErrorCode, MessageBody, Phase, PrincipalId, ProtocolMessage,
    SessionId, FIXED_TOKEN, OK_CHALLENGE,
};
use crate::sim::BluetoothAddress;

/// Rotation in progress: the blob that was current before the last offer,
/// and the OK already sealed under its AID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationJournal {
    pub old_blob: Envelope,
    pub pending_ok: Envelope,
}

/// Everything the phone app keeps across restarts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstDeviceStorage {
    pub sk: SecretKey,
    pub enc_aid_blob: Option<Envelope>,
    pub account: Option<String>,
    pub journal: Option<RotationJournal>,
}

impl FirstDeviceStorage {
    pub fn new(sk: SecretKey) -> Self {
        Self {
            sk,
            enc_aid_blob: None,
            account: None,
            journal: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("storage always serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdPhase {
    Idle,
    AwaitingSignUpResponse,
    AwaitingRegistrationResult,
    AwaitingBiometricStored,
    AwaitingContextAck,
    AwaitingSalt,
    Staged,
    AwaitingRotation,
    AwaitingResult,
}

#[derive(Debug, Clone)]
pub struct FirstDevice {
    id: PrincipalId,
    server: PrincipalId,
    bt1: BluetoothAddress,
    profile: IdentityProfile,
    storage: FirstDeviceStorage,
    phase: FdPhase,
    em: Option<String>,
    login_fburl: Option<FbUrl>,
    n1: Option<Nonce10>,
    active_blob: Option<Envelope>,
    tried_journal: bool,
    pending_auth_string: Option<Envelope>,
    tap_target: Option<PrincipalId>,
    seals: Vec<SealRecord>,
}

impl FirstDevice {
    pub fn new(
        id: PrincipalId,
        server: PrincipalId,
        bt1: BluetoothAddress,
        profile: IdentityProfile,
        storage: FirstDeviceStorage,
    ) -> Self {
        Self {
            id,
            server,
            bt1,
            profile,
            storage,
            phase: FdPhase::Idle,
            em: None,
            login_fburl: None,
            n1: None,
            active_blob: None,
            tried_journal: false,
            pending_auth_string: None,
            tap_target: None,
            seals: Vec::new(),
        }
    }

    /// Same device after a power cycle: persistent storage only.
    pub fn restarted(&self) -> Self {
        let mut d = Self::new(
            self.id.clone(),
            self.server.clone(),
            self.bt1,
            self.profile.clone(),
            self.storage.clone(),
        );
        d.tap_target = self.tap_target.clone();
        d
    }

    pub fn id(&self) -> &PrincipalId {
        &self.id
    }

    pub fn bt1(&self) -> BluetoothAddress {
        self.bt1
    }

    pub fn phase(&self) -> FdPhase {
        self.phase
    }

    pub fn storage(&self) -> &FirstDeviceStorage {
        &self.storage
    }

    pub fn storage_mut(&mut self) -> &mut FirstDeviceStorage {
        &mut self.storage
    }

    pub fn pending_auth_string(&self) -> Option<&Envelope> {
        self.pending_auth_string.as_ref()
    }

    pub fn set_tap_target(&mut self, target: Option<PrincipalId>) {
        self.tap_target = target;
    }

    pub fn tap_target(&self) -> Option<&PrincipalId> {
        self.tap_target.as_ref()
    }

    pub fn take_seals(&mut self) -> Vec<SealRecord> {
        std::mem::take(&mut self.seals)
    }

    fn reset(&mut self) {
        self.phase = FdPhase::Idle;
        self.em = None;
        self.login_fburl = None;
        self.n1 = None;
        self.active_blob = None;
        self.tried_journal = false;
        self.pending_auth_string = None;
    }

    fn fail(&mut self, outcome: DeviceOutcome) -> Vec<Effect> {
        self.reset();
        vec![Effect::Ui(format!("{outcome:?}")), Effect::Outcome(outcome)]
    }

    /// Registration steps 1-2.
    pub fn start_registration<R: RngCore + CryptoRng>(
        &mut self,
        em: &str,
        pwd: &str,
        rng: &mut R,
    ) -> Result<Vec<Effect>, DeviceError> {
        if self.phase != FdPhase::Idle {
            return Err(DeviceError::Busy(format!("{:?}", self.phase)));
        }
        let embedding = capture(&self.profile, rng);
        self.phase = FdPhase::AwaitingSignUpResponse;
        self.em = Some(em.to_owned());
        Ok(vec![
            Effect::Step {
                phase: Phase::Registration,
                step: 1,
            },
            Effect::https(
                &self.server,
                MessageBody::SignUp {
                    em: em.to_owned(),
                    pwd: pwd.to_owned(),
                    embedding,
                },
            ),
        ])
    }

    /// Login step 1, first half: capture and upload the login face.
    pub fn start_login<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
    ) -> Result<Vec<Effect>, DeviceError> {
        if self.phase != FdPhase::Idle {
            return Err(DeviceError::Busy(format!("{:?}", self.phase)));
        }
        let (Some(em), Some(blob)) = (
            self.storage.account.clone(),
            self.storage.enc_aid_blob.clone(),
        ) else {
            return Err(DeviceError::NotRegistered);
        };
        self.em = Some(em.clone());
        self.active_blob = Some(blob);
        self.tried_journal = false;
        Ok(self.upload_login_face(em, rng))
    }

    fn upload_login_face<R: RngCore + CryptoRng>(
        &mut self,
        em: String,
        rng: &mut R,
    ) -> Vec<Effect> {
        let embedding = capture(&self.profile, rng);
        self.phase = FdPhase::AwaitingBiometricStored;
        vec![Effect::https(
            &self.server,
            MessageBody::LoginBiometric { em, embedding },
        )]
    }

    /// After a restart: finish an interrupted rotation by resending OK.
    pub fn resume(&mut self) -> Vec<Effect> {
        let (Some(j), Some(em)) = (&self.storage.journal, &self.storage.account) else {
            return Vec::new();
        };
        if self.phase != FdPhase::Idle {
            return Vec::new();
        }
        self.phase = FdPhase::AwaitingResult;
        self.em = Some(em.clone());
        vec![Effect::https(
            &self.server,
            MessageBody::OkChallenge {
                em: em.clone(),
                ok: j.pending_ok.clone(),
            },
        )]
    }

    /// NFC transfer of the staged string; the local copy goes with it.
    pub fn take_staged(&mut self) -> Result<Envelope, DeviceError> {
        let env = self
            .pending_auth_string
            .take()
            .ok_or(DeviceError::NothingStaged)?;
        self.phase = FdPhase::AwaitingRotation;
        Ok(env)
    }

    pub fn handle<R: RngCore + CryptoRng>(
        &mut self,
        msg: &ProtocolMessage,
        rng: &mut R,
    ) -> Result<Vec<Effect>, DeviceError> {
        if msg.from != self.server || msg.to != self.id {
            return Err(unexpected(msg.kind(), self.phase));
        }
        use FdPhase::*;
        match (&msg.msg, self.phase) {
            (MessageBody::SignUpResponse { salt, enc_aid }, AwaitingSignUpResponse) => {
                Ok(self.on_signup_response(salt, enc_aid, rng))
            }
            (MessageBody::RegistrationResult { success, reason }, AwaitingRegistrationResult) => {
                let em = self.em.take().unwrap_or_default();
                self.reset();
                if *success {
                    self.storage.account = Some(em.clone());
                    Ok(vec![
                        Effect::Step {
                            phase: Phase::Registration,
                            step: 8,
                        },
                        Effect::Ui("registration complete".into()),
                        Effect::Outcome(DeviceOutcome::Registered { em }),
                    ])
                } else {
                    self.storage.enc_aid_blob = None;
                    Ok(self.fail(DeviceOutcome::RegistrationFailed {
                        reason: reason.clone().unwrap_or_default(),
                    }))
                }
            }
            (MessageBody::BiometricStored { fburl }, AwaitingBiometricStored) => {
                let n1 = gen_nonce10(rng);
                self.login_fburl = Some(fburl.clone());
                self.n1 = Some(n1.clone());
                self.phase = AwaitingContextAck;
                let em = self.em.clone().unwrap_or_default();
                Ok(vec![Effect::https(
                    &self.server,
                    MessageBody::LoginContextUpdate {
                        em,
                        n1,
                        bt1: self.bt1,
                    },
                )])
            }
            (MessageBody::LoginContextAck { em }, AwaitingContextAck)
                if Some(em) == self.em.as_ref() =>
            {
                let (Some(n1), Some(blob)) = (&self.n1, &self.active_blob) else {
                    return Ok(self.fail(DeviceOutcome::LoginFailed {
                        reason: "lost login context".into(),
                    }));
                };
                let identifier = seal_traced(
                    &derive_keys(&self.storage.sk, n1),
                    terms::nonce_key(&self.storage.sk, n1),
                    &blob.to_bytes(),
                    Term::Atom(Atom(blob.digest())),
                    rng,
                    &mut self.seals,
                );
                self.phase = AwaitingSalt;
                Ok(vec![Effect::https(
                    &self.server,
                    MessageBody::IdentifierSubmit {
                        em: em.clone(),
                        identifier,
                    },
                )])
            }
            (MessageBody::SaltResponse { salt }, AwaitingSalt) => Ok(self.on_salt(salt, rng)),
            (MessageBody::RotationOffer { salt, enc_aid_next }, AwaitingRotation) => {
                Ok(self.on_rotation(salt, enc_aid_next, rng))
            }
            (
                MessageBody::LoginResult {
                    success: true,
                    sid: Some(sid),
                    ..
                },
                AwaitingResult | AwaitingRotation,
            ) => {
                let sid = *sid;
                self.storage.journal = None;
                self.reset();
                Ok(vec![
                    Effect::Ui("logged in".into()),
                    Effect::Outcome(DeviceOutcome::LoginSucceeded { sid }),
                ])
            }
            (
                MessageBody::LoginResult {
                    success: false,
                    reason,
                    ..
                },
                AwaitingResult | AwaitingRotation,
            ) => Ok(self.fail(DeviceOutcome::LoginFailed {
                reason: reason.clone().unwrap_or_default(),
            })),
            (MessageBody::ErrorReply { code, .. }, phase) if phase != Idle => {
                Ok(self.on_error(*code, rng))
            }
            (_, phase) => Err(unexpected(msg.kind(), phase)),
        }
    }

    fn on_signup_response<R: RngCore + CryptoRng>(
        &mut self,
        salt: &Salt,
        enc_aid: &Envelope,
        rng: &mut R,
    ) -> Vec<Effect> {
        let aid = match open(&salted_keys(&self.storage.sk, salt), enc_aid)
            .ok()
            .and_then(|b| SecretKey::from_slice(&b))
        {
            Some(a) => a,
            None => {
                self.storage.enc_aid_blob = None;
                return self.fail(DeviceOutcome::RegistrationFailed {
                    reason: "AID envelope did not open".into(),
                });
            }
        };
        self.storage.enc_aid_blob = Some(enc_aid.clone());
        let proof = seal_traced(
            &aid_keys(&aid),
            terms::aid_key(&aid),
            FIXED_TOKEN,
            Term::atom(FIXED_TOKEN),
            rng,
            &mut self.seals,
        );
        self.phase = FdPhase::AwaitingRegistrationResult;
        let em = self.em.clone().unwrap_or_default();
        vec![
            Effect::Step {
                phase: Phase::Registration,
                step: 5,
            },
            Effect::https(&self.server, MessageBody::RegistrationConfirm { em, proof }),
        ]
    }

    fn on_salt<R: RngCore + CryptoRng>(&mut self, salt: &Salt, rng: &mut R) -> Vec<Effect> {
        let aid = self
            .active_blob
            .as_ref()
            .and_then(|b| open(&salted_keys(&self.storage.sk, salt), b).ok())
            .and_then(|b| SecretKey::from_slice(&b));
        let (Some(aid), Some(em), Some(fburl)) = (aid, self.em.clone(), self.login_fburl.clone())
        else {
            return self.fail(DeviceOutcome::LoginFailed {
                reason: "stored AID did not open".into(),
            });
        };
        let sid = SessionId::random(rng);
        let body = Term::tuple(vec![
            Term::atom(em.as_bytes()),
            Term::atom(fburl.as_str().as_bytes()),
            terms::sid(&sid),
        ]);
        let plaintext = encode_auth_string(&AuthString {
            em,
            login_fburl: fburl,
            sid,
        });
        let env = seal_traced(
            &salted_keys(&aid, salt),
            terms::salted_key(&aid, salt),
            &plaintext,
            body,
            rng,
            &mut self.seals,
        );
        self.pending_auth_string = Some(env);
        self.n1 = None;
        self.phase = FdPhase::Staged;
        vec![
            Effect::Step {
                phase: Phase::Login,
                step: 5,
            },
            Effect::Ui("tap your phone on the computer".into()),
            Effect::ReadyToTap,
        ]
    }

    /// Login steps 14-15. The journal is written before the blob is
    /// replaced, so a crash at any point leaves a usable old AID.
    fn on_rotation<R: RngCore + CryptoRng>(
        &mut self,
        salt: &Salt,
        enc_next: &Envelope,
        rng: &mut R,
    ) -> Vec<Effect> {
        let Some(blob) = self.active_blob.clone() else {
            return self.fail(DeviceOutcome::RotationAborted);
        };
        let sk = self.storage.sk.clone();
        let opened = open(&salted_keys(&sk, salt), &blob)
            .ok()
            .and_then(|b| SecretKey::from_slice(&b))
            .and_then(|aid| {
                let next = open(&aid_keys(&aid), enc_next)
                    .ok()
                    .and_then(|b| SecretKey::from_slice(&b))?;
                Some((aid, next))
            });
        let Some((aid, next)) = opened else {
            return self.fail(DeviceOutcome::RotationAborted);
        };
        let ok = seal_traced(
            &aid_keys(&aid),
            terms::aid_key(&aid),
            OK_CHALLENGE,
            Term::atom(OK_CHALLENGE),
            rng,
            &mut self.seals,
        );
        let new_blob = seal_traced(
            &salted_keys(&sk, salt),
            terms::salted_key(&sk, salt),
            next.as_bytes(),
            terms::secret(&next),
            rng,
            &mut self.seals,
        );
        self.storage.journal = Some(RotationJournal {
            old_blob: blob,
            pending_ok: ok.clone(),
        });
        self.storage.enc_aid_blob = Some(new_blob);
        self.phase = FdPhase::AwaitingResult;
        let em = self.em.clone().unwrap_or_default();
        vec![
            Effect::Step {
                phase: Phase::Login,
                step: 14,
            },
            Effect::https(&self.server, MessageBody::OkChallenge { em, ok }),
        ]
    }

    fn on_error<R: RngCore + CryptoRng>(&mut self, code: ErrorCode, rng: &mut R) -> Vec<Effect> {
        let fallback = self.storage.journal.as_ref().map(|j| j.old_blob.clone());
        if code == ErrorCode::IdentificationFailed
            && self.phase == FdPhase::AwaitingSalt
            && !self.tried_journal
        {
            if let (Some(old), Some(em)) = (fallback, self.em.clone()) {
                // The server never committed the last rotation; log in with
                // the AID it still holds.
                self.tried_journal = true;
                self.active_blob = Some(old);
                let mut out = vec![Effect::Ui("retrying with previous identifier".into())];
                out.extend(self.upload_login_face(em, rng));
                return out;
            }
        }
        if self.phase == FdPhase::AwaitingRegistrationResult
            || self.phase == FdPhase::AwaitingSignUpResponse
        {
            self.storage.enc_aid_blob = None;
        }
        self.fail(DeviceOutcome::ServerError { code })
    }
}
