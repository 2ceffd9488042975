//! Wire formats.
//!
//! Anything that gets sealed (the authentication string, MATCH payload) has a
//! canonical length-prefixed binary form so both sides MAC identical bytes.
//! Transport framing between principals is strict JSON: one schema per
//! message kind, unknown kinds and unknown fields rejected.

use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biometric::{FaceEmbedding, FbUrl};
use crate::crypto::{Envelope, Nonce10, ReplayToken, Salt, TOKEN_LEN};
use crate::sim::BluetoothAddress;

pub const PROTOCOL_VERSION: u32 = 1;

/// Plaintext the first device seals under its AID to confirm registration.
pub const FIXED_TOKEN: &[u8] = b"REG-CONFIRM-V1";
pub const MATCH_TAG: &[u8] = b"MATCH";
pub const OK_CHALLENGE: &[u8] = b"OK";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error("malformed authentication string: {0}")]
    MalformedAuthString(&'static str),
    #[error("malformed MATCH payload")]
    MalformedMatch,
    #[error("malformed message at `{path}`: {reason}")]
    MalformedMessage { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrincipalId(String);

impl PrincipalId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PrincipalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PrincipalId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// 16 random bytes chosen by the first device when it starts a login.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionId(#[serde(with = "crate::hexfmt::array")] [u8; 16]);

impl SessionId {
    pub fn from_bytes(b: [u8; 16]) -> Self {
        Self(b)
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({})", hex::encode(self.0))
    }
}

/// `(Em, LOGIN-FbURL, SID)`, sealed under the AID+S keys and carried by NFC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthString {
    pub em: String,
    pub login_fburl: FbUrl,
    pub sid: SessionId,
}

fn put_field(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

fn take_field<'a>(b: &mut &'a [u8]) -> Result<&'a [u8], MessageError> {
    if b.len() < 4 {
        return Err(MessageError::MalformedAuthString("truncated length prefix"));
    }
    let n = u32::from_be_bytes(b[..4].try_into().expect("4 bytes")) as usize;
    let rest = &b[4..];
    if rest.len() < n {
        return Err(MessageError::MalformedAuthString(
            "length prefix exceeds input",
        ));
    }
    let (field, tail) = rest.split_at(n);
    *b = tail;
    Ok(field)
}

/// Each field as a 4-byte big-endian length followed by its bytes, in the
/// order em, login_fburl, sid.
pub fn encode_auth_string(a: &AuthString) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + a.em.len() + a.login_fburl.as_str().len() + 16);
    put_field(&mut out, a.em.as_bytes());
    put_field(&mut out, a.login_fburl.as_str().as_bytes());
    put_field(&mut out, &a.sid.0);
    out
}

pub fn decode_auth_string(mut b: &[u8]) -> Result<AuthString, MessageError> {
    let em = take_field(&mut b)?;
    let url = take_field(&mut b)?;
    let sid = take_field(&mut b)?;
    if !b.is_empty() {
        return Err(MessageError::MalformedAuthString("trailing bytes"));
    }
    let em = std::str::from_utf8(em)
        .map_err(|_| MessageError::MalformedAuthString("email not UTF-8"))?;
    let url = std::str::from_utf8(url)
        .map_err(|_| MessageError::MalformedAuthString("FbURL not UTF-8"))?;
    let sid: [u8; 16] = sid
        .try_into()
        .map_err(|_| MessageError::MalformedAuthString("session id must be 16 bytes"))?;
    Ok(AuthString {
        em: em.to_owned(),
        login_fburl: FbUrl::new(url),
        sid: SessionId(sid),
    })
}

/// `MATCH || TOKEN || BT_1`, sealed for the second device.
///
/// The desktop has no other way to learn which address to search for, so the
/// server includes the first device's address next to the token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchMessage {
    pub token: ReplayToken,
    pub bt1: BluetoothAddress,
}

impl MatchMessage {
    pub const ENCODED_LEN: usize = 5 + TOKEN_LEN + 6;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.extend_from_slice(MATCH_TAG);
        out.extend_from_slice(self.token.as_bytes());
        out.extend_from_slice(&self.bt1.octets());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, MessageError> {
        if b.len() != Self::ENCODED_LEN || !b.starts_with(MATCH_TAG) {
            return Err(MessageError::MalformedMatch);
        }
        let token =
            ReplayToken::from_slice(&b[5..5 + TOKEN_LEN]).ok_or(MessageError::MalformedMatch)?;
        let bt: [u8; 6] = b[5 + TOKEN_LEN..]
            .try_into()
            .map_err(|_| MessageError::MalformedMatch)?;
        Ok(Self {
            token,
            bt1: BluetoothAddress::new(bt),
        })
    }
}

/// Machine-readable reason carried by [`MessageBody::ErrorReply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    DuplicateEmail,
    UnknownEmail,
    SessionAlreadyActive,
    IdentificationFailed,
    NoMatchingUser,
    BiometricMismatch,
    SessionExpired,
    TokenMismatch,
    TokenAlreadyConsumed,
    LoginFailed,
    RegistrationAborted,
    InvalidState,
    MalformedMessage,
    UnexpectedMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "kind",
    content = "body",
    rename_all = "snake_case",
    deny_unknown_fields
)]
pub enum MessageBody {
    // registration
    SignUp {
        em: String,
        pwd: String,
        embedding: FaceEmbedding,
    },
    SignUpResponse {
        salt: Salt,
        enc_aid: Envelope,
    },
    RegistrationConfirm {
        em: String,
        proof: Envelope,
    },
    RegistrationResult {
        success: bool,
        reason: Option<String>,
    },
    // login
    LoginBiometric {
        em: String,
        embedding: FaceEmbedding,
    },
    BiometricStored {
        fburl: FbUrl,
    },
    LoginContextUpdate {
        em: String,
        n1: Nonce10,
        bt1: BluetoothAddress,
    },
    LoginContextAck {
        em: String,
    },
    IdentifierSubmit {
        em: String,
        identifier: Envelope,
    },
    SaltResponse {
        salt: Salt,
    },
    NfcAuthString {
        auth: Envelope,
    },
    AuthStringSubmit {
        auth: Envelope,
        bt2: BluetoothAddress,
    },
    MatchResponse {
        sid: SessionId,
        matched: Envelope,
    },
    ProximityToken {
        proof: Envelope,
    },
    RotationOffer {
        salt: Salt,
        enc_aid_next: Envelope,
    },
    OkChallenge {
        em: String,
        ok: Envelope,
    },
    LoginResult {
        success: bool,
        sid: Option<SessionId>,
        reason: Option<String>,
    },
    // transport-level
    ErrorReply {
        code: ErrorCode,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    SignUp,
    SignUpResponse,
    RegistrationConfirm,
    RegistrationResult,
    LoginBiometric,
    BiometricStored,
    LoginContextUpdate,
    LoginContextAck,
    IdentifierSubmit,
    SaltResponse,
    NfcAuthString,
    AuthStringSubmit,
    MatchResponse,
    ProximityToken,
    RotationOffer,
    OkChallenge,
    LoginResult,
    ErrorReply,
}

impl MessageKind {
    pub const ALL: [MessageKind; 18] = [
        Self::SignUp,
        Self::SignUpResponse,
        Self::RegistrationConfirm,
        Self::RegistrationResult,
        Self::LoginBiometric,
        Self::BiometricStored,
        Self::LoginContextUpdate,
        Self::LoginContextAck,
        Self::IdentifierSubmit,
        Self::SaltResponse,
        Self::NfcAuthString,
        Self::AuthStringSubmit,
        Self::MatchResponse,
        Self::ProximityToken,
        Self::RotationOffer,
        Self::OkChallenge,
        Self::LoginResult,
        Self::ErrorReply,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SignUp => "sign_up",
            Self::SignUpResponse => "sign_up_response",
            Self::RegistrationConfirm => "registration_confirm",
            Self::RegistrationResult => "registration_result",
            Self::LoginBiometric => "login_biometric",
            Self::BiometricStored => "biometric_stored",
            Self::LoginContextUpdate => "login_context_update",
            Self::LoginContextAck => "login_context_ack",
            Self::IdentifierSubmit => "identifier_submit",
            Self::SaltResponse => "salt_response",
            Self::NfcAuthString => "nfc_auth_string",
            Self::AuthStringSubmit => "auth_string_submit",
            Self::MatchResponse => "match_response",
            Self::ProximityToken => "proximity_token",
            Self::RotationOffer => "rotation_offer",
            Self::OkChallenge => "ok_challenge",
            Self::LoginResult => "login_result",
            Self::ErrorReply => "error_reply",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl MessageBody {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::SignUp { .. } => MessageKind::SignUp,
            Self::SignUpResponse { .. } => MessageKind::SignUpResponse,
            Self::RegistrationConfirm { .. } => MessageKind::RegistrationConfirm,
            Self::RegistrationResult { .. } => MessageKind::RegistrationResult,
            Self::LoginBiometric { .. } => MessageKind::LoginBiometric,
            Self::BiometricStored { .. } => MessageKind::BiometricStored,
            Self::LoginContextUpdate { .. } => MessageKind::LoginContextUpdate,
            Self::LoginContextAck { .. } => MessageKind::LoginContextAck,
            Self::IdentifierSubmit { .. } => MessageKind::IdentifierSubmit,
            Self::SaltResponse { .. } => MessageKind::SaltResponse,
            Self::NfcAuthString { .. } => MessageKind::NfcAuthString,
            Self::AuthStringSubmit { .. } => MessageKind::AuthStringSubmit,
            Self::MatchResponse { .. } => MessageKind::MatchResponse,
            Self::ProximityToken { .. } => MessageKind::ProximityToken,
            Self::RotationOffer { .. } => MessageKind::RotationOffer,
            Self::OkChallenge { .. } => MessageKind::OkChallenge,
            Self::LoginResult { .. } => MessageKind::LoginResult,
            Self::ErrorReply { .. } => MessageKind::ErrorReply,
        }
    }

    /// All envelopes carried by this body, in field order.
    pub fn envelopes(&self) -> Vec<&Envelope> {
        match self {
            Self::SignUpResponse { enc_aid, .. } => vec![enc_aid],
            Self::RegistrationConfirm { proof, .. } => vec![proof],
            Self::IdentifierSubmit { identifier, .. } => vec![identifier],
            Self::NfcAuthString { auth } => vec![auth],
            Self::AuthStringSubmit { auth, .. } => vec![auth],
            Self::MatchResponse { matched, .. } => vec![matched],
            Self::ProximityToken { proof } => vec![proof],
            Self::RotationOffer { enc_aid_next, .. } => vec![enc_aid_next],
            Self::OkChallenge { ok, .. } => vec![ok],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolMessage {
    pub v: u32,
    pub from: PrincipalId,
    pub to: PrincipalId,
    pub msg: MessageBody,
}

impl ProtocolMessage {
    pub fn new(from: PrincipalId, to: PrincipalId, msg: MessageBody) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            from,
            to,
            msg,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.msg.kind()
    }

    pub fn reply(&self, msg: MessageBody) -> Self {
        Self::new(self.to.clone(), self.from.clone(), msg)
    }
}

pub fn encode_message(m: &ProtocolMessage) -> Vec<u8> {
    serde_json::to_vec(m).expect("protocol messages always serialize")
}

pub fn decode_message(b: &[u8]) -> Result<ProtocolMessage, MessageError> {
    let de = &mut serde_json::Deserializer::from_slice(b);
    let m: ProtocolMessage =
        serde_path_to_error::deserialize(de).map_err(|e| MessageError::MalformedMessage {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
    if m.v != PROTOCOL_VERSION {
        return Err(MessageError::MalformedMessage {
            path: "v".into(),
            reason: format!("unsupported version {}", m.v),
        });
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// Registration on the first device.
    #[serde(rename = "ARP")]
    Registration,
    /// Login of the second device through the first.
    #[serde(rename = "ALP")]
    Login,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Registration => "ARP",
            Phase::Login => "ALP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    FirstDevice,
    SecondDevice,
    Server,
}

#[derive(Debug, Clone, Copy)]
pub struct ProtocolStep {
    pub phase: Phase,
    pub number: u8,
    pub actor: Role,
    pub summary: &'static str,
    pub messages: &'static [MessageKind],
}

pub const REGISTRATION_STEPS: usize = 8;
pub const LOGIN_STEPS: usize = 16;

macro_rules! step {
    ($phase:ident, $n:expr, $actor:ident, $summary:expr, [$($m:ident),*]) => {
        ProtocolStep {
            phase: Phase::$phase,
            number: $n,
            actor: Role::$actor,
            summary: $summary,
            messages: &[$(MessageKind::$m),*],
        }
    };
}

/// Every step of both phases and the message kinds it puts on the wire.
pub const STEP_TABLE: [ProtocolStep; REGISTRATION_STEPS + LOGIN_STEPS] = [
    step!(
        Registration,
        1,
        FirstDevice,
        "capture face biometric for registration",
        []
    ),
    step!(
        Registration,
        2,
        FirstDevice,
        "submit email, password and biometric",
        [SignUp]
    ),
    step!(
        Registration,
        3,
        Server,
        "check email uniqueness, generate AID and salt",
        []
    ),
    step!(
        Registration,
        4,
        Server,
        "send salt and AID sealed under SK+S",
        [SignUpResponse]
    ),
    step!(
        Registration,
        5,
        FirstDevice,
        "store sealed AID, recover AID transiently",
        []
    ),
    step!(
        Registration,
        6,
        FirstDevice,
        "seal fixed token under AID",
        [RegistrationConfirm]
    ),
    step!(
        Registration,
        7,
        Server,
        "verify fixed token, save record, reply",
        [RegistrationResult]
    ),
    step!(
        Registration,
        8,
        FirstDevice,
        "discard salt and AID, keep sealed AID",
        []
    ),
    step!(
        Login,
        1,
        FirstDevice,
        "capture login biometric, update N1 and BT1",
        [
            LoginBiometric,
            BiometricStored,
            LoginContextUpdate,
            LoginContextAck
        ]
    ),
    step!(
        Login,
        2,
        FirstDevice,
        "send E_N1(E_SK+S(AID)) and email",
        [IdentifierSubmit]
    ),
    step!(Login, 3, Server, "verify identifier against stored AID", []),
    step!(Login, 4, Server, "send salt", [SaltResponse]),
    step!(
        Login,
        5,
        FirstDevice,
        "build authentication string under AID+S",
        []
    ),
    step!(
        Login,
        6,
        FirstDevice,
        "NFC tap to second device, delete local copy",
        [NfcAuthString]
    ),
    step!(
        Login,
        7,
        SecondDevice,
        "forward authentication string with BT2",
        [AuthStringSubmit]
    ),
    step!(
        Login,
        8,
        Server,
        "decrypt, match login and registration biometrics",
        []
    ),
    step!(
        Login,
        9,
        Server,
        "send MATCH and TOKEN sealed for BT2",
        [MatchResponse]
    ),
    step!(Login, 10, SecondDevice, "search for BT1 in proximity", []),
    step!(
        Login,
        11,
        SecondDevice,
        "seal TOKEN for BT1 and send",
        [ProximityToken]
    ),
    step!(Login, 12, Server, "verify TOKEN, generate AID'", []),
    step!(
        Login,
        13,
        Server,
        "send salt and AID' sealed under AID",
        [RotationOffer]
    ),
    step!(
        Login,
        14,
        FirstDevice,
        "recover AID', replace stored sealed AID",
        []
    ),
    step!(
        Login,
        15,
        FirstDevice,
        "send OK sealed under old AID",
        [OkChallenge]
    ),
    step!(
        Login,
        16,
        Server,
        "verify OK with old AID, replace AID, report result",
        [LoginResult]
    ),
];

pub fn step_for(kind: MessageKind) -> Option<&'static ProtocolStep> {
    STEP_TABLE.iter().find(|s| s.messages.contains(&kind))
}

/// Cross-checks [`MessageKind::ALL`] against [`STEP_TABLE`]: every protocol
/// kind belongs to exactly one step, and both phases are numbered densely.
pub fn check_step_table() -> Result<(), String> {
    for kind in MessageKind::ALL {
        let n = STEP_TABLE
            .iter()
            .filter(|s| s.messages.contains(&kind))
            .count();
        match (kind, n) {
            (MessageKind::ErrorReply, 0) => {}
            (MessageKind::ErrorReply, _) => {
                return Err("error_reply must not belong to a step".into())
            }
            (_, 1) => {}
            (k, n) => return Err(format!("{k} appears in {n} steps")),
        }
    }
    for (phase, count) in [
        (Phase::Registration, REGISTRATION_STEPS),
        (Phase::Login, LOGIN_STEPS),
    ] {
        let numbers: Vec<u8> = STEP_TABLE
            .iter()
            .filter(|s| s.phase == phase)
            .map(|s| s.number)
            .collect();
        let expected: Vec<u8> = (1..=count as u8).collect();
        if numbers != expected {
            return Err(format!("{} steps numbered {numbers:?}", phase.label()));
        }
    }
    Ok(())
}
