//! The web server / verifier.
//!
//! Holds the user registry and runs the server half of registration and
//! login: identifier check, biometric match, proximity-token check, AID
//! rotation and session timers. All state lives in [`ServerStore`] and every
//! handler is a function of (store, message, now, rng), so the whole server
//! can be driven by the simulator one message at a time.

mod store;

pub use store::{FileStore, StoreError, UserDocument};

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::provenance::{seal_traced, SealRecord};
use crate::adversary::term::{terms, Term};
use crate::biometric::{self, EmbeddingStore, FaceEmbedding, FbUrl, DEFAULT_MATCH_THRESHOLD};
use crate::crypto::{
    aid_keys, ct_eq, derive_bt_key, derive_keys, gen_salt, gen_secret, gen_token, open,
    salted_keys, sha256, Envelope, Nonce10, ReplayToken, Salt, SecretKey,
};
use crate::messages::{
    decode_auth_string, ErrorCode, MatchMessage, MessageBody, PrincipalId, ProtocolMessage,
    SessionId, FIXED_TOKEN, MATCH_TAG, OK_CHALLENGE,
};
use crate::sim::{BluetoothAddress, SimTime};

pub const DEFAULT_SESSION_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("email already registered")]
    DuplicateEmail,
    #[error("unknown email")]
    UnknownEmail,
    #[error("a login session is already active for this email")]
    SessionAlreadyActive,
    #[error("first-device identification failed")]
    IdentificationFailed,
    #[error("no active session accepts this authentication string")]
    NoMatchingUser,
    #[error("login biometric does not match registration")]
    BiometricMismatch,
    #[error("session expired")]
    SessionExpired,
    #[error("proximity token mismatch")]
    TokenMismatch,
    #[error("proximity token already consumed")]
    TokenAlreadyConsumed,
    #[error("OK challenge rejected; rotation aborted")]
    LoginFailed,
    #[error("registration aborted: {0}")]
    RegistrationAborted(String),
    #[error("operation not valid in the current state")]
    InvalidState,
}

impl ServerError {
    pub fn code(&self) -> ErrorCode {
        match self {
            Self::DuplicateEmail => ErrorCode::DuplicateEmail,
            Self::UnknownEmail => ErrorCode::UnknownEmail,
            Self::SessionAlreadyActive => ErrorCode::SessionAlreadyActive,
            Self::IdentificationFailed => ErrorCode::IdentificationFailed,
            Self::NoMatchingUser => ErrorCode::NoMatchingUser,
            Self::BiometricMismatch => ErrorCode::BiometricMismatch,
            Self::SessionExpired => ErrorCode::SessionExpired,
            Self::TokenMismatch => ErrorCode::TokenMismatch,
            Self::TokenAlreadyConsumed => ErrorCode::TokenAlreadyConsumed,
            Self::LoginFailed => ErrorCode::LoginFailed,
            Self::RegistrationAborted(_) => ErrorCode::RegistrationAborted,
            Self::InvalidState => ErrorCode::InvalidState,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub session_timeout_ms: u64,
    pub match_threshold: f64,
    /// Burn each proximity token on first use. Only turned off to
    /// demonstrate the replay it prevents.
    pub token_single_use: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            session_timeout_ms: DEFAULT_SESSION_TIMEOUT_MS,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            token_single_use: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    LoginBegun,
    AwaitingProximity,
    AwaitingRotationAck,
    /// Rotation acknowledged separately from the OK. The combined ack+OK
    /// flow used by the first device never enters this state.
    AwaitingOk,
}

impl SessionState {
    /// Transitions a single handler invocation may perform.
    pub fn may_transition_to(self, next: SessionState) -> bool {
        use SessionState::*;
        self == next
            || next == Idle
            || matches!(
                (self, next),
                (Idle, LoginBegun)
                    | (LoginBegun, AwaitingProximity)
                    | (AwaitingProximity, AwaitingRotationAck)
                    | (AwaitingRotationAck, AwaitingOk)
            )
    }
}

/// Salted SHA-256 of the account password. Never read by the login flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasswordVerifier {
    salt: Salt,
    #[serde(with = "crate::hexfmt::array")]
    hash: [u8; 32],
}

impl PasswordVerifier {
    pub fn new<R: RngCore + CryptoRng>(pwd: &str, rng: &mut R) -> Self {
        let salt = gen_salt(rng);
        Self {
            hash: Self::digest(&salt, pwd),
            salt,
        }
    }

    fn digest(salt: &Salt, pwd: &str) -> [u8; 32] {
        let mut b = salt.as_bytes().to_vec();
        b.extend_from_slice(pwd.as_bytes());
        sha256(&b)
    }

    pub fn matches(&self, pwd: &str) -> bool {
        ct_eq(&Self::digest(&self.salt, pwd), &self.hash)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub em: String,
    pub pwd_verifier: PasswordVerifier,
    pub aid: SecretKey,
    pub salt: Salt,
    pub reg_fburl: FbUrl,
    pub bt1: Option<BluetoothAddress>,
    pub n1: Option<Nonce10>,
    pub sid: Option<SessionId>,
    pub token: Option<ReplayToken>,
    pub session_state: SessionState,
    pub session_deadline: Option<SimTime>,
    /// Identifier check (login step 3) passed for the current session.
    pub identified: bool,
    pub login_fburl: Option<FbUrl>,
    /// Principal that started the session; receives the rotation offer.
    pub first_device: Option<PrincipalId>,
    /// Principal that proved proximity; receives the logged-in session.
    pub holder: Option<PrincipalId>,
    pub bt2: Option<BluetoothAddress>,
}

impl UserRecord {
    fn clear_session(&mut self) {
        self.bt1 = None;
        self.n1 = None;
        self.sid = None;
        self.token = None;
        self.session_state = SessionState::Idle;
        self.session_deadline = None;
        self.identified = false;
        self.first_device = None;
        self.holder = None;
        self.bt2 = None;
    }

    fn expired(&self, now: SimTime) -> bool {
        self.session_state != SessionState::Idle && self.session_deadline.is_some_and(|d| d <= now)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingRegistration {
    pwd_verifier: PasswordVerifier,
    aid: SecretKey,
    salt: Salt,
    reg_fburl: FbUrl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumedToken {
    pub bt1: BluetoothAddress,
    pub sid: SessionId,
    pub token: ReplayToken,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerStore {
    pub records: BTreeMap<String, UserRecord>,
    pub pending_rotation: BTreeMap<String, SecretKey>,
    pub consumed_tokens: BTreeMap<String, Vec<ConsumedToken>>,
    pub embeddings: EmbeddingStore,
    pending_registrations: BTreeMap<String, PendingRegistration>,
}

/// Result of a successful proximity proof.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityAccepted {
    pub em: String,
    pub first_device: Option<PrincipalId>,
    /// `(S, E_AID(AID'))`; absent when an already-accepted token is
    /// re-presented with single-use disabled.
    pub rotation: Option<(Salt, Envelope)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoginSuccess {
    pub em: String,
    pub sid: SessionId,
    pub holder: Option<PrincipalId>,
}

/// Things the server did that the harness wants to know about.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerEvent {
    Registered {
        em: String,
    },
    LoginSucceeded {
        em: String,
        sid: SessionId,
        holder: Option<PrincipalId>,
        ok_envelope: Envelope,
    },
    RotationOffered {
        em: String,
        to: PrincipalId,
    },
    StepCompleted {
        phase: crate::messages::Phase,
        step: u8,
    },
}

#[derive(Debug)]
pub struct Server {
    id: PrincipalId,
    sk: SecretKey,
    config: ServerConfig,
    store: ServerStore,
    persistence: Option<FileStore>,
    dirty: BTreeSet<String>,
    seals: Vec<SealRecord>,
    events: Vec<ServerEvent>,
}

impl Server {
    pub fn new(id: PrincipalId, sk: SecretKey, config: ServerConfig) -> Self {
        Self {
            id,
            sk,
            config,
            store: ServerStore::default(),
            persistence: None,
            dirty: BTreeSet::new(),
            seals: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Reopens a server from per-user documents. Sessions come back exactly
    /// as persisted; their timers keep running against the virtual clock.
    pub fn restore(
        id: PrincipalId,
        sk: SecretKey,
        config: ServerConfig,
        docs: Vec<UserDocument>,
    ) -> Self {
        let mut s = Self::new(id, sk, config);
        for d in docs {
            let em = d.record.em.clone();
            s.store
                .embeddings_insert(&d.record.reg_fburl, d.reg_embedding);
            if let (Some(url), Some(e)) = (&d.record.login_fburl, d.login_embedding) {
                s.store.embeddings_insert(url, e);
            }
            if let Some(next) = d.aid_next {
                s.store.pending_rotation.insert(em.clone(), next);
            }
            if !d.consumed_tokens.is_empty() {
                s.store
                    .consumed_tokens
                    .insert(em.clone(), d.consumed_tokens);
            }
            s.store.records.insert(em, d.record);
        }
        s
    }

    pub fn with_persistence(mut self, fs: FileStore) -> Self {
        self.persistence = Some(fs);
        self
    }

    pub fn id(&self) -> &PrincipalId {
        &self.id
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn store(&self) -> &ServerStore {
        &self.store
    }

    pub fn record(&self, em: &str) -> Option<&UserRecord> {
        self.store.records.get(em)
    }

    pub fn session_state(&self, em: &str) -> Option<SessionState> {
        self.record(em).map(|r| r.session_state)
    }

    pub fn take_seals(&mut self) -> Vec<SealRecord> {
        std::mem::take(&mut self.seals)
    }

    pub fn take_events(&mut self) -> Vec<ServerEvent> {
        std::mem::take(&mut self.events)
    }

    fn step(&mut self, phase: crate::messages::Phase, step: u8) {
        self.events.push(ServerEvent::StepCompleted { phase, step });
    }

    fn touch(&mut self, em: &str) {
        self.dirty.insert(em.to_owned());
    }

    /// Per-user documents for everything committed.
    pub fn documents(&self) -> Vec<UserDocument> {
        self.store
            .records
            .keys()
            .filter_map(|em| self.document(em))
            .collect()
    }

    fn document(&self, em: &str) -> Option<UserDocument> {
        let r = self.store.records.get(em)?;
        Some(UserDocument {
            record: r.clone(),
            reg_embedding: self.store.embeddings.fetch(&r.reg_fburl).ok()?.clone(),
            login_embedding: r
                .login_fburl
                .as_ref()
                .and_then(|u| self.store.embeddings.fetch(u).ok().cloned()),
            aid_next: self.store.pending_rotation.get(em).cloned(),
            consumed_tokens: self
                .store
                .consumed_tokens
                .get(em)
                .cloned()
                .unwrap_or_default(),
        })
    }

    /// Writes every record touched since the last flush.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        let dirty = std::mem::take(&mut self.dirty);
        let Some(fs) = &self.persistence else {
            return Ok(());
        };
        for em in dirty {
            match self.document(&em) {
                Some(doc) => fs.save(&doc)?,
                None => fs.remove(&em)?,
            }
        }
        Ok(())
    }

    fn reset_session(&mut self, em: &str) {
        if let Some(r) = self.store.records.get_mut(em) {
            if let Some(url) = r.login_fburl.take() {
                self.store.embeddings.remove(&url);
            }
            r.clear_session();
        }
        self.store.pending_rotation.remove(em);
        self.touch(em);
    }

    // --- registration -----------------------------------------------------

    /// Registration steps 3-4: fresh AID and S, AID sealed under SK+S.
    pub fn register<R: RngCore + CryptoRng>(
        &mut self,
        em: &str,
        pwd: &str,
        embedding: FaceEmbedding,
        rng: &mut R,
    ) -> Result<(Salt, Envelope), ServerError> {
        if self.store.records.contains_key(em) {
            return Err(ServerError::DuplicateEmail);
        }
        if let Some(old) = self.store.pending_registrations.remove(em) {
            self.store.embeddings.remove(&old.reg_fburl);
        }
        let aid = gen_secret(rng);
        let salt = gen_salt(rng);
        self.step(crate::messages::Phase::Registration, 3);
        let reg_fburl = self.store.embeddings.store(embedding, rng);
        let env = seal_traced(
            &salted_keys(&self.sk, &salt),
            terms::salted_key(&self.sk, &salt),
            aid.as_bytes(),
            terms::secret(&aid),
            rng,
            &mut self.seals,
        );
        self.store.pending_registrations.insert(
            em.to_owned(),
            PendingRegistration {
                pwd_verifier: PasswordVerifier::new(pwd, rng),
                aid,
                salt: salt.clone(),
                reg_fburl,
            },
        );
        Ok((salt, env))
    }

    /// Registration step 7: accept `E_AID(FIXED_TOKEN)` and commit the record.
    pub fn confirm_registration(&mut self, em: &str, env: &Envelope) -> Result<(), ServerError> {
        let Some(p) = self.store.pending_registrations.remove(em) else {
            return Err(ServerError::InvalidState);
        };
        let ok = open(&aid_keys(&p.aid), env).is_ok_and(|pt| ct_eq(&pt, FIXED_TOKEN));
        if !ok {
            self.store.embeddings.remove(&p.reg_fburl);
            return Err(ServerError::RegistrationAborted(
                "fixed token did not verify under AID".into(),
            ));
        }
        let record = UserRecord {
            em: em.to_owned(),
            pwd_verifier: p.pwd_verifier,
            aid: p.aid,
            salt: p.salt,
            reg_fburl: p.reg_fburl,
            bt1: None,
            n1: None,
            sid: None,
            token: None,
            session_state: SessionState::Idle,
            session_deadline: None,
            identified: false,
            login_fburl: None,
            first_device: None,
            holder: None,
            bt2: None,
        };
        self.store.records.insert(em.to_owned(), record);
        self.touch(em);
        self.events
            .push(ServerEvent::Registered { em: em.to_owned() });
        Ok(())
    }

    // --- login ------------------------------------------------------------

    /// Login step 1: record `(N1, BT1)` and open a session.
    pub fn update_login_context(
        &mut self,
        em: &str,
        n1: Nonce10,
        bt1: BluetoothAddress,
        now: SimTime,
        first_device: Option<PrincipalId>,
    ) -> Result<(), ServerError> {
        let timeout = self.config.session_timeout_ms;
        let expired = self
            .store
            .records
            .get(em)
            .ok_or(ServerError::UnknownEmail)?
            .expired(now);
        if expired {
            self.reset_session(em);
        }
        let r = self.store.records.get_mut(em).expect("checked above");
        if r.session_state != SessionState::Idle {
            return Err(ServerError::SessionAlreadyActive);
        }
        r.n1 = Some(n1);
        r.bt1 = Some(bt1);
        r.session_state = SessionState::LoginBegun;
        r.session_deadline = Some(now + timeout);
        r.first_device = first_device;
        self.touch(em);
        Ok(())
    }

    /// Login steps 3-4: unwrap `E_N1(E_SK+S(AID))` and compare with the stored
    /// AID. Any failure ends the session.
    pub fn begin_login(
        &mut self,
        em: &str,
        enc_identifier: &Envelope,
        now: SimTime,
    ) -> Result<Salt, ServerError> {
        let r = self
            .store
            .records
            .get(em)
            .ok_or(ServerError::UnknownEmail)?;
        if r.session_state != SessionState::LoginBegun || r.identified {
            return Err(ServerError::InvalidState);
        }
        if r.expired(now) {
            self.reset_session(em);
            return Err(ServerError::SessionExpired);
        }
        let n1 = r.n1.clone().ok_or(ServerError::InvalidState)?;
        let matched = open(&derive_keys(&self.sk, &n1), enc_identifier)
            .and_then(|inner| Envelope::from_bytes(&inner))
            .and_then(|inner| open(&salted_keys(&self.sk, &r.salt), &inner))
            .is_ok_and(|aid| ct_eq(&aid, r.aid.as_bytes()));
        if !matched {
            self.reset_session(em);
            return Err(ServerError::IdentificationFailed);
        }
        let timeout = self.config.session_timeout_ms;
        let r = self.store.records.get_mut(em).expect("checked above");
        r.identified = true;
        r.session_deadline = Some(now + timeout);
        let salt = r.salt.clone();
        self.touch(em);
        self.step(crate::messages::Phase::Login, 3);
        Ok(salt)
    }

    /// Login steps 8-9: find the session whose AID+S opens the string, match
    /// biometrics, issue TOKEN sealed for `bt2`.
    pub fn verify_auth_string<R: RngCore + CryptoRng>(
        &mut self,
        env: &Envelope,
        bt2: BluetoothAddress,
        now: SimTime,
        rng: &mut R,
    ) -> Result<(SessionId, Envelope), ServerError> {
        let found = self.store.records.values().find_map(|r| {
            if r.session_state != SessionState::LoginBegun || !r.identified {
                return None;
            }
            open(&salted_keys(&r.aid, &r.salt), env)
                .ok()
                .map(|pt| (r.em.clone(), pt))
        });
        let Some((em, plaintext)) = found else {
            return Err(ServerError::NoMatchingUser);
        };
        if self.store.records[&em].expired(now) {
            self.reset_session(&em);
            return Err(ServerError::SessionExpired);
        }
        let auth = match decode_auth_string(&plaintext) {
            Ok(a) if a.em == em => a,
            _ => {
                self.reset_session(&em);
                return Err(ServerError::NoMatchingUser);
            }
        };
        let r = &self.store.records[&em];
        let matched = match (
            self.store.embeddings.fetch(&auth.login_fburl),
            self.store.embeddings.fetch(&r.reg_fburl),
        ) {
            (Ok(login), Ok(reg)) => biometric::verify(login, reg, self.config.match_threshold),
            _ => false,
        };
        if !matched {
            self.store.embeddings.remove(&auth.login_fburl);
            self.reset_session(&em);
            return Err(ServerError::BiometricMismatch);
        }
        self.step(crate::messages::Phase::Login, 8);
        let token = gen_token(rng);
        let timeout = self.config.session_timeout_ms;
        let r = self.store.records.get_mut(&em).expect("present");
        let bt1 = r.bt1.ok_or(ServerError::InvalidState)?;
        r.sid = Some(auth.sid);
        r.token = Some(token.clone());
        r.login_fburl = Some(auth.login_fburl);
        r.bt2 = Some(bt2);
        r.session_state = SessionState::AwaitingProximity;
        r.session_deadline = Some(now + timeout);
        let m = MatchMessage {
            token: token.clone(),
            bt1,
        };
        let env = seal_traced(
            &derive_bt_key(&bt2, auth.sid.as_bytes()),
            terms::bt_key(&bt2, &auth.sid),
            &m.encode(),
            Term::tuple(vec![
                Term::atom(MATCH_TAG),
                Term::atom(token.as_bytes()),
                terms::bt(&bt1),
            ]),
            rng,
            &mut self.seals,
        );
        self.touch(&em);
        Ok((auth.sid, env))
    }

    /// Login steps 12-13: accept `E_BT1(TOKEN)`, burn TOKEN, offer AID'.
    pub fn verify_proximity_token<R: RngCore + CryptoRng>(
        &mut self,
        env: &Envelope,
        now: SimTime,
        rng: &mut R,
        presenter: Option<PrincipalId>,
    ) -> Result<ProximityAccepted, ServerError> {
        let single_use = self.config.token_single_use;
        let live = |s: SessionState| {
            s == SessionState::AwaitingProximity
                || (!single_use
                    && matches!(
                        s,
                        SessionState::AwaitingRotationAck | SessionState::AwaitingOk
                    ))
        };
        let found = self.store.records.values().find_map(|r| {
            if !live(r.session_state) {
                return None;
            }
            let (bt1, sid) = (r.bt1?, r.sid?);
            open(&derive_bt_key(&bt1, sid.as_bytes()), env)
                .ok()
                .map(|pt| (r.em.clone(), pt))
        });
        let Some((em, pt)) = found else {
            let replayed = self.store.consumed_tokens.values().flatten().any(|c| {
                open(&derive_bt_key(&c.bt1, c.sid.as_bytes()), env)
                    .is_ok_and(|pt| ct_eq(&pt, c.token.as_bytes()))
            });
            return Err(if replayed {
                ServerError::TokenAlreadyConsumed
            } else {
                ServerError::TokenMismatch
            });
        };
        let r = &self.store.records[&em];
        if r.expired(now) {
            self.reset_session(&em);
            return Err(ServerError::SessionExpired);
        }
        if !r.token.as_ref().is_some_and(|t| ct_eq(&pt, t.as_bytes())) {
            return Err(ServerError::TokenMismatch);
        }
        if r.session_state != SessionState::AwaitingProximity {
            // Single-use disabled: the token still works and re-binds the session.
            let r = self.store.records.get_mut(&em).expect("present");
            r.holder = presenter;
            let first_device = r.first_device.clone();
            self.touch(&em);
            return Ok(ProximityAccepted {
                em,
                first_device,
                rotation: None,
            });
        }
        self.step(crate::messages::Phase::Login, 12);
        let aid_next = gen_secret(rng);
        let r = self.store.records.get_mut(&em).expect("present");
        let consumed = ConsumedToken {
            bt1: r.bt1.expect("set with token"),
            sid: r.sid.expect("set with token"),
            token: r.token.clone().expect("checked"),
        };
        if single_use {
            r.token = None;
        }
        r.session_state = SessionState::AwaitingRotationAck;
        r.holder = presenter;
        let (aid, salt, first_device) = (r.aid.clone(), r.salt.clone(), r.first_device.clone());
        if single_use {
            self.store
                .consumed_tokens
                .entry(em.clone())
                .or_default()
                .push(consumed);
        }
        let env = seal_traced(
            &aid_keys(&aid),
            terms::aid_key(&aid),
            aid_next.as_bytes(),
            terms::secret(&aid_next),
            rng,
            &mut self.seals,
        );
        self.store.pending_rotation.insert(em.clone(), aid_next);
        self.touch(&em);
        Ok(ProximityAccepted {
            em,
            first_device,
            rotation: Some((salt, env)),
        })
    }

    /// Login step 16: OK must verify under the *old* AID; then AID := AID'.
    pub fn verify_ok(
        &mut self,
        em: &str,
        env: &Envelope,
        now: SimTime,
    ) -> Result<LoginSuccess, ServerError> {
        let r = self
            .store
            .records
            .get(em)
            .ok_or(ServerError::UnknownEmail)?;
        if !matches!(
            r.session_state,
            SessionState::AwaitingRotationAck | SessionState::AwaitingOk
        ) {
            return Err(ServerError::InvalidState);
        }
        if r.expired(now) {
            self.reset_session(em);
            return Err(ServerError::SessionExpired);
        }
        let ok = open(&aid_keys(&r.aid), env).is_ok_and(|pt| ct_eq(&pt, OK_CHALLENGE));
        if !ok {
            self.reset_session(em);
            return Err(ServerError::LoginFailed);
        }
        let next = self
            .store
            .pending_rotation
            .remove(em)
            .ok_or(ServerError::InvalidState)?;
        let r = self.store.records.get_mut(em).expect("present");
        let sid = r.sid.ok_or(ServerError::InvalidState)?;
        let holder = r.holder.clone();
        r.aid = next;
        self.reset_session(em);
        self.events.push(ServerEvent::LoginSucceeded {
            em: em.to_owned(),
            sid,
            holder: holder.clone(),
            ok_envelope: env.clone(),
        });
        Ok(LoginSuccess {
            em: em.to_owned(),
            sid,
            holder,
        })
    }

    /// Resets every session whose deadline is at or before `now`.
    pub fn expire_sessions(&mut self, now: SimTime) -> usize {
        let expired: Vec<String> = self
            .store
            .records
            .values()
            .filter(|r| r.expired(now))
            .map(|r| r.em.clone())
            .collect();
        for em in &expired {
            self.reset_session(em);
        }
        expired.len()
    }

    // --- transport --------------------------------------------------------

    /// Handles one inbound message and returns the replies to send.
    pub fn handle<R: RngCore + CryptoRng>(
        &mut self,
        msg: &ProtocolMessage,
        now: SimTime,
        rng: &mut R,
    ) -> Vec<ProtocolMessage> {
        let out = self.dispatch(msg, now, rng);
        // Persistence failures surface as a transport error on the next
        // restart; the in-memory state stays authoritative for this run.
        let _ = self.flush();
        out
    }

    fn error_reply(&self, msg: &ProtocolMessage, e: &ServerError) -> ProtocolMessage {
        ProtocolMessage::new(
            self.id.clone(),
            msg.from.clone(),
            MessageBody::ErrorReply {
                code: e.code(),
                detail: e.to_string(),
            },
        )
    }

    fn dispatch<R: RngCore + CryptoRng>(
        &mut self,
        msg: &ProtocolMessage,
        now: SimTime,
        rng: &mut R,
    ) -> Vec<ProtocolMessage> {
        let me = self.id.clone();
        let to_sender = |body| vec![ProtocolMessage::new(me.clone(), msg.from.clone(), body)];
        match &msg.msg {
            MessageBody::SignUp { em, pwd, embedding } => {
                match self.register(em, pwd, embedding.clone(), rng) {
                    Ok((salt, enc_aid)) => to_sender(MessageBody::SignUpResponse { salt, enc_aid }),
                    Err(e) => vec![self.error_reply(msg, &e)],
                }
            }
            MessageBody::RegistrationConfirm { em, proof } => {
                let r = self.confirm_registration(em, proof);
                to_sender(MessageBody::RegistrationResult {
                    success: r.is_ok(),
                    reason: r.err().map(|e| e.to_string()),
                })
            }
            MessageBody::LoginBiometric { em, embedding } => {
                if !self.store.records.contains_key(em) {
                    return vec![self.error_reply(msg, &ServerError::UnknownEmail)];
                }
                let fburl = self.store.embeddings.store(embedding.clone(), rng);
                to_sender(MessageBody::BiometricStored { fburl })
            }
            MessageBody::LoginContextUpdate { em, n1, bt1 } => {
                match self.update_login_context(em, n1.clone(), *bt1, now, Some(msg.from.clone())) {
                    Ok(()) => to_sender(MessageBody::LoginContextAck { em: em.clone() }),
                    Err(e) => vec![self.error_reply(msg, &e)],
                }
            }
            MessageBody::IdentifierSubmit { em, identifier } => {
                match self.begin_login(em, identifier, now) {
                    Ok(salt) => to_sender(MessageBody::SaltResponse { salt }),
                    Err(e) => vec![self.error_reply(msg, &e)],
                }
            }
            MessageBody::AuthStringSubmit { auth, bt2 } => {
                match self.verify_auth_string(auth, *bt2, now, rng) {
                    Ok((sid, matched)) => to_sender(MessageBody::MatchResponse { sid, matched }),
                    Err(e) => vec![self.error_reply(msg, &e)],
                }
            }
            MessageBody::ProximityToken { proof } => {
                match self.verify_proximity_token(proof, now, rng, Some(msg.from.clone())) {
                    Ok(ProximityAccepted {
                        em,
                        first_device,
                        rotation: Some((salt, enc_aid_next)),
                    }) => {
                        let to = first_device.unwrap_or_else(|| msg.from.clone());
                        self.events
                            .push(ServerEvent::RotationOffered { em, to: to.clone() });
                        vec![ProtocolMessage::new(
                            self.id.clone(),
                            to,
                            MessageBody::RotationOffer { salt, enc_aid_next },
                        )]
                    }
                    Ok(ProximityAccepted { rotation: None, .. }) => Vec::new(),
                    Err(e) => vec![self.error_reply(msg, &e)],
                }
            }
            MessageBody::OkChallenge { em, ok } => {
                let holder = self.record(em).and_then(|r| r.holder.clone());
                let (body, holder) = match self.verify_ok(em, ok, now) {
                    Ok(s) => (
                        MessageBody::LoginResult {
                            success: true,
                            sid: Some(s.sid),
                            reason: None,
                        },
                        s.holder,
                    ),
                    Err(e @ ServerError::UnknownEmail) | Err(e @ ServerError::InvalidState) => {
                        return vec![self.error_reply(msg, &e)];
                    }
                    Err(e) => (
                        MessageBody::LoginResult {
                            success: false,
                            sid: None,
                            reason: Some(e.to_string()),
                        },
                        holder,
                    ),
                };
                let mut out = to_sender(body.clone());
                if let Some(h) = holder.filter(|h| *h != msg.from) {
                    out.push(ProtocolMessage::new(self.id.clone(), h, body));
                }
                out
            }
            other => {
                let detail = format!("server does not accept {}", other.kind());
                vec![ProtocolMessage::new(
                    self.id.clone(),
                    msg.from.clone(),
                    MessageBody::ErrorReply {
                        code: ErrorCode::UnexpectedMessage,
                        detail,
                    },
                )]
            }
        }
    }
}

impl ServerStore {
    fn embeddings_insert(&mut self, url: &FbUrl, e: FaceEmbedding) {
        self.embeddings.insert_at(url.clone(), e);
    }
}
