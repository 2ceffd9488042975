//! Executable threat model.
//!
//! [`observation`] decides what the attacker sees of each simulated event,
//! [`AttackerAgent`] is the attacker's own endpoint, and [`secrecy_report`]
//! closes the collected knowledge and checks it against the run's secrets.

pub mod provenance;
pub mod term;

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{derive_keys, gen_nonce10, gen_secret, seal, Envelope};
use crate::device::Effect;
use crate::messages::{MessageBody, MessageKind, PrincipalId, ProtocolMessage};
use crate::sim::{BluetoothAddress, ChannelKind};
use provenance::Provenance;
use term::{close_knowledge, terms, Atom, AttackerKnowledge, Term};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerCapabilities {
    /// Sees everything shown or typed on the victim's desktop.
    pub phish_ui_observe: bool,
    /// Forwards whatever a phishing page captures to the real site at once.
    pub rt_relay: bool,
    /// Operates the victim's desktop remotely from elsewhere.
    pub cr_remote_desktop: bool,
    /// Records traffic it can see and re-injects it later.
    pub replay: bool,
    /// Runs the phone app without the genuine SK.
    pub spoof_app: bool,
    /// Knows BT1 as a string.
    pub sniff_bt_addr: bool,
}

impl AttackerCapabilities {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (on, name) in [
            (self.phish_ui_observe, "phish_ui_observe"),
            (self.rt_relay, "rt_relay"),
            (self.cr_remote_desktop, "cr_remote_desktop"),
            (self.replay, "replay"),
            (self.spoof_app, "spoof_app"),
            (self.sniff_bt_addr, "sniff_bt_addr"),
        ] {
            if on {
                v.push(name);
            }
        }
        v
    }
}

/// Who is who, from the attacker's point of view.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdversaryView {
    pub caps: AttackerCapabilities,
    /// Endpoints the attacker operates at the protocol level; their HTTPS
    /// traffic is the attacker's own.
    pub controlled: BTreeSet<PrincipalId>,
    /// Devices whose screen the attacker can read.
    pub ui_observed: BTreeSet<PrincipalId>,
    /// Victim desktops whose page the attacker controls.
    pub hijacked: BTreeSet<PrincipalId>,
    /// The victim's own devices.
    pub victims: BTreeSet<PrincipalId>,
    /// Principals acting for the attacker in any way (used to decide
    /// whether a session ended up in the wrong hands).
    pub attacker_side: BTreeSet<PrincipalId>,
    /// Where the attacker's own radio sits, for NFC eavesdropping.
    pub eavesdropper: Option<PrincipalId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observation {
    Nothing,
    /// Ciphertext only: the envelopes carried by the message.
    EnvelopesOnly,
    Full,
}

/// Observation rule for one transport event. `eavesdropper_near` says
/// whether the attacker's radio is in NFC range of the sender.
pub fn observation(
    view: &AdversaryView,
    channel: ChannelKind,
    from: &PrincipalId,
    to: &PrincipalId,
    eavesdropper_near: bool,
) -> Observation {
    let endpoint = view.controlled.contains(from) || view.controlled.contains(to);
    match channel {
        ChannelKind::Https if endpoint => Observation::Full,
        ChannelKind::Https if view.caps.replay && view.victims.contains(from) => {
            Observation::EnvelopesOnly
        }
        ChannelKind::Https => Observation::Nothing,
        ChannelKind::Nfc if endpoint => Observation::Full,
        ChannelKind::Nfc
            if (view.caps.rt_relay
                || view.caps.cr_remote_desktop
                || view.caps.phish_ui_observe)
                && view.hijacked.contains(to) =>
        {
            Observation::Full
        }
        ChannelKind::Nfc if view.caps.replay && eavesdropper_near => Observation::Full,
        ChannelKind::Nfc | ChannelKind::BleScan => Observation::Nothing,
    }
}

pub fn observes_ui(view: &AdversaryView, device: &PrincipalId) -> bool {
    view.ui_observed.contains(device)
}

/// Symbolic form of every field of a message.
pub fn message_terms(body: &MessageBody, prov: &Provenance) -> Vec<Term> {
    let a = |b: &[u8]| Term::atom(b);
    let e = |env: &Envelope| prov.envelope_term(env);
    match body {
        MessageBody::SignUp { em, pwd, embedding } => {
            vec![
                a(em.as_bytes()),
                a(pwd.as_bytes()),
                a(&embedding.to_le_bytes()),
            ]
        }
        MessageBody::SignUpResponse { salt, enc_aid } => vec![a(salt.as_bytes()), e(enc_aid)],
        MessageBody::RegistrationConfirm { em, proof } => vec![a(em.as_bytes()), e(proof)],
        MessageBody::LoginBiometric { em, embedding } => {
            vec![a(em.as_bytes()), a(&embedding.to_le_bytes())]
        }
        MessageBody::BiometricStored { fburl } => vec![a(fburl.as_str().as_bytes())],
        MessageBody::LoginContextUpdate { em, n1, bt1 } => {
            vec![a(em.as_bytes()), a(n1.as_bytes()), terms::bt(bt1)]
        }
        MessageBody::LoginContextAck { em } => vec![a(em.as_bytes())],
        MessageBody::IdentifierSubmit { em, identifier } => vec![a(em.as_bytes()), e(identifier)],
        MessageBody::SaltResponse { salt } => vec![a(salt.as_bytes())],
        MessageBody::NfcAuthString { auth } => vec![e(auth)],
        MessageBody::AuthStringSubmit { auth, bt2 } => vec![e(auth), terms::bt(bt2)],
        MessageBody::MatchResponse { sid, matched } => vec![terms::sid(sid), e(matched)],
        MessageBody::ProximityToken { proof } => vec![e(proof)],
        MessageBody::RotationOffer { salt, enc_aid_next } => {
            vec![a(salt.as_bytes()), e(enc_aid_next)]
        }
        MessageBody::OkChallenge { em, ok } => vec![a(em.as_bytes()), e(ok)],
        MessageBody::LoginResult { sid, .. } => sid.iter().map(terms::sid).collect(),
        MessageBody::RegistrationResult { .. } | MessageBody::ErrorReply { .. } => Vec::new(),
    }
}

pub fn observed_terms(obs: Observation, body: &MessageBody, prov: &Provenance) -> Vec<Term> {
    match obs {
        Observation::Nothing => Vec::new(),
        Observation::EnvelopesOnly => body
            .envelopes()
            .into_iter()
            .map(|e| prov.envelope_term(e))
            .collect(),
        Observation::Full => message_terms(body, prov),
    }
}

/// Scripted moves the attacker can be told to make.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AttackAction {
    /// Submit the last captured NFC authentication string as its own.
    ReplayAuthString,
    /// Open a login context for `em`, then present the last captured
    /// identifier envelope.
    StaleIdentifier { em: String },
    /// Open a login context for `em` and present an identifier sealed
    /// under a key of its own.
    GuessIdentifier { em: String },
}

/// The attacker's own endpoint: relays captured strings to its hardware,
/// replays recorded envelopes, and runs scripted actions.
#[derive(Debug, Clone)]
pub struct AttackerAgent {
    id: PrincipalId,
    server: PrincipalId,
    bt: BluetoothAddress,
    /// Device an NFC emulator next to the attacker can tap.
    relay_to: Option<PrincipalId>,
    replay_tokens: bool,
    captured: BTreeMap<MessageKind, Vec<Envelope>>,
    replayed: BTreeSet<[u8; 32]>,
    received: Vec<MessageKind>,
}

impl AttackerAgent {
    pub fn new(id: PrincipalId, server: PrincipalId, bt: BluetoothAddress) -> Self {
        Self {
            id,
            server,
            bt,
            relay_to: None,
            replay_tokens: false,
            captured: BTreeMap::new(),
            replayed: BTreeSet::new(),
            received: Vec::new(),
        }
    }

    pub fn id(&self) -> &PrincipalId {
        &self.id
    }

    pub fn bt(&self) -> BluetoothAddress {
        self.bt
    }

    pub fn set_relay_to(&mut self, target: Option<PrincipalId>) {
        self.relay_to = target;
    }

    pub fn set_replay_tokens(&mut self, on: bool) {
        self.replay_tokens = on;
    }

    pub fn captured(&self, kind: MessageKind) -> &[Envelope] {
        self.captured.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Server replies seen so far, by kind.
    pub fn received(&self) -> &[MessageKind] {
        &self.received
    }

    /// Called with every message the observation rules let through.
    pub fn on_observe(&mut self, body: &MessageBody) -> Vec<Effect> {
        for env in body.envelopes() {
            self.captured
                .entry(body.kind())
                .or_default()
                .push(env.clone());
        }
        match body {
            MessageBody::ProximityToken { proof }
                if self.replay_tokens && self.replayed.insert(proof.digest()) =>
            {
                vec![Effect::https(
                    &self.server,
                    MessageBody::ProximityToken {
                        proof: proof.clone(),
                    },
                )]
            }
            _ => Vec::new(),
        }
    }

    pub fn handle(&mut self, msg: &ProtocolMessage) -> Vec<Effect> {
        self.received.push(msg.kind());
        match (&msg.msg, &self.relay_to) {
            (MessageBody::AuthStringSubmit { auth, .. }, Some(target)) => vec![Effect::Send {
                channel: ChannelKind::Nfc,
                to: target.clone(),
                body: MessageBody::NfcAuthString { auth: auth.clone() },
            }],
            _ => Vec::new(),
        }
    }

    pub fn act<R: RngCore + CryptoRng>(
        &mut self,
        action: &AttackAction,
        rng: &mut R,
    ) -> Vec<Effect> {
        match action {
            AttackAction::ReplayAuthString => {
                match self.captured(MessageKind::NfcAuthString).last() {
                    Some(auth) => {
                        vec![Effect::https(
                            &self.server,
                            MessageBody::AuthStringSubmit {
                                auth: auth.clone(),
                                bt2: self.bt,
                            },
                        )]
                    }
                    None => Vec::new(),
                }
            }
            AttackAction::StaleIdentifier { em } => {
                let Some(identifier) = self.captured(MessageKind::IdentifierSubmit).last().cloned()
                else {
                    return Vec::new();
                };
                vec![
                    Effect::https(
                        &self.server,
                        MessageBody::LoginContextUpdate {
                            em: em.clone(),
                            n1: gen_nonce10(rng),
                            bt1: self.bt,
                        },
                    ),
                    Effect::https(
                        &self.server,
                        MessageBody::IdentifierSubmit {
                            em: em.clone(),
                            identifier,
                        },
                    ),
                ]
            }
            AttackAction::GuessIdentifier { em } => {
                let n1 = gen_nonce10(rng);
                let guess = gen_secret(rng);
                let inner = seal(&derive_keys(&guess, &n1), guess.as_bytes(), rng);
                let identifier = seal(&derive_keys(&guess, &n1), &inner.to_bytes(), rng);
                vec![
                    Effect::https(
                        &self.server,
                        MessageBody::LoginContextUpdate {
                            em: em.clone(),
                            n1,
                            bt1: self.bt,
                        },
                    ),
                    Effect::https(
                        &self.server,
                        MessageBody::IdentifierSubmit {
                            em: em.clone(),
                            identifier,
                        },
                    ),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredSecret {
    pub name: String,
    pub digests: Vec<Atom>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretVerdict {
    pub name: String,
    pub safe: bool,
    /// Digests of the values that leaked.
    pub leaked: Vec<Atom>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthenticityVerdict {
    pub em: String,
    pub sealed_by: Option<PrincipalId>,
    pub old_aid_holder: Option<PrincipalId>,
    pub ok: bool,
}

/// An accepted OK challenge, as recorded by the simulator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedOk {
    pub em: String,
    pub sealed_by: Option<PrincipalId>,
    pub old_aid_holder: Option<PrincipalId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecrecyReport {
    pub secrets: Vec<SecretVerdict>,
    pub authenticity: Vec<AuthenticityVerdict>,
    pub knowledge_size: usize,
}

impl SecrecyReport {
    pub fn all_safe(&self) -> bool {
        self.secrets.iter().all(|s| s.safe) && self.authenticity.iter().all(|a| a.ok)
    }

    pub fn leaked_names(&self) -> Vec<String> {
        self.secrets
            .iter()
            .filter(|s| !s.safe)
            .map(|s| s.name.clone())
            .collect()
    }
}

/// Closes `observed` and reports, per declared secret, whether any of its
/// values is in the closure; and, per accepted OK, whether it was sealed by
/// the principal holding the AID it was checked against.
pub fn secrecy_report(
    observed: &[Term],
    secrets: &[DeclaredSecret],
    accepted: &[AcceptedOk],
) -> SecrecyReport {
    if observed.is_empty() && secrets.is_empty() && accepted.is_empty() {
        return SecrecyReport::default();
    }
    let mut k = AttackerKnowledge::with_public_labels();
    for t in observed {
        k.insert(t.clone());
    }
    let closed = close_knowledge(&k);
    let secrets = secrets
        .iter()
        .map(|s| {
            let leaked: Vec<Atom> = s
                .digests
                .iter()
                .filter(|d| closed.knows_atom(d))
                .copied()
                .collect();
            SecretVerdict {
                name: s.name.clone(),
                safe: leaked.is_empty(),
                leaked,
            }
        })
        .collect();
    let authenticity = accepted
        .iter()
        .map(|a| AuthenticityVerdict {
            em: a.em.clone(),
            sealed_by: a.sealed_by.clone(),
            old_aid_holder: a.old_aid_holder.clone(),
            ok: a.sealed_by.is_some() && a.sealed_by == a.old_aid_holder,
        })
        .collect();
    SecrecyReport {
        secrets,
        authenticity,
        knowledge_size: closed.len(),
    }
}

/// JSON summary of one attack run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub scenario: String,
    pub seed: u64,
    pub authenticated: bool,
    pub secrets_leaked: Vec<String>,
    pub steps: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> PrincipalId {
        PrincipalId::new(s)
    }

    fn view(caps: AttackerCapabilities) -> AdversaryView {
        AdversaryView {
            caps,
            controlled: [p("attacker")].into(),
            victims: [p("phone"), p("desk")].into(),
            hijacked: [p("desk")].into(),
            ..Default::default()
        }
    }

    #[test]
    fn https_between_honest_parties_is_opaque() {
        let all = AttackerCapabilities {
            phish_ui_observe: true,
            rt_relay: true,
            cr_remote_desktop: true,
            replay: false,
            spoof_app: true,
            sniff_bt_addr: true,
        };
        for (f, t) in [
            ("phone", "server"),
            ("server", "phone"),
            ("desk", "server"),
            ("server", "desk"),
        ] {
            assert_eq!(
                observation(&view(all), ChannelKind::Https, &p(f), &p(t), true),
                Observation::Nothing
            );
        }
        assert_eq!(
            observation(
                &view(all),
                ChannelKind::Https,
                &p("attacker"),
                &p("server"),
                false
            ),
            Observation::Full
        );
    }

    #[test]
    fn replay_sees_only_ciphertext_of_victim_uploads() {
        let caps = AttackerCapabilities {
            replay: true,
            ..Default::default()
        };
        assert_eq!(
            observation(
                &view(caps),
                ChannelKind::Https,
                &p("phone"),
                &p("server"),
                false
            ),
            Observation::EnvelopesOnly
        );
        assert_eq!(
            observation(
                &view(caps),
                ChannelKind::Https,
                &p("server"),
                &p("phone"),
                false
            ),
            Observation::Nothing
        );
        assert_eq!(
            observation(&view(caps), ChannelKind::Nfc, &p("phone"), &p("desk"), true),
            Observation::Full
        );
        assert_eq!(
            observation(
                &view(caps),
                ChannelKind::Nfc,
                &p("phone"),
                &p("desk"),
                false
            ),
            Observation::Nothing
        );
    }

    #[test]
    fn secrecy_report_flags_exactly_the_leaked_values() {
        let s = Term::atom(b"s");
        let k = vec![Term::atom(b"k")];
        let observed = vec![Term::enc(k.clone(), s.clone())];
        let secrets = vec![DeclaredSecret {
            name: "S".into(),
            digests: vec![Atom::of(b"s")],
        }];
        assert!(secrecy_report(&observed, &secrets, &[]).all_safe());
        let mut leaky = observed.clone();
        leaky.push(Term::atom(b"k"));
        let r = secrecy_report(&leaky, &secrets, &[]);
        assert_eq!(r.leaked_names(), vec!["S".to_string()]);
        assert_eq!(secrecy_report(&[], &[], &[]), SecrecyReport::default());
    }

    #[test]
    fn authenticity_requires_matching_sealer() {
        let ok = AcceptedOk {
            em: "e".into(),
            sealed_by: Some(p("phone")),
            old_aid_holder: Some(p("phone")),
        };
        let bad = AcceptedOk {
            sealed_by: Some(p("spoof")),
            ..ok.clone()
        };
        assert!(secrecy_report(&[], &[], &[ok]).all_safe());
        assert!(!secrecy_report(&[], &[], &[bad]).all_safe());
    }
}
