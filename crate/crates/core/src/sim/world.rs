//! The simulated world: one server, any number of devices, one optional
//! adversary, a topology and a single event queue.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::transcript::{Line, Transcript};
use super::{
    BluetoothAddress, ChannelKind, DeliveryHandle, EventQueue, Latencies, SimTime, Topology,
    TopologyError,
};
use crate::adversary::provenance::Provenance;
use crate::adversary::term::{Atom, Term};
use crate::adversary::{
    observation, observed_terms, observes_ui, AdversaryView, AttackAction, AttackerAgent,
    DeclaredSecret, Observation,
};
use crate::crypto::{sha256, SecretKey};
use crate::device::{DeviceOutcome, Effect, FirstDevice, SecondDevice};
use crate::messages::{
    encode_message, step_for, MessageBody, Phase, PrincipalId, ProtocolMessage, SessionId,
};
use crate::server::{FileStore, Server, ServerConfig, ServerEvent};

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Agent {
    First(FirstDevice),
    Second(SecondDevice),
    Attacker(AttackerAgent),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub latencies: Latencies,
    pub capture_payloads: bool,
    pub server: ServerConfig,
}

impl WorldConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            latencies: Latencies::default(),
            capture_payloads: false,
            server: ServerConfig::default(),
        }
    }
}

/// Something a user or script does at a given instant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Register { em: String, pwd: String },
    Login,
    Tap { to: PrincipalId },
    Move { location: String },
    Attack(AttackAction),
}

#[derive(Debug, Clone)]
enum Event {
    Deliver {
        channel: ChannelKind,
        msg: ProtocolMessage,
        sent_at: SimTime,
    },
    ScanDone {
        scanner: PrincipalId,
        target: BluetoothAddress,
        sent_at: SimTime,
    },
    Timer {
        device: PrincipalId,
        tag: u64,
    },
    Action {
        device: PrincipalId,
        action: Action,
    },
}

/// Fault injection: power-cycle every party right after login step
/// `after_step` completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crash {
    pub after_step: u8,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TapError {
    #[error("{from} and {to} are not in proximity")]
    NotInProximity { from: PrincipalId, to: PrincipalId },
    #[error("nothing staged for NFC transfer")]
    NothingStaged,
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(PrincipalId),
    #[error("{0} is not a first device")]
    NotAFirstDevice(PrincipalId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantViolation {
    pub t: SimTime,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoginRecord {
    pub t: SimTime,
    pub em: String,
    pub sid: SessionId,
    pub holder: Option<PrincipalId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub t: SimTime,
    pub channel: ChannelKind,
    pub from: PrincipalId,
    pub to: PrincipalId,
    pub kind: String,
}

#[derive(Debug, Default)]
struct SecretLedger {
    declared: BTreeMap<&'static str, BTreeSet<Atom>>,
    /// Hex of values the first device must never persist.
    storage_forbidden: BTreeSet<String>,
    /// Hex of values that must never cross a non-HTTPS channel.
    transport_forbidden: BTreeSet<String>,
}

impl SecretLedger {
    fn add(&mut self, name: &'static str, bytes: &[u8], in_storage: bool) {
        self.declared
            .entry(name)
            .or_default()
            .insert(Atom::of(bytes));
        self.transport_forbidden.insert(hex::encode(bytes));
        if in_storage {
            self.storage_forbidden.insert(hex::encode(bytes));
        }
    }
}

pub struct World {
    config: WorldConfig,
    queue: EventQueue<Event>,
    topology: Topology,
    server_id: PrincipalId,
    sk: SecretKey,
    server: Server,
    persistence: Option<FileStore>,
    agents: BTreeMap<PrincipalId, Agent>,
    rng: ChaCha20Rng,
    transcript: Transcript,
    provenance: Provenance,
    adversary: Option<AdversaryView>,
    attacker_id: Option<PrincipalId>,
    secrets: SecretLedger,
    outcomes: Vec<(SimTime, PrincipalId, DeviceOutcome)>,
    logins: Vec<LoginRecord>,
    aid_holder: BTreeMap<String, PrincipalId>,
    pending_holder: BTreeMap<String, PrincipalId>,
    violations: Vec<InvariantViolation>,
    crash: Option<Crash>,
    crash_pending: bool,
    crashes: usize,
    event_seq: u64,
    deliveries: Vec<Delivery>,
    rejections: usize,
}

impl World {
    pub fn new(
        config: WorldConfig,
        server_id: PrincipalId,
        sk: SecretKey,
        topology: Topology,
    ) -> Self {
        let server = Server::new(server_id.clone(), sk.clone(), config.server.clone());
        let mut secrets = SecretLedger::default();
        secrets.add("SK", sk.as_bytes(), false);
        Self {
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            config,
            queue: EventQueue::new(),
            topology,
            server_id,
            sk,
            server,
            persistence: None,
            agents: BTreeMap::new(),
            transcript: Transcript::new(),
            provenance: Provenance::new(),
            adversary: None,
            attacker_id: None,
            secrets,
            outcomes: Vec::new(),
            logins: Vec::new(),
            aid_holder: BTreeMap::new(),
            pending_holder: BTreeMap::new(),
            violations: Vec::new(),
            crash: None,
            crash_pending: false,
            crashes: 0,
            event_seq: 0,
            deliveries: Vec::new(),
            rejections: 0,
        }
    }

    /// Persist the server to `fs` after every handled message; crashes then
    /// restore from disk.
    pub fn with_persistence(mut self, fs: FileStore) -> Self {
        self.server = Server::new(
            self.server_id.clone(),
            self.sk.clone(),
            self.config.server.clone(),
        )
        .with_persistence(fs.clone());
        self.persistence = Some(fs);
        self
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn server_id(&self) -> &PrincipalId {
        &self.server_id
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut Server {
        &mut self.server
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn transcript_mut(&mut self) -> &mut Transcript {
        &mut self.transcript
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn outcomes(&self) -> &[(SimTime, PrincipalId, DeviceOutcome)] {
        &self.outcomes
    }

    pub fn logins(&self) -> &[LoginRecord] {
        &self.logins
    }

    pub fn violations(&self) -> &[InvariantViolation] {
        &self.violations
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    pub fn rejections(&self) -> usize {
        self.rejections
    }

    pub fn crashes(&self) -> usize {
        self.crashes
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn adversary(&self) -> Option<&AdversaryView> {
        self.adversary.as_ref()
    }

    pub fn agent(&self, id: &PrincipalId) -> Option<&Agent> {
        self.agents.get(id)
    }

    pub fn first(&self, id: &PrincipalId) -> Option<&FirstDevice> {
        match self.agents.get(id) {
            Some(Agent::First(d)) => Some(d),
            _ => None,
        }
    }

    pub fn first_mut(&mut self, id: &PrincipalId) -> Option<&mut FirstDevice> {
        match self.agents.get_mut(id) {
            Some(Agent::First(d)) => Some(d),
            _ => None,
        }
    }

    pub fn second(&self, id: &PrincipalId) -> Option<&SecondDevice> {
        match self.agents.get(id) {
            Some(Agent::Second(d)) => Some(d),
            _ => None,
        }
    }

    pub fn second_mut(&mut self, id: &PrincipalId) -> Option<&mut SecondDevice> {
        match self.agents.get_mut(id) {
            Some(Agent::Second(d)) => Some(d),
            _ => None,
        }
    }

    pub fn attacker(&self) -> Option<&AttackerAgent> {
        match self.attacker_id.as_ref().and_then(|id| self.agents.get(id)) {
            Some(Agent::Attacker(a)) => Some(a),
            _ => None,
        }
    }

    pub fn attacker_mut(&mut self) -> Option<&mut AttackerAgent> {
        match self
            .attacker_id
            .as_ref()
            .and_then(|id| self.agents.get_mut(id))
        {
            Some(Agent::Attacker(a)) => Some(a),
            _ => None,
        }
    }

    /// Registers an agent and places it. The agent's Bluetooth address (if
    /// any) becomes discoverable at its location.
    pub fn add_agent(&mut self, agent: Agent, location: &str) -> Result<(), TopologyError> {
        let (id, addr) = match &agent {
            Agent::First(d) => (d.id().clone(), Some(d.bt1())),
            Agent::Second(d) => (d.id().clone(), Some(d.bt2())),
            Agent::Attacker(a) => (a.id().clone(), Some(a.bt())),
        };
        self.topology.place(id.clone(), location, addr)?;
        if let Agent::Attacker(_) = agent {
            self.attacker_id = Some(id.clone());
        }
        self.agents.insert(id, agent);
        Ok(())
    }

    /// Places a passive device such as a Bluetooth beacon.
    pub fn place_beacon(
        &mut self,
        id: &PrincipalId,
        location: &str,
        addr: BluetoothAddress,
    ) -> Result<(), TopologyError> {
        self.topology.place(id.clone(), location, Some(addr))
    }

    pub fn set_adversary(&mut self, view: AdversaryView) {
        self.adversary = Some(view);
    }

    pub fn inject_crash(&mut self, crash: Option<Crash>) {
        self.crash = crash;
    }

    /// Adds `term` to the attacker's knowledge from outside the simulation
    /// (e.g. a value it is assumed to know up front).
    pub fn adversary_learns(&mut self, source: &str, term: Term) {
        let t = self.now();
        self.transcript.push(Line::Observe {
            t,
            source: source.to_owned(),
            term,
        });
    }

    pub fn move_device(
        &mut self,
        device: &PrincipalId,
        location: &str,
    ) -> Result<(), TopologyError> {
        self.topology.move_device(device, location)
    }

    pub fn ble_search(&self, scanner: &PrincipalId, target: &BluetoothAddress) -> bool {
        self.topology.ble_search(scanner, target)
    }

    pub fn schedule(
        &mut self,
        delay_ms: u64,
        device: &PrincipalId,
        action: Action,
    ) -> DeliveryHandle {
        self.queue.schedule(
            delay_ms,
            Event::Action {
                device: device.clone(),
                action,
            },
        )
    }

    pub fn schedule_at(
        &mut self,
        at: SimTime,
        device: &PrincipalId,
        action: Action,
    ) -> DeliveryHandle {
        self.queue.schedule_at(
            at,
            Event::Action {
                device: device.clone(),
                action,
            },
        )
    }

    // --- channels -----------------------------------------------------------

    fn is_endpoint(&self, p: &PrincipalId) -> bool {
        *p == self.server_id || self.agents.contains_key(p)
    }

    /// Puts a message on a channel. NFC requires proximity now; the
    /// adversary's observation rules are applied at send time.
    pub fn send(
        &mut self,
        channel: ChannelKind,
        from: &PrincipalId,
        to: &PrincipalId,
        body: MessageBody,
    ) -> Result<DeliveryHandle, TapError> {
        let now = self.now();
        let kind = body.kind().as_str().to_owned();
        if !self.is_endpoint(to) {
            self.transcript.push(Line::Refused {
                t: now,
                channel,
                kind,
                from: from.clone(),
                to: to.clone(),
                reason: "unknown endpoint".into(),
            });
            return Err(TapError::UnknownEndpoint(to.clone()));
        }
        if channel == ChannelKind::Nfc && !self.topology.proximate(from, to) {
            self.transcript.push(Line::Refused {
                t: now,
                channel,
                kind,
                from: from.clone(),
                to: to.clone(),
                reason: "not in proximity".into(),
            });
            return Err(TapError::NotInProximity {
                from: from.clone(),
                to: to.clone(),
            });
        }
        let msg = ProtocolMessage::new(from.clone(), to.clone(), body);
        if channel != ChannelKind::Https {
            let text = String::from_utf8(encode_message(&msg)).unwrap_or_default();
            if let Some(s) = self
                .secrets
                .transport_forbidden
                .iter()
                .find(|s| text.contains(s.as_str()))
            {
                self.violate(format!("secret {}.. crossed {channel}", &s[..8]));
            }
        }
        let latency = self.config.latencies.of(channel);
        let h = self.queue.schedule(
            latency,
            Event::Deliver {
                channel,
                msg: msg.clone(),
                sent_at: now,
            },
        );
        self.observe_send(channel, &msg);
        Ok(h)
    }

    fn observe_send(&mut self, channel: ChannelKind, msg: &ProtocolMessage) {
        let Some(view) = &self.adversary else { return };
        let near = view
            .eavesdropper
            .as_ref()
            .is_some_and(|e| *e != msg.from && self.topology.proximate(e, &msg.from));
        let obs = observation(view, channel, &msg.from, &msg.to, near);
        if obs == Observation::Nothing {
            return;
        }
        let now = self.now();
        let source = format!("{channel}:{}:{}->{}", msg.kind(), msg.from, msg.to);
        for term in observed_terms(obs, &msg.msg, &self.provenance) {
            self.transcript.push(Line::Observe {
                t: now,
                source: source.clone(),
                term,
            });
        }
        let Some(id) = self.attacker_id.clone() else {
            return;
        };
        if id == msg.from {
            return;
        }
        let effects = match self.agents.get_mut(&id) {
            Some(Agent::Attacker(a)) => a.on_observe(&msg.msg),
            _ => Vec::new(),
        };
        self.apply(&id, effects);
    }

    /// First-device NFC tap: hands the staged string to `to` and deletes the
    /// local copy.
    pub fn nfc_tap(
        &mut self,
        fd: &PrincipalId,
        to: &PrincipalId,
    ) -> Result<DeliveryHandle, TapError> {
        let staged = match self.agents.get(fd) {
            Some(Agent::First(d)) => d.pending_auth_string().is_some(),
            Some(_) => return Err(TapError::NotAFirstDevice(fd.clone())),
            None => return Err(TapError::UnknownEndpoint(fd.clone())),
        };
        if !staged {
            return Err(TapError::NothingStaged);
        }
        if !self.is_endpoint(to) {
            return Err(TapError::UnknownEndpoint(to.clone()));
        }
        if !self.topology.proximate(fd, to) {
            self.transcript.push(Line::Refused {
                t: self.now(),
                channel: ChannelKind::Nfc,
                kind: "nfc_auth_string".into(),
                from: fd.clone(),
                to: to.clone(),
                reason: "not in proximity".into(),
            });
            return Err(TapError::NotInProximity {
                from: fd.clone(),
                to: to.clone(),
            });
        }
        let auth = match self.agents.get_mut(fd) {
            Some(Agent::First(d)) => d.take_staged().map_err(|_| TapError::NothingStaged)?,
            _ => unreachable!("checked above"),
        };
        self.send(
            ChannelKind::Nfc,
            fd,
            to,
            MessageBody::NfcAuthString { auth },
        )
    }

    // --- event loop ---------------------------------------------------------

    /// Delivers every event due at or before `until`, in (time, insertion)
    /// order, then moves the clock to `until`.
    pub fn advance(&mut self, until: SimTime) -> Vec<Delivery> {
        let start = self.deliveries.len();
        while let Some((t, _, ev)) = self.queue.pop_due(until) {
            self.step_event(t, ev);
        }
        self.queue.advance_clock(until);
        self.deliveries[start..].to_vec()
    }

    /// Runs until nothing is pending or the next event is after `limit`.
    /// The clock stops at the last delivered event.
    pub fn run_until_idle(&mut self, limit: SimTime) -> usize {
        let start = self.deliveries.len();
        while let Some(t) = self.queue.peek_time() {
            if t > limit {
                break;
            }
            while let Some((t, _, ev)) = self.queue.pop_due(t) {
                self.step_event(t, ev);
            }
        }
        self.deliveries.len() - start
    }

    fn step_event(&mut self, t: SimTime, ev: Event) {
        if self.server.expire_sessions(t) > 0 {
            let _ = self.server.flush();
        }
        self.process(t, ev);
        self.check_invariants();
        if self.crash_pending {
            self.crash_pending = false;
            self.crash_now();
        }
    }

    fn process(&mut self, t: SimTime, ev: Event) {
        match ev {
            Event::Deliver {
                channel,
                msg,
                sent_at,
            } => self.deliver(t, channel, msg, sent_at),
            Event::ScanDone {
                scanner,
                target,
                sent_at,
            } => {
                let found = self.topology.ble_search(&scanner, &target);
                let payload = format!("{target} found={found}");
                self.record_event(
                    t,
                    sent_at,
                    ChannelKind::BleScan,
                    "ble_search",
                    &scanner,
                    &scanner,
                    payload.as_bytes(),
                );
                let r = match self.agents.get_mut(&scanner) {
                    Some(Agent::Second(sd)) => sd.on_scan_result(found, &mut self.rng),
                    _ => Ok(Vec::new()),
                };
                self.apply_result(&scanner, r.map_err(|e| e.to_string()));
            }
            Event::Timer { device, tag } => {
                let effects = match self.agents.get_mut(&device) {
                    Some(Agent::Second(sd)) => sd.on_timer(tag),
                    _ => Vec::new(),
                };
                self.apply(&device, effects);
            }
            Event::Action { device, action } => self.perform(&device, action),
        }
    }

    fn perform(&mut self, device: &PrincipalId, action: Action) {
        let r: Result<Vec<Effect>, String> = match (&action, self.agents.get_mut(device)) {
            (Action::Register { em, pwd }, Some(Agent::First(d))) => d
                .start_registration(em, pwd, &mut self.rng)
                .map_err(|e| e.to_string()),
            (Action::Login, Some(Agent::First(d))) => {
                d.start_login(&mut self.rng).map_err(|e| e.to_string())
            }
            (Action::Tap { to }, _) => {
                let to = to.clone();
                return match self.nfc_tap(device, &to) {
                    Ok(_) => {}
                    Err(e) => self.reject(device, e.to_string()),
                };
            }
            (Action::Move { location }, _) => {
                let location = location.clone();
                if let Err(e) = self.move_device(device, &location) {
                    self.reject(device, e.to_string());
                }
                return;
            }
            (Action::Attack(a), Some(Agent::Attacker(att))) => Ok(att.act(a, &mut self.rng)),
            _ => Err(format!("{device} cannot perform {action:?}")),
        };
        self.apply_result(device, r);
    }

    fn reject(&mut self, device: &PrincipalId, reason: String) {
        self.rejections += 1;
        let t = self.now();
        self.transcript.push(Line::Ui {
            t,
            device: device.clone(),
            text: format!("rejected: {reason}"),
        });
    }

    fn apply_result(&mut self, who: &PrincipalId, r: Result<Vec<Effect>, String>) {
        match r {
            Ok(effects) => self.apply(who, effects),
            Err(reason) => {
                self.collect_seals(who);
                self.reject(who, reason);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record_event(
        &mut self,
        t: SimTime,
        sent_at: SimTime,
        channel: ChannelKind,
        kind: &str,
        from: &PrincipalId,
        to: &PrincipalId,
        payload: &[u8],
    ) {
        self.event_seq += 1;
        self.transcript.push(Line::Event {
            seq: self.event_seq,
            t,
            sent_at,
            channel,
            kind: kind.to_owned(),
            from: from.clone(),
            to: to.clone(),
            payload_digest: hex::encode(sha256(payload)),
            payload_hex: self.config.capture_payloads.then(|| hex::encode(payload)),
        });
        self.deliveries.push(Delivery {
            t,
            channel,
            from: from.clone(),
            to: to.clone(),
            kind: kind.to_owned(),
        });
    }

    fn deliver(
        &mut self,
        t: SimTime,
        channel: ChannelKind,
        msg: ProtocolMessage,
        sent_at: SimTime,
    ) {
        let kind = msg.kind();
        self.record_event(
            t,
            sent_at,
            channel,
            kind.as_str(),
            &msg.from,
            &msg.to,
            &encode_message(&msg),
        );
        if let Some(step) = step_for(kind) {
            if step.messages.last() == Some(&kind) {
                self.emit_step(step.phase, step.number);
            }
        }
        if msg.to == self.server_id {
            if channel != ChannelKind::Https {
                self.reject(&msg.to, format!("{kind} over {channel}"));
                return;
            }
            let replies = self.server.handle(&msg, t, &mut self.rng);
            let seals = self.server.take_seals();
            self.provenance.record(&self.server_id, seals);
            for ev in self.server.take_events() {
                self.on_server_event(ev, &msg.from);
            }
            self.track_server_secrets();
            let server_id = self.server_id.clone();
            for r in replies {
                let _ = self.send(ChannelKind::Https, &server_id, &r.to, r.msg);
            }
            return;
        }
        let to = msg.to.clone();
        let r = match self.agents.get_mut(&to) {
            Some(Agent::First(d)) if channel == ChannelKind::Https => {
                d.handle(&msg, &mut self.rng).map_err(|e| e.to_string())
            }
            Some(Agent::First(_)) => Err(format!("{kind} over {channel}")),
            Some(Agent::Second(d)) => d
                .handle(&msg, channel, &mut self.rng)
                .map_err(|e| e.to_string()),
            Some(Agent::Attacker(a)) => Ok(a.handle(&msg)),
            None => Err("unknown endpoint".into()),
        };
        self.apply_result(&to, r);
    }

    fn on_server_event(&mut self, ev: ServerEvent, from: &PrincipalId) {
        let t = self.now();
        match ev {
            ServerEvent::Registered { em } => {
                self.aid_holder.insert(em, from.clone());
            }
            ServerEvent::RotationOffered { em, to } => {
                self.pending_holder.insert(em, to);
            }
            ServerEvent::StepCompleted { phase, step } => self.emit_step(phase, step),
            ServerEvent::LoginSucceeded {
                em,
                sid,
                holder,
                ok_envelope,
            } => {
                let sealed_by = self
                    .provenance
                    .origin(&ok_envelope)
                    .map(|o| o.sealer.clone());
                let old_aid_holder = self.aid_holder.get(&em).cloned();
                self.transcript.push(Line::AcceptOk {
                    t,
                    em: em.clone(),
                    sealed_by,
                    old_aid_holder,
                    holder: holder.clone(),
                });
                if let Some(next) = self.pending_holder.remove(&em) {
                    self.aid_holder.insert(em.clone(), next);
                }
                self.logins.push(LoginRecord { t, em, sid, holder });
            }
        }
    }

    fn collect_seals(&mut self, who: &PrincipalId) {
        let seals = match self.agents.get_mut(who) {
            Some(Agent::First(d)) => d.take_seals(),
            Some(Agent::Second(d)) => d.take_seals(),
            _ => Vec::new(),
        };
        self.provenance.record(who, seals);
    }

    fn apply(&mut self, who: &PrincipalId, effects: Vec<Effect>) {
        self.collect_seals(who);
        let now = self.now();
        for e in effects {
            match e {
                Effect::Send { channel, to, body } => {
                    let _ = self.send(channel, who, &to, body);
                }
                Effect::BleSearch { target } => {
                    let latency = self.config.latencies.ble_ms;
                    self.queue.schedule(
                        latency,
                        Event::ScanDone {
                            scanner: who.clone(),
                            target,
                            sent_at: now,
                        },
                    );
                }
                Effect::Timer { delay_ms, tag } => {
                    self.queue.schedule(
                        delay_ms,
                        Event::Timer {
                            device: who.clone(),
                            tag,
                        },
                    );
                }
                Effect::ReadyToTap => {
                    if let Some(target) = self.first(who).and_then(|d| d.tap_target().cloned()) {
                        if let Err(e) = self.nfc_tap(who, &target) {
                            self.reject(who, e.to_string());
                        }
                    }
                }
                Effect::Ui(text) => {
                    if self.adversary.as_ref().is_some_and(|v| observes_ui(v, who)) {
                        self.transcript.push(Line::Observe {
                            t: now,
                            source: format!("ui:{who}"),
                            term: Term::atom(text.as_bytes()),
                        });
                    }
                    self.transcript.push(Line::Ui {
                        t: now,
                        device: who.clone(),
                        text,
                    });
                }
                Effect::Step { phase, step } => self.emit_step(phase, step),
                Effect::Outcome(outcome) => {
                    self.transcript.push(Line::Outcome {
                        t: now,
                        device: who.clone(),
                        outcome: outcome.clone(),
                    });
                    self.outcomes.push((now, who.clone(), outcome));
                }
            }
        }
    }

    fn emit_step(&mut self, phase: Phase, step: u8) {
        let t = self.now();
        // One message kind can fan out (LoginResult goes to the phone and
        // the desktop); the step still completes once.
        let repeat = matches!(self.transcript.lines().iter().rev().find(|l| matches!(l, Line::Step { .. })),
            Some(Line::Step { t: lt, phase: lp, step: ls }) if *lt == t && *lp == phase && *ls == step);
        if repeat {
            return;
        }
        self.transcript.push(Line::Step { t, phase, step });
        if phase == Phase::Login && self.crash.is_some_and(|c| c.after_step == step) {
            self.crash = None;
            self.crash_pending = true;
        }
    }

    /// Power-cycles everything: in-flight messages are lost, devices keep
    /// only persistent storage, the server reloads its last committed state.
    pub fn crash_now(&mut self) {
        let t = self.now();
        let after_step = self
            .transcript
            .steps()
            .filter(|(_, p, _)| *p == Phase::Login)
            .last()
            .map_or(0, |(_, _, s)| s);
        self.queue.retain(|e| matches!(e, Event::Action { .. }));
        for agent in self.agents.values_mut() {
            match agent {
                Agent::First(d) => *d = d.restarted(),
                Agent::Second(d) => *d = d.restarted(),
                Agent::Attacker(_) => {}
            }
        }
        let docs = match &self.persistence {
            Some(fs) => fs.load_all().unwrap_or_default(),
            None => self.server.documents(),
        };
        let mut server = Server::restore(
            self.server_id.clone(),
            self.sk.clone(),
            self.config.server.clone(),
            docs,
        );
        if let Some(fs) = &self.persistence {
            server = server.with_persistence(fs.clone());
        }
        self.server = server;
        self.crashes += 1;
        self.transcript.push(Line::Crash { t, after_step });
        let ids: Vec<PrincipalId> = self.agents.keys().cloned().collect();
        for id in ids {
            let effects = match self.agents.get_mut(&id) {
                Some(Agent::First(d)) => d.resume(),
                _ => Vec::new(),
            };
            self.apply(&id, effects);
        }
    }

    // --- secrets and invariants -------------------------------------------

    fn track_server_secrets(&mut self) {
        let store = self.server.store();
        let mut adds: Vec<(&'static str, Vec<u8>, bool)> = Vec::new();
        for r in store.records.values() {
            adds.push(("AID", r.aid.as_bytes().to_vec(), true));
            self.secrets.storage_forbidden.insert(r.salt.to_hex());
            if let Some(n1) = &r.n1 {
                self.secrets
                    .storage_forbidden
                    .insert(n1.as_str().to_owned());
            }
            if let Some(sid) = &r.sid {
                self.secrets
                    .storage_forbidden
                    .insert(hex::encode(sid.as_bytes()));
            }
            if let Some(tok) = &r.token {
                adds.push(("TOKEN", tok.as_bytes().to_vec(), true));
            }
        }
        for next in store.pending_rotation.values() {
            adds.push(("aid_next", next.as_bytes().to_vec(), true));
        }
        for (name, bytes, st) in adds {
            self.secrets.add(name, &bytes, st);
        }
    }

    /// Secrets of this run, by name, as digests.
    pub fn declared_secrets(&self) -> Vec<DeclaredSecret> {
        self.secrets
            .declared
            .iter()
            .map(|(name, atoms)| DeclaredSecret {
                name: (*name).to_owned(),
                digests: atoms.iter().copied().collect(),
            })
            .collect()
    }

    fn violate(&mut self, what: String) {
        let t = self.now();
        self.violations.push(InvariantViolation { t, what });
    }

    /// Storage minimality and single residence of the authentication string.
    pub fn check_invariants(&mut self) {
        let mut found = Vec::new();
        let mut pending = Vec::new();
        let mut received = Vec::new();
        for (id, a) in &self.agents {
            match a {
                Agent::First(d) => {
                    let json = d.storage().to_json();
                    if let Some(s) = self
                        .secrets
                        .storage_forbidden
                        .iter()
                        .find(|s| json.contains(s.as_str()))
                    {
                        found.push(format!(
                            "{id} persisted a forbidden value {}..",
                            &s[..s.len().min(8)]
                        ));
                    }
                    if let Some(p) = d.pending_auth_string() {
                        pending.push((id.clone(), p.clone()));
                    }
                }
                Agent::Second(d) => {
                    if let Some(r) = d.received_auth_string() {
                        received.push((id.clone(), r.clone()));
                    }
                }
                Agent::Attacker(_) => {}
            }
        }
        for (fd, p) in &pending {
            for (sd, r) in &received {
                if p == r {
                    found.push(format!("authentication string held by both {fd} and {sd}"));
                }
            }
        }
        for f in found {
            self.violate(f);
        }
    }

    pub fn finish_transcript(&mut self) {
        self.track_server_secrets();
        let secrets = self.declared_secrets();
        self.transcript.push(Line::Secrets { secrets });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biometric::IdentityProfile;
    use crate::crypto::gen_secret;
    use crate::device::FirstDeviceStorage;

    fn p(s: &str) -> PrincipalId {
        PrincipalId::new(s)
    }

    fn world() -> World {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let sk = gen_secret(&mut rng);
        let topo = Topology::new(["home", "away"]);
        let mut w = World::new(WorldConfig::new(1), p("server"), sk.clone(), topo);
        let fd = FirstDevice::new(
            p("phone"),
            p("server"),
            BluetoothAddress::new([1; 6]),
            IdentityProfile::random(0.02, &mut rng).unwrap(),
            FirstDeviceStorage::new(sk),
        );
        w.add_agent(Agent::First(fd), "home").unwrap();
        let sd = SecondDevice::new(
            p("desk"),
            p("server"),
            BluetoothAddress::new([2; 6]),
            60_000,
        );
        w.add_agent(Agent::Second(sd), "home").unwrap();
        w
    }

    fn nfc(w: &mut World, from: &str, to: &str) -> Result<DeliveryHandle, TapError> {
        let env = crate::crypto::seal(
            &crate::crypto::aid_keys(&gen_secret(w.rng())),
            b"x",
            &mut ChaCha20Rng::seed_from_u64(3),
        );
        w.send(
            ChannelKind::Nfc,
            &p(from),
            &p(to),
            MessageBody::NfcAuthString { auth: env },
        )
    }

    #[test]
    fn https_latency_and_closed_interval() {
        let mut w = world();
        let body = MessageBody::LoginContextAck { em: "x".into() };
        w.send(ChannelKind::Https, &p("server"), &p("phone"), body)
            .unwrap();
        assert!(w.advance(SimTime(19)).is_empty());
        let d = w.advance(SimTime(20));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].t, SimTime(20));
    }

    #[test]
    fn nfc_needs_proximity() {
        let mut w = world();
        assert!(nfc(&mut w, "phone", "desk").is_ok());
        w.move_device(&p("phone"), "away").unwrap();
        assert_eq!(
            nfc(&mut w, "phone", "desk"),
            Err(TapError::NotInProximity {
                from: p("phone"),
                to: p("desk")
            })
        );
        assert!(w
            .transcript()
            .lines()
            .iter()
            .any(|l| matches!(l, Line::Refused { .. })));
    }

    #[test]
    fn same_instant_sends_keep_insertion_order() {
        let mut w = world();
        for em in ["a", "b", "c"] {
            w.send(
                ChannelKind::Https,
                &p("server"),
                &p("desk"),
                MessageBody::LoginContextAck { em: em.into() },
            )
            .unwrap();
        }
        let d = w.advance(SimTime(100));
        assert_eq!(d.len(), 3);
        let seqs: Vec<u64> = w
            .transcript()
            .lines()
            .iter()
            .filter_map(|l| match l {
                Line::Event { seq, .. } => Some(*seq),
                _ => None,
            })
            .collect();
        assert_eq!(seqs, vec![1, 2, 3]);
    }

    #[test]
    fn empty_queue_moves_clock() {
        let mut w = world();
        assert!(w.advance(SimTime(500)).is_empty());
        assert_eq!(w.now(), SimTime(500));
    }

    #[test]
    fn ble_search_follows_moves() {
        let mut w = world();
        let bt1 = BluetoothAddress::new([1; 6]);
        assert!(w.ble_search(&p("desk"), &bt1));
        w.move_device(&p("phone"), "away").unwrap();
        assert!(!w.ble_search(&p("desk"), &bt1));
        w.move_device(&p("phone"), "away").unwrap();
        assert!(!w.ble_search(&p("desk"), &bt1));
        assert!(!w.ble_search(&p("desk"), &BluetoothAddress::new([9; 6])));
    }

    #[test]
    fn tap_requires_staging() {
        let mut w = world();
        assert_eq!(
            w.nfc_tap(&p("phone"), &p("desk")),
            Err(TapError::NothingStaged)
        );
        assert_eq!(
            w.nfc_tap(&p("desk"), &p("phone")),
            Err(TapError::NotAFirstDevice(p("desk")))
        );
    }

    #[test]
    fn world_is_send() {
        fn assert_send<T: Send>() {}
        assert_send::<World>();
    }
}
