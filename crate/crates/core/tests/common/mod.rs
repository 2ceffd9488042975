//! Shared by several test targets. Not every target uses every item.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;
use tapauth::biometric::IdentityProfile;
use tapauth::crypto::gen_secret;
use tapauth::device::{Effect, FdPhase, FirstDevice, FirstDeviceStorage, SdPhase, SecondDevice};
use tapauth::harness::serve::ServeSession;
use tapauth::messages::{MessageBody, MessageKind, PrincipalId, ProtocolMessage};
use tapauth::server::{Server, ServerConfig, SessionState};
use tapauth::sim::{BluetoothAddress, ChannelKind};

pub const EM: &str = "alice@example.com";

/// Server state changes a single message may cause, written down
/// independently of the server's own table.
pub fn server_transition_ok(kind: MessageKind, from: SessionState, to: SessionState) -> bool {
    use SessionState::*;
    if from == to || to == Idle {
        return true;
    }
    matches!(
        (kind, from, to),
        (MessageKind::LoginContextUpdate, Idle, LoginBegun)
            | (MessageKind::AuthStringSubmit, LoginBegun, AwaitingProximity)
            | (
                MessageKind::ProximityToken,
                AwaitingProximity,
                AwaitingRotationAck
            )
            | (MessageKind::OkChallenge, AwaitingRotationAck, AwaitingOk)
    )
}

/// Phases in which the phone may accept each kind.
pub fn fd_accepts(kind: MessageKind, phase: FdPhase) -> bool {
    use FdPhase::*;
    match kind {
        MessageKind::SignUpResponse => phase == AwaitingSignUpResponse,
        MessageKind::RegistrationResult => phase == AwaitingRegistrationResult,
        MessageKind::BiometricStored => phase == AwaitingBiometricStored,
        MessageKind::LoginContextAck => phase == AwaitingContextAck,
        MessageKind::SaltResponse => phase == AwaitingSalt,
        MessageKind::RotationOffer => phase == AwaitingRotation,
        MessageKind::LoginResult => matches!(phase, AwaitingResult | AwaitingRotation),
        MessageKind::ErrorReply => phase != Idle,
        _ => false,
    }
}

/// Phases in which the desktop may accept each kind.
pub fn sd_accepts(kind: MessageKind, channel: ChannelKind, phase: SdPhase) -> bool {
    use SdPhase::*;
    match kind {
        MessageKind::NfcAuthString => channel == ChannelKind::Nfc && phase == Idle,
        MessageKind::MatchResponse => channel == ChannelKind::Https && phase == Submitted,
        MessageKind::LoginResult => channel == ChannelKind::Https && phase == TokenSent,
        MessageKind::ErrorReply => {
            channel == ChannelKind::Https && matches!(phase, Submitted | TokenSent)
        }
        _ => false,
    }
}

#[derive(Debug, Default, Clone)]
pub struct FuzzStats {
    pub delivered: usize,
    pub to_server: usize,
    pub to_phone: usize,
    pub to_desktop: usize,
    pub raw_lines: usize,
    pub logins: usize,
    pub states_seen: BTreeMap<String, usize>,
    pub violations: Vec<String>,
}

impl FuzzStats {
    fn violate(&mut self, what: String) {
        if self.violations.len() < 50 {
            self.violations.push(what);
        }
    }

    pub fn merge(&mut self, o: FuzzStats) {
        self.delivered += o.delivered;
        self.to_server += o.to_server;
        self.to_phone += o.to_phone;
        self.to_desktop += o.to_desktop;
        self.raw_lines += o.raw_lines;
        self.logins += o.logins;
        for (k, v) in o.states_seen {
            *self.states_seen.entry(k).or_default() += v;
        }
        for v in o.violations {
            self.violate(v);
        }
    }
}

impl fmt::Display for FuzzStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} messages (server {}, phone {}, desktop {}, raw {}), {} logins, {} violations",
            self.delivered,
            self.to_server,
            self.to_phone,
            self.to_desktop,
            self.raw_lines,
            self.logins,
            self.violations.len()
        )
    }
}

/// A server, a phone and a desktop wired through a network the fuzzer
/// controls: it picks what is delivered, when, how often and in what shape.
pub struct Chaos {
    server: ServeSession,
    fd: FirstDevice,
    sd: SecondDevice,
    pick: ChaCha20Rng,
    dev: ChaCha20Rng,
    now: u64,
    inflight: Vec<(ChannelKind, ProtocolMessage)>,
    history: Vec<(ChannelKind, ProtocolMessage)>,
    scanning: bool,
    timer_tags: Vec<u64>,
    /// Hex (or quoted text) of values the phone must never persist.
    forbidden: Vec<String>,
    /// Chance that a step is chaotic rather than the next honest move.
    noise: f64,
    pub stats: FuzzStats,
}

fn p(s: &str) -> PrincipalId {
    PrincipalId::new(s)
}

impl Chaos {
    pub fn new(seed: u64) -> Self {
        let mut setup = ChaCha20Rng::seed_from_u64(seed);
        let sk = gen_secret(&mut setup);
        let profile = IdentityProfile::random(0.02, &mut setup).unwrap();
        let server = Server::new(p("server"), sk.clone(), ServerConfig::default());
        let fd = FirstDevice::new(
            p("phone"),
            p("server"),
            BluetoothAddress::new([0xA0, 0, 0, 0, 0, 1]),
            profile,
            FirstDeviceStorage::new(sk),
        );
        let sd = SecondDevice::new(
            p("desktop"),
            p("server"),
            BluetoothAddress::new([0xB0, 0, 0, 0, 0, 2]),
            60_000,
        );
        Self {
            server: ServeSession::new(server, setup.gen()),
            fd,
            sd,
            pick: ChaCha20Rng::seed_from_u64(seed ^ 0xf022),
            dev: ChaCha20Rng::seed_from_u64(seed ^ 0xdef1),
            now: 0,
            inflight: Vec::new(),
            history: Vec::new(),
            scanning: false,
            timer_tags: Vec::new(),
            forbidden: Vec::new(),
            noise: [0.05, 0.2, 0.5, 1.0][(seed % 4) as usize],
            stats: FuzzStats::default(),
        }
    }

    fn emit(&mut self, from: &str, effects: Vec<Effect>) {
        for e in effects {
            match e {
                Effect::Send { channel, to, body } => {
                    self.inflight
                        .push((channel, ProtocolMessage::new(p(from), to, body)));
                }
                Effect::BleSearch { .. } => self.scanning = true,
                Effect::Timer { tag, .. } => self.timer_tags.push(tag),
                _ => {}
            }
        }
    }

    /// Session state as of `self.now`; a session past its deadline is
    /// already over even if nothing has reset it yet.
    fn effective_state(&self) -> Option<SessionState> {
        self.server().record(EM).map(|r| match r.session_deadline {
            Some(d) if d.as_millis() <= self.now => SessionState::Idle,
            _ => r.session_state,
        })
    }

    fn server(&self) -> &Server {
        self.server.server()
    }

    fn note_secrets(&mut self) {
        if let Some(r) = self.server().record(EM) {
            let mut add = vec![
                hex::encode(r.aid.as_bytes()),
                hex::encode(r.salt.as_bytes()),
            ];
            if let Some(n1) = &r.n1 {
                add.push(format!("\"{}\"", n1.as_str()));
            }
            if let Some(sid) = &r.sid {
                add.push(hex::encode(sid.as_bytes()));
            }
            for a in add {
                if !self.forbidden.contains(&a) {
                    self.forbidden.push(a);
                }
            }
        }
        if let Some(a) = self.fd.pending_auth_string() {
            let h = hex::encode(a.to_bytes());
            if !self.forbidden.contains(&h) {
                self.forbidden.push(h);
            }
        }
    }

    fn check_storage(&mut self) {
        self.note_secrets();
        let json = self.fd.storage().to_json();
        if let Some(f) = self.forbidden.iter().find(|f| json.contains(f.as_str())) {
            let f = f.clone();
            self.stats
                .violate(format!("phone persisted {}..", &f[..f.len().min(10)]));
        }
    }

    fn deliver(&mut self, channel: ChannelKind, msg: ProtocolMessage) {
        self.history.push((channel, msg.clone()));
        self.stats.delivered += 1;
        let kind = msg.kind();
        match msg.to.as_str() {
            "server" => {
                self.stats.to_server += 1;
                self.now += self.pick.gen_range(0..50);
                let before = self.effective_state();
                let line = serde_json::json!({"op": "handle", "t": self.now, "message": msg});
                self.server_line(&line.to_string(), Some((kind, before)));
            }
            "phone" => {
                self.stats.to_phone += 1;
                let phase = self.fd.phase();
                match self.fd.handle(&msg, &mut self.dev) {
                    Ok(fx) => {
                        if !fd_accepts(kind, phase) || msg.from != p("server") {
                            self.stats.violate(format!(
                                "phone accepted {kind} from {} in {phase:?}",
                                msg.from
                            ));
                        }
                        self.emit("phone", fx);
                    }
                    Err(_) => {
                        if self.fd.phase() != phase {
                            self.stats
                                .violate(format!("phone moved on rejected {kind}"));
                        }
                    }
                }
                self.check_storage();
            }
            "desktop" => {
                self.stats.to_desktop += 1;
                let phase = self.sd.phase();
                match self.sd.handle(&msg, channel, &mut self.dev) {
                    Ok(fx) => {
                        let from_ok = channel == ChannelKind::Nfc || msg.from == p("server");
                        if !sd_accepts(kind, channel, phase) || !from_ok {
                            self.stats.violate(format!(
                                "desktop accepted {kind} over {channel:?} in {phase:?}"
                            ));
                        }
                        self.emit("desktop", fx);
                    }
                    Err(_) => {
                        if self.sd.phase() != phase {
                            self.stats
                                .violate(format!("desktop moved on rejected {kind}"));
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn server_line(&mut self, line: &str, expect: Option<(MessageKind, Option<SessionState>)>) {
        let out = self.server.handle_line(line);
        let v: Value = serde_json::from_str(&out).expect("server answers JSON");
        let after = self.server().session_state(EM);
        let before = expect.and_then(|(_, b)| b);
        if let Some(s) = after {
            *self.stats.states_seen.entry(format!("{s:?}")).or_default() += 1;
        }
        if let (Some(b), Some(a)) = (before, after) {
            let kind = expect.map(|(k, _)| k);
            let ok = match kind {
                Some(k) => server_transition_ok(k, b, a),
                None => a == b || a == SessionState::Idle,
            };
            if !ok {
                self.stats
                    .violate(format!("server moved {b:?} -> {a:?} on {kind:?}"));
            }
        }
        let record = self
            .server()
            .record(EM)
            .map(|r| (r.session_state, r.token.is_some(), r.sid.is_some()));
        if let Some((state, has_token, has_sid)) = record {
            let active = matches!(
                state,
                SessionState::AwaitingProximity
                    | SessionState::AwaitingRotationAck
                    | SessionState::AwaitingOk
            );
            if has_token && state != SessionState::AwaitingProximity {
                self.stats.violate(format!("token held in {state:?}"));
            }
            if has_sid != active {
                self.stats
                    .violate(format!("sid presence wrong in {state:?}"));
            }
        }
        let mut succeeded = false;
        if let Some(replies) = v.get("replies").and_then(Value::as_array) {
            for r in replies {
                let m: ProtocolMessage = serde_json::from_value(r.clone()).unwrap();
                succeeded |= matches!(m.msg, MessageBody::LoginResult { success: true, .. });
                self.inflight.push((ChannelKind::Https, m));
            }
        }
        if succeeded {
            self.stats.logins += 1;
            if !matches!(
                before,
                Some(SessionState::AwaitingRotationAck | SessionState::AwaitingOk)
            ) {
                self.stats
                    .violate(format!("login succeeded from {before:?}"));
            }
        }
    }

    fn mutate(&mut self, mut msg: ProtocolMessage) -> Result<ProtocolMessage, String> {
        match self.pick.gen_range(0..6) {
            0 => {
                msg.from = p(["server", "phone", "desktop", "mallory"]
                    .choose(&mut self.pick)
                    .unwrap());
                Ok(msg)
            }
            1 => {
                msg.to = p(["server", "phone", "desktop"]
                    .choose(&mut self.pick)
                    .unwrap());
                Ok(msg)
            }
            _ => {
                let mut v = serde_json::to_value(&msg).unwrap();
                let mut leaves = Vec::new();
                collect_strings(&mut v, &mut leaves);
                if let Some(s) = leaves.choose_mut(&mut self.pick) {
                    mutate_string(s, &mut self.pick);
                }
                let text = v.to_string();
                serde_json::from_value(v).map_err(|_| text)
            }
        }
    }

    fn random_message(&mut self) -> Option<(ChannelKind, ProtocolMessage)> {
        let src = if !self.history.is_empty() && self.pick.gen_bool(0.7) {
            &self.history
        } else {
            &self.inflight
        };
        src.choose(&mut self.pick).cloned()
    }

    /// Delivers in order, taps, scans and starts logins, like the real
    /// network and a patient user would.
    fn honest_step(&mut self) {
        if !self.inflight.is_empty() {
            let (c, m) = self.inflight.remove(0);
            self.deliver(c, m);
        } else if self.fd.pending_auth_string().is_some() {
            self.step_op(85);
        } else if self.scanning {
            self.step_op(90);
        } else {
            self.step_op(80);
        }
    }

    pub fn step(&mut self) {
        if self.pick.gen_bool(self.noise) {
            let r = self.pick.gen_range(0..100);
            self.step_op(r);
        } else {
            self.honest_step();
        }
        if self.history.len() > 400 {
            self.history.drain(..200);
        }
        if self.inflight.len() > 64 {
            self.inflight.drain(..32);
        }
    }

    fn step_op(&mut self, r: u32) {
        match r {
            0..=44 if !self.inflight.is_empty() => {
                let (c, m) = self.inflight.remove(0);
                self.deliver(c, m);
            }
            45..=52 if !self.inflight.is_empty() => {
                let i = self.pick.gen_range(0..self.inflight.len());
                let (c, m) = self.inflight.remove(i);
                self.deliver(c, m);
            }
            53..=56 if !self.inflight.is_empty() => {
                let i = self.pick.gen_range(0..self.inflight.len());
                self.inflight.remove(i);
            }
            57..=64 => {
                if let Some((c, m)) = self.random_message() {
                    self.deliver(c, m);
                }
            }
            65..=74 => {
                if let Some((c, m)) = self.random_message() {
                    match self.mutate(m) {
                        Ok(m) => self.deliver(c, m),
                        Err(raw) => {
                            self.stats.delivered += 1;
                            self.stats.raw_lines += 1;
                            let line = format!(
                                "{{\"op\":\"handle\",\"t\":{},\"message\":{raw}}}",
                                self.now
                            );
                            self.server_line(&line, None);
                        }
                    }
                }
            }
            75..=82 => {
                let fx = if self.fd.storage().account.is_none() {
                    self.fd.start_registration(EM, "pw", &mut self.dev)
                } else {
                    self.fd.start_login(&mut self.dev)
                };
                if let Ok(fx) = fx {
                    self.emit("phone", fx);
                }
            }
            83..=88 => {
                if let Ok(auth) = self.fd.take_staged() {
                    self.check_storage();
                    self.inflight.push((
                        ChannelKind::Nfc,
                        ProtocolMessage::new(
                            p("phone"),
                            p("desktop"),
                            MessageBody::NfcAuthString { auth },
                        ),
                    ));
                }
            }
            89..=93 if self.scanning => {
                self.scanning = false;
                let found = self.pick.gen_bool(0.9);
                if let Ok(fx) = self.sd.on_scan_result(found, &mut self.dev) {
                    self.emit("desktop", fx);
                }
            }
            94..=95 => {
                if let Some(&tag) = self.timer_tags.choose(&mut self.pick) {
                    let fx = self.sd.on_timer(tag);
                    self.emit("desktop", fx);
                }
            }
            96..=97 => {
                self.now += self.pick.gen_range(0..120_000);
                let before = self.effective_state();
                let line = format!("{{\"op\":\"expire\",\"t\":{}}}", self.now);
                self.server_line(&line, before.map(|b| (MessageKind::ErrorReply, Some(b))));
            }
            98 => {
                self.fd = self.fd.restarted();
                let fx = self.fd.resume();
                self.emit("phone", fx);
                self.check_storage();
            }
            99 => {
                self.sd = self.sd.restarted();
                self.scanning = false;
            }
            _ => {
                if let Some((c, m)) = self.random_message() {
                    self.deliver(c, m);
                }
            }
        }
    }
}

fn collect_strings<'a>(v: &'a mut Value, out: &mut Vec<&'a mut String>) {
    match v {
        Value::String(s) => out.push(s),
        Value::Array(a) => a.iter_mut().for_each(|x| collect_strings(x, out)),
        Value::Object(o) => o.values_mut().for_each(|x| collect_strings(x, out)),
        _ => {}
    }
}

fn mutate_string(s: &mut String, rng: &mut ChaCha20Rng) {
    let is_hex = !s.is_empty() && s.bytes().all(|b| b.is_ascii_hexdigit());
    if is_hex && rng.gen_bool(0.8) {
        let mut b = hex::decode(&*s).unwrap_or_default();
        if b.is_empty() {
            return;
        }
        let i = rng.gen_range(0..b.len() * 8);
        b[i / 8] ^= 1 << (i % 8);
        *s = hex::encode(b);
    } else {
        *s = match rng.gen_range(0..4) {
            0 => String::new(),
            1 => "mallory@example.com".into(),
            2 => format!("{}x", s),
            _ => s.chars().rev().collect(),
        };
    }
}

/// Runs `messages` fuzz deliveries spread over fresh worlds of
/// `per_world` messages each.
pub fn fuzz(messages: usize, per_world: usize, seed: u64) -> FuzzStats {
    let mut total = FuzzStats::default();
    let mut world = 0u64;
    while total.delivered < messages {
        let mut c = Chaos::new(seed.wrapping_add(world));
        while c.stats.delivered < per_world && total.delivered + c.stats.delivered < messages {
            c.step();
        }
        total.merge(c.stats);
        world += 1;
    }
    total
}
