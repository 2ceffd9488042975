use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::adversary::AttackerCapabilities;
use crate::sim::{BluetoothAddress, Latencies};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    HonestLogin,
    RotationCrash,
    RtMitm,
    CrMitm,
    MbePhish,
    Replay,
    SpoofApp,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::HonestLogin,
        ScenarioKind::RotationCrash,
        ScenarioKind::RtMitm,
        ScenarioKind::CrMitm,
        ScenarioKind::MbePhish,
        ScenarioKind::Replay,
        ScenarioKind::SpoofApp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::HonestLogin => "honest_login",
            ScenarioKind::RotationCrash => "rotation_crash",
            ScenarioKind::RtMitm => "rt_mitm",
            ScenarioKind::CrMitm => "cr_mitm",
            ScenarioKind::MbePhish => "mbe_phish",
            ScenarioKind::Replay => "replay",
            ScenarioKind::SpoofApp => "spoof_app",
        }
    }

    pub fn is_attack(self) -> bool {
        !matches!(
            self,
            ScenarioKind::HonestLogin | ScenarioKind::RotationCrash
        )
    }

    /// Capabilities the attacker gets unless the config says otherwise.
    pub fn default_capabilities(self) -> AttackerCapabilities {
        let base = AttackerCapabilities {
            sniff_bt_addr: true,
            ..Default::default()
        };
        match self {
            ScenarioKind::HonestLogin | ScenarioKind::RotationCrash => {
                AttackerCapabilities::default()
            }
            ScenarioKind::RtMitm => AttackerCapabilities {
                phish_ui_observe: true,
                rt_relay: true,
                ..base
            },
            ScenarioKind::CrMitm => AttackerCapabilities {
                cr_remote_desktop: true,
                ..base
            },
            ScenarioKind::MbePhish => AttackerCapabilities {
                phish_ui_observe: true,
                ..base
            },
            ScenarioKind::Replay => AttackerCapabilities {
                replay: true,
                ..base
            },
            ScenarioKind::SpoofApp => AttackerCapabilities {
                spoof_app: true,
                ..base
            },
        }
    }
}

/// High-level result of a scenario run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunOutcome {
    LoginSuccess,
    LoginFailed,
    RegistrationFailed,
    /// A crash interrupted the login and the account still works.
    Recovered,
    /// After a crash neither the old nor the new AID authenticates.
    Lockout,
    AttackFailed,
    AttackSucceeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    pub bt: BluetoothAddress,
    pub location: String,
}

impl DeviceSpec {
    fn new(id: &str, bt: [u8; 6], location: &str) -> Self {
        Self {
            id: id.into(),
            bt: BluetoothAddress::new(bt),
            location: location.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySpec {
    pub locations: Vec<String>,
    /// Pairs of locations within radio range of each other.
    pub adjacent: Vec<[String; 2]>,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self {
            locations: vec!["home".into(), "lair".into()],
            adjacent: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSpec {
    pub email: String,
    pub password: String,
    pub phone: DeviceSpec,
    pub desktop: DeviceSpec,
}

impl Default for VictimSpec {
    fn default() -> Self {
        Self {
            email: "alice@example.com".into(),
            password: "correct horse".into(),
            phone: DeviceSpec::new("victim_phone", [0xA0, 0, 0, 0, 0, 0x01], "home"),
            desktop: DeviceSpec::new("victim_desktop", [0xB0, 0, 0, 0, 0, 0x02], "home"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerSpec {
    /// Absent means the kind's default set.
    pub capabilities: Option<AttackerCapabilities>,
    pub agent: DeviceSpec,
    pub desktop: DeviceSpec,
    pub spoof_app: DeviceSpec,
}

impl Default for AttackerSpec {
    fn default() -> Self {
        Self {
            capabilities: None,
            agent: DeviceSpec::new("attacker", [0xC0, 0, 0, 0, 0, 0x03], "lair"),
            desktop: DeviceSpec::new("attacker_desktop", [0xD0, 0, 0, 0, 0, 0x04], "lair"),
            spoof_app: DeviceSpec::new("spoof_app", [0xE0, 0, 0, 0, 0, 0x05], "lair"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timings {
    pub latencies: Latencies,
    pub session_timeout_ms: u64,
    /// When the victim starts logging in, relative to the end of registration.
    pub login_delay_ms: u64,
    /// Hard stop for the whole run, in simulated time.
    pub deadline_ms: u64,
}

impl Default for Timings {
    fn default() -> Self {
        Self {
            latencies: Latencies::default(),
            session_timeout_ms: crate::server::DEFAULT_SESSION_TIMEOUT_MS,
            login_delay_ms: 1_000,
            deadline_ms: 3_600_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiometricParams {
    pub sigma: f64,
    pub threshold: f64,
}

impl Default for BiometricParams {
    fn default() -> Self {
        Self {
            sigma: 0.02,
            threshold: crate::biometric::DEFAULT_MATCH_THRESHOLD,
        }
    }
}

/// Switches that remove one defence each. Used as positive controls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Controls {
    pub skip_proximity_check: bool,
    pub token_single_use: bool,
    pub leak_sk: bool,
}

impl Default for Controls {
    fn default() -> Self {
        Self {
            skip_proximity_check: false,
            token_single_use: true,
            leak_sk: false,
        }
    }
}

impl Controls {
    pub fn any_disabled(&self) -> bool {
        self.skip_proximity_check || !self.token_single_use || self.leak_sk
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub after_step: u8,
}

/// What the run must show. Unset fields take the kind's default.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectations {
    pub outcome: Option<RunOutcome>,
    pub authenticated_as_victim: Option<bool>,
    /// Secrets that must stay outside the attacker's knowledge.
    pub safe: Option<Vec<String>>,
    /// Every accepted OK was sealed by the holder of the old AID.
    pub ok_provenance: Option<bool>,
}

pub const SECRET_NAMES: [&str; 4] = ["SK", "AID", "aid_next", "TOKEN"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedExpectations {
    pub outcome: RunOutcome,
    pub authenticated_as_victim: bool,
    pub safe: Vec<String>,
    pub ok_provenance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub kind: ScenarioKind,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub victim: VictimSpec,
    #[serde(default)]
    pub attacker: AttackerSpec,
    #[serde(default)]
    pub timings: Timings,
    #[serde(default)]
    pub biometric: BiometricParams,
    #[serde(default)]
    pub controls: Controls,
    #[serde(default)]
    pub crash: Option<CrashSpec>,
    #[serde(default)]
    pub expect: Expectations,
}

impl ScenarioConfig {
    /// A config with every optional section at its default.
    pub fn new(name: impl Into<String>, kind: ScenarioKind, seed: u64) -> Self {
        let mut c = Self {
            name: name.into(),
            seed,
            kind,
            description: String::new(),
            topology: TopologySpec::default(),
            victim: VictimSpec::default(),
            attacker: AttackerSpec::default(),
            timings: Timings::default(),
            biometric: BiometricParams::default(),
            controls: Controls::default(),
            crash: None,
            expect: Expectations::default(),
        };
        match kind {
            ScenarioKind::RotationCrash => c.crash = Some(CrashSpec { after_step: 14 }),
            // The replay attacker's radio sits next to the victim's tap.
            ScenarioKind::Replay => c.attacker.agent.location = "home".into(),
            _ => {}
        }
        c
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let stripped = strip_comments(text);
        let de = &mut serde_json::Deserializer::from_str(&stripped);
        let c: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn capabilities(&self) -> AttackerCapabilities {
        self.attacker
            .capabilities
            .unwrap_or_else(|| self.kind.default_capabilities())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        if !(self.biometric.sigma >= 0.0 && self.biometric.sigma.is_finite()) {
            return bad(format!(
                "biometric.sigma must be finite and non-negative, got {}",
                self.biometric.sigma
            ));
        }
        if !(self.biometric.threshold > 0.0 && self.biometric.threshold.is_finite()) {
            return bad(format!(
                "biometric.threshold must be positive, got {}",
                self.biometric.threshold
            ));
        }
        if self.timings.session_timeout_ms == 0 {
            return bad("timings.session_timeout_ms must be positive".into());
        }
        let devices = [
            &self.victim.phone,
            &self.victim.desktop,
            &self.attacker.agent,
            &self.attacker.desktop,
            &self.attacker.spoof_app,
        ];
        for (i, d) in devices.iter().enumerate() {
            if !self.topology.locations.contains(&d.location) {
                return bad(format!(
                    "device {} placed at unknown location {:?}",
                    d.id, d.location
                ));
            }
            if d.id == "server" {
                return bad("\"server\" is reserved".into());
            }
            for e in &devices[i + 1..] {
                if d.id == e.id {
                    return bad(format!("duplicate device id {}", d.id));
                }
                if d.bt == e.bt {
                    return bad(format!("devices {} and {} share {}", d.id, e.id, d.bt));
                }
            }
        }
        for [a, b] in &self.topology.adjacent {
            for l in [a, b] {
                if !self.topology.locations.contains(l) {
                    return bad(format!("topology.adjacent names unknown location {l:?}"));
                }
            }
        }
        match (self.kind, self.crash) {
            (ScenarioKind::RotationCrash, None) => {
                return bad("rotation_crash needs crash.after_step".into())
            }
            (ScenarioKind::RotationCrash, Some(c)) if !(1..=16).contains(&c.after_step) => {
                return bad(format!(
                    "crash.after_step must be 1..=16, got {}",
                    c.after_step
                ));
            }
            (ScenarioKind::RotationCrash, _) => {}
            (_, Some(_)) => return bad("crash is only valid for rotation_crash".into()),
            _ => {}
        }
        if let Some(names) = &self.expect.safe {
            if let Some(n) = names.iter().find(|n| !SECRET_NAMES.contains(&n.as_str())) {
                return bad(format!("expect.safe names unknown secret {n:?}"));
            }
        }
        Ok(())
    }

    pub fn expectations(&self) -> ResolvedExpectations {
        let control = self.kind.is_attack() && self.controls.any_disabled();
        let outcome = match self.kind {
            ScenarioKind::HonestLogin => RunOutcome::LoginSuccess,
            ScenarioKind::RotationCrash => RunOutcome::Recovered,
            _ if control => RunOutcome::AttackSucceeded,
            _ => RunOutcome::AttackFailed,
        };
        // A replayed token that is accepted hands the attacker the session
        // id, and with BT1 that opens every proximity proof of the session.
        let safe = if self.controls.leak_sk {
            Vec::new()
        } else {
            SECRET_NAMES
                .iter()
                .filter(|s| self.controls.token_single_use || **s != "TOKEN")
                .map(|s| s.to_string())
                .collect()
        };
        ResolvedExpectations {
            outcome: self.expect.outcome.unwrap_or(outcome),
            authenticated_as_victim: self.expect.authenticated_as_victim.unwrap_or(control),
            safe: self.expect.safe.clone().unwrap_or(safe),
            ok_provenance: self.expect.ok_provenance.unwrap_or(!self.controls.leak_sk),
        }
    }
}

/// Removes `//` line comments and `/* */` block comments outside strings.
pub fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    let mut in_str = false;
    while let Some(c) = chars.next() {
        if in_str {
            out.push(c);
            match c {
                '\\' => {
                    if let Some(n) = chars.next() {
                        out.push(n);
                    }
                }
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match (c, chars.peek()) {
            ('"', _) => {
                in_str = true;
                out.push(c);
            }
            ('/', Some('/')) => {
                for n in chars.by_ref() {
                    if n == '\n' {
                        out.push('\n');
                        break;
                    }
                }
            }
            ('/', Some('*')) => {
                chars.next();
                let mut prev = ' ';
                for n in chars.by_ref() {
                    if n == '\n' {
                        out.push('\n');
                    }
                    if prev == '*' && n == '/' {
                        break;
                    }
                    prev = n;
                }
            }
            _ => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_are_stripped_outside_strings() {
        let s = "{\n // note\n \"a\": \"http://x\", /* b */ \"c\": 1 // tail\n}";
        let v: serde_json::Value = serde_json::from_str(&strip_comments(s)).unwrap();
        assert_eq!(v["a"], "http://x");
        assert_eq!(v["c"], 1);
    }

    #[test]
    fn seed_is_mandatory() {
        let e = ScenarioConfig::parse(r#"{"name": "x", "kind": "honest_login"}"#).unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let e =
            ScenarioConfig::parse(r#"{"name": "x", "seed": 1, "kind": "honest_login", "sede": 2}"#)
                .unwrap_err();
        assert!(matches!(e, HarnessError::Config(_)));
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ScenarioConfig::parse(r#"{"name": "x", "seed": 7, "kind": "cr_mitm"}"#).unwrap();
        assert_eq!(c.timings.session_timeout_ms, 60_000);
        assert!(c.capabilities().cr_remote_desktop);
        assert_eq!(c.expectations().outcome, RunOutcome::AttackFailed);
    }

    #[test]
    fn controls_flip_default_expectations() {
        let mut c = ScenarioConfig::new("x", ScenarioKind::CrMitm, 1);
        c.controls.skip_proximity_check = true;
        let e = c.expectations();
        assert_eq!(e.outcome, RunOutcome::AttackSucceeded);
        assert!(e.authenticated_as_victim);
    }

    #[test]
    fn crash_needs_a_valid_step() {
        let mut c = ScenarioConfig::new("x", ScenarioKind::RotationCrash, 1);
        c.crash = Some(CrashSpec { after_step: 17 });
        assert!(c.validate().is_err());
        c.crash = None;
        assert!(c.validate().is_err());
        let mut h = ScenarioConfig::new("y", ScenarioKind::HonestLogin, 1);
        h.crash = Some(CrashSpec { after_step: 3 });
        assert!(h.validate().is_err());
    }

    #[test]
    fn clashing_devices_are_rejected() {
        let mut c = ScenarioConfig::new("x", ScenarioKind::HonestLogin, 1);
        c.attacker.desktop.bt = c.victim.phone.bt;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::new("x", ScenarioKind::HonestLogin, 1);
        c.victim.phone.location = "moon".into();
        assert!(c.validate().is_err());
    }
}
