use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunOutcome, ScenarioConfig, ScenarioKind};
use super::metrics::RunMetrics;
use super::HarnessError;
use crate::adversary::term::{terms, Term};
use crate::adversary::{
    secrecy_report, AdversaryView, AttackAction, AttackOutcome, AttackerAgent, SecrecyReport,
};
use crate::biometric::IdentityProfile;
use crate::crypto::{gen_secret, SecretKey};
use crate::device::{DeviceOutcome, FirstDevice, FirstDeviceStorage, SecondDevice};
use crate::messages::PrincipalId;
use crate::server::{FileStore, ServerConfig};
use crate::sim::transcript::{Line, Transcript, FORMAT_VERSION};
use crate::sim::{Action, Agent, Crash, InvariantViolation, SimTime, Topology, World, WorldConfig};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Record full payload hex in transport events.
    pub capture_payloads: bool,
    /// Persist the server here; must be empty.
    pub store_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub kind: ScenarioKind,
    pub outcome: RunOutcome,
    pub authenticated_as_victim: bool,
    pub assertions: Vec<AssertionResult>,
    pub metrics: RunMetrics,
    pub secrecy: SecrecyReport,
    pub violations: Vec<InvariantViolation>,
    pub sim_duration_ms: u64,
    pub crashes: usize,
    pub transcript_digest: String,
    #[serde(skip)]
    pub transcript: Transcript,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn first_failure(&self) -> Option<&AssertionResult> {
        self.assertions.iter().find(|a| !a.passed)
    }

    pub fn attack_outcome(&self) -> AttackOutcome {
        AttackOutcome {
            scenario: self.name.clone(),
            seed: self.seed,
            authenticated: self.authenticated_as_victim,
            secrets_leaked: self.secrecy.leaked_names(),
            steps: self.transcript.steps().count(),
        }
    }
}

/// Principal ids of one run.
#[derive(Debug, Clone)]
pub struct Cast {
    pub server: PrincipalId,
    pub victim_phone: PrincipalId,
    pub victim_desktop: PrincipalId,
    pub attacker: PrincipalId,
    pub attacker_desktop: PrincipalId,
    pub spoof_app: PrincipalId,
}

impl Cast {
    pub fn of(cfg: &ScenarioConfig) -> Self {
        let p = |s: &str| PrincipalId::new(s);
        Self {
            server: p("server"),
            victim_phone: p(&cfg.victim.phone.id),
            victim_desktop: p(&cfg.victim.desktop.id),
            attacker: p(&cfg.attacker.agent.id),
            attacker_desktop: p(&cfg.attacker.desktop.id),
            spoof_app: p(&cfg.attacker.spoof_app.id),
        }
    }
}

/// A world set up for `cfg` with the victim registered and the adversary in
/// place, ready for the login part of the script.
pub struct Staged {
    pub world: World,
    pub cast: Cast,
    pub sk: SecretKey,
    pub profile: IdentityProfile,
    /// SK the spoofed app carries unless SK is leaked.
    pub wrong_sk: SecretKey,
    pub registered: bool,
}

/// Builds the world, registers the victim and installs the attacker.
pub fn stage(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<Staged, HarnessError> {
    cfg.validate()?;
    let mut setup = ChaCha20Rng::seed_from_u64(cfg.seed);
    let sk = gen_secret(&mut setup);
    let profile = IdentityProfile::random(cfg.biometric.sigma, &mut setup)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let world_seed = setup.next_u64();
    let wrong_sk = gen_secret(&mut setup);

    let mut wc = WorldConfig::new(world_seed);
    wc.latencies = cfg.timings.latencies;
    wc.capture_payloads = opts.capture_payloads;
    wc.server = ServerConfig {
        session_timeout_ms: cfg.timings.session_timeout_ms,
        match_threshold: cfg.biometric.threshold,
        token_single_use: cfg.controls.token_single_use,
    };
    let mut topo = Topology::new(cfg.topology.locations.iter().cloned());
    for [a, b] in &cfg.topology.adjacent {
        topo.connect(a, b)?;
    }
    let cast = Cast::of(cfg);
    let mut world = World::new(wc, cast.server.clone(), sk.clone(), topo);
    if let Some(dir) = &opts.store_dir {
        let fs = FileStore::open(dir)?;
        if !fs.load_all()?.is_empty() {
            return Err(HarnessError::Config(format!(
                "store directory {} is not empty",
                dir.display()
            )));
        }
        world = world.with_persistence(fs);
    }
    let caps = cfg.capabilities();
    world.transcript_mut().push(Line::Header {
        scenario: cfg.name.clone(),
        seed: cfg.seed,
        capabilities: caps.names().into_iter().map(String::from).collect(),
        format: FORMAT_VERSION,
    });

    let timeout = cfg.timings.session_timeout_ms;
    let mut fd = FirstDevice::new(
        cast.victim_phone.clone(),
        cast.server.clone(),
        cfg.victim.phone.bt,
        profile.clone(),
        FirstDeviceStorage::new(sk.clone()),
    );
    fd.set_tap_target(Some(cast.victim_desktop.clone()));
    world.add_agent(Agent::First(fd), &cfg.victim.phone.location)?;
    let mut sd = SecondDevice::new(
        cast.victim_desktop.clone(),
        cast.server.clone(),
        cfg.victim.desktop.bt,
        timeout,
    );
    sd.set_skip_proximity_check(cfg.controls.skip_proximity_check);
    world.add_agent(Agent::Second(sd), &cfg.victim.desktop.location)?;

    if cfg.kind.is_attack() {
        let mut att = AttackerAgent::new(
            cast.attacker.clone(),
            cast.server.clone(),
            cfg.attacker.agent.bt,
        );
        let mut ad = SecondDevice::new(
            cast.attacker_desktop.clone(),
            cast.server.clone(),
            cfg.attacker.desktop.bt,
            timeout,
        );
        ad.set_skip_proximity_check(cfg.controls.skip_proximity_check);
        let victims: BTreeSet<PrincipalId> =
            [cast.victim_phone.clone(), cast.victim_desktop.clone()].into();
        let mut view = AdversaryView {
            caps,
            controlled: [cast.attacker.clone()].into(),
            victims,
            attacker_side: [cast.attacker.clone(), cast.attacker_desktop.clone()].into(),
            ..Default::default()
        };
        match cfg.kind {
            ScenarioKind::RtMitm | ScenarioKind::CrMitm => {
                att.set_relay_to(Some(cast.attacker_desktop.clone()));
                view.hijacked.insert(cast.victim_desktop.clone());
                view.ui_observed
                    .extend([cast.victim_desktop.clone(), cast.attacker_desktop.clone()]);
            }
            ScenarioKind::MbePhish => {
                view.ui_observed.insert(cast.victim_desktop.clone());
            }
            ScenarioKind::Replay => {
                att.set_replay_tokens(true);
                view.eavesdropper = Some(cast.attacker.clone());
            }
            ScenarioKind::SpoofApp => {
                view.controlled.insert(cast.spoof_app.clone());
                view.attacker_side.insert(cast.spoof_app.clone());
                view.ui_observed.insert(cast.attacker_desktop.clone());
            }
            ScenarioKind::HonestLogin | ScenarioKind::RotationCrash => {
                unreachable!("not an attack")
            }
        }
        world.add_agent(Agent::Attacker(att), &cfg.attacker.agent.location)?;
        world.add_agent(Agent::Second(ad), &cfg.attacker.desktop.location)?;
        world.set_adversary(view);
        // Public or assumed-known values.
        world.adversary_learns("public:email", Term::atom(cfg.victim.email.as_bytes()));
        for d in [
            &cfg.attacker.agent,
            &cfg.attacker.desktop,
            &cfg.attacker.spoof_app,
        ] {
            world.adversary_learns("own:bt", terms::bt(&d.bt));
        }
        if caps.sniff_bt_addr {
            world.adversary_learns("sniff:bt1", terms::bt(&cfg.victim.phone.bt));
            world.adversary_learns("sniff:bt2", terms::bt(&cfg.victim.desktop.bt));
        }
        if matches!(cfg.kind, ScenarioKind::RtMitm | ScenarioKind::CrMitm) {
            world
                .second_mut(&cast.victim_desktop)
                .expect("added")
                .set_submit_to(Some(cast.attacker.clone()));
        }
    }

    let deadline = SimTime(cfg.timings.deadline_ms);
    world.schedule(
        0,
        &cast.victim_phone,
        Action::Register {
            em: cfg.victim.email.clone(),
            pwd: cfg.victim.password.clone(),
        },
    );
    world.run_until_idle(deadline);
    let registered = world.outcomes().iter().any(|(_, who, o)| {
        *who == cast.victim_phone && matches!(o, DeviceOutcome::Registered { .. })
    });
    Ok(Staged {
        world,
        cast,
        sk,
        profile,
        wrong_sk,
        registered,
    })
}

/// True if `em` logged in through `desktop` at or after `since`, as seen by
/// both the server and the desktop.
pub fn login_completed(world: &World, em: &str, desktop: &PrincipalId, since: SimTime) -> bool {
    let server_side = world
        .logins()
        .iter()
        .any(|l| l.t >= since && l.em == em && l.holder.as_ref() == Some(desktop));
    let client_side = world.outcomes().iter().any(|(t, who, o)| {
        *t >= since && who == desktop && matches!(o, DeviceOutcome::LoginSucceeded { .. })
    });
    server_side && client_side
}

/// Runs one victim login and reports whether it completed.
pub fn victim_login(world: &mut World, cfg: &ScenarioConfig, cast: &Cast, delay_ms: u64) -> bool {
    let since = world.now();
    world.schedule(delay_ms, &cast.victim_phone, Action::Login);
    world.run_until_idle(SimTime(cfg.timings.deadline_ms));
    login_completed(world, &cfg.victim.email, &cast.victim_desktop, since)
}

fn run_script(s: &mut Staged, cfg: &ScenarioConfig) -> Result<RunOutcome, HarnessError> {
    let world = &mut s.world;
    let cast = &s.cast;
    let deadline = SimTime(cfg.timings.deadline_ms);
    let delay = cfg.timings.login_delay_ms;
    let em = cfg.victim.email.clone();
    let outcome = match cfg.kind {
        ScenarioKind::HonestLogin => {
            if victim_login(world, cfg, cast, delay) {
                RunOutcome::LoginSuccess
            } else {
                RunOutcome::LoginFailed
            }
        }
        ScenarioKind::RotationCrash => {
            world.inject_crash(cfg.crash.map(|c| Crash {
                after_step: c.after_step,
            }));
            victim_login(world, cfg, cast, delay);
            world.inject_crash(None);
            // Straight away, then once more after any stale session has expired.
            let recovered = victim_login(world, cfg, cast, delay)
                || victim_login(world, cfg, cast, cfg.timings.session_timeout_ms + delay);
            if recovered {
                RunOutcome::Recovered
            } else {
                RunOutcome::Lockout
            }
        }
        ScenarioKind::RtMitm | ScenarioKind::CrMitm => {
            victim_login(world, cfg, cast, delay);
            RunOutcome::AttackFailed
        }
        ScenarioKind::MbePhish => {
            victim_login(world, cfg, cast, delay);
            world.schedule(
                delay,
                &cast.attacker,
                Action::Attack(AttackAction::GuessIdentifier { em: em.clone() }),
            );
            world.run_until_idle(deadline);
            RunOutcome::AttackFailed
        }
        ScenarioKind::Replay => {
            victim_login(world, cfg, cast, delay);
            world.schedule(
                delay,
                &cast.attacker,
                Action::Attack(AttackAction::ReplayAuthString),
            );
            world.run_until_idle(deadline);
            world.schedule(
                delay,
                &cast.attacker,
                Action::Attack(AttackAction::StaleIdentifier { em: em.clone() }),
            );
            world.run_until_idle(deadline);
            RunOutcome::AttackFailed
        }
        ScenarioKind::SpoofApp => {
            let blob = world
                .first(&cast.victim_phone)
                .and_then(|d| d.storage().enc_aid_blob.clone());
            let Some(blob) = blob else {
                return Ok(RunOutcome::RegistrationFailed);
            };
            let sk = if cfg.controls.leak_sk {
                s.sk.clone()
            } else {
                s.wrong_sk.clone()
            };
            let blob_term = world.provenance().envelope_term(&blob);
            world.adversary_learns("theft:enc_aid_blob", blob_term);
            if cfg.controls.leak_sk {
                world.adversary_learns("leak:sk", terms::secret(&s.sk));
            }
            let storage = FirstDeviceStorage {
                sk,
                enc_aid_blob: Some(blob),
                account: Some(em.clone()),
                journal: None,
            };
            // The strongest spoof: it even presents the victim's face.
            let mut spoof = FirstDevice::new(
                cast.spoof_app.clone(),
                cast.server.clone(),
                cfg.attacker.spoof_app.bt,
                s.profile.clone(),
                storage,
            );
            spoof.set_tap_target(Some(cast.attacker_desktop.clone()));
            world.add_agent(Agent::First(spoof), &cfg.attacker.spoof_app.location)?;
            world.schedule(delay, &cast.spoof_app, Action::Login);
            world.run_until_idle(deadline);
            RunOutcome::AttackFailed
        }
    };
    Ok(outcome)
}

/// Runs a scenario end to end in memory.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    let mut staged = stage(cfg, opts)?;
    let mut outcome = if staged.registered {
        run_script(&mut staged, cfg)?
    } else {
        RunOutcome::RegistrationFailed
    };
    let world = &mut staged.world;
    let attacker_side = world
        .adversary()
        .map(|v| v.attacker_side.clone())
        .unwrap_or_default();
    let authenticated = world.logins().iter().any(|l| {
        l.em == cfg.victim.email && l.holder.as_ref().is_some_and(|h| attacker_side.contains(h))
    });
    if cfg.kind.is_attack() && outcome == RunOutcome::AttackFailed && authenticated {
        outcome = RunOutcome::AttackSucceeded;
    }
    world.finish_transcript();
    let t = world.transcript();
    let secrecy = secrecy_report(
        &t.observed_terms(),
        &t.declared_secrets(),
        &t.accepted_oks(),
    );
    let now = world.now();
    world.transcript_mut().push(Line::End {
        t: now,
        outcome: outcome_name(outcome),
        authenticated_as_victim: authenticated,
    });
    let transcript = world.transcript().clone();
    let metrics = RunMetrics::from_transcript(&transcript);
    let violations = world.violations().to_vec();

    let exp = cfg.expectations();
    let mut assertions = vec![
        AssertionResult {
            name: "no_invariant_violations".into(),
            passed: violations.is_empty(),
            detail: violations
                .first()
                .map_or_else(|| "none".into(), |v| format!("{} at {}", v.what, v.t)),
        },
        check("outcome", exp.outcome, outcome),
        check(
            "authenticated_as_victim",
            exp.authenticated_as_victim,
            authenticated,
        ),
    ];
    for name in &exp.safe {
        let safe = secrecy
            .secrets
            .iter()
            .find(|s| s.name == *name)
            .is_none_or(|s| s.safe);
        assertions.push(AssertionResult {
            name: format!("secret_safe:{name}"),
            passed: safe,
            detail: if safe { "SAFE".into() } else { "UNSAFE".into() },
        });
    }
    let provenance_ok = secrecy.authenticity.iter().all(|a| a.ok);
    assertions.push(check("ok_provenance", exp.ok_provenance, provenance_ok));

    Ok(RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        kind: cfg.kind,
        outcome,
        authenticated_as_victim: authenticated,
        assertions,
        metrics,
        secrecy,
        violations,
        sim_duration_ms: now.as_millis(),
        crashes: world.crashes(),
        transcript_digest: transcript.digest(),
        transcript,
    })
}

fn check<T: PartialEq + std::fmt::Debug>(name: &str, expected: T, actual: T) -> AssertionResult {
    AssertionResult {
        name: name.into(),
        passed: expected == actual,
        detail: format!("expected {expected:?}, got {actual:?}"),
    }
}

pub fn outcome_name(o: RunOutcome) -> String {
    serde_json::to_value(o)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}
