//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use tapauth::adversary::term::Atom;
use tapauth::biometric::*;
use tapauth::crypto::*;
use tapauth::harness::*;
use tapauth::messages::{Phase, LOGIN_STEPS, REGISTRATION_STEPS};
use tapauth::sim::transcript::Line;
use tapauth::sim::BluetoothAddress;

type Verdict = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn opts() -> RunOptions {
    RunOptions::default()
}

fn device_aid(s: &Staged, salt: &Salt) -> Option<SecretKey> {
    let fd = s.world.first(&s.cast.victim_phone)?;
    let blob = fd.storage().enc_aid_blob.as_ref()?;
    open(&salted_keys(&s.sk, salt), blob)
        .ok()
        .and_then(|b| SecretKey::from_slice(&b))
}

fn steps_of(r: &RunReport, phase: Phase) -> Vec<u8> {
    r.transcript
        .lines()
        .iter()
        .filter_map(|l| match l {
            Line::Step { phase: p, step, .. } if *p == phase => Some(*step),
            _ => None,
        })
        .collect()
}

fn honest_end_to_end() -> Verdict {
    let start = Instant::now();
    for seed in 0..100u64 {
        let cfg = ScenarioConfig::new("honest", ScenarioKind::HonestLogin, seed);
        let r = run_scenario(&cfg, &opts()).map_err(|e| e.to_string())?;
        check(
            r.outcome == RunOutcome::LoginSuccess && r.passed(),
            format!("seed {seed}: {:?}", r.outcome),
        )?;
        let reg: Vec<u8> = (1..=REGISTRATION_STEPS as u8).collect();
        let login: Vec<u8> = (1..=LOGIN_STEPS as u8).collect();
        check(
            steps_of(&r, Phase::Registration) == reg,
            format!("seed {seed}: registration steps"),
        )?;
        check(
            steps_of(&r, Phase::Login) == login,
            format!("seed {seed}: login steps"),
        )?;

        let mut s = stage(&cfg, &opts()).map_err(|e| e.to_string())?;
        check(s.registered, format!("seed {seed}: not registered"))?;
        let em = cfg.victim.email.clone();
        let before = s.world.server().record(&em).unwrap().aid.clone();
        let old_blob = s
            .world
            .first(&s.cast.victim_phone)
            .unwrap()
            .storage()
            .enc_aid_blob
            .clone();
        check(
            victim_login(&mut s.world, &cfg, &s.cast, cfg.timings.login_delay_ms),
            format!("seed {seed}: first login"),
        )?;
        s.world.finish_transcript();
        let rec = s.world.server().record(&em).unwrap().clone();
        check(rec.aid != before, format!("seed {seed}: AID not rotated"))?;
        check(
            device_aid(&s, &rec.salt).as_ref() == Some(&rec.aid),
            format!("seed {seed}: device AID differs from server AID"),
        )?;
        let aid_next = s
            .world
            .transcript()
            .declared_secrets()
            .into_iter()
            .find(|d| d.name == "aid_next")
            .map(|d| d.digests)
            .unwrap_or_default();
        check(
            aid_next.contains(&Atom::of(rec.aid.as_bytes())),
            format!("seed {seed}: server AID is not the rotated aid_next"),
        )?;

        let cast = s.cast.clone();
        check(
            victim_login(&mut s.world, &cfg, &cast, 10),
            format!("seed {seed}: login with rotated AID failed"),
        )?;
        let fd = s.world.first_mut(&cast.victim_phone).unwrap();
        fd.storage_mut().enc_aid_blob = old_blob;
        fd.storage_mut().journal = None;
        check(
            !victim_login(&mut s.world, &cfg, &cast, 10),
            format!("seed {seed}: login with pre-rotation AID succeeded"),
        )?;
    }
    let took = start.elapsed();
    check(took.as_secs_f64() < 5.0, format!("sweep took {took:?}"))?;
    Ok(format!(
        "100 seeds, rotated AID checked on each, {took:.2?}"
    ))
}

#[derive(Deserialize)]
struct Vectors {
    derive_keys: Vec<serde_json::Value>,
    derive_key_from_password: Vec<serde_json::Value>,
    derive_bt_key: Vec<serde_json::Value>,
    aid_keys: Vec<serde_json::Value>,
    seal: Vec<serde_json::Value>,
}

fn hx(v: &serde_json::Value, k: &str) -> Vec<u8> {
    hex::decode(v[k].as_str().unwrap()).unwrap()
}

fn arr<const N: usize>(v: &serde_json::Value, k: &str) -> [u8; N] {
    hx(v, k).try_into().unwrap()
}

fn pair_is(kp: &KeyPair, v: &serde_json::Value) -> bool {
    kp.enc_key().as_slice() == hx(v, "k_e") && kp.mac_key().as_slice() == hx(v, "k_m")
}

fn crypto_oracle() -> Verdict {
    let v: Vectors = serde_json::from_str(include_str!("fixtures/crypto_vectors.json")).unwrap();
    let mut n = 0;
    for t in &v.derive_keys {
        let n1 = Nonce10::parse(t["n"].as_str().unwrap()).unwrap();
        check(
            pair_is(&derive_keys(&SecretKey::from_bytes(arr(t, "k")), &n1), t),
            "derive_keys",
        )?;
        n += 1;
    }
    for t in &v.derive_key_from_password {
        let kp = derive_key_from_password(&hx(t, "material"), &Salt::from_bytes(arr(t, "salt")))
            .unwrap();
        check(pair_is(&kp, t), "derive_key_from_password")?;
        n += 1;
    }
    for t in &v.derive_bt_key {
        let bt: BluetoothAddress = t["bt"].as_str().unwrap().parse().unwrap();
        check(
            pair_is(&derive_bt_key(&bt, &hx(t, "context")), t),
            "derive_bt_key",
        )?;
        n += 1;
    }
    for t in &v.aid_keys {
        check(
            pair_is(&aid_keys(&SecretKey::from_bytes(arr(t, "aid"))), t),
            "aid_keys",
        )?;
        n += 1;
    }
    for t in &v.seal {
        let kp = KeyPair::from_parts(arr(t, "k_e"), arr(t, "k_m"));
        let env = seal_with_iv(&kp, &arr(t, "iv"), &hx(t, "pt"));
        check(env.to_bytes() == hx(t, "envelope"), "seal")?;
        check(open(&kp, &env).unwrap() == hx(t, "pt"), "open")?;
        n += 1;
    }
    check(n >= 10, "too few vectors")?;

    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let kp = KeyPair::from_parts(rng.gen(), rng.gen());
        let pt: Vec<u8> = (0..rng.gen_range(0..512)).map(|_| rng.gen()).collect();
        let env = seal(&kp, &pt, &mut rng);
        check(
            open(&kp, &env).as_deref() == Ok(&pt[..]),
            "random roundtrip",
        )?;
    }

    // A 3-block envelope (96 bytes, 768 bits), then the 384 header bits of
    // a second one under a different key.
    let kp = KeyPair::from_parts(rng.gen(), rng.gen());
    let env = seal(&kp, &[7u8; 33], &mut rng);
    check(env.ct.len() == 48, "not 3 blocks")?;
    let kp2 = KeyPair::from_parts(rng.gen(), rng.gen());
    let env2 = seal(&kp2, b"second", &mut rng);
    let mut flips = 0;
    let mut mismatches = 0;
    for (k, e, bits) in [(&kp, &env, 768), (&kp2, &env2, 384)] {
        let wire = e.to_bytes();
        for bit in 0..bits {
            let mut w = wire.clone();
            w[bit / 8] ^= 1 << (bit % 8);
            flips += 1;
            if open(k, &Envelope::from_bytes(&w).unwrap()) == Err(CryptoError::MacMismatch) {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == flips,
        format!("{mismatches}/{flips} tampered envelopes rejected"),
    )?;
    Ok(format!(
        "{n} frozen vectors, 1000 roundtrips, {mismatches}/{flips} bit flips -> MacMismatch"
    ))
}

fn attack_suite() -> Verdict {
    let mut runs = 0;
    let mut present = [0usize; 4];
    for kind in ScenarioKind::ALL.into_iter().filter(|k| k.is_attack()) {
        for seed in 0..20 {
            let r = run_scenario(&ScenarioConfig::new("attack", kind, seed), &opts())
                .map_err(|e| e.to_string())?;
            check(
                !r.authenticated_as_victim,
                format!("{kind:?} seed {seed}: attacker authenticated"),
            )?;
            check(
                r.outcome == RunOutcome::AttackFailed,
                format!("{kind:?} seed {seed}: {:?}", r.outcome),
            )?;
            check(
                r.secrecy.all_safe(),
                format!(
                    "{kind:?} seed {seed}: {:?} derivable",
                    r.secrecy.leaked_names()
                ),
            )?;
            for (i, name) in SECRET_NAMES.iter().enumerate() {
                let declared = r.secrecy.secrets.iter().any(|s| s.name == *name);
                check(
                    declared || i >= 2,
                    format!("{kind:?} seed {seed}: {name} never declared"),
                )?;
                present[i] += usize::from(declared);
            }
            runs += 1;
        }
    }
    // aid_next and TOKEN only exist once the server reaches those steps.
    Ok(format!(
        "{runs} runs, no victim login, nothing derivable (declared in SK {}, AID {}, aid_next {}, TOKEN {} runs)",
        present[0], present[1], present[2], present[3]
    ))
}

fn positive_controls() -> Verdict {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/controls");
    let mut flipped = 0;
    for f in [
        "cr_mitm_no_proximity.json",
        "replay_reusable_token.json",
        "spoof_app_leaked_sk.json",
    ] {
        let base = ScenarioConfig::load(&dir.join(f)).map_err(|e| e.to_string())?;
        for seed in 0..20 {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let r = run_scenario(&cfg, &opts()).map_err(|e| e.to_string())?;
            check(
                r.authenticated_as_victim,
                format!("{f} seed {seed}: control did not flip"),
            )?;
            let mut defended = cfg.clone();
            defended.controls = Controls::default();
            defended.expect = Expectations::default();
            let d = run_scenario(&defended, &opts()).map_err(|e| e.to_string())?;
            check(
                !d.authenticated_as_victim,
                format!("{f} seed {seed}: defended twin also succeeded"),
            )?;
            flipped += 1;
        }
    }
    Ok(format!(
        "{flipped}/60 control runs flipped to authenticated, defended twins held"
    ))
}

fn transcripts_verify() -> Verdict {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let (summary, reports) = run_suite(&dir, None, &opts()).map_err(|e| e.to_string())?;
    check(
        reports.len() == 7,
        format!("{} bundled scenarios", reports.len()),
    )?;
    let mut oks = 0;
    for r in &reports {
        let v = verify_transcript_text(&r.transcript.to_jsonl()).map_err(|e| e.to_string())?;
        check(v.all_safe(), format!("{}: {:?}", r.name, v.leaked_names()))?;
        for name in &SECRET_NAMES[..2] {
            check(
                v.secrets.iter().any(|s| s.name == *name),
                format!("{}: {name} not declared", r.name),
            )?;
        }
        let logged_in = matches!(r.outcome, RunOutcome::LoginSuccess | RunOutcome::Recovered);
        check(
            !logged_in || !v.authenticity.is_empty(),
            format!("{}: login without an accepted OK", r.name),
        )?;
        check(
            v.authenticity.iter().all(|a| a.ok),
            format!("{}: forged OK", r.name),
        )?;
        oks += v.authenticity.len();
    }
    check(summary.all_passed(), "suite has failures")?;
    Ok(format!(
        "7 transcripts all SAFE, {oks} accepted OKs authentic"
    ))
}

fn biometric_statistics() -> Verdict {
    const N: usize = 10_000;
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let (mut self_ok, mut cross_rej) = (0, 0);
    for _ in 0..N {
        let a = IdentityProfile::random(0.02, &mut rng).unwrap();
        let b = IdentityProfile::random(0.02, &mut rng).unwrap();
        let reg = capture(&a, &mut rng);
        self_ok += usize::from(verify(&capture(&a, &mut rng), &reg, 1.0));
        cross_rej += usize::from(!verify(&capture(&b, &mut rng), &reg, 1.0));
    }
    let (sr, cr) = (self_ok as f64 / N as f64, cross_rej as f64 / N as f64);
    check(sr >= 0.999, format!("self-match {sr}"))?;
    check(cr >= 0.999, format!("cross-reject {cr}"))?;
    let eps = 1e-9;
    for _ in 0..N {
        let [a, b, c] = [(); 3].map(|_| FaceEmbedding::random(&mut rng));
        let (ab, ba, bc, ac) = (
            distance(&a, &b),
            distance(&b, &a),
            distance(&b, &c),
            distance(&a, &c),
        );
        check(ab >= 0.0 && distance(&a, &a) <= eps, "positivity")?;
        check((ab - ba).abs() <= eps, "symmetry")?;
        check(ac <= ab + bc + eps, "triangle inequality")?;
    }
    Ok(format!(
        "self-match {sr:.4}, cross-reject {cr:.4}, metric axioms on {N} triples"
    ))
}

fn determinism_and_fuzz() -> Verdict {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for (_, cfg) in load_suite(&dir, None).map_err(|e| e.to_string())? {
        let digests: Vec<String> = (0..5)
            .map(|_| run_scenario(&cfg, &opts()).map(|r| r.transcript_digest))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        check(
            digests.iter().all(|d| *d == digests[0]),
            format!("{}: digests differ", cfg.name),
        )?;
    }
    let stats = catch_unwind(AssertUnwindSafe(|| common::fuzz(100_000, 2_000, 0xacce97)))
        .map_err(|_| "fuzz campaign panicked".to_string())?;
    check(
        stats.violations.is_empty(),
        format!(
            "{} violations, first: {}",
            stats.violations.len(),
            stats.violations.first().cloned().unwrap_or_default()
        ),
    )?;
    check(stats.delivered >= 100_000, "fuzz too short")?;
    Ok(format!(
        "5x identical digests on 7 scenarios; fuzz: {stats}"
    ))
}

fn crash_tolerance() -> Verdict {
    let mut runs = 0;
    for step in 1..=16u8 {
        for seed in 0..10 {
            let mut c = ScenarioConfig::new("crash", ScenarioKind::RotationCrash, seed);
            c.crash = Some(CrashSpec { after_step: step });
            let r = run_scenario(&c, &opts()).map_err(|e| e.to_string())?;
            check(
                r.crashes == 1,
                format!("step {step} seed {seed}: no crash injected"),
            )?;
            check(
                r.outcome == RunOutcome::Recovered,
                format!("step {step} seed {seed}: {:?}", r.outcome),
            )?;
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} crash points, every one recovered, no lockout"
    ))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 8] = [
        ("honest end-to-end with AID rotation", honest_end_to_end),
        ("crypto matches independent oracle", crypto_oracle),
        ("attack suite defeated", attack_suite),
        ("positive controls flip", positive_controls),
        ("transcripts verify SAFE and authentic", transcripts_verify),
        ("biometric statistics", biometric_statistics),
        ("determinism and state-machine fuzz", determinism_and_fuzz),
        ("rotation survives crashes", crash_tolerance),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match v {
            Ok(d) => println!(
                "criterion {} PASS  {name}: {d} [{:.2?}]",
                i + 1,
                t.elapsed()
            ),
            Err(e) => {
                failed += 1;
                println!(
                    "criterion {} FAIL  {name}: {e} [{:.2?}]",
                    i + 1,
                    t.elapsed()
                );
            }
        }
    }
    println!("acceptance: {}/8 passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
