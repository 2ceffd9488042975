use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tapauth::biometric::*;

const TRIALS: usize = 10_000;
const SIGMA: f64 = 0.02;

/// Self-match: registration capture and login capture of the same face.
fn self_match_rate(seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ok = 0;
    for _ in 0..TRIALS {
        let p = IdentityProfile::random(SIGMA, &mut rng).unwrap();
        let reg = capture(&p, &mut rng);
        let login = capture(&p, &mut rng);
        ok += usize::from(verify(&login, &reg, DEFAULT_MATCH_THRESHOLD));
    }
    ok as f64 / TRIALS as f64
}

fn cross_reject_rate(seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rejected = 0;
    for _ in 0..TRIALS {
        let a = IdentityProfile::random(SIGMA, &mut rng).unwrap();
        let b = IdentityProfile::random(SIGMA, &mut rng).unwrap();
        let reg = capture(&a, &mut rng);
        let login = capture(&b, &mut rng);
        rejected += usize::from(!verify(&login, &reg, DEFAULT_MATCH_THRESHOLD));
    }
    rejected as f64 / TRIALS as f64
}

#[test]
fn self_match_acceptance() {
    let r = self_match_rate(1);
    assert!(r >= 0.999, "{r}");
}

#[test]
fn cross_identity_rejection() {
    let r = cross_reject_rate(2);
    assert!(r >= 0.999, "{r}");
}

#[test]
fn capture_distance_matches_expectation() {
    // Normalizing g + sigma*z removes the component along g to first order,
    // leaving a chi distribution with d-1 degrees of freedom.
    let k = (EMBEDDING_DIM - 1) as f64;
    let expected = SIGMA * (k - 0.5).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let p = IdentityProfile::random(SIGMA, &mut rng).unwrap();
    let mut sum = 0.0;
    for _ in 0..1000 {
        let c = capture(&p, &mut rng);
        assert!((c.norm() - 1.0).abs() <= 1e-6);
        assert_eq!(c.components().len(), EMBEDDING_DIM);
        sum += distance(&c, p.ground_truth());
    }
    let mean = sum / 1000.0;
    assert!(
        (mean - expected).abs() <= 0.3 * expected,
        "{mean} vs {expected}"
    );
}

#[test]
fn metric_properties_on_random_triples() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let eps = 1e-9;
    for _ in 0..TRIALS {
        let a = FaceEmbedding::random(&mut rng);
        let b = FaceEmbedding::random(&mut rng);
        let c = FaceEmbedding::random(&mut rng);
        let (ab, ba, bc, ac) = (
            distance(&a, &b),
            distance(&b, &a),
            distance(&b, &c),
            distance(&a, &c),
        );
        assert!(ab >= 0.0);
        assert!(distance(&a, &a).abs() <= eps);
        assert!((ab - ba).abs() <= eps);
        assert!(ac <= ab + bc + eps);
        assert!(ab <= 2.0 + eps);
    }
}

proptest! {
    #[test]
    fn capture_keeps_unit_norm(seed in any::<u64>(), sigma in 0.0f64..0.5) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = IdentityProfile::random(sigma, &mut rng).unwrap();
        let c = capture(&p, &mut rng);
        prop_assert!((c.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn bytes_roundtrip(seed in any::<u64>()) {
        let e = FaceEmbedding::random(&mut ChaCha20Rng::seed_from_u64(seed));
        let back = FaceEmbedding::from_le_bytes(&e.to_le_bytes()).unwrap();
        prop_assert_eq!(back.components(), e.components());
    }
}
