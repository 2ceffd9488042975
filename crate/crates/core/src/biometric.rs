//! Simulated face capture and the distance-threshold matcher.
//!
//! A person is an [`IdentityProfile`]: a ground-truth unit vector plus
//! per-component Gaussian capture noise. Each capture perturbs and
//! re-normalizes the ground truth, standing in for the embedding a face
//! network would produce from a fresh camera frame.

use std::collections::BTreeMap;
use std::fmt;

use rand::{CryptoRng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const EMBEDDING_DIM: usize = 128;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 1.0;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BiometricError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding must have {EMBEDDING_DIM} components, got {0}")]
    WrongDimension(usize),
    #[error("embedding is not unit-normalized (norm {0})")]
    NotNormalized(f64),
    #[error("cannot normalize a zero or non-finite vector")]
    Degenerate,
    #[error("negative or non-finite noise sigma {0}")]
    InvalidSigma(f64),
    #[error("no embedding stored under {0}")]
    NotFound(String),
}

/// Unit-norm 128-dimensional face feature vector.
#[derive(Clone, PartialEq)]
pub struct FaceEmbedding(Vec<f64>);

impl FaceEmbedding {
    /// Scales `v` to unit length.
    pub fn normalized(mut v: Vec<f64>) -> Result<Self, BiometricError> {
        if v.len() != EMBEDDING_DIM {
            return Err(BiometricError::WrongDimension(v.len()));
        }
        let norm = l2_norm(&v);
        if !norm.is_finite() || norm == 0.0 {
            return Err(BiometricError::Degenerate);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Self(v))
    }

    /// Accepts `v` as-is if it already satisfies the unit-norm invariant.
    pub fn from_unit(v: Vec<f64>) -> Result<Self, BiometricError> {
        if v.len() != EMBEDDING_DIM {
            return Err(BiometricError::WrongDimension(v.len()));
        }
        let norm = l2_norm(&v);
        // Written so that a NaN norm is rejected.
        let unit = (norm - 1.0).abs() <= NORM_TOLERANCE;
        if !unit {
            return Err(BiometricError::NotNormalized(norm));
        }
        Ok(Self(v))
    }

    /// Uniformly random direction on the unit sphere.
    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        loop {
            let v: Vec<f64> = (0..EMBEDDING_DIM)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            if let Ok(e) = Self::normalized(v) {
                return e;
            }
        }
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// 128 little-endian f64 values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(b: &[u8]) -> Result<Self, BiometricError> {
        if b.len() != EMBEDDING_DIM * 8 {
            return Err(BiometricError::WrongDimension(b.len() / 8));
        }
        let v = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_unit(v)
    }
}

impl fmt::Debug for FaceEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FaceEmbedding([{:.4}, {:.4}, ..])", self.0[0], self.0[1])
    }
}

impl Serialize for FaceEmbedding {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        crate::hexfmt::serialize(self.to_le_bytes(), s)
    }
}

impl<'de> Deserialize<'de> for FaceEmbedding {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let b = crate::hexfmt::decode_hex(d)?;
        Self::from_le_bytes(&b).map_err(serde::de::Error::custom)
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean distance between two raw vectors.
pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64, BiometricError> {
    if a.len() != b.len() {
        return Err(BiometricError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub fn distance(a: &FaceEmbedding, b: &FaceEmbedding) -> f64 {
    euclidean(&a.0, &b.0).expect("embeddings share a fixed dimension")
}

/// Accept iff `distance(login, reg) <= threshold`.
pub fn verify(login: &FaceEmbedding, reg: &FaceEmbedding, threshold: f64) -> bool {
    debug_assert!(threshold > 0.0);
    distance(login, reg) <= threshold
}

/// A simulated person: how their face embeds, and how noisy a capture is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityProfile {
    ground_truth: FaceEmbedding,
    noise_sigma: f64,
}

impl IdentityProfile {
    pub fn new(ground_truth: FaceEmbedding, noise_sigma: f64) -> Result<Self, BiometricError> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(BiometricError::InvalidSigma(noise_sigma));
        }
        Ok(Self {
            ground_truth,
            noise_sigma,
        })
    }

    pub fn random<R: RngCore>(noise_sigma: f64, rng: &mut R) -> Result<Self, BiometricError> {
        Self::new(FaceEmbedding::random(rng), noise_sigma)
    }

    pub fn ground_truth(&self) -> &FaceEmbedding {
        &self.ground_truth
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
}

/// One camera capture of `profile`.
pub fn capture<R: RngCore>(profile: &IdentityProfile, rng: &mut R) -> FaceEmbedding {
    if profile.noise_sigma == 0.0 {
        return profile.ground_truth.clone();
    }
    loop {
        let v = profile
            .ground_truth
            .0
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x + profile.noise_sigma * z
            })
            .collect();
        if let Ok(e) = FaceEmbedding::normalized(v) {
            return e;
        }
    }
}

/// Server-issued reference to a stored embedding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FbUrl(String);

impl FbUrl {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FbUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Server-side embedding storage addressed by [`FbUrl`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStore {
    entries: BTreeMap<FbUrl, FaceEmbedding>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store<R: RngCore + CryptoRng>(&mut self, e: FaceEmbedding, rng: &mut R) -> FbUrl {
        loop {
            let mut id = [0u8; 16];
            rng.fill_bytes(&mut id);
            let url = FbUrl(format!("fb-{}", hex::encode(id)));
            if !self.entries.contains_key(&url) {
                self.entries.insert(url.clone(), e);
                return url;
            }
        }
    }

    pub fn fetch(&self, url: &FbUrl) -> Result<&FaceEmbedding, BiometricError> {
        self.entries
            .get(url)
            .ok_or_else(|| BiometricError::NotFound(url.0.clone()))
    }

    /// Puts an embedding back under a known URL, e.g. when reloading state.
    pub fn insert_at(&mut self, url: FbUrl, e: FaceEmbedding) {
        self.entries.insert(url, e);
    }

    pub fn remove(&mut self, url: &FbUrl) -> Option<FaceEmbedding> {
        self.entries.remove(url)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn basis(i: usize, sign: f64) -> FaceEmbedding {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[i] = sign;
        FaceEmbedding::from_unit(v).unwrap()
    }

    #[test]
    fn distance_reference_values() {
        let a = basis(0, 1.0);
        assert_eq!(distance(&a, &a), 0.0);
        assert!((distance(&a, &basis(1, 1.0)) - 2f64.sqrt()).abs() < 1e-12);
        assert!((distance(&a, &basis(0, -1.0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn verify_examples() {
        let a = basis(3, 1.0);
        assert!(verify(&a, &a, 1e-9));
        assert!(!verify(&a, &basis(3, -1.0), 1.0));
    }

    #[test]
    fn euclidean_dimension_mismatch() {
        assert_eq!(
            euclidean(&[1.0, 2.0], &[1.0]),
            Err(BiometricError::DimensionMismatch { left: 2, right: 1 })
        );
    }

    #[test]
    fn zero_noise_capture_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let p = IdentityProfile::random(0.0, &mut rng).unwrap();
        assert_eq!(&capture(&p, &mut rng), p.ground_truth());
    }

    #[test]
    fn noisy_capture_moves() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let p = IdentityProfile::random(0.02, &mut rng).unwrap();
        for _ in 0..100 {
            let c = capture(&p, &mut rng);
            assert!(distance(&c, p.ground_truth()) > 0.0);
            assert!((c.norm() - 1.0).abs() <= NORM_TOLERANCE);
        }
    }

    #[test]
    fn invalid_profiles() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert!(IdentityProfile::random(-0.1, &mut rng).is_err());
        assert!(IdentityProfile::random(f64::NAN, &mut rng).is_err());
        assert_eq!(
            FaceEmbedding::normalized(vec![0.0; EMBEDDING_DIM]),
            Err(BiometricError::Degenerate)
        );
        assert_eq!(
            FaceEmbedding::normalized(vec![1.0; 3]),
            Err(BiometricError::WrongDimension(3))
        );
        assert!(matches!(
            FaceEmbedding::from_unit(vec![1.0; EMBEDDING_DIM]),
            Err(BiometricError::NotNormalized(_))
        ));
    }

    #[test]
    fn store_fetch_contract() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut store = EmbeddingStore::new();
        let e = FaceEmbedding::random(&mut rng);
        let u1 = store.store(e.clone(), &mut rng);
        let u2 = store.store(e.clone(), &mut rng);
        assert_ne!(u1, u2);
        assert_eq!(store.fetch(&u1).unwrap().to_le_bytes(), e.to_le_bytes());
        assert!(matches!(
            store.fetch(&FbUrl::new("fb-nope")),
            Err(BiometricError::NotFound(_))
        ));
        assert!(store.remove(&u1).is_some());
        assert!(store.fetch(&u1).is_err());
    }

    #[test]
    fn serde_is_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let e = FaceEmbedding::random(&mut rng);
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json.len(), 2 + EMBEDDING_DIM * 16);
        let back: FaceEmbedding = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_le_bytes(), e.to_le_bytes());
    }

    proptest! {
        #[test]
        fn verify_is_monotone_in_threshold(seed in any::<u64>(), t in 0.01f64..2.5, dt in 0.0f64..1.0) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a = FaceEmbedding::random(&mut rng);
            let p = IdentityProfile::new(a.clone(), 0.1).unwrap();
            let b = capture(&p, &mut rng);
            if verify(&a, &b, t) {
                prop_assert!(verify(&a, &b, t + dt));
            }
        }
    }
}
