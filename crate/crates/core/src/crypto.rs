//! Secret generation, key derivation and the encrypt-then-MAC envelope.
//!
//! Every confidential payload in the protocol travels as an [`Envelope`]:
//! AES-256-CBC with PKCS#7 padding under `k_e`, followed by HMAC-SHA-256 under
//! `k_m` over `iv || ct`. The tag is always checked before any block is
//! decrypted, so a tampered envelope can only ever fail with
//! [`CryptoError::MacMismatch`].
//!
//! Randomness is injected; nothing in this module touches a global RNG.

use std::fmt;

use aes::cipher::block_padding::Pkcs7;
use aes::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sim::BluetoothAddress;

type HmacSha256 = Hmac<Sha256>;
type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;

pub const KEY_LEN: usize = 32;
pub const SALT_LEN: usize = 16;
pub const IV_LEN: usize = 16;
pub const MAC_LEN: usize = 32;
pub const BLOCK_LEN: usize = 16;
pub const TOKEN_LEN: usize = 16;
pub const NONCE_DIGITS: usize = 10;

/// Salt used when a Bluetooth address is stretched into a key pair.
pub const BT_KDF_SALT: Salt = Salt(*b"BT-PROXIMITY-KDF");
/// Salt used for the symmetric channel keyed directly by an AID.
pub const AID_CHANNEL_SALT: Salt = Salt(*b"AID-CHANNEL-SALT");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication tag mismatch")]
    MacMismatch,
    #[error("invalid padding after successful MAC check")]
    BadPadding,
    #[error("key material must not be empty")]
    EmptyKeyMaterial,
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(&'static str),
    #[error("invalid 10-digit nonce: {0:?}")]
    InvalidNonce(String),
}

/// SHA-256 of `bytes`. Used for transcript digests and symbolic atoms.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hmac_sha256(key: &[u8], data: &[&[u8]]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    for chunk in data {
        mac.update(chunk);
    }
    mac.finalize().into_bytes().into()
}

macro_rules! byte_newtype {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub(crate) [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn from_bytes(bytes: [u8; $len]) -> Self {
                Self(bytes)
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                bytes.try_into().ok().map(Self)
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl AsRef<[u8]> for $name {
            fn as_ref(&self) -> &[u8] {
                &self.0
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                crate::hexfmt::serialize(self.0, s)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                crate::hexfmt::decode_array(d).map(Self)
            }
        }
    };
}

byte_newtype!(
    /// A 256-bit secret: the app/server shared key SK, an AID, or a rotated AID.
    SecretKey,
    KEY_LEN
);
byte_newtype!(
    /// 128-bit salt issued with an AID at registration.
    Salt,
    SALT_LEN
);
byte_newtype!(
    /// Single-use proximity token bound to one login session.
    ReplayToken,
    TOKEN_LEN
);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey({}..)", &self.to_hex()[..8])
    }
}

impl fmt::Debug for Salt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Salt({})", self.to_hex())
    }
}

impl fmt::Debug for ReplayToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ReplayToken({}..)", &self.to_hex()[..8])
    }
}

pub fn gen_secret<R: RngCore + CryptoRng>(rng: &mut R) -> SecretKey {
    let mut b = [0u8; KEY_LEN];
    rng.fill_bytes(&mut b);
    SecretKey(b)
}

pub fn gen_salt<R: RngCore + CryptoRng>(rng: &mut R) -> Salt {
    let mut b = [0u8; SALT_LEN];
    rng.fill_bytes(&mut b);
    Salt(b)
}

pub fn gen_token<R: RngCore + CryptoRng>(rng: &mut R) -> ReplayToken {
    let mut b = [0u8; TOKEN_LEN];
    rng.fill_bytes(&mut b);
    ReplayToken(b)
}

/// A random ten-digit decimal string; leading zeros are allowed.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Nonce10([u8; NONCE_DIGITS]);

impl Nonce10 {
    pub fn parse(s: &str) -> Result<Self, CryptoError> {
        let bytes = s.as_bytes();
        if bytes.len() != NONCE_DIGITS || !bytes.iter().all(u8::is_ascii_digit) {
            return Err(CryptoError::InvalidNonce(s.to_owned()));
        }
        let mut d = [0u8; NONCE_DIGITS];
        d.copy_from_slice(bytes);
        Ok(Self(d))
    }

    pub fn as_str(&self) -> &str {
        // Only ASCII digits are ever stored.
        std::str::from_utf8(&self.0).expect("ascii digits")
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// Decimal successor modulo 10^10, re-padded to ten digits.
    pub fn increment(&self) -> Self {
        let mut d = self.0;
        for c in d.iter_mut().rev() {
            if *c == b'9' {
                *c = b'0';
            } else {
                *c += 1;
                break;
            }
        }
        Self(d)
    }
}

impl fmt::Debug for Nonce10 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce10({})", self.as_str())
    }
}

impl fmt::Display for Nonce10 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Nonce10 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Nonce10 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Nonce10::parse(&s).map_err(serde::de::Error::custom)
    }
}

pub fn gen_nonce10<R: RngCore + CryptoRng>(rng: &mut R) -> Nonce10 {
    let mut d = [0u8; NONCE_DIGITS];
    for c in d.iter_mut() {
        *c = b'0' + rng.gen_range(0..10u8);
    }
    Nonce10(d)
}

/// Encryption key and MAC key for one envelope channel.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    k_e: [u8; KEY_LEN],
    k_m: [u8; KEY_LEN],
}

impl KeyPair {
    pub fn from_parts(k_e: [u8; KEY_LEN], k_m: [u8; KEY_LEN]) -> Self {
        Self { k_e, k_m }
    }

    pub fn enc_key(&self) -> &[u8; KEY_LEN] {
        &self.k_e
    }

    pub fn mac_key(&self) -> &[u8; KEY_LEN] {
        &self.k_m
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyPair(..)")
    }
}

/// `k_e = HMAC(k, n)`, `k_m = HMAC(k, n+1)` where `n` is the ASCII digit
/// string and `n+1` its wrapped decimal successor.
pub fn derive_keys(k: &SecretKey, n: &Nonce10) -> KeyPair {
    KeyPair {
        k_e: hmac_sha256(&k.0, &[n.as_bytes()]),
        k_m: hmac_sha256(&k.0, &[n.increment().as_bytes()]),
    }
}

/// Composite keys such as `SK + S` or `AID + S`: HMAC keyed by the secret
/// material over `salt || 0x00` (encryption) and `salt || 0x01` (MAC).
pub fn derive_key_from_password(
    secret_material: &[u8],
    salt: &Salt,
) -> Result<KeyPair, CryptoError> {
    if secret_material.is_empty() {
        return Err(CryptoError::EmptyKeyMaterial);
    }
    Ok(KeyPair {
        k_e: hmac_sha256(secret_material, &[&salt.0, &[0x00]]),
        k_m: hmac_sha256(secret_material, &[&salt.0, &[0x01]]),
    })
}

/// Keys for a channel "encrypted by BT_i".
///
/// A Bluetooth address carries only 48 bits and is not secret; the session
/// context is mixed in so the pair is at least bound to one login. This is
/// not a high-entropy key.
pub fn derive_bt_key(bt: &BluetoothAddress, context: &[u8]) -> KeyPair {
    let mut material = bt.to_string().into_bytes();
    material.extend_from_slice(context);
    derive_key_from_password(&material, &BT_KDF_SALT).expect("address string is never empty")
}

/// Keys for payloads written `E_AID(..)`: the fixed registration token, the
/// rotated AID and the final OK challenge.
pub fn aid_keys(aid: &SecretKey) -> KeyPair {
    derive_key_from_password(&aid.0, &AID_CHANNEL_SALT).expect("32-byte key")
}

/// Composite `secret + salt` keys used for `E_{SK+S}` and `E_{AID+S}`.
pub fn salted_keys(secret: &SecretKey, salt: &Salt) -> KeyPair {
    derive_key_from_password(&secret.0, salt).expect("32-byte key")
}

/// `IV || MAC || ciphertext`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub iv: [u8; IV_LEN],
    pub mac: [u8; MAC_LEN],
    pub ct: Vec<u8>,
}

impl Envelope {
    pub const HEADER_LEN: usize = IV_LEN + MAC_LEN;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER_LEN + self.ct.len());
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.mac);
        out.extend_from_slice(&self.ct);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CryptoError> {
        if b.len() < Self::HEADER_LEN + BLOCK_LEN {
            return Err(CryptoError::MalformedEnvelope(
                "shorter than header plus one block",
            ));
        }
        let ct = &b[Self::HEADER_LEN..];
        if !ct.len().is_multiple_of(BLOCK_LEN) {
            return Err(CryptoError::MalformedEnvelope(
                "ciphertext not a multiple of the block size",
            ));
        }
        let mut iv = [0u8; IV_LEN];
        let mut mac = [0u8; MAC_LEN];
        iv.copy_from_slice(&b[..IV_LEN]);
        mac.copy_from_slice(&b[IV_LEN..Self::HEADER_LEN]);
        Ok(Self {
            iv,
            mac,
            ct: ct.to_vec(),
        })
    }

    /// SHA-256 over the wire bytes.
    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.to_bytes())
    }
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Envelope(iv={}, ct={}B)",
            hex::encode(self.iv),
            self.ct.len()
        )
    }
}

impl Serialize for Envelope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        crate::hexfmt::serialize(self.to_bytes(), s)
    }
}

impl<'de> Deserialize<'de> for Envelope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let b = crate::hexfmt::decode_hex(d)?;
        Envelope::from_bytes(&b).map_err(serde::de::Error::custom)
    }
}

/// Encrypt-then-MAC with a fresh random IV.
pub fn seal<R: RngCore + CryptoRng>(keys: &KeyPair, plaintext: &[u8], rng: &mut R) -> Envelope {
    let mut iv = [0u8; IV_LEN];
    rng.fill_bytes(&mut iv);
    seal_with_iv(keys, &iv, plaintext)
}

/// Deterministic [`seal`]; the caller owns IV freshness.
pub fn seal_with_iv(keys: &KeyPair, iv: &[u8; IV_LEN], plaintext: &[u8]) -> Envelope {
    let ct =
        Aes256CbcEnc::new(&keys.k_e.into(), iv.into()).encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    let mac = hmac_sha256(&keys.k_m, &[iv, &ct]);
    Envelope { iv: *iv, mac, ct }
}

/// Length-checked comparison whose timing does not depend on where the
/// inputs differ.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Verifies the tag over `iv || ct`, then decrypts.
pub fn open(keys: &KeyPair, env: &Envelope) -> Result<Vec<u8>, CryptoError> {
    if env.ct.is_empty() || !env.ct.len().is_multiple_of(BLOCK_LEN) {
        return Err(CryptoError::MalformedEnvelope(
            "ciphertext not a positive multiple of the block size",
        ));
    }
    let mut mac = HmacSha256::new_from_slice(&keys.k_m).expect("HMAC accepts any key length");
    mac.update(&env.iv);
    mac.update(&env.ct);
    mac.verify_slice(&env.mac)
        .map_err(|_| CryptoError::MacMismatch)?;
    Aes256CbcDec::new(&keys.k_e.into(), (&env.iv).into())
        .decrypt_padded_vec_mut::<Pkcs7>(&env.ct)
        .map_err(|_| CryptoError::BadPadding)
}
