//! Symbolic terms and Dolev-Yao knowledge.
//!
//! Atoms are SHA-256 digests of concrete byte strings, so transcripts can
//! carry an attacker's knowledge without carrying any secret value. A key is
//! named by the list of materials it is derived from; whoever can produce all
//! materials can produce the key.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{sha256, SecretKey};
use crate::messages::SessionId;
use crate::sim::BluetoothAddress;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Atom(#[serde(with = "crate::hexfmt::array")] pub [u8; 32]);

impl Atom {
    pub fn of(bytes: &[u8]) -> Self {
        Self(sha256(bytes))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", &self.to_hex()[..10])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Atom(Atom),
    Pair(Box<Term>, Box<Term>),
    Enc { key: Vec<Term>, body: Box<Term> },
    Key(Vec<Term>),
}

impl Term {
    pub fn atom(bytes: &[u8]) -> Self {
        Term::Atom(Atom::of(bytes))
    }

    pub fn pair(a: Term, b: Term) -> Self {
        Term::Pair(Box::new(a), Box::new(b))
    }

    /// Right-nested pairs.
    pub fn tuple(mut items: Vec<Term>) -> Self {
        let last = items.pop().expect("non-empty tuple");
        items
            .into_iter()
            .rev()
            .fold(last, |acc, t| Term::pair(t, acc))
    }

    pub fn enc(key: Vec<Term>, body: Term) -> Self {
        Term::Enc {
            key,
            body: Box::new(body),
        }
    }

    pub fn contains_enc(&self) -> bool {
        match self {
            Term::Atom(_) => false,
            Term::Pair(a, b) => a.contains_enc() || b.contains_enc(),
            Term::Enc { .. } => true,
            Term::Key(ms) => ms.iter().any(Term::contains_enc),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Term::Atom(_) => 1,
            Term::Pair(a, b) => 1 + a.depth().max(b.depth()),
            Term::Enc { key, body } => {
                1 + body
                    .depth()
                    .max(key.iter().map(Term::depth).max().unwrap_or(0))
            }
            Term::Key(ms) => 1 + ms.iter().map(Term::depth).max().unwrap_or(0),
        }
    }
}

/// Public labels that separate the key-derivation contexts.
pub mod labels {
    pub const KDF_NONCE: &[u8] = b"kdf:nonce";
    pub const KDF_SALTED: &[u8] = b"kdf:salted";
    pub const KDF_AID: &[u8] = b"kdf:aid-channel";
    pub const KDF_BT: &[u8] = b"kdf:bt";

    pub const ALL: [&[u8]; 4] = [KDF_NONCE, KDF_SALTED, KDF_AID, KDF_BT];
}

/// Term constructors for the protocol's concrete values and keys.
pub mod terms {
    use super::*;
    use crate::crypto::{Nonce10, Salt};

    pub fn secret(k: &SecretKey) -> Term {
        Term::atom(k.as_bytes())
    }

    pub fn bt(a: &BluetoothAddress) -> Term {
        Term::atom(a.to_string().as_bytes())
    }

    pub fn sid(s: &SessionId) -> Term {
        Term::atom(s.as_bytes())
    }

    pub fn nonce_key(k: &SecretKey, n: &Nonce10) -> Vec<Term> {
        vec![
            Term::atom(labels::KDF_NONCE),
            secret(k),
            Term::atom(n.as_bytes()),
        ]
    }

    pub fn salted_key(k: &SecretKey, s: &Salt) -> Vec<Term> {
        vec![
            Term::atom(labels::KDF_SALTED),
            secret(k),
            Term::atom(s.as_bytes()),
        ]
    }

    pub fn aid_key(aid: &SecretKey) -> Vec<Term> {
        vec![Term::atom(labels::KDF_AID), secret(aid)]
    }

    pub fn bt_key(a: &BluetoothAddress, sid_: &SessionId) -> Vec<Term> {
        vec![Term::atom(labels::KDF_BT), bt(a), sid(sid_)]
    }
}

/// A set of terms the attacker holds, closed under decomposition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackerKnowledge {
    terms: BTreeSet<Term>,
}

impl AttackerKnowledge {
    pub fn new() -> Self {
        Self::default()
    }

    /// Knowledge seeded with the public KDF labels.
    pub fn with_public_labels() -> Self {
        let mut k = Self::new();
        for l in labels::ALL {
            k.insert(Term::atom(l));
        }
        k
    }

    pub fn insert(&mut self, t: Term) -> bool {
        self.terms.insert(t)
    }

    pub fn contains(&self, t: &Term) -> bool {
        self.terms.contains(t)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Term> {
        self.terms.iter()
    }

    /// Can the attacker build `t` from what it holds (pairing, key
    /// derivation, encryption under a derivable key)?
    pub fn derivable(&self, t: &Term) -> bool {
        if self.terms.contains(t) {
            return true;
        }
        match t {
            Term::Atom(_) => false,
            Term::Pair(a, b) => self.derivable(a) && self.derivable(b),
            Term::Key(ms) => ms.iter().all(|m| self.derivable(m)),
            Term::Enc { key, body } => self.key_derivable(key) && self.derivable(body),
        }
    }

    fn key_derivable(&self, materials: &[Term]) -> bool {
        self.terms.contains(&Term::Key(materials.to_vec()))
            || materials.iter().all(|m| self.derivable(m))
    }

    /// Does the attacker know the concrete value behind `atom`?
    pub fn knows_atom(&self, atom: &Atom) -> bool {
        self.terms.contains(&Term::Atom(*atom))
    }
}

/// Least fixed point under projection and decryption with derivable keys.
/// Only subterms of the input are ever added, so this terminates.
pub fn close_knowledge(k: &AttackerKnowledge) -> AttackerKnowledge {
    let mut out = k.clone();
    loop {
        let mut new = Vec::new();
        for t in &out.terms {
            match t {
                Term::Pair(a, b) => {
                    for x in [a, b] {
                        if !out.terms.contains(x) {
                            new.push((**x).clone());
                        }
                    }
                }
                Term::Enc { key, body } if !out.terms.contains(body) && out.key_derivable(key) => {
                    new.push((**body).clone());
                }
                _ => {}
            }
        }
        if new.is_empty() {
            return out;
        }
        out.terms.extend(new);
    }
}
