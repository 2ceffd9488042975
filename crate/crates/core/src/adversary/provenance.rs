//! Who sealed which envelope, and what is symbolically inside it.
//!
//! Agents record a [`SealRecord`] for every envelope they produce. The
//! simulator collects them into a [`Provenance`] registry, which the
//! adversary model uses to turn observed ciphertext into terms and the
//! authenticity check uses to attribute accepted envelopes. None of this is
//! visible to the agents themselves.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::term::{Atom, Term};
use crate::crypto::{seal, Envelope, KeyPair};
use crate::messages::PrincipalId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealRecord {
    pub envelope: Atom,
    pub key: Vec<Term>,
    pub body: Term,
}

/// Seals `plaintext` and records its symbolic shape in `log`.
pub fn seal_traced<R: RngCore + CryptoRng>(
    keys: &KeyPair,
    key_term: Vec<Term>,
    plaintext: &[u8],
    body: Term,
    rng: &mut R,
    log: &mut Vec<SealRecord>,
) -> Envelope {
    let env = seal(keys, plaintext, rng);
    log.push(SealRecord {
        envelope: Atom(env.digest()),
        key: key_term,
        body,
    });
    env
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealOrigin {
    pub sealer: PrincipalId,
    pub key: Vec<Term>,
    pub body: Term,
}

#[derive(Debug, Clone, Default)]
pub struct Provenance {
    by_envelope: BTreeMap<Atom, SealOrigin>,
}

impl Provenance {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, sealer: &PrincipalId, records: Vec<SealRecord>) {
        for r in records {
            self.by_envelope.entry(r.envelope).or_insert(SealOrigin {
                sealer: sealer.clone(),
                key: r.key,
                body: r.body,
            });
        }
    }

    pub fn origin(&self, env: &Envelope) -> Option<&SealOrigin> {
        self.by_envelope.get(&Atom(env.digest()))
    }

    /// Symbolic form of an envelope: `enc(key, body)` if we know who sealed
    /// it, an opaque atom otherwise.
    pub fn envelope_term(&self, env: &Envelope) -> Term {
        self.expand(&Term::Atom(Atom(env.digest())))
    }

    /// Replaces every atom naming a recorded envelope by its `enc` form.
    pub fn expand(&self, t: &Term) -> Term {
        match t {
            Term::Atom(a) => match self.by_envelope.get(a) {
                Some(o) => Term::enc(o.key.clone(), self.expand(&o.body)),
                None => t.clone(),
            },
            Term::Pair(x, y) => Term::pair(self.expand(x), self.expand(y)),
            Term::Enc { key, body } => Term::enc(
                key.iter().map(|m| self.expand(m)).collect(),
                self.expand(body),
            ),
            Term::Key(ms) => Term::Key(ms.iter().map(|m| self.expand(m)).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.by_envelope.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_envelope.is_empty()
    }
}
