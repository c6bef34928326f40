//! Message authentication. Every message a replica emits is signed; the
//! scheme is abstract so a real signature scheme and a cheap deterministic
//! test scheme are interchangeable behind the same trait.

use std::sync::Arc;

use sha2::{Digest as _, Sha256};

use crate::types::ReplicaId;

/// Opaque authenticator tag attached to every message.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature(pub [u8; 32]);

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sig({})", hex::encode(&self.0[..4]))
    }
}

/// Signing and verification under per-replica keys. Implementations must be
/// deterministic: the same (signer, bytes) always yields the same signature.
pub trait Authenticator: Send + Sync {
    fn sign(&self, signer: ReplicaId, bytes: &[u8]) -> Signature;
    fn verify(&self, signer: ReplicaId, bytes: &[u8], sig: &Signature) -> bool;
}

pub type SharedAuthenticator = Arc<dyn Authenticator>;

/// Keyed-digest scheme for tests and simulation: each replica's key is
/// derived from a master secret, and a signature is the keyed hash of the
/// message. Unforgeability holds by construction inside the simulator
/// because only the owning replica's step function is ever handed its id.
pub struct KeyedDigestAuth {
    keys: Vec<[u8; 32]>,
}

impl KeyedDigestAuth {
    pub fn new(master: &[u8], n: u32) -> KeyedDigestAuth {
        let keys = (0..n)
            .map(|i| {
                let mut h = Sha256::new();
                h.update(b"proteus-key");
                h.update(master);
                h.update(i.to_le_bytes());
                let out = h.finalize();
                let mut k = [0u8; 32];
                k.copy_from_slice(&out);
                k
            })
            .collect();
        KeyedDigestAuth { keys }
    }

    pub fn shared(master: &[u8], n: u32) -> SharedAuthenticator {
        Arc::new(KeyedDigestAuth::new(master, n))
    }
}

impl Authenticator for KeyedDigestAuth {
    fn sign(&self, signer: ReplicaId, bytes: &[u8]) -> Signature {
        let key = &self.keys[signer.0 as usize];
        let mut h = Sha256::new();
        h.update(key);
        h.update(bytes);
        let out = h.finalize();
        let mut s = [0u8; 32];
        s.copy_from_slice(&out);
        Signature(s)
    }

    fn verify(&self, signer: ReplicaId, bytes: &[u8], sig: &Signature) -> bool {
        if signer.0 as usize >= self.keys.len() {
            return false;
        }
        self.sign(signer, bytes) == *sig
    }
}
