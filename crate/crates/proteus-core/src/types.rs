//! Domain types shared by every module: replica identifiers, digests,
//! transactions and blocks, plus the canonical byte encoding used both for
//! digesting and for the simulator wire format.

use serde::{Serialize, Serializer};
use sha2::{Digest as _, Sha256};

/// Index of a replica, unique in `[0, n)`. Total order follows the index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ReplicaId(pub u32);

impl std::fmt::Debug for ReplicaId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl std::fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 32-byte content digest. Equal digests are treated as equal preimages
/// within a run (collision resistance is assumed of the hash).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Short prefix used in traces and test output.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.short())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

/// Opaque transaction payload. The harness generates synthetic transfer
/// records; no balance semantics are enforced.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Transaction(pub Vec<u8>);

impl Transaction {
    pub fn is_well_formed(&self) -> bool {
        !self.0.is_empty()
    }
}

impl std::fmt::Debug for Transaction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "tx({}B)", self.0.len())
    }
}

/// A block of transactions at a given view and sequence number, linked to
/// its predecessor by digest.
#[derive(Clone, PartialEq, Eq)]
pub struct Block {
    pub view: u64,
    pub seq: u64,
    pub payload: Vec<Transaction>,
    pub prev: Digest,
    pub digest: Digest,
}

impl Block {
    /// Builds a block and computes its digest from the other fields.
    pub fn new(view: u64, seq: u64, payload: Vec<Transaction>, prev: Digest) -> Block {
        let digest = digest_of(view, seq, &payload, &prev);
        Block {
            view,
            seq,
            payload,
            prev,
            digest,
        }
    }

    /// The fixed genesis block every replica starts from: seq 0, empty
    /// payload, all-zero predecessor digest.
    pub fn genesis() -> Block {
        Block::new(0, 0, Vec::new(), Digest::ZERO)
    }

    /// True iff the stored digest matches a recomputation over the fields.
    pub fn digest_consistent(&self) -> bool {
        self.digest == digest_of(self.view, self.seq, &self.payload, &self.prev)
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        wire::put_u64(out, self.view);
        wire::put_u64(out, self.seq);
        wire::put_u64(out, self.payload.len() as u64);
        for tx in &self.payload {
            wire::put_bytes(out, &tx.0);
        }
        wire::put_digest(out, &self.prev);
        wire::put_digest(out, &self.digest);
    }
}

impl std::fmt::Debug for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Block(v{} s{} {} txs {})",
            self.view,
            self.seq,
            self.payload.len(),
            self.digest.short()
        )
    }
}

/// Deterministic digest over the block tuple. Any single-field change yields
/// a different digest with overwhelming probability.
pub fn digest_of(view: u64, seq: u64, payload: &[Transaction], prev: &Digest) -> Digest {
    let mut buf = Vec::with_capacity(64 + payload.iter().map(|t| t.0.len() + 8).sum::<usize>());
    wire::put_u64(&mut buf, view);
    wire::put_u64(&mut buf, seq);
    wire::put_u64(&mut buf, payload.len() as u64);
    for tx in payload {
        wire::put_bytes(&mut buf, &tx.0);
    }
    wire::put_digest(&mut buf, prev);
    sha256(&buf)
}

pub fn sha256(bytes: &[u8]) -> Digest {
    let out = Sha256::digest(bytes);
    let mut d = [0u8; 32];
    d.copy_from_slice(&out);
    Digest(d)
}

/// Canonical encoding primitives: length-prefixed field concatenation in
/// declared field order. Byte-stable across runs and platforms.
pub mod wire {
    use super::Digest;

    pub fn put_u64(out: &mut Vec<u8>, v: u64) {
        out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u32(out: &mut Vec<u8>, v: u32) {
        out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u8(out: &mut Vec<u8>, v: u8) {
        out.push(v);
    }

    pub fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
        put_u64(out, bytes.len() as u64);
        out.extend_from_slice(bytes);
    }

    pub fn put_digest(out: &mut Vec<u8>, d: &Digest) {
        out.extend_from_slice(&d.0);
    }
}
