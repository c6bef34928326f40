//! The committed blockchain held by each replica: hash-linked blocks with
//! consecutive sequence numbers, each non-genesis block paired with the
//! global quorum certificate that committed it.

use thiserror::Error;

use crate::auth::Authenticator;
use crate::committee::CommitteeSelection;
use crate::quorum::{verify_quorum_cert, QuorumCertificate, ThresholdKind};
use crate::types::{Block, Digest};

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("fork detected: block prev {got} does not match tip {tip}")]
    ForkDetected { got: String, tip: String },
    #[error("gap detected: block seq {got}, expected {expected}")]
    GapDetected { got: u64, expected: u64 },
    #[error("bad certificate for block at seq {0}")]
    BadCertificate(u64),
}

/// Blocks ordered by seq starting at the fixed genesis.
#[derive(Clone, Debug)]
pub struct Chain {
    genesis: Block,
    entries: Vec<(Block, QuorumCertificate)>,
}

impl Default for Chain {
    fn default() -> Self {
        Chain::new()
    }
}

impl Chain {
    pub fn new() -> Chain {
        Chain {
            genesis: Block::genesis(),
            entries: Vec::new(),
        }
    }

    pub fn genesis(&self) -> &Block {
        &self.genesis
    }

    pub fn tip(&self) -> &Block {
        self.entries.last().map(|(b, _)| b).unwrap_or(&self.genesis)
    }

    pub fn tip_seq(&self) -> u64 {
        self.tip().seq
    }

    pub fn tip_digest(&self) -> Digest {
        self.tip().digest
    }

    /// Certificate for the tip block; `None` at genesis.
    pub fn tip_cert(&self) -> Option<&QuorumCertificate> {
        self.entries.last().map(|(_, c)| c)
    }

    pub fn len(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn block_at(&self, seq: u64) -> Option<&Block> {
        if seq == 0 {
            Some(&self.genesis)
        } else {
            self.entries.get(seq as usize - 1).map(|(b, _)| b)
        }
    }

    pub fn cert_at(&self, seq: u64) -> Option<&QuorumCertificate> {
        if seq == 0 {
            None
        } else {
            self.entries.get(seq as usize - 1).map(|(_, c)| c)
        }
    }

    pub fn digest_at(&self, seq: u64) -> Option<Digest> {
        self.block_at(seq).map(|b| b.digest)
    }

    /// Appends a block under its global quorum certificate. The certificate
    /// is verified against the block digest; linkage and sequence
    /// consecutiveness are enforced.
    pub fn append(
        &mut self,
        block: Block,
        cert: QuorumCertificate,
        committee: &CommitteeSelection,
        f: u32,
        c: u32,
        auth: &dyn Authenticator,
    ) -> Result<(), ChainError> {
        let tip = self.tip();
        if block.seq != tip.seq + 1 {
            return Err(ChainError::GapDetected {
                got: block.seq,
                expected: tip.seq + 1,
            });
        }
        if block.prev != tip.digest {
            return Err(ChainError::ForkDetected {
                got: block.prev.short(),
                tip: tip.digest.short(),
            });
        }
        if cert.kind != ThresholdKind::GlobalQuorum
            || cert.seq != block.seq
            || !block.digest_consistent()
            || !verify_quorum_cert(&cert, &block.digest, committee, f, c, auth)
        {
            return Err(ChainError::BadCertificate(block.seq));
        }
        self.entries.push((block, cert));
        Ok(())
    }

    /// Full-chain validation: hash linkage, consecutive seqs, digest
    /// consistency and certificate shape. Run in test teardowns.
    pub fn validate(&self, f: u32) -> Result<(), ChainError> {
        let mut prev = &self.genesis;
        if !prev.digest_consistent() {
            return Err(ChainError::BadCertificate(0));
        }
        for (i, (block, cert)) in self.entries.iter().enumerate() {
            let expected_seq = i as u64 + 1;
            if block.seq != expected_seq {
                return Err(ChainError::GapDetected {
                    got: block.seq,
                    expected: expected_seq,
                });
            }
            if block.prev != prev.digest {
                return Err(ChainError::ForkDetected {
                    got: block.prev.short(),
                    tip: prev.digest.short(),
                });
            }
            if !block.digest_consistent()
                || cert.digest != block.digest
                || cert.seq != block.seq
                || cert.kind != ThresholdKind::GlobalQuorum
                || cert.votes.len() < crate::quorum::global_quorum_threshold(f)
            {
                return Err(ChainError::BadCertificate(block.seq));
            }
            prev = block;
        }
        Ok(())
    }

    /// Byte-level equality of the committed prefix up to `seq`.
    pub fn prefix_digest(&self, seq: u64) -> Option<Digest> {
        self.digest_at(seq)
    }
}
