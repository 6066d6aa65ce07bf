//! Block tree, digests, quorum certificates and the shared message vocabulary.
//!
//! Canonical block encoding (the digest preimage) is fixed and documented so
//! traces replay byte-identically across runs and platforms:
//!
//! ```text
//! 0x42 || parent (32 bytes) || height (u64 BE) || view (u64 BE)
//!      || payload length (u32 BE) || payload bytes
//! ```
//!
//! The genesis block hashes with an all-zero parent field and is then linked
//! to itself, so `parent(genesis) == genesis`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use sha2::{Digest as _, Sha256};

pub type ViewNumber = u64;

/// Distinguishes the two instances of a twinned replica index. Singleton
/// replicas use `None`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum TwinTag {
    None,
    A,
    B,
}

/// One running protocol instance. Twins share `index` (their identity: votes
/// are counted per index) but differ in `tag`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ProcessId {
    pub index: u8,
    pub tag: TwinTag,
}

impl ProcessId {
    pub fn single(index: u8) -> Self {
        ProcessId { index, tag: TwinTag::None }
    }

    pub fn twin(index: u8, tag: TwinTag) -> Self {
        ProcessId { index, tag }
    }

    pub fn is_twin(&self) -> bool {
        self.tag != TwinTag::None
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tag {
            TwinTag::None => write!(f, "{}", self.index),
            TwinTag::A => write!(f, "{}A", self.index),
            TwinTag::B => write!(f, "{}B", self.index),
        }
    }
}

impl core::str::FromStr for ProcessId {
    type Err = ChainError;

    fn from_str(s: &str) -> Result<Self, ChainError> {
        let (digits, tag) = match s.as_bytes().last() {
            Some(b'A') => (&s[..s.len() - 1], TwinTag::A),
            Some(b'B') => (&s[..s.len() - 1], TwinTag::B),
            Some(_) => (s, TwinTag::None),
            None => return Err(ChainError::Malformed("empty process id")),
        };
        let index = digits
            .parse::<u8>()
            .map_err(|_| ChainError::Malformed("bad process index"))?;
        Ok(ProcessId { index, tag })
    }
}

/// 256-bit content digest of a block's canonical encoding.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockDigest(pub [u8; 32]);

impl BlockDigest {
    pub const ZERO: BlockDigest = BlockDigest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// First 8 bytes as hex, the display form used in traces and exports.
    pub fn short_hex(&self) -> String {
        let mut s = String::with_capacity(16);
        for b in &self.0[..8] {
            let _ = fmt::Write::write_fmt(&mut s, format_args!("{b:02x}"));
        }
        s
    }
}

impl fmt::Debug for BlockDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockDigest({})", self.short_hex())
    }
}

impl fmt::Display for BlockDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.short_hex())
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Block {
    pub digest: BlockDigest,
    pub parent: BlockDigest,
    pub height: u64,
    pub view: ViewNumber,
    /// Opaque bytes distinguishing conflicting proposals. Proposals built by
    /// the replicas encode (leader index, view, per-view counter), so twins
    /// fed identical inputs produce byte-identical blocks.
    pub payload_tag: Vec<u8>,
}

fn digest_fields(parent: &BlockDigest, height: u64, view: ViewNumber, payload: &[u8]) -> BlockDigest {
    let mut h = Sha256::new();
    h.update([0x42u8]);
    h.update(parent.as_bytes());
    h.update(height.to_be_bytes());
    h.update(view.to_be_bytes());
    h.update((payload.len() as u32).to_be_bytes());
    h.update(payload);
    BlockDigest(h.finalize().into())
}

pub fn proposal_payload(leader: u8, view: ViewNumber, counter: u32) -> Vec<u8> {
    let mut p = Vec::with_capacity(13);
    p.push(leader);
    p.extend_from_slice(&view.to_be_bytes());
    p.extend_from_slice(&counter.to_be_bytes());
    p
}

impl Block {
    fn genesis() -> Block {
        let payload = b"genesis".to_vec();
        let digest = digest_fields(&BlockDigest::ZERO, 0, 0, &payload);
        Block { digest, parent: digest, height: 0, view: 0, payload_tag: payload }
    }

    /// Builds the child block a leader proposes on top of `parent`.
    pub fn child(parent: &Block, view: ViewNumber, payload_tag: Vec<u8>) -> Block {
        let height = parent.height + 1;
        let digest = digest_fields(&parent.digest, height, view, &payload_tag);
        Block { digest, parent: parent.digest, height, view, payload_tag }
    }

    pub fn is_genesis(&self) -> bool {
        self.parent == self.digest
    }
}

/// Append-only block tree shared by one execution. Lookup doubles as the
/// data-availability oracle: replicas may only dereference digests they
/// learned from messages.
#[derive(Clone, Debug)]
pub struct BlockStore {
    blocks: BTreeMap<BlockDigest, Block>,
    genesis: BlockDigest,
}

impl BlockStore {
    pub fn new() -> BlockStore {
        let g = Block::genesis();
        let genesis = g.digest;
        let mut blocks = BTreeMap::new();
        blocks.insert(genesis, g);
        BlockStore { blocks, genesis }
    }

    pub fn genesis(&self) -> BlockDigest {
        self.genesis
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, d: &BlockDigest) -> bool {
        self.blocks.contains_key(d)
    }

    pub fn get(&self, d: &BlockDigest) -> Result<&Block, ChainError> {
        self.blocks.get(d).ok_or(ChainError::UnknownBlock(*d))
    }

    /// Inserts a block, enforcing tree closure: the parent must already be
    /// present and heights must be consecutive. Re-inserting an identical
    /// block is a no-op (twins fed identical inputs propose identical blocks).
    pub fn insert(&mut self, block: Block) -> Result<(), ChainError> {
        if let Some(existing) = self.blocks.get(&block.digest) {
            if *existing == block {
                return Ok(());
            }
            return Err(ChainError::Malformed("digest collision on insert"));
        }
        let parent = self.get(&block.parent)?;
        if block.height != parent.height + 1 {
            return Err(ChainError::Malformed("child height must be parent height + 1"));
        }
        let expect = digest_fields(&block.parent, block.height, block.view, &block.payload_tag);
        if expect != block.digest {
            return Err(ChainError::Malformed("stored digest does not match content"));
        }
        self.blocks.insert(block.digest, block);
        Ok(())
    }

    /// True iff `ancestor` lies on `child`'s parent chain; every block
    /// extends itself.
    pub fn extends(&self, child: &BlockDigest, ancestor: &BlockDigest) -> Result<bool, ChainError> {
        let target = self.get(ancestor)?;
        let mut cur = self.get(child)?;
        while cur.height > target.height {
            cur = self.get(&cur.parent)?;
        }
        Ok(cur.digest == target.digest)
    }

    /// Two blocks conflict iff neither extends the other.
    pub fn conflicts(&self, a: &BlockDigest, b: &BlockDigest) -> Result<bool, ChainError> {
        Ok(!self.extends(a, b)? && !self.extends(b, a)?)
    }

    /// Blocks on the path `from` (exclusive) up to `to` (inclusive), oldest
    /// first. `to` must extend `from`.
    pub fn path_between(
        &self,
        from: &BlockDigest,
        to: &BlockDigest,
    ) -> Result<Vec<BlockDigest>, ChainError> {
        let mut path = Vec::new();
        let mut cur = self.get(to)?;
        let stop = self.get(from)?;
        while cur.height > stop.height {
            path.push(cur.digest);
            cur = self.get(&cur.parent)?;
        }
        if cur.digest != stop.digest {
            return Err(ChainError::Malformed("path_between on conflicting blocks"));
        }
        path.reverse();
        Ok(path)
    }
}

impl Default for BlockStore {
    fn default() -> Self {
        BlockStore::new()
    }
}

/// Protocol phase a vote or certificate belongs to. `Generic` is the single
/// vote phase of Sync HotStuff.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Phase {
    Prepare,
    PreCommit,
    Commit,
    Generic,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Vote {
    pub block: BlockDigest,
    pub view: ViewNumber,
    pub phase: Phase,
    pub signer: ProcessId,
}

/// Quorum certificate: `signers` holds distinct replica indices, so a twin
/// pair contributes at most one signature.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct QuorumCertificate {
    pub block: BlockDigest,
    pub view: ViewNumber,
    pub phase: Phase,
    pub signers: BTreeSet<u8>,
}

impl QuorumCertificate {
    /// Sentinel certificate for the genesis block (view 0, no signers).
    pub fn genesis(genesis: BlockDigest) -> QuorumCertificate {
        QuorumCertificate { block: genesis, view: 0, phase: Phase::Generic, signers: BTreeSet::new() }
    }
}

/// Aggregates votes into a certificate. Votes are deduplicated by replica
/// index; returns `None` while distinct indices fall short of the quorum.
pub fn form_qc(
    votes: &[Vote],
    config: &ProtocolConfig,
) -> Result<Option<QuorumCertificate>, ChainError> {
    let first = match votes.first() {
        Some(v) => v,
        None => return Ok(None),
    };
    let mut signers = BTreeSet::new();
    for v in votes {
        if v.block != first.block || v.view != first.view || v.phase != first.phase {
            return Err(ChainError::MixedVotes);
        }
        signers.insert(v.signer.index);
    }
    if signers.len() < config.quorum_size() as usize {
        return Ok(None);
    }
    Ok(Some(QuorumCertificate {
        block: first.block,
        view: first.view,
        phase: first.phase,
        signers,
    }))
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum ProtocolKind {
    HotStuff,
    TwoPhaseHotStuff,
    SyncHotStuff,
}

impl ProtocolKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProtocolKind::HotStuff => "hotstuff",
            ProtocolKind::TwoPhaseHotStuff => "two-phase-hotstuff",
            ProtocolKind::SyncHotStuff => "sync-hotstuff",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ProtocolConfig {
    pub n: u8,
    pub f: u8,
    pub kind: ProtocolKind,
}

impl ProtocolConfig {
    pub fn new(n: u8, f: u8, kind: ProtocolKind) -> Result<ProtocolConfig, ChainError> {
        let min = match kind {
            ProtocolKind::SyncHotStuff => 2 * f + 1,
            _ => 3 * f + 1,
        };
        if f == 0 || n < min {
            return Err(ChainError::BadConfig("replica count below fault-budget minimum"));
        }
        Ok(ProtocolConfig { n, f, kind })
    }

    /// 2f+1 for the partially synchronous variants, f+1 for Sync HotStuff.
    pub fn quorum_size(&self) -> u8 {
        match self.kind {
            ProtocolKind::SyncHotStuff => self.f + 1,
            _ => 2 * self.f + 1,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum MessageKind {
    NewView,
    Propose,
    VotePrepare,
    VotePreCommit,
    VoteCommit,
    QCAnnounce,
    Blame,
    BlameForward,
}

impl MessageKind {
    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::NewView => "new-view",
            MessageKind::Propose => "propose",
            MessageKind::VotePrepare => "vote-prepare",
            MessageKind::VotePreCommit => "vote-pre-commit",
            MessageKind::VoteCommit => "vote-commit",
            MessageKind::QCAnnounce => "qc-announce",
            MessageKind::Blame => "blame",
            MessageKind::BlameForward => "blame-forward",
        }
    }

    pub fn is_vote(&self) -> bool {
        matches!(
            self,
            MessageKind::VotePrepare | MessageKind::VotePreCommit | MessageKind::VoteCommit
        )
    }
}

/// Messages address identities, not instances: `Index(i)` fans out to every
/// live instance of index `i` (that is how twins intercept traffic).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Recipient {
    All,
    Index(u8),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: ProcessId,
    pub recipient: Recipient,
    pub view: ViewNumber,
    pub block: Option<BlockDigest>,
    pub qc: Option<QuorumCertificate>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ChainError {
    UnknownBlock(BlockDigest),
    MixedVotes,
    BadConfig(&'static str),
    Malformed(&'static str),
    /// Harness bug: an internal consistency assumption failed.
    Internal(&'static str),
}

impl fmt::Display for ChainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainError::UnknownBlock(d) => write!(f, "unknown block {d}"),
            ChainError::MixedVotes => write!(f, "votes span more than one (block, view, phase)"),
            ChainError::BadConfig(m) => write!(f, "bad config: {m}"),
            ChainError::Malformed(m) => write!(f, "malformed input: {m}"),
            ChainError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl core::error::Error for ChainError {}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_chain() -> (BlockStore, Vec<BlockDigest>) {
        // B0 <- B1 <- B2, plus B2' conflicting with B2 (sibling of B1's child).
        let mut store = BlockStore::new();
        let b0 = store.genesis();
        let g = store.get(&b0).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let b2 = Block::child(&b1, 2, proposal_payload(2, 2, 0));
        let b2x = Block::child(&b1, 3, proposal_payload(3, 3, 0));
        let d = alloc::vec![b0, b1.digest, b2.digest, b2x.digest];
        store.insert(b1).unwrap();
        store.insert(b2).unwrap();
        store.insert(b2x).unwrap();
        (store, d)
    }

    #[test]
    fn extends_follows_parent_chain() {
        let (store, d) = store_with_chain();
        assert!(store.extends(&d[2], &d[0]).unwrap());
        assert!(store.extends(&d[2], &d[2]).unwrap());
        assert!(!store.extends(&d[0], &d[2]).unwrap());
    }

    #[test]
    fn siblings_conflict() {
        let (store, d) = store_with_chain();
        assert!(store.conflicts(&d[2], &d[3]).unwrap());
        assert!(store.conflicts(&d[3], &d[2]).unwrap());
        assert!(!store.conflicts(&d[2], &d[1]).unwrap());
        assert!(!store.conflicts(&d[2], &d[2]).unwrap());
    }

    #[test]
    fn genesis_is_its_own_parent() {
        let store = BlockStore::new();
        let g = store.get(&store.genesis()).unwrap();
        assert!(g.is_genesis());
        assert_eq!(g.height, 0);
    }

    #[test]
    fn qc_needs_quorum_of_distinct_indices() {
        let config = ProtocolConfig::new(4, 1, ProtocolKind::HotStuff).unwrap();
        let (store, d) = store_with_chain();
        let _ = store;
        let vote = |signer: ProcessId| Vote { block: d[1], view: 1, phase: Phase::Prepare, signer };

        // Three distinct indices form a certificate.
        let votes = alloc::vec![
            vote(ProcessId::single(1)),
            vote(ProcessId::single(2)),
            vote(ProcessId::single(3)),
        ];
        let qc = form_qc(&votes, &config).unwrap().unwrap();
        assert_eq!(qc.signers.len(), 3);

        // A twin pair counts once: indices {1, 1, 2} stay below quorum.
        let votes = alloc::vec![
            vote(ProcessId::twin(1, TwinTag::A)),
            vote(ProcessId::twin(1, TwinTag::B)),
            vote(ProcessId::single(2)),
        ];
        assert!(form_qc(&votes, &config).unwrap().is_none());
    }

    #[test]
    fn mixed_votes_rejected() {
        let config = ProtocolConfig::new(4, 1, ProtocolKind::HotStuff).unwrap();
        let (_, d) = store_with_chain();
        let votes = alloc::vec![
            Vote { block: d[1], view: 1, phase: Phase::Prepare, signer: ProcessId::single(1) },
            Vote { block: d[2], view: 1, phase: Phase::Prepare, signer: ProcessId::single(2) },
        ];
        assert_eq!(form_qc(&votes, &config), Err(ChainError::MixedVotes));
    }

    #[test]
    fn canonical_encoding_is_pinned() {
        // The digest preimage layout is part of the replay format; this pins
        // the exact bytes for a known block.
        let mut h = Sha256::new();
        h.update([0x42u8]);
        h.update([0u8; 32]);
        h.update(0u64.to_be_bytes());
        h.update(0u64.to_be_bytes());
        h.update(7u32.to_be_bytes());
        h.update(b"genesis");
        let expect = BlockDigest(h.finalize().into());
        assert_eq!(BlockStore::new().genesis(), expect);
    }

    #[test]
    fn quorum_sizes_by_kind() {
        let hs = ProtocolConfig::new(4, 1, ProtocolKind::HotStuff).unwrap();
        let sync = ProtocolConfig::new(3, 1, ProtocolKind::SyncHotStuff).unwrap();
        assert_eq!(hs.quorum_size(), 3);
        assert_eq!(sync.quorum_size(), 2);
        assert!(ProtocolConfig::new(3, 1, ProtocolKind::HotStuff).is_err());
    }

    #[test]
    fn process_id_display_round_trips() {
        for id in [
            ProcessId::single(2),
            ProcessId::twin(1, TwinTag::A),
            ProcessId::twin(1, TwinTag::B),
        ] {
            let s = alloc::format!("{id}");
            assert_eq!(s.parse::<ProcessId>().unwrap(), id);
        }
    }
}
