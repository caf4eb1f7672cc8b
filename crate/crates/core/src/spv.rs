//! Header-only Bitcoin light client.
//!
//! [`HeaderChain`] keeps every header it has validated, tracks the heaviest tip
//! and commits the main chain's buried prefix (`height <= tip - d`) into a
//! sparse Merkle tree keyed by height.

use std::collections::HashMap;

use primitive_types::{U256, U512};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commitments::{
    merkle_verify, sha256d, CommitmentError, Hash256, MerkleProof, Smt, SmtProof,
};

pub const HEADER_LEN: usize = 80;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpvError {
    #[error("header must be exactly 80 bytes, got {0}")]
    BadLength(usize),
    #[error("block {0} is already stored")]
    DuplicateBlock(Hash256),
    #[error("previous block {0} is unknown")]
    UnknownParent(Hash256),
    #[error("unknown block {0}")]
    UnknownBlock(Hash256),
    #[error("timestamp {timestamp} must exceed median time past {median} and not pass {limit}")]
    BadTimestamp { timestamp: u32, median: u32, limit: u64 },
    #[error("difficulty bits {got:#010x} do not match expected {expected:#010x}")]
    BadBits { expected: u32, got: u32 },
    #[error("block hash is not below the target")]
    InsufficientPow,
    #[error("compact target {0:#010x} is negative or overflows")]
    NegativeOrOverflow(u32),
    #[error("target is zero")]
    ZeroTarget,
    #[error("height {height} is above the confirmed height {confirmed}")]
    NotYetConfirmed { height: u64, confirmed: u64 },
    #[error("batch element {index} rejected: {source}")]
    BatchFailed {
        index: usize,
        #[source]
        source: Box<SpvError>,
    },
    #[error(transparent)]
    Commitment(#[from] CommitmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockHeader {
    pub version: i32,
    pub prev: Hash256,
    pub merkle_root: Hash256,
    pub timestamp: u32,
    pub bits: u32,
    pub nonce: u32,
}

impl BlockHeader {
    pub fn serialize(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.version.to_le_bytes());
        out[4..36].copy_from_slice(&self.prev.0);
        out[36..68].copy_from_slice(&self.merkle_root.0);
        out[68..72].copy_from_slice(&self.timestamp.to_le_bytes());
        out[72..76].copy_from_slice(&self.bits.to_le_bytes());
        out[76..80].copy_from_slice(&self.nonce.to_le_bytes());
        out
    }

    pub fn parse(raw: &[u8]) -> Result<Self, SpvError> {
        let raw: &[u8; HEADER_LEN] = raw.try_into().map_err(|_| SpvError::BadLength(raw.len()))?;
        let u32_at = |i: usize| u32::from_le_bytes(raw[i..i + 4].try_into().expect("4 bytes"));
        Ok(BlockHeader {
            version: u32_at(0) as i32,
            prev: Hash256::from_slice(&raw[4..36]).expect("32 bytes"),
            merkle_root: Hash256::from_slice(&raw[36..68]).expect("32 bytes"),
            timestamp: u32_at(68),
            bits: u32_at(72),
            nonce: u32_at(76),
        })
    }

    pub fn hash(&self) -> Hash256 {
        sha256d(&self.serialize())
    }
}

pub fn parse_header(raw: &[u8]) -> Result<BlockHeader, SpvError> {
    BlockHeader::parse(raw)
}

/// Decodes a compact target: `mantissa * 256^(exponent - 3)`.
pub fn bits_to_target(bits: u32) -> Result<U256, SpvError> {
    let size = bits >> 24;
    let word = bits & 0x007f_ffff;
    let negative = word != 0 && bits & 0x0080_0000 != 0;
    let overflow = word != 0
        && (size > 34 || (word > 0xff && size > 33) || (word > 0xffff && size > 32));
    if negative || overflow {
        return Err(SpvError::NegativeOrOverflow(bits));
    }
    Ok(if size <= 3 {
        U256::from(word >> (8 * (3 - size)))
    } else {
        U256::from(word) << (8 * (size - 3) as usize)
    })
}

/// Canonical compact encoding; lossy below the top three significant bytes.
pub fn target_to_bits(target: U256) -> u32 {
    let mut size = (target.bits() as u32 + 7) / 8;
    let mut compact = if size <= 3 {
        target.low_u32() << (8 * (3 - size))
    } else {
        (target >> (8 * (size - 3) as usize)).low_u32()
    };
    if compact & 0x0080_0000 != 0 {
        compact >>= 8;
        size += 1;
    }
    compact | (size << 24)
}

/// Expected hashes to meet `target`: `floor(2^256 / (target + 1))`.
pub fn work(target: U256) -> Result<U256, SpvError> {
    if target.is_zero() {
        return Err(SpvError::ZeroTarget);
    }
    if target == U256::MAX {
        return Ok(U256::one());
    }
    Ok((!target / (target + 1)) + 1)
}

pub fn hash_to_u256(hash: &Hash256) -> U256 {
    U256::from_little_endian(&hash.0)
}

pub fn meets_target(hash: &Hash256, target: U256) -> bool {
    hash_to_u256(hash) < target
}

/// Increments the nonce until the header meets `target`. Returns false if the
/// nonce space is exhausted; the caller should then change another field.
pub fn grind(header: &mut BlockHeader, target: U256) -> bool {
    loop {
        if meets_target(&header.hash(), target) {
            return true;
        }
        if header.nonce == u32::MAX {
            return false;
        }
        header.nonce += 1;
    }
}

/// Scales `old` by `timespan / expected`, clamped to a factor in `[1/4, 4]`
/// and capped at `max_target`.
pub fn retarget(old: U256, timespan: i64, expected: u64, max_target: U256) -> U256 {
    let expected_i = expected as i64;
    let span = timespan.clamp(expected_i / 4, expected_i * 4) as u64;
    let scaled: U512 = old.full_mul(U256::from(span)) / U512::from(expected);
    let scaled = U256::try_from(scaled).unwrap_or(U256::MAX);
    scaled.min(max_target)
}

/// Upper median; the window is odd-sized once the chain is long enough.
pub fn median(times: &mut [u32]) -> u32 {
    times.sort_unstable();
    times[times.len() / 2]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainParams {
    pub genesis: BlockHeader,
    pub max_target: U256,
    pub retarget_interval: u64,
    pub target_spacing: u64,
    /// Depth `d`: heights up to `tip - d` are committed to the confirmed tree.
    pub confirmation_depth: u64,
    pub max_future_drift: u64,
    pub median_window: usize,
    pub smt_depth: u32,
}

impl ChainParams {
    pub fn new(genesis: BlockHeader, max_target: U256) -> Self {
        ChainParams {
            genesis,
            max_target,
            retarget_interval: 2016,
            target_spacing: 600,
            confirmation_depth: 6,
            max_future_drift: 2 * 60 * 60,
            median_window: 11,
            smt_depth: 32,
        }
    }

    pub fn expected_timespan(&self) -> u64 {
        self.retarget_interval * self.target_spacing
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredBlock {
    pub header: BlockHeader,
    pub hash: Hash256,
    pub height: u64,
    pub cumulative_work: U256,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ChainEvent {
    BlockHeaderAdded { height: u64, hash: Hash256 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    ExtendedMain,
    NewFork,
    Reorganized { old_tip: Hash256, new_tip: Hash256 },
}

/// Block hash, serialized transaction (without witnesses) and its Merkle path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpvProof {
    pub block_hash: Hash256,
    #[serde(with = "hex_bytes")]
    pub tx: Vec<u8>,
    pub inclusion: MerkleProof,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct HeaderChain {
    params: ChainParams,
    blocks: HashMap<Hash256, StoredBlock>,
    // Main-chain hashes indexed by height.
    main_chain: Vec<Hash256>,
    confirmed_smt: Smt,
    confirmed_height: u64,
    events: Vec<ChainEvent>,
}

impl HeaderChain {
    pub fn new(params: ChainParams) -> Result<Self, SpvError> {
        let genesis = params.genesis;
        let hash = genesis.hash();
        let stored = StoredBlock {
            header: genesis,
            hash,
            height: 0,
            cumulative_work: work(bits_to_target(genesis.bits)?)?,
        };
        let mut confirmed_smt = Smt::new(params.smt_depth)?;
        confirmed_smt.update(0, Some(&hash.0))?;
        let mut blocks = HashMap::new();
        blocks.insert(hash, stored);
        Ok(HeaderChain {
            params,
            blocks,
            main_chain: vec![hash],
            confirmed_smt,
            confirmed_height: 0,
            events: Vec::new(),
        })
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn genesis_hash(&self) -> Hash256 {
        self.main_chain[0]
    }

    pub fn tip(&self) -> &StoredBlock {
        &self.blocks[self.main_chain.last().expect("genesis always present")]
    }

    pub fn height(&self) -> u64 {
        self.main_chain.len() as u64 - 1
    }

    pub fn get(&self, hash: &Hash256) -> Option<&StoredBlock> {
        self.blocks.get(hash)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn main_hash_at(&self, height: u64) -> Option<Hash256> {
        self.main_chain.get(height as usize).copied()
    }

    pub fn confirmed_height(&self) -> u64 {
        self.confirmed_height
    }

    pub fn confirmed_root(&self) -> Hash256 {
        self.confirmed_smt.root()
    }

    pub fn confirmed_smt(&self) -> &Smt {
        &self.confirmed_smt
    }

    pub fn events(&self) -> &[ChainEvent] {
        &self.events
    }

    fn is_main(&self, block: &StoredBlock) -> bool {
        self.main_chain.get(block.height as usize) == Some(&block.hash)
    }

    /// Ancestor of `from` at `height`, jumping to the main-chain index as soon as
    /// the walk reaches it.
    fn ancestor<'a>(&'a self, from: &'a StoredBlock, height: u64) -> Option<&'a StoredBlock> {
        if height > from.height {
            return None;
        }
        let mut cur = from;
        while cur.height > height {
            if self.is_main(cur) {
                return self.blocks.get(&self.main_chain[height as usize]);
            }
            cur = self.blocks.get(&cur.header.prev)?;
        }
        Some(cur)
    }

    pub fn median_time_past(&self, tip_hash: &Hash256) -> Result<u32, SpvError> {
        let mut cur = self.blocks.get(tip_hash).ok_or(SpvError::UnknownBlock(*tip_hash))?;
        let mut times = vec![cur.header.timestamp];
        while times.len() < self.params.median_window && cur.height > 0 {
            cur = &self.blocks[&cur.header.prev];
            times.push(cur.header.timestamp);
        }
        Ok(median(&mut times))
    }

    /// Target required of a child of `parent`.
    pub fn next_target(&self, parent: &StoredBlock) -> Result<U256, SpvError> {
        let parent_target = bits_to_target(parent.header.bits)?;
        let interval = self.params.retarget_interval;
        if (parent.height + 1) % interval != 0 {
            return Ok(parent_target);
        }
        // The window spans interval - 1 block intervals ending at the parent.
        let first = self
            .ancestor(parent, parent.height + 1 - interval)
            .ok_or(SpvError::UnknownBlock(parent.hash))?;
        let span = parent.header.timestamp as i64 - first.header.timestamp as i64;
        Ok(retarget(
            parent_target,
            span,
            self.params.expected_timespan(),
            self.params.max_target,
        ))
    }

    /// Compact bits a child of `parent_hash` must carry.
    pub fn next_bits(&self, parent_hash: &Hash256) -> Result<u32, SpvError> {
        let parent = self.blocks.get(parent_hash).ok_or(SpvError::UnknownBlock(*parent_hash))?;
        let target = self.next_target(parent)?;
        if target == bits_to_target(parent.header.bits)? {
            Ok(parent.header.bits)
        } else {
            Ok(target_to_bits(target))
        }
    }

    pub fn validate_header(&self, h: &BlockHeader, now: u64) -> Result<StoredBlock, SpvError> {
        let hash = h.hash();
        if self.blocks.contains_key(&hash) {
            return Err(SpvError::DuplicateBlock(hash));
        }
        let parent = self.blocks.get(&h.prev).ok_or(SpvError::UnknownParent(h.prev))?;
        let median = self.median_time_past(&parent.hash)?;
        let limit = now + self.params.max_future_drift;
        if h.timestamp <= median || h.timestamp as u64 > limit {
            return Err(SpvError::BadTimestamp { timestamp: h.timestamp, median, limit });
        }
        let expected = self.next_bits(&parent.hash)?;
        if h.bits != expected {
            return Err(SpvError::BadBits { expected, got: h.bits });
        }
        let target = bits_to_target(h.bits)?;
        if !meets_target(&hash, target) {
            return Err(SpvError::InsufficientPow);
        }
        Ok(StoredBlock {
            header: *h,
            hash,
            height: parent.height + 1,
            cumulative_work: parent.cumulative_work + work(target)?,
        })
    }

    pub fn add_block_header(&mut self, raw: &[u8], now: u64) -> Result<AddOutcome, SpvError> {
        let header = BlockHeader::parse(raw)?;
        let candidate = self.validate_header(&header, now)?;
        let (hash, height) = (candidate.hash, candidate.height);
        let heavier = candidate.cumulative_work > self.tip().cumulative_work;
        let extends_tip = candidate.header.prev == self.tip().hash;
        let old_tip = self.tip().hash;
        self.blocks.insert(hash, candidate);
        self.events.push(ChainEvent::BlockHeaderAdded { height, hash });

        if !heavier {
            return Ok(AddOutcome::NewFork);
        }
        let fork_height = if extends_tip {
            self.main_chain.push(hash);
            height - 1
        } else {
            self.switch_main_chain(hash)
        };
        self.sync_confirmed(fork_height)?;
        Ok(if extends_tip {
            AddOutcome::ExtendedMain
        } else {
            AddOutcome::Reorganized { old_tip, new_tip: hash }
        })
    }

    /// Rewrites the main-chain index to end at `new_tip`; returns the height of
    /// the last block shared with the old main chain.
    fn switch_main_chain(&mut self, new_tip: Hash256) -> u64 {
        let mut branch = Vec::new();
        let mut cur = &self.blocks[&new_tip];
        while !self.is_main(cur) {
            branch.push(cur.hash);
            cur = &self.blocks[&cur.header.prev];
        }
        let fork_height = cur.height;
        self.main_chain.truncate(fork_height as usize + 1);
        self.main_chain.extend(branch.into_iter().rev());
        fork_height
    }

    fn sync_confirmed(&mut self, fork_height: u64) -> Result<(), SpvError> {
        let old = self.confirmed_height;
        let new = self.height().saturating_sub(self.params.confirmation_depth);
        let start = (fork_height + 1).min(old + 1);
        for h in start..=old.max(new) {
            if h <= new {
                let hash = self.main_chain[h as usize];
                self.confirmed_smt.update(h, Some(&hash.0))?;
            } else {
                self.confirmed_smt.update(h, None)?;
            }
        }
        self.confirmed_height = new;
        Ok(())
    }

    /// Applies headers in order and stops at the first failure; earlier
    /// elements stay applied.
    pub fn add_block_header_batch<R: AsRef<[u8]>>(
        &mut self,
        raws: &[R],
        now: u64,
    ) -> Result<Vec<AddOutcome>, SpvError> {
        let mut outcomes = Vec::with_capacity(raws.len());
        for (index, raw) in raws.iter().enumerate() {
            let outcome = self
                .add_block_header(raw.as_ref(), now)
                .map_err(|e| SpvError::BatchFailed { index, source: Box::new(e) })?;
            outcomes.push(outcome);
        }
        Ok(outcomes)
    }

    /// `(in_main, confirmations)`; unknown and orphaned blocks report `(false, 0)`.
    pub fn validate_block_hash(&self, hash: &Hash256) -> (bool, u64) {
        match self.blocks.get(hash) {
            Some(b) if self.is_main(b) => (true, self.height() - b.height),
            _ => (false, 0),
        }
    }

    pub fn verify_tx(&self, proof: &SpvProof) -> bool {
        match self.blocks.get(&proof.block_hash) {
            Some(b) => merkle_verify(
                &proof.tx,
                proof.inclusion.leaf_index,
                &proof.inclusion,
                &b.header.merkle_root,
            ),
            None => false,
        }
    }

    pub fn confirmed_inclusion_proof(&self, height: u64) -> Result<SmtProof, SpvError> {
        if height > self.confirmed_height {
            return Err(SpvError::NotYetConfirmed { height, confirmed: self.confirmed_height });
        }
        Ok(self.confirmed_smt.prove(height)?)
    }

    /// Proof for any key, including non-inclusion of unoccupied heights.
    pub fn confirmed_smt_proof(&self, height: u64) -> Result<SmtProof, SpvError> {
        Ok(self.confirmed_smt.prove(height)?)
    }

    /// Digest over every stored block (sorted by hash), the main tip and the
    /// confirmed root.
    pub fn state_digest(&self) -> Hash256 {
        let mut records: Vec<&StoredBlock> = self.blocks.values().collect();
        records.sort_by_key(|b| b.hash);
        let mut buf = Vec::with_capacity(records.len() * 152 + 64);
        for b in records {
            buf.extend_from_slice(&b.hash.0);
            buf.extend_from_slice(&b.height.to_le_bytes());
            buf.extend_from_slice(&b.cumulative_work.to_little_endian());
            buf.extend_from_slice(&b.header.serialize());
        }
        buf.extend_from_slice(&self.tip().hash.0);
        buf.extend_from_slice(&self.confirmed_root().0);
        sha256d(&buf)
    }
}
