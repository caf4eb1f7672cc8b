//! Hash primitives, Bitcoin-style Merkle trees and fixed-depth sparse Merkle trees.
//!
//! Classical trees hash every leaf and internal node with double SHA-256 and pad
//! odd levels by duplicating the last element. Sparse trees use single SHA-256
//! with a one-byte domain tag (`0x00` leaf, `0x01` node) and never materialize
//! empty subtrees: each level has a precomputed default digest.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommitmentError {
    #[error("cannot build a Merkle tree over zero leaves")]
    EmptyInput,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("key {key} does not fit in {depth} bits")]
    KeyWidthMismatch { key: u64, depth: u32 },
    #[error("sparse tree depth must be in 1..=64, got {0}")]
    InvalidDepth(u32),
    #[error("malformed proof encoding: {0}")]
    MalformedProof(&'static str),
}

/// A 32-byte digest in internal byte order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hash256(pub [u8; 32]);

impl Serialize for Hash256 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash256 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        Hash256::from_slice(&bytes).ok_or_else(|| serde::de::Error::custom("expected 32 bytes"))
    }
}

impl Hash256 {
    pub const ZERO: Hash256 = Hash256([0u8; 32]);

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; 32]>::try_from(bytes).ok().map(Hash256)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash256({})", self.to_hex())
    }
}

impl fmt::Display for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl AsRef<[u8]> for Hash256 {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

pub fn sha256(data: &[u8]) -> Hash256 {
    Hash256(Sha256::digest(data).into())
}

pub fn sha256d(data: &[u8]) -> Hash256 {
    sha256(sha256(data).as_bytes())
}

fn sha256d_pair(left: &Hash256, right: &Hash256) -> Hash256 {
    let mut buf = [0u8; 64];
    buf[..32].copy_from_slice(&left.0);
    buf[32..].copy_from_slice(&right.0);
    sha256d(&buf)
}

// ---------------------------------------------------------------------------
// Classical Merkle trees
// ---------------------------------------------------------------------------

/// Inclusion proof for a classical Merkle tree. Siblings run leaf to root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: u32,
    pub siblings: Vec<Hash256>,
}

impl MerkleProof {
    /// `leaf_index` as 4 bytes little-endian, then the siblings back to back.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 32 * self.siblings.len());
        out.extend_from_slice(&self.leaf_index.to_le_bytes());
        for s in &self.siblings {
            out.extend_from_slice(&s.0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CommitmentError> {
        if bytes.len() < 4 || (bytes.len() - 4) % 32 != 0 {
            return Err(CommitmentError::MalformedProof("length is not 4 + 32k"));
        }
        let leaf_index = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        let siblings = bytes[4..]
            .chunks_exact(32)
            .map(|c| Hash256::from_slice(c).expect("32-byte chunk"))
            .collect();
        Ok(MerkleProof { leaf_index, siblings })
    }
}

/// Root over raw leaves; each leaf is hashed with [`sha256d`] first.
pub fn merkle_root<T: AsRef<[u8]>>(leaves: &[T]) -> Result<Hash256, CommitmentError> {
    let hashed: Vec<Hash256> = leaves.iter().map(|l| sha256d(l.as_ref())).collect();
    merkle_root_from_hashes(&hashed)
}

/// Root over already-hashed leaves, e.g. a block's txids.
pub fn merkle_root_from_hashes(leaf_hashes: &[Hash256]) -> Result<Hash256, CommitmentError> {
    if leaf_hashes.is_empty() {
        return Err(CommitmentError::EmptyInput);
    }
    let mut level = leaf_hashes.to_vec();
    while level.len() > 1 {
        level = next_level(level);
    }
    Ok(level[0])
}

fn next_level(mut level: Vec<Hash256>) -> Vec<Hash256> {
    if level.len() % 2 == 1 {
        let last = *level.last().expect("non-empty level");
        level.push(last);
    }
    level
        .chunks_exact(2)
        .map(|pair| sha256d_pair(&pair[0], &pair[1]))
        .collect()
}

pub fn merkle_prove<T: AsRef<[u8]>>(
    leaves: &[T],
    index: usize,
) -> Result<MerkleProof, CommitmentError> {
    let hashed: Vec<Hash256> = leaves.iter().map(|l| sha256d(l.as_ref())).collect();
    merkle_prove_from_hashes(&hashed, index)
}

pub fn merkle_prove_from_hashes(
    leaf_hashes: &[Hash256],
    index: usize,
) -> Result<MerkleProof, CommitmentError> {
    if leaf_hashes.is_empty() {
        return Err(CommitmentError::EmptyInput);
    }
    if index >= leaf_hashes.len() || index > u32::MAX as usize {
        return Err(CommitmentError::IndexOutOfRange { index, len: leaf_hashes.len() });
    }
    let mut siblings = Vec::new();
    let mut level = leaf_hashes.to_vec();
    let mut pos = index;
    while level.len() > 1 {
        // A duplicated last element is its own sibling.
        let sib = pos ^ 1;
        siblings.push(*level.get(sib).unwrap_or(&level[pos]));
        level = next_level(level);
        pos /= 2;
    }
    Ok(MerkleProof { leaf_index: index as u32, siblings })
}

pub fn merkle_verify(leaf: &[u8], index: u32, proof: &MerkleProof, root: &Hash256) -> bool {
    merkle_verify_hash(&sha256d(leaf), index, proof, root)
}

/// Verifies an already-hashed leaf.
///
/// Padding only ever duplicates a left node, so a right child equal to its left
/// sibling is rejected; together with the index range check this stops index
/// substitutions against duplicated levels.
pub fn merkle_verify_hash(leaf_hash: &Hash256, index: u32, proof: &MerkleProof, root: &Hash256) -> bool {
    if proof.leaf_index != index {
        return false;
    }
    let depth = proof.siblings.len();
    if depth < 32 && (index as u64) >> depth != 0 {
        return false;
    }
    let mut acc = *leaf_hash;
    for (level, sib) in proof.siblings.iter().enumerate() {
        if (index >> level) & 1 == 1 {
            if *sib == acc {
                return false;
            }
            acc = sha256d_pair(sib, &acc);
        } else {
            acc = sha256d_pair(&acc, sib);
        }
    }
    acc == *root
}

// ---------------------------------------------------------------------------
// Sparse Merkle trees
// ---------------------------------------------------------------------------

const SMT_LEAF_TAG: u8 = 0x00;
const SMT_NODE_TAG: u8 = 0x01;

/// Digest of a leaf holding `value`. The empty value is the default leaf.
pub fn smt_leaf_hash(value: &[u8]) -> Hash256 {
    let mut h = Sha256::new();
    h.update([SMT_LEAF_TAG]);
    h.update(value);
    Hash256(h.finalize().into())
}

pub fn smt_node_hash(left: &Hash256, right: &Hash256) -> Hash256 {
    let mut h = Sha256::new();
    h.update([SMT_NODE_TAG]);
    h.update(left.0);
    h.update(right.0);
    Hash256(h.finalize().into())
}

/// Per-level digests of an all-empty subtree: `out[0]` is the empty leaf and
/// `out[depth]` the root of an empty tree.
pub fn default_digests(depth: u32) -> Vec<Hash256> {
    let mut out = Vec::with_capacity(depth as usize + 1);
    out.push(smt_leaf_hash(&[]));
    for j in 0..depth as usize {
        let d = out[j];
        out.push(smt_node_hash(&d, &d));
    }
    out
}

fn check_key(key: u64, depth: u32) -> Result<(), CommitmentError> {
    if depth < 64 && key >> depth != 0 {
        Err(CommitmentError::KeyWidthMismatch { key, depth })
    } else {
        Ok(())
    }
}

/// A sparse Merkle tree of depth `k` over keys `0..2^k`.
///
/// Only nodes that differ from the default digest of their level are stored, so
/// an update touches `k` nodes. Setting a key to the empty value deletes it.
#[derive(Debug, Clone)]
pub struct Smt {
    depth: u32,
    entries: BTreeMap<u64, Vec<u8>>,
    defaults: Vec<Hash256>,
    // (level, index) -> digest; level 0 holds leaves.
    nodes: HashMap<(u32, u64), Hash256>,
}

/// Sibling path for one key. `leaf_digest` is the digest of the stored value or
/// of the empty leaf.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmtProof {
    pub key: u64,
    pub siblings: Vec<Hash256>,
    pub leaf_digest: Hash256,
}

impl SmtProof {
    /// Depth as 4 bytes little-endian, then 32-byte fields: the key
    /// (big-endian, zero padded), the leaf digest and the siblings.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 32 * (self.siblings.len() + 2));
        out.extend_from_slice(&(self.siblings.len() as u32).to_le_bytes());
        let mut key = [0u8; 32];
        key[24..].copy_from_slice(&self.key.to_be_bytes());
        out.extend_from_slice(&key);
        out.extend_from_slice(&self.leaf_digest.0);
        for s in &self.siblings {
            out.extend_from_slice(&s.0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CommitmentError> {
        if bytes.len() < 68 || (bytes.len() - 4) % 32 != 0 {
            return Err(CommitmentError::MalformedProof("length is not 4 + 32k"));
        }
        let depth = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let fields: Vec<Hash256> = bytes[4..]
            .chunks_exact(32)
            .map(|c| Hash256::from_slice(c).expect("32-byte chunk"))
            .collect();
        if fields.len() != depth + 2 {
            return Err(CommitmentError::MalformedProof("depth header disagrees with length"));
        }
        if fields[0].0[..24].iter().any(|b| *b != 0) {
            return Err(CommitmentError::MalformedProof("key wider than 64 bits"));
        }
        let key = u64::from_be_bytes(fields[0].0[24..].try_into().expect("8 bytes"));
        Ok(SmtProof { key, leaf_digest: fields[1], siblings: fields[2..].to_vec() })
    }
}

impl Smt {
    pub fn new(depth: u32) -> Result<Self, CommitmentError> {
        if depth == 0 || depth > 64 {
            return Err(CommitmentError::InvalidDepth(depth));
        }
        Ok(Smt {
            depth,
            entries: BTreeMap::new(),
            defaults: default_digests(depth),
            nodes: HashMap::new(),
        })
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn default_digests(&self) -> &[Hash256] {
        &self.defaults
    }

    pub fn entries(&self) -> &BTreeMap<u64, Vec<u8>> {
        &self.entries
    }

    pub fn get(&self, key: u64) -> Option<&[u8]> {
        self.entries.get(&key).map(Vec::as_slice)
    }

    pub fn root(&self) -> Hash256 {
        self.node(self.depth, 0)
    }

    fn node(&self, level: u32, index: u64) -> Hash256 {
        self.nodes
            .get(&(level, index))
            .copied()
            .unwrap_or(self.defaults[level as usize])
    }

    fn set_node(&mut self, level: u32, index: u64, digest: Hash256) {
        if digest == self.defaults[level as usize] {
            self.nodes.remove(&(level, index));
        } else {
            self.nodes.insert((level, index), digest);
        }
    }

    /// Sets `key` to `value`, or clears it for `None`. Returns the new root.
    pub fn update(&mut self, key: u64, value: Option<&[u8]>) -> Result<Hash256, CommitmentError> {
        check_key(key, self.depth)?;
        let leaf = match value {
            Some(v) if !v.is_empty() => {
                self.entries.insert(key, v.to_vec());
                smt_leaf_hash(v)
            }
            _ => {
                self.entries.remove(&key);
                self.defaults[0]
            }
        };
        self.set_node(0, key, leaf);
        let mut index = key;
        let mut acc = leaf;
        for level in 0..self.depth {
            let sib = self.node(level, index ^ 1);
            acc = if index & 1 == 0 {
                smt_node_hash(&acc, &sib)
            } else {
                smt_node_hash(&sib, &acc)
            };
            index >>= 1;
            self.set_node(level + 1, index, acc);
        }
        Ok(acc)
    }

    pub fn prove(&self, key: u64) -> Result<SmtProof, CommitmentError> {
        check_key(key, self.depth)?;
        let siblings = (0..self.depth)
            .map(|level| self.node(level, (key >> level) ^ 1))
            .collect();
        Ok(SmtProof { key, siblings, leaf_digest: self.node(0, key) })
    }
}

pub fn smt_root(entries: &BTreeMap<u64, Vec<u8>>, depth: u32) -> Result<Hash256, CommitmentError> {
    let mut smt = Smt::new(depth)?;
    for (k, v) in entries {
        smt.update(*k, Some(v))?;
    }
    Ok(smt.root())
}

pub fn smt_update(smt: &mut Smt, key: u64, value: Option<&[u8]>) -> Result<Hash256, CommitmentError> {
    smt.update(key, value)
}

pub fn smt_prove(smt: &Smt, key: u64) -> Result<SmtProof, CommitmentError> {
    smt.prove(key)
}

/// Checks that `key` holds `claim` (`None` = empty) under `root`.
pub fn smt_verify(root: &Hash256, key: u64, claim: Option<&[u8]>, proof: &SmtProof) -> bool {
    let depth = proof.siblings.len();
    if proof.key != key || depth == 0 || depth > 64 {
        return false;
    }
    if depth < 64 && key >> depth != 0 {
        return false;
    }
    let expected_leaf = smt_leaf_hash(claim.unwrap_or(&[]));
    if expected_leaf != proof.leaf_digest {
        return false;
    }
    let mut acc = expected_leaf;
    for (level, sib) in proof.siblings.iter().enumerate() {
        acc = if (key >> level) & 1 == 0 {
            smt_node_hash(&acc, sib)
        } else {
            smt_node_hash(sib, &acc)
        };
    }
    acc == *root
}
