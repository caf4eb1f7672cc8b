use std::collections::{BTreeMap, BTreeSet, HashMap};

use primitive_types::U256;
use serde::Serialize;
use thiserror::Error;

use super::script::{eval_script, Builder, Script, ScriptContext, ScriptError};
use super::tx::{OutPoint, Tx, TxIn, TxOut};
use crate::commitments::{merkle_prove_from_hashes, merkle_root_from_hashes, Hash256};
use crate::spv::{bits_to_target, grind, BlockHeader, ChainParams, HeaderChain, SpvError, SpvProof};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("input {0:?} is not an unspent output")]
    MissingUtxo(OutPoint),
    #[error("input {index} failed script evaluation")]
    ScriptFailure { index: usize },
    #[error("inputs total {inputs} but outputs total {outputs}")]
    ValueMismatch { inputs: u64, outputs: u64 },
    #[error("locktime {locktime} is above the current height {height}")]
    NonFinal { locktime: u32, height: u64 },
    #[error("malformed transaction: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("light client rejected mined header: {0}")]
    Spv(#[from] SpvError),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub genesis_time: u32,
    /// Compact target for every block; retargeting keeps it while the cap holds.
    pub bits: u32,
    pub allocations: Vec<TxOut>,
    pub confirmation_depth: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            genesis_time: 1_700_000_000,
            bits: 0x1f01_0000, // 2^240
            allocations: Vec::new(),
            confirmation_depth: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimBlock {
    pub height: u64,
    pub header: BlockHeader,
    pub txs: Vec<Tx>,
}

impl SimBlock {
    pub fn hash(&self) -> Hash256 {
        self.header.hash()
    }

    pub fn txids(&self) -> Vec<Hash256> {
        self.txs.iter().map(Tx::txid).collect()
    }

    pub fn export(&self) -> BlockExport {
        BlockExport { height: self.height, hash: self.hash(), txids: self.txids() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockExport {
    pub height: u64,
    pub hash: Hash256,
    pub txids: Vec<Hash256>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clock {
    pub height: u64,
    pub unix_time: u64,
}

/// A single-miner chain over a UTXO set with a zero-fee mempool. Every mined
/// header is also fed to an embedded light client.
#[derive(Debug, Clone)]
pub struct SimChain {
    utxos: BTreeMap<OutPoint, TxOut>,
    blocks: Vec<SimBlock>,
    mempool: Vec<Tx>,
    mempool_spent: BTreeSet<OutPoint>,
    clock: Clock,
    spv: HeaderChain,
    tx_index: HashMap<Hash256, (u64, usize)>,
}

fn marker_tx(height: u64, tag: &[u8]) -> Tx {
    let mut input = TxIn::new(OutPoint::NULL);
    input.witness = vec![tag.to_vec()];
    input.sequence = u32::MAX;
    Tx {
        version: 1,
        inputs: vec![input],
        outputs: vec![TxOut::new(0, Builder::new().push_int(height as i64).into_script())],
        locktime: 0,
    }
}

impl SimChain {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        let mut genesis_tx = marker_tx(0, b"genesis");
        if !config.allocations.is_empty() {
            genesis_tx.outputs = config.allocations.clone();
        }
        let target = bits_to_target(config.bits)?;
        let mut header = BlockHeader {
            version: 1,
            prev: Hash256::ZERO,
            merkle_root: genesis_tx.txid(),
            timestamp: config.genesis_time,
            bits: config.bits,
            nonce: 0,
        };
        while !grind(&mut header, target) {
            header.timestamp += 1;
            header.nonce = 0;
        }
        let mut params = ChainParams::new(header, target);
        params.confirmation_depth = config.confirmation_depth;
        let spv = HeaderChain::new(params)?;

        let txid = genesis_tx.txid();
        let mut utxos = BTreeMap::new();
        for (vout, out) in genesis_tx.outputs.iter().enumerate() {
            if out.amount > 0 {
                utxos.insert(OutPoint::new(txid, vout as u32), out.clone());
            }
        }
        let mut tx_index = HashMap::new();
        tx_index.insert(txid, (0, 0));
        Ok(SimChain {
            utxos,
            blocks: vec![SimBlock { height: 0, header, txs: vec![genesis_tx] }],
            mempool: Vec::new(),
            mempool_spent: BTreeSet::new(),
            clock: Clock { height: 0, unix_time: header.timestamp as u64 },
            spv,
            tx_index,
        })
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn height(&self) -> u64 {
        self.clock.height
    }

    pub fn now(&self) -> u64 {
        self.clock.unix_time
    }

    pub fn spv(&self) -> &HeaderChain {
        &self.spv
    }

    pub fn blocks(&self) -> &[SimBlock] {
        &self.blocks
    }

    pub fn tip(&self) -> &SimBlock {
        self.blocks.last().expect("genesis always present")
    }

    pub fn mempool(&self) -> &[Tx] {
        &self.mempool
    }

    pub fn utxos(&self) -> &BTreeMap<OutPoint, TxOut> {
        &self.utxos
    }

    pub fn utxo(&self, op: &OutPoint) -> Option<&TxOut> {
        self.utxos.get(op)
    }

    pub fn total_value(&self) -> u64 {
        self.utxos.values().map(|o| o.amount).sum()
    }

    /// Sum of unspent outputs locked to exactly `spk`.
    pub fn balance_of(&self, spk: &Script) -> u64 {
        self.utxos.values().filter(|o| &o.script_pubkey == spk).map(|o| o.amount).sum()
    }

    pub fn outpoints_of(&self, spk: &Script) -> Vec<(OutPoint, u64)> {
        self.utxos
            .iter()
            .filter(|(_, o)| &o.script_pubkey == spk)
            .map(|(op, o)| (*op, o.amount))
            .collect()
    }

    pub fn find_tx(&self, txid: &Hash256) -> Option<(&SimBlock, &Tx)> {
        let (h, pos) = self.tx_index.get(txid)?;
        let block = &self.blocks[*h as usize];
        Some((block, &block.txs[*pos]))
    }

    /// First mined transaction spending `op`, if any.
    pub fn spender_of(&self, op: &OutPoint) -> Option<&Tx> {
        self.blocks
            .iter()
            .flat_map(|b| b.txs.iter())
            .find(|tx| tx.inputs.iter().any(|i| i.prevout == *op))
    }

    pub fn advance_time(&mut self, delta: u64) -> Clock {
        self.clock.unix_time += delta;
        self.clock
    }

    pub fn submit_tx(&mut self, tx: Tx) -> Result<Hash256, SimError> {
        if tx.inputs.is_empty() || tx.outputs.is_empty() {
            return Err(SimError::Malformed("no inputs or no outputs"));
        }
        if tx.is_coinbase() {
            return Err(SimError::Malformed("null prevout"));
        }
        let mut seen = BTreeSet::new();
        let mut total_in = 0u64;
        for (index, input) in tx.inputs.iter().enumerate() {
            let spent = match self.utxos.get(&input.prevout) {
                Some(o) if !self.mempool_spent.contains(&input.prevout) && seen.insert(input.prevout) => o,
                _ => return Err(SimError::MissingUtxo(input.prevout)),
            };
            let ctx = ScriptContext { tx: &tx, input_index: index, spent, block_height: self.clock.height };
            if !eval_script(&input.witness, &spent.script_pubkey, &ctx)? {
                return Err(SimError::ScriptFailure { index });
            }
            total_in += spent.amount;
        }
        let total_out = tx.output_total();
        if total_in != total_out {
            return Err(SimError::ValueMismatch { inputs: total_in, outputs: total_out });
        }
        if tx.locktime as u64 > self.clock.height {
            return Err(SimError::NonFinal { locktime: tx.locktime, height: self.clock.height });
        }
        self.mempool_spent.extend(seen);
        let txid = tx.txid();
        self.mempool.push(tx);
        Ok(txid)
    }

    /// Mines the mempool into a block stamped `timestamp` (bumped if the nonce
    /// space runs out) and advances the clock to at least that time.
    pub fn mine_block(&mut self, timestamp: u64) -> Result<&SimBlock, SimError> {
        let height = self.clock.height + 1;
        let mut txs = vec![marker_tx(height, b"block")];
        txs.append(&mut self.mempool);
        self.mempool_spent.clear();
        let txids: Vec<Hash256> = txs.iter().map(Tx::txid).collect();
        let parent = self.spv.tip().hash;
        let bits = self.spv.next_bits(&parent)?;
        let target = bits_to_target(bits)?;
        let mut header = BlockHeader {
            version: 1,
            prev: parent,
            merkle_root: merkle_root_from_hashes(&txids).expect("marker tx present"),
            timestamp: timestamp as u32,
            bits,
            nonce: 0,
        };
        while !grind(&mut header, target) {
            header.timestamp += 1;
            header.nonce = 0;
        }
        let now = self.clock.unix_time.max(header.timestamp as u64);
        self.spv.add_block_header(&header.serialize(), now)?;

        for (pos, tx) in txs.iter().enumerate() {
            self.tx_index.insert(txids[pos], (height, pos));
            if tx.is_coinbase() {
                continue;
            }
            for input in &tx.inputs {
                self.utxos.remove(&input.prevout);
            }
            for (vout, out) in tx.outputs.iter().enumerate() {
                self.utxos.insert(OutPoint::new(txids[pos], vout as u32), out.clone());
            }
        }
        self.blocks.push(SimBlock { height, header, txs });
        self.clock.height = height;
        self.clock.unix_time = now;
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Advances the clock by `spacing` seconds and mines, `n` times.
    pub fn mine_blocks(&mut self, n: u64, spacing: u64) -> Result<(), SimError> {
        for _ in 0..n {
            self.advance_time(spacing);
            self.mine_block(self.clock.unix_time)?;
        }
        Ok(())
    }

    /// Light-client proof of a mined transaction.
    pub fn spv_proof(&self, txid: &Hash256) -> Option<SpvProof> {
        let (h, pos) = *self.tx_index.get(txid)?;
        let block = &self.blocks[h as usize];
        let inclusion = merkle_prove_from_hashes(&block.txids(), pos).ok()?;
        Some(SpvProof {
            block_hash: block.hash(),
            tx: block.txs[pos].serialize_no_witness(),
            inclusion,
        })
    }

    pub fn target(&self) -> U256 {
        bits_to_target(self.tip().header.bits).expect("validated bits")
    }
}
