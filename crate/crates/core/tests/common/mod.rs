//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use num_rational::Ratio;
use primitive_types::U256;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use wrapless::btcsim::{sign, sign_p2pkh_input, OutPoint, Script, SimChain, SimConfig, TxOut};
use wrapless::channel::{
    build_funding_tx, finalize_commitment, funding_sighash, sign_commitment, ChannelParams, ChannelState,
    CommitmentPair, Party, Side,
};
use wrapless::commitments::{merkle_root_from_hashes, merkle_prove_from_hashes, sha256, Hash256};
use wrapless::loan::{
    BorrowerRequest, LoanContract, LoanError, LoanOptions, LoanTerms, Ledger,
};
use wrapless::spv::{bits_to_target, grind, BlockHeader, ChainParams, HeaderChain, SpvProof};

// ---------------------------------------------------------------------------
// Hash oracles, written against sha2 directly
// ---------------------------------------------------------------------------

pub fn dsha(data: &[u8]) -> [u8; 32] {
    Sha256::digest(Sha256::digest(data)).into()
}

/// Bitcoin's recursive `CalcHash(height, pos)`: a missing right child is its
/// left sibling.
pub fn naive_merkle_root(leaves: &[Vec<u8>]) -> [u8; 32] {
    let hashed: Vec<[u8; 32]> = leaves.iter().map(|l| dsha(l)).collect();
    let n = hashed.len();
    let width = |h: u32| (n + (1 << h) - 1) >> h;
    fn calc(h: u32, pos: usize, leaves: &[[u8; 32]], width: &dyn Fn(u32) -> usize) -> [u8; 32] {
        if h == 0 {
            return leaves[pos];
        }
        let left = calc(h - 1, 2 * pos, leaves, width);
        let right = if 2 * pos + 1 < width(h - 1) { calc(h - 1, 2 * pos + 1, leaves, width) } else { left };
        let mut buf = left.to_vec();
        buf.extend_from_slice(&right);
        dsha(&buf)
    }
    let mut top = 0;
    while width(top) > 1 {
        top += 1;
    }
    calc(top, 0, &hashed, &width)
}

fn tagged(tag: u8, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([tag]);
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Builds every one of the `2^depth` leaves and folds level by level.
pub fn materialized_smt_root(entries: &BTreeMap<u64, Vec<u8>>, depth: u32) -> [u8; 32] {
    let mut level: Vec<[u8; 32]> = (0..1u64 << depth)
        .map(|k| tagged(0x00, &[entries.get(&k).map(Vec::as_slice).unwrap_or(&[])]))
        .collect();
    while level.len() > 1 {
        level = level.chunks(2).map(|p| tagged(0x01, &[&p[0], &p[1]])).collect();
    }
    level[0]
}

// ---------------------------------------------------------------------------
// Header chains
// ---------------------------------------------------------------------------

pub const BASE_TIME: u32 = 1_700_000_000;

pub fn mine(h: &mut BlockHeader) {
    let target = bits_to_target(h.bits).unwrap();
    while !grind(h, target) {
        h.timestamp += 1;
        h.nonce = 0;
    }
}

pub fn genesis(bits: u32, salt: &[u8]) -> BlockHeader {
    let mut g = BlockHeader {
        version: 1,
        prev: Hash256::ZERO,
        merkle_root: Hash256(dsha(salt)),
        timestamp: BASE_TIME,
        bits,
        nonce: 0,
    };
    mine(&mut g);
    g
}

/// Light client over a genesis at target `2^240`.
pub fn chain_2_240(salt: &[u8]) -> HeaderChain {
    HeaderChain::new(ChainParams::new(genesis(0x1f01_0000, salt), U256::one() << 240)).unwrap()
}

/// A valid child of `parent` with the required bits.
pub fn child(chain: &HeaderChain, parent: Hash256, timestamp: u32, salt: u64) -> BlockHeader {
    let mut h = BlockHeader {
        version: 1,
        prev: parent,
        merkle_root: Hash256(dsha(&salt.to_le_bytes())),
        timestamp,
        bits: chain.next_bits(&parent).unwrap(),
        nonce: 0,
    };
    mine(&mut h);
    h
}

// ---------------------------------------------------------------------------
// Loan contract fixture: b = 1000 USD, k = 5%, N = 10
// ---------------------------------------------------------------------------

pub const BTC: u64 = 100_000_000;
pub const USD: u64 = 100;
pub const T0: u64 = 1_000_000;
pub const IRP: u64 = 3_600;
pub const IP: u64 = 86_400;
pub const N: u32 = 10;

pub struct LoanWorld {
    pub contract: LoanContract,
    pub spv: HeaderChain,
    pub id: u64,
    pub lender: Party,
    pub borrower: Party,
    pub params: ChannelParams,
    pub funding: OutPoint,
    pub fund_proof: SpvProof,
}

impl LoanWorld {
    /// Offer requested and ready to accept; the price at acceptance is 2000 USD.
    pub fn new(options: LoanOptions, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let lender = Party::generate(Side::Lender, &mut rng);
        let borrower = Party::generate(Side::Borrower, &mut rng);
        let mut ledger = Ledger::default();
        ledger.mint("lender", 10_000 * USD);
        ledger.mint("borrower", 5_000 * USD);
        let mut contract = LoanContract::with_ledger(ledger);
        let terms = LoanTerms {
            a_min: BTC,
            a_max: BTC,
            c: 1_100 * USD,
            k: Ratio::new(5, 100),
            cr: Ratio::new(2, 1),
            n: N,
            ip: IP,
            rp: 10 * USD,
            irp: IRP,
            pk_l: lender.funding_key.public(),
            lnid_l: sha256(b"lender-node"),
            q_l: lender.revocation.basepoint(),
            t0: T0,
            oracle: "feed".into(),
            lr_b: 1_200 * USD,
            lr_l: 2_040 * USD,
            options,
        };
        let id = contract.create_loan_offer("lender", terms, 0).unwrap();
        let params = ChannelParams {
            a: BTC,
            pk_b: borrower.funding_key.public(),
            pk_l: lender.funding_key.public(),
            addr_b: borrower.addr(),
            addr_l: lender.addr(),
            lt_b: 500,
            lt_l: 500,
            n: N,
        };
        let tx_fund = build_funding_tx(&params, &[(OutPoint::new(sha256(b"coin"), 0), BTC)]).unwrap();
        let funding = OutPoint::new(tx_fund.txid(), 0);
        let txids = vec![sha256(b"marker"), tx_fund.txid()];
        let mut g = genesis(0x2040_0000, b"loan");
        g.merkle_root = merkle_root_from_hashes(&txids).unwrap();
        mine(&mut g);
        let spv = HeaderChain::new(ChainParams::new(g, U256::one() << 254)).unwrap();
        let fund_proof = SpvProof {
            block_hash: g.hash(),
            tx: tx_fund.serialize_no_witness(),
            inclusion: merkle_prove_from_hashes(&txids, 1).unwrap(),
        };
        let mut w = LoanWorld { contract, spv, id, lender, borrower, params, funding, fund_proof };
        let req = BorrowerRequest {
            a: BTC,
            t0: T0,
            pk_b: w.borrower.funding_key.public(),
            lnid_b: sha256(b"borrower-node"),
            q_b: w.borrower.revocation.basepoint(),
            lt_b: 500,
            lt_l: 500,
            tx_fund,
            tx_comm0_b: w.pair(0).tx_b,
        };
        w.contract.request_loan(id, "borrower", req, 10).unwrap();
        w
    }

    pub fn pair(&self, i: u32) -> CommitmentPair {
        let (rb, rl) = wrapless::channel::revocation_pubkeys(
            &self.borrower.revocation.basepoint(),
            &self.lender.revocation.basepoint(),
            &self.borrower.revocation.commitment_point(i),
            &self.lender.revocation.commitment_point(i),
        )
        .unwrap();
        wrapless::channel::build_commitment_pair(&self.params, self.funding, i, rb, rl).unwrap()
    }

    pub fn accept(&mut self, price: u64, now: u64) -> Result<u64, LoanError> {
        let pair = self.pair(0);
        let sig = sign(&funding_sighash(&self.params, &pair.tx_b), &self.lender.funding_key);
        self.contract.accept_loan(self.id, "lender", pair.tx_l, sig, price, now)
    }

    pub fn open(&mut self) {
        self.accept(2_000 * USD, 20).unwrap();
        let pair = self.pair(0);
        let sig = sign(&funding_sighash(&self.params, &pair.tx_l), &self.borrower.funding_key);
        let proof = self.fund_proof.clone();
        self.contract.open_channel(self.id, "borrower", sig, &proof, &self.spv, 30).unwrap();
    }

    pub fn due(i: u32) -> u64 {
        T0 + i as u64 * IP
    }

    pub fn pay(&mut self, i: u32, now: u64) -> Result<(), LoanError> {
        let tx = self.pair(i).tx_b;
        self.contract.pay_installment(self.id, "borrower", i, tx, now)
    }

    pub fn take(&mut self, i: u32, now: u64) -> Result<(), LoanError> {
        let pair = self.pair(i);
        let sig = sign(&funding_sighash(&self.params, &pair.tx_b), &self.lender.funding_key);
        self.contract.take_installment(self.id, "lender", i, pair.tx_l, sig, now)
    }

    pub fn reveal_b(&mut self, i: u32, now: u64) -> Result<(), LoanError> {
        let pair = self.pair(i);
        let sig = sign(&funding_sighash(&self.params, &pair.tx_l), &self.borrower.funding_key);
        let secret = self.borrower.revocation.commitment_secret(i - 1).to_bytes().into();
        self.contract.reveal_revocation_key_borrower(self.id, "borrower", i, secret, sig, now)
    }

    pub fn reveal_l(&mut self, i: u32, now: u64) -> Result<(), LoanError> {
        let secret = self.lender.revocation.commitment_secret(i - 1).to_bytes().into();
        self.contract.reveal_revocation_key_lender(self.id, "lender", i, secret, now)
    }
}

// ---------------------------------------------------------------------------
// Channel fixture on the simulated chain
// ---------------------------------------------------------------------------

pub struct ChannelWorld {
    pub chain: SimChain,
    pub borrower: Party,
    pub lender: Party,
    pub chan: ChannelState,
}

impl ChannelWorld {
    /// Funded and open at state 0 with both signatures exchanged.
    pub fn new(n: u32, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let borrower = Party::generate(Side::Borrower, &mut rng);
        let lender = Party::generate(Side::Lender, &mut rng);
        let coin = TxOut::new(BTC, Script::p2pkh(&borrower.addr()));
        let mut chain = SimChain::new(SimConfig { allocations: vec![coin.clone()], ..SimConfig::default() }).unwrap();
        let params = ChannelParams {
            a: BTC,
            pk_b: borrower.funding_key.public(),
            pk_l: lender.funding_key.public(),
            addr_b: borrower.addr(),
            addr_l: lender.addr(),
            lt_b: 10,
            lt_l: 10,
            n,
        };
        let genesis_txid = chain.blocks()[0].txs[0].txid();
        let mut tx = build_funding_tx(&params, &[(OutPoint::new(genesis_txid, 0), BTC)]).unwrap();
        sign_p2pkh_input(&mut tx, 0, &coin, &borrower.funding_key);
        let funding = OutPoint::new(tx.txid(), 0);
        chain.submit_tx(tx).unwrap();
        chain.mine_blocks(1, 600).unwrap();
        let mut chan = ChannelState::new(params, borrower.revocation.basepoint(), lender.revocation.basepoint()).unwrap();
        chan.mark_funded(funding).unwrap();
        chan.mark_open().unwrap();
        let mut w = ChannelWorld { chain, borrower, lender, chan };
        w.install(0);
        w
    }

    fn install(&mut self, i: u32) {
        let (cb, cl) = (self.borrower.revocation.commitment_point(i), self.lender.revocation.commitment_point(i));
        let pair = self.chan.install_commitment(i, cb, cl).unwrap().clone();
        let sig_l = sign_commitment(&self.chan.params, &pair, Side::Borrower, &self.lender.funding_key);
        let sig_b = sign_commitment(&self.chan.params, &pair, Side::Lender, &self.borrower.funding_key);
        let p = self.chan.commitments.get_mut(&i).unwrap();
        p.sig_l_on_tx_b = Some(sig_l);
        p.sig_b_on_tx_l = Some(sig_b);
    }

    /// Moves to state `i` and revokes `i-1` on both sides.
    pub fn advance(&mut self, i: u32) {
        self.chan.set_installment_balances(i).unwrap();
        self.install(i);
        let sb = self.borrower.revocation.commitment_secret(i - 1);
        let sl = self.lender.revocation.commitment_secret(i - 1);
        self.chan.record_revealed(Side::Borrower, i - 1, sb).unwrap();
        self.chan.record_revealed(Side::Lender, i - 1, sl).unwrap();
    }

    pub fn party(&self, side: Side) -> &Party {
        match side {
            Side::Borrower => &self.borrower,
            Side::Lender => &self.lender,
        }
    }

    /// Broadcasts `side`'s commitment `index` and mines it.
    pub fn broadcast(&mut self, side: Side, index: u32) -> Hash256 {
        let pair = self.chan.commitments[&index].clone();
        let key = self.party(side).funding_key.clone();
        let tx = finalize_commitment(&self.chan.params, &pair, side, &key).unwrap();
        let txid = self.chain.submit_tx(tx).unwrap();
        self.chain.mine_blocks(1, 600).unwrap();
        txid
    }
}
