//! Loan-channel transactions: the 2-of-2 funding output, asymmetric commitment
//! pairs with per-state revocation keys, HTLC outputs and the mutual close.
//!
//! The borrower's commitment `tx_B` pays the borrower's share to a script that
//! is spendable by the borrower after `LT_B`, or at once by the lender together
//! with the borrower's revocation key for that state. `tx_L` mirrors it.

use std::collections::BTreeMap;

use k256::elliptic_curve::ops::Reduce;
use k256::{ProjectivePoint, Scalar};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::btcsim::keys::scalar_from_hash;
use crate::btcsim::script::{
    OP_2, OP_CHECKLOCKTIMEVERIFY, OP_CHECKMULTISIG, OP_CHECKSIG, OP_DROP, OP_ELSE, OP_ENDIF,
    OP_EQUALVERIFY, OP_IF, OP_SHA256,
};
use crate::btcsim::{
    keygen, sighash, sign, Builder, KeyPair, OutPoint, PublicKey, Script, SimChain, SimError,
    Signature, Tx, TxIn, TxOut,
};
use crate::commitments::{sha256, Hash256};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("invalid channel parameters: {0}")]
    InvalidParams(&'static str),
    #[error("funding inputs total {got}, expected exactly {needed}")]
    InsufficientFunds { needed: u64, got: u64 },
    #[error("point is not a valid curve point")]
    PointOffCurve,
    #[error("commitment index {index} exceeds {n}")]
    IndexOutOfRange { index: u32, n: u32 },
    #[error("transaction is not a known commitment of this channel")]
    UnknownCommitment,
    #[error("commitment {index} is the current state")]
    NotOldState { index: u32 },
    #[error("no revealed secret for commitment {index}")]
    SecretUnknown { index: u32 },
    #[error("secret does not match the committed point for index {index}")]
    BadSecret { index: u32 },
    #[error("balance {balance} is below {needed}")]
    InsufficientBalance { balance: u64, needed: u64 },
    #[error("preimage does not hash to the payment hash")]
    WrongPreimage,
    #[error("htlc expired at height {expiry}")]
    Expired { expiry: u32 },
    #[error("unknown htlc {0}")]
    UnknownHtlc(u64),
    #[error("amount {amount} outside 0..={max}")]
    AmountOutOfRange { amount: u64, max: u64 },
    #[error("operation not allowed in status {0:?}")]
    WrongStatus(ChannelStatus),
    #[error("missing counterparty signature")]
    MissingSignature,
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Borrower,
    Lender,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Borrower => Side::Lender,
            Side::Lender => Side::Borrower,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelParams {
    pub a: u64,
    pub pk_b: PublicKey,
    pub pk_l: PublicKey,
    pub addr_b: [u8; 20],
    pub addr_l: [u8; 20],
    pub lt_b: u32,
    pub lt_l: u32,
    pub n: u32,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.a == 0 {
            return Err(ChannelError::InvalidParams("collateral must be positive"));
        }
        if self.n == 0 {
            return Err(ChannelError::InvalidParams("at least one installment"));
        }
        if self.lt_b == 0 || self.lt_l == 0 {
            return Err(ChannelError::InvalidParams("locktimes must be positive"));
        }
        Ok(())
    }

    pub fn funding_redeem(&self) -> Script {
        funding_redeem_script(&self.pk_l, &self.pk_b)
    }

    pub fn funding_spk(&self) -> Script {
        Script::p2wsh(&self.funding_redeem())
    }

    pub fn funding_output(&self) -> TxOut {
        TxOut::new(self.a, self.funding_spk())
    }

    pub fn key(&self, side: Side) -> &PublicKey {
        match side {
            Side::Borrower => &self.pk_b,
            Side::Lender => &self.pk_l,
        }
    }

    pub fn addr(&self, side: Side) -> [u8; 20] {
        match side {
            Side::Borrower => self.addr_b,
            Side::Lender => self.addr_l,
        }
    }

    pub fn locktime(&self, side: Side) -> u32 {
        match side {
            Side::Borrower => self.lt_b,
            Side::Lender => self.lt_l,
        }
    }

    /// Borrower's share after `i` installments; the last one settles exactly `a`.
    pub fn borrower_share(&self, i: u32) -> u64 {
        if i >= self.n {
            self.a
        } else {
            ((self.a as u128 * i as u128) / self.n as u128) as u64
        }
    }
}

/// `OP_2 <P_L> <P_B> OP_2 OP_CHECKMULTISIG`
pub fn funding_redeem_script(pk_l: &PublicKey, pk_b: &PublicKey) -> Script {
    Builder::new()
        .push_opcode(OP_2)
        .push_key(pk_l)
        .push_key(pk_b)
        .push_opcode(OP_2)
        .push_opcode(OP_CHECKMULTISIG)
        .into_script()
}

/// `IF <lt> CLTV DROP <owner> CHECKSIG ELSE 2 <counterparty> <rev> 2 CHECKMULTISIG ENDIF`
pub fn revocable_script(lt: u32, owner: &PublicKey, counterparty: &PublicKey, rev: &PublicKey) -> Script {
    Builder::new()
        .push_opcode(OP_IF)
        .push_int(lt as i64)
        .push_opcode(OP_CHECKLOCKTIMEVERIFY)
        .push_opcode(OP_DROP)
        .push_key(owner)
        .push_opcode(OP_CHECKSIG)
        .push_opcode(OP_ELSE)
        .push_opcode(OP_2)
        .push_key(counterparty)
        .push_key(rev)
        .push_opcode(OP_2)
        .push_opcode(OP_CHECKMULTISIG)
        .push_opcode(OP_ENDIF)
        .into_script()
}

/// `IF SHA256 <H> EQUALVERIFY <recv> CHECKSIG ELSE <expiry> CLTV DROP <offerer> CHECKSIG ENDIF`
pub fn htlc_script(payment_hash: &Hash256, recipient: &PublicKey, offerer: &PublicKey, expiry: u32) -> Script {
    Builder::new()
        .push_opcode(OP_IF)
        .push_opcode(OP_SHA256)
        .push_slice(&payment_hash.0)
        .push_opcode(OP_EQUALVERIFY)
        .push_key(recipient)
        .push_opcode(OP_CHECKSIG)
        .push_opcode(OP_ELSE)
        .push_int(expiry as i64)
        .push_opcode(OP_CHECKLOCKTIMEVERIFY)
        .push_opcode(OP_DROP)
        .push_key(offerer)
        .push_opcode(OP_CHECKSIG)
        .push_opcode(OP_ENDIF)
        .into_script()
}

/// Unsigned funding transaction; the borrower signs its own inputs.
pub fn build_funding_tx(params: &ChannelParams, inputs: &[(OutPoint, u64)]) -> Result<Tx, ChannelError> {
    params.validate()?;
    let got: u64 = inputs.iter().map(|(_, v)| v).sum();
    if got != params.a || inputs.is_empty() {
        return Err(ChannelError::InsufficientFunds { needed: params.a, got });
    }
    Ok(Tx {
        version: 2,
        inputs: inputs.iter().map(|(op, _)| TxIn::new(*op)).collect(),
        outputs: vec![params.funding_output()],
        locktime: 0,
    })
}

fn hash_points(a: &PublicKey, b: &PublicKey) -> Scalar {
    let mut h = Sha256::new();
    h.update(a.as_bytes());
    h.update(b.as_bytes());
    <Scalar as Reduce<k256::U256>>::reduce_bytes(&h.finalize())
}

/// `Q·H(Q‖C) + C·H(Q‖Q)` over compressed encodings.
pub fn derive_revocation_pubkey(q: &PublicKey, c: &PublicKey) -> Result<PublicKey, ChannelError> {
    let p: ProjectivePoint = q.to_point() * hash_points(q, c) + c.to_point() * hash_points(q, q);
    PublicKey::from_point(&p).ok_or(ChannelError::PointOffCurve)
}

/// Discrete log of [`derive_revocation_pubkey`] given both secrets.
pub fn derive_revocation_secret(q_secret: &Scalar, c_secret: &Scalar) -> Result<KeyPair, ChannelError> {
    let q = KeyPair::from_scalar(*q_secret).map_err(|_| ChannelError::PointOffCurve)?;
    let c = KeyPair::from_scalar(*c_secret).map_err(|_| ChannelError::PointOffCurve)?;
    let s = *q_secret * hash_points(&q.public(), &c.public()) + *c_secret * hash_points(&q.public(), &q.public());
    KeyPair::from_scalar(s).map_err(|_| ChannelError::PointOffCurve)
}

/// `sha256(seed ‖ i) mod n`, with `i` as 4 bytes big-endian.
pub fn per_commitment_secret(seed: &[u8; 32], i: u32) -> Scalar {
    let mut buf = [0u8; 36];
    buf[..32].copy_from_slice(seed);
    buf[32..].copy_from_slice(&i.to_be_bytes());
    scalar_from_hash(&sha256(&buf))
}

/// One party's revocation basepoint and per-commitment secret sequence.
#[derive(Debug, Clone)]
pub struct RevocationMaterial {
    basepoint: KeyPair,
    seed: [u8; 32],
}

impl RevocationMaterial {
    pub fn new(basepoint: KeyPair, seed: [u8; 32]) -> Self {
        RevocationMaterial { basepoint, seed }
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let basepoint = keygen(rng);
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        RevocationMaterial { basepoint, seed }
    }

    pub fn basepoint(&self) -> PublicKey {
        self.basepoint.public()
    }

    pub fn basepoint_secret(&self) -> Scalar {
        self.basepoint.secret()
    }

    pub fn commitment_secret(&self, i: u32) -> Scalar {
        per_commitment_secret(&self.seed, i)
    }

    pub fn commitment_point(&self, i: u32) -> PublicKey {
        KeyPair::from_scalar(self.commitment_secret(i))
            .expect("hash-derived scalar is nonzero")
            .public()
    }
}

/// Key material one channel party holds.
#[derive(Debug, Clone)]
pub struct Party {
    pub side: Side,
    pub funding_key: KeyPair,
    pub revocation: RevocationMaterial,
}

impl Party {
    pub fn generate<R: RngCore + ?Sized>(side: Side, rng: &mut R) -> Self {
        Party { side, funding_key: keygen(rng), revocation: RevocationMaterial::generate(rng) }
    }

    pub fn addr(&self) -> [u8; 20] {
        self.funding_key.public().hash160()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Htlc {
    pub id: u64,
    pub offerer: Side,
    pub amount: u64,
    pub payment_hash: Hash256,
    pub expiry: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitmentPair {
    pub index: u32,
    pub tx_b: Tx,
    pub tx_l: Tx,
    pub rev_pub_b: PublicKey,
    pub rev_pub_l: PublicKey,
    /// Lender's signature on `tx_b`, held by the borrower.
    pub sig_l_on_tx_b: Option<Signature>,
    /// Borrower's signature on `tx_l`, held by the lender.
    pub sig_b_on_tx_l: Option<Signature>,
}

impl CommitmentPair {
    /// The transaction `side` may broadcast.
    pub fn tx(&self, side: Side) -> &Tx {
        match side {
            Side::Borrower => &self.tx_b,
            Side::Lender => &self.tx_l,
        }
    }

    pub fn rev_pub(&self, side: Side) -> &PublicKey {
        match side {
            Side::Borrower => &self.rev_pub_b,
            Side::Lender => &self.rev_pub_l,
        }
    }
}

/// Spends the funding outpoint into `outputs`.
pub fn commitment_tx(funding: OutPoint, outputs: Vec<TxOut>) -> Tx {
    Tx { version: 2, inputs: vec![TxIn::new(funding)], outputs, locktime: 0 }
}

/// Commitment pair for explicit balances plus pending HTLCs.
pub fn build_commitment_txs(
    params: &ChannelParams,
    funding: OutPoint,
    index: u32,
    to_b: u64,
    to_l: u64,
    rev_b: PublicKey,
    rev_l: PublicKey,
    htlcs: &[Htlc],
) -> CommitmentPair {
    let htlc_outs: Vec<TxOut> = htlcs
        .iter()
        .map(|h| {
            let offerer = params.key(h.offerer);
            let recipient = params.key(h.offerer.other());
            TxOut::new(h.amount, htlc_script(&h.payment_hash, recipient, offerer, h.expiry))
        })
        .collect();
    let mut out_b = vec![
        TxOut::new(to_b, revocable_script(params.lt_b, &params.pk_b, &params.pk_l, &rev_b)),
        TxOut::new(to_l, Script::p2pkh(&params.addr_l)),
    ];
    out_b.extend(htlc_outs.iter().cloned());
    let mut out_l = vec![
        TxOut::new(to_l, revocable_script(params.lt_l, &params.pk_l, &params.pk_b, &rev_l)),
        TxOut::new(to_b, Script::p2pkh(&params.addr_b)),
    ];
    out_l.extend(htlc_outs);
    CommitmentPair {
        index,
        tx_b: commitment_tx(funding, out_b),
        tx_l: commitment_tx(funding, out_l),
        rev_pub_b: rev_b,
        rev_pub_l: rev_l,
        sig_l_on_tx_b: None,
        sig_b_on_tx_l: None,
    }
}

/// Commitment pair after `i` installments: the borrower's share is `floor(a·i/N)`.
pub fn build_commitment_pair(
    params: &ChannelParams,
    funding: OutPoint,
    i: u32,
    rev_b: PublicKey,
    rev_l: PublicKey,
) -> Result<CommitmentPair, ChannelError> {
    if i > params.n {
        return Err(ChannelError::IndexOutOfRange { index: i, n: params.n });
    }
    let to_b = params.borrower_share(i);
    Ok(build_commitment_txs(params, funding, i, to_b, params.a - to_b, rev_b, rev_l, &[]))
}

/// Revocation pubkeys for state `i`: the borrower's is keyed to the lender's
/// basepoint and vice versa.
pub fn revocation_pubkeys(
    q_b: &PublicKey,
    q_l: &PublicKey,
    c_b: &PublicKey,
    c_l: &PublicKey,
) -> Result<(PublicKey, PublicKey), ChannelError> {
    Ok((derive_revocation_pubkey(q_l, c_b)?, derive_revocation_pubkey(q_b, c_l)?))
}

pub fn funding_sighash(params: &ChannelParams, tx: &Tx) -> Hash256 {
    sighash(tx, 0, &params.funding_output()).expect("commitments have one input")
}

/// Signature by `kp` over `side`'s commitment transaction.
pub fn sign_commitment(params: &ChannelParams, pair: &CommitmentPair, side: Side, kp: &KeyPair) -> Signature {
    sign(&funding_sighash(params, pair.tx(side)), kp)
}

/// `[dummy, σ_L, σ_B, redeem]`
pub fn funding_witness(params: &ChannelParams, sig_l: &Signature, sig_b: &Signature) -> Vec<Vec<u8>> {
    vec![vec![], sig_l.to_vec(), sig_b.to_vec(), params.funding_redeem().as_bytes().to_vec()]
}

/// Completes `side`'s commitment with the stored counterparty signature and
/// the holder's own, and submits it.
pub fn countersign_and_broadcast(
    chain: &mut SimChain,
    params: &ChannelParams,
    pair: &CommitmentPair,
    side: Side,
    holder: &KeyPair,
) -> Result<Hash256, ChannelError> {
    let tx = finalize_commitment(params, pair, side, holder)?;
    Ok(chain.submit_tx(tx)?)
}

pub fn finalize_commitment(
    params: &ChannelParams,
    pair: &CommitmentPair,
    side: Side,
    holder: &KeyPair,
) -> Result<Tx, ChannelError> {
    let own = sign_commitment(params, pair, side, holder);
    let (sig_l, sig_b) = match side {
        Side::Borrower => (pair.sig_l_on_tx_b.ok_or(ChannelError::MissingSignature)?, own),
        Side::Lender => (own, pair.sig_b_on_tx_l.ok_or(ChannelError::MissingSignature)?),
    };
    let mut tx = pair.tx(side).clone();
    tx.inputs[0].witness = funding_witness(params, &sig_l, &sig_b);
    Ok(tx)
}

/// Spends output `vout` of `prev` to `dest` with the given witness builder.
fn spend_single(
    prev: &Tx,
    vout: u32,
    dest: Script,
    locktime: u32,
    witness: impl FnOnce(Hash256) -> Vec<Vec<u8>>,
) -> Tx {
    let spent = &prev.outputs[vout as usize];
    let mut tx = Tx {
        version: 2,
        inputs: vec![TxIn::new(OutPoint::new(prev.txid(), vout))],
        outputs: vec![TxOut::new(spent.amount, dest)],
        locktime,
    };
    let digest = sighash(&tx, 0, spent).expect("single input");
    tx.inputs[0].witness = witness(digest);
    tx
}

/// Owner's sweep of a revocable output through the CLTV branch.
pub fn build_delayed_sweep(commit: &Tx, vout: u32, lt: u32, owner: &KeyPair, dest: Script) -> Tx {
    spend_single(commit, vout, dest, lt, |d| vec![sign(&d, owner).to_vec(), vec![1]])
}

/// Counterparty's sweep of a revocable output through the revocation branch.
pub fn build_punish_tx(commit: &Tx, vout: u32, counterparty: &KeyPair, rev: &KeyPair, dest: Script) -> Tx {
    spend_single(commit, vout, dest, 0, |d| {
        vec![vec![], sign(&d, counterparty).to_vec(), sign(&d, rev).to_vec(), vec![]]
    })
}

/// HTLC recipient's claim with the preimage.
pub fn build_htlc_claim(commit: &Tx, vout: u32, preimage: &[u8], recipient: &KeyPair, dest: Script) -> Tx {
    spend_single(commit, vout, dest, 0, |d| {
        vec![sign(&d, recipient).to_vec(), preimage.to_vec(), vec![1]]
    })
}

/// HTLC offerer's refund after expiry.
pub fn build_htlc_refund(commit: &Tx, vout: u32, expiry: u32, offerer: &KeyPair, dest: Script) -> Tx {
    spend_single(commit, vout, dest, expiry, |d| vec![sign(&d, offerer).to_vec(), vec![]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelStatus {
    Negotiated,
    Funded,
    Open,
    Closing,
    Closed,
}

/// Public channel state as both parties track it.
#[derive(Debug, Clone)]
pub struct ChannelState {
    pub params: ChannelParams,
    pub funding: Option<OutPoint>,
    pub current_index: u32,
    pub q_b: PublicKey,
    pub q_l: PublicKey,
    pub to_b: u64,
    pub to_l: u64,
    pub htlcs: Vec<Htlc>,
    pub commitments: BTreeMap<u32, CommitmentPair>,
    points_b: BTreeMap<u32, PublicKey>,
    points_l: BTreeMap<u32, PublicKey>,
    pub revealed_secrets_b: BTreeMap<u32, Scalar>,
    pub revealed_secrets_l: BTreeMap<u32, Scalar>,
    pub status: ChannelStatus,
    next_htlc_id: u64,
}

impl ChannelState {
    pub fn new(params: ChannelParams, q_b: PublicKey, q_l: PublicKey) -> Result<Self, ChannelError> {
        params.validate()?;
        let to_l = params.a;
        Ok(ChannelState {
            params,
            funding: None,
            current_index: 0,
            q_b,
            q_l,
            to_b: 0,
            to_l,
            htlcs: Vec::new(),
            commitments: BTreeMap::new(),
            points_b: BTreeMap::new(),
            points_l: BTreeMap::new(),
            revealed_secrets_b: BTreeMap::new(),
            revealed_secrets_l: BTreeMap::new(),
            status: ChannelStatus::Negotiated,
            next_htlc_id: 0,
        })
    }

    fn expect_status(&self, allowed: &[ChannelStatus]) -> Result<(), ChannelError> {
        if allowed.contains(&self.status) {
            Ok(())
        } else {
            Err(ChannelError::WrongStatus(self.status))
        }
    }

    pub fn funding_outpoint(&self) -> Result<OutPoint, ChannelError> {
        self.funding.ok_or(ChannelError::WrongStatus(self.status))
    }

    pub fn mark_funded(&mut self, funding: OutPoint) -> Result<(), ChannelError> {
        self.expect_status(&[ChannelStatus::Negotiated])?;
        self.funding = Some(funding);
        self.status = ChannelStatus::Funded;
        Ok(())
    }

    pub fn mark_open(&mut self) -> Result<(), ChannelError> {
        self.expect_status(&[ChannelStatus::Funded])?;
        self.status = ChannelStatus::Open;
        Ok(())
    }

    pub fn mark_closing(&mut self) -> Result<(), ChannelError> {
        self.expect_status(&[ChannelStatus::Funded, ChannelStatus::Open])?;
        self.status = ChannelStatus::Closing;
        Ok(())
    }

    pub fn mark_closed(&mut self) -> Result<(), ChannelError> {
        self.expect_status(&[ChannelStatus::Closing])?;
        self.status = ChannelStatus::Closed;
        Ok(())
    }

    pub fn current(&self) -> Option<&CommitmentPair> {
        self.commitments.get(&self.current_index)
    }

    pub fn current_mut(&mut self) -> Option<&mut CommitmentPair> {
        self.commitments.get_mut(&self.current_index)
    }

    pub fn commitment_point(&self, side: Side, index: u32) -> Option<&PublicKey> {
        match side {
            Side::Borrower => self.points_b.get(&index),
            Side::Lender => self.points_l.get(&index),
        }
    }

    /// Builds and installs commitment `index` from the current balances and
    /// HTLCs, using the parties' per-commitment points for that index.
    pub fn install_commitment(
        &mut self,
        index: u32,
        c_b: PublicKey,
        c_l: PublicKey,
    ) -> Result<&CommitmentPair, ChannelError> {
        let funding = self.funding_outpoint()?;
        if !self.commitments.is_empty() && index <= self.current_index {
            return Err(ChannelError::IndexOutOfRange { index, n: self.current_index });
        }
        let (rev_b, rev_l) = revocation_pubkeys(&self.q_b, &self.q_l, &c_b, &c_l)?;
        let pair = build_commitment_txs(
            &self.params, funding, index, self.to_b, self.to_l, rev_b, rev_l, &self.htlcs,
        );
        self.points_b.insert(index, c_b);
        self.points_l.insert(index, c_l);
        self.commitments.insert(index, pair);
        self.current_index = index;
        Ok(&self.commitments[&index])
    }

    /// Moves balances to the post-installment split for `i`.
    pub fn set_installment_balances(&mut self, i: u32) -> Result<(), ChannelError> {
        if i > self.params.n {
            return Err(ChannelError::IndexOutOfRange { index: i, n: self.params.n });
        }
        if !self.htlcs.is_empty() {
            return Err(ChannelError::InvalidParams("installments with pending htlcs"));
        }
        self.to_b = self.params.borrower_share(i);
        self.to_l = self.params.a - self.to_b;
        Ok(())
    }

    /// Records a revealed per-commitment secret for an old state of `side`.
    pub fn record_revealed(&mut self, side: Side, index: u32, secret: Scalar) -> Result<(), ChannelError> {
        if index >= self.current_index {
            return Err(ChannelError::NotOldState { index });
        }
        let point = self.commitment_point(side, index).ok_or(ChannelError::UnknownCommitment)?;
        let derived = KeyPair::from_scalar(secret).map_err(|_| ChannelError::BadSecret { index })?;
        if derived.public() != *point {
            return Err(ChannelError::BadSecret { index });
        }
        match side {
            Side::Borrower => self.revealed_secrets_b.insert(index, secret),
            Side::Lender => self.revealed_secrets_l.insert(index, secret),
        };
        Ok(())
    }

    /// Which commitment (index and broadcasting side) `tx` is.
    pub fn identify_commitment(&self, tx: &Tx) -> Option<(u32, Side)> {
        let txid = tx.txid();
        self.commitments.iter().find_map(|(i, pair)| {
            if pair.tx_b.txid() == txid {
                Some((*i, Side::Borrower))
            } else if pair.tx_l.txid() == txid {
                Some((*i, Side::Lender))
            } else {
                None
            }
        })
    }

    /// Sweep of an old commitment's revocable output by the wronged party.
    pub fn punish(&self, chain: &SimChain, broadcast_txid: &Hash256, punisher: &Party, dest: Script) -> Result<Tx, ChannelError> {
        let (_, tx) = chain.find_tx(broadcast_txid).ok_or(ChannelError::UnknownCommitment)?;
        let (index, cheater) = self.identify_commitment(tx).ok_or(ChannelError::UnknownCommitment)?;
        if cheater == punisher.side {
            return Err(ChannelError::UnknownCommitment);
        }
        if index >= self.current_index {
            return Err(ChannelError::NotOldState { index });
        }
        let secrets = match cheater {
            Side::Borrower => &self.revealed_secrets_b,
            Side::Lender => &self.revealed_secrets_l,
        };
        let c_secret = secrets.get(&index).ok_or(ChannelError::SecretUnknown { index })?;
        let rev = derive_revocation_secret(&punisher.revocation.basepoint_secret(), c_secret)?;
        Ok(build_punish_tx(tx, 0, &punisher.funding_key, &rev, dest))
    }

    pub fn balance(&self, side: Side) -> u64 {
        match side {
            Side::Borrower => self.to_b,
            Side::Lender => self.to_l,
        }
    }

    fn balance_mut(&mut self, side: Side) -> &mut u64 {
        match side {
            Side::Borrower => &mut self.to_b,
            Side::Lender => &mut self.to_l,
        }
    }

    pub fn htlc_total(&self) -> u64 {
        self.htlcs.iter().map(|h| h.amount).sum()
    }

    /// Moves `amount` from the offerer's balance into a new HTLC. The caller
    /// then installs the next commitment.
    pub fn add_htlc(&mut self, offerer: Side, amount: u64, payment_hash: Hash256, expiry: u32) -> Result<u64, ChannelError> {
        let bal = self.balance(offerer);
        if bal < amount {
            return Err(ChannelError::InsufficientBalance { balance: bal, needed: amount });
        }
        *self.balance_mut(offerer) -= amount;
        let id = self.next_htlc_id;
        self.next_htlc_id += 1;
        self.htlcs.push(Htlc { id, offerer, amount, payment_hash, expiry });
        Ok(id)
    }

    fn take_htlc(&mut self, id: u64) -> Result<Htlc, ChannelError> {
        let pos = self.htlcs.iter().position(|h| h.id == id).ok_or(ChannelError::UnknownHtlc(id))?;
        Ok(self.htlcs.remove(pos))
    }

    /// Settles an HTLC off-chain with its preimage while `height` is before expiry.
    pub fn fulfill_htlc(&mut self, id: u64, preimage: &[u8], height: u64) -> Result<(), ChannelError> {
        let h = self.htlcs.iter().find(|h| h.id == id).ok_or(ChannelError::UnknownHtlc(id))?;
        if sha256(preimage) != h.payment_hash {
            return Err(ChannelError::WrongPreimage);
        }
        if height >= h.expiry as u64 {
            return Err(ChannelError::Expired { expiry: h.expiry });
        }
        let h = self.take_htlc(id)?;
        *self.balance_mut(h.offerer.other()) += h.amount;
        Ok(())
    }

    pub fn fail_htlc(&mut self, id: u64) -> Result<(), ChannelError> {
        let h = self.take_htlc(id)?;
        *self.balance_mut(h.offerer) += h.amount;
        Ok(())
    }
}

/// Unsigned mutual close paying `e` to the lender and `a - e` to the borrower.
pub fn build_close_tx(params: &ChannelParams, funding: OutPoint, e: u64) -> Result<Tx, ChannelError> {
    if e > params.a {
        return Err(ChannelError::AmountOutOfRange { amount: e, max: params.a });
    }
    Ok(commitment_tx(
        funding,
        vec![
            TxOut::new(e, Script::p2pkh(&params.addr_l)),
            TxOut::new(params.a - e, Script::p2pkh(&params.addr_b)),
        ],
    ))
}

pub fn sign_close_tx(params: &ChannelParams, tx: &mut Tx, lender: &KeyPair, borrower: &KeyPair) {
    let d = funding_sighash(params, tx);
    tx.inputs[0].witness = funding_witness(params, &sign(&d, lender), &sign(&d, borrower));
}
