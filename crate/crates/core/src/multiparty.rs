//! Staker pool: epoch registration against a stake-sorted waiting list,
//! behavioural DKG rounds with non-responder identification, participation
//! penalties, stake-weighted funding splits and per-borrower channels.
//!
//! Threshold cryptography is simulated. Commitments and shares are opaque
//! tokens whose validity comes from each staker's behaviour stub, and the
//! aggregate key is a hash of the sorted participant keys mapped to a point.

use std::collections::{BTreeMap, BTreeSet};

use k256::ProjectivePoint;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::btcsim::keys::scalar_from_hash;
use crate::btcsim::{OutPoint, PublicKey, Script, Tx, TxOut};
use crate::channel::{commitment_tx, funding_redeem_script, revocable_script};
use crate::commitments::{sha256, Hash256};
use crate::spv::{HeaderChain, SpvProof};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("join window closed at {cutoff}")]
    JoinWindowClosed { cutoff: u64 },
    #[error("stake {stake} is below the minimum {min}")]
    StakeBelowMinimum { stake: u64, min: u64 },
    #[error("staker {0} is already registered")]
    DuplicateStaker(String),
    #[error("unknown staker {0}")]
    UnknownStaker(String),
    #[error("the active set is empty")]
    EmptySet,
    #[error("no responsive set can be formed")]
    Exhausted,
    #[error("pool holds {available}, requested {requested}")]
    InsufficientPool { available: u64, requested: u64 },
    #[error("spv proof rejected: {0}")]
    BadSpvProof(&'static str),
    #[error("no aggregate key has been formed")]
    NoKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Behavior {
    #[default]
    Responsive,
    /// Never delivers its commitment.
    TimesOut,
    /// Delivers a valid commitment but an invalid share.
    SendsInvalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Staker {
    pub id: String,
    pub stake: u64,
    pub f: u32,
    pub behavior: Behavior,
    pub pk: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    /// Target size of the active set.
    pub n: usize,
    pub stake_min: u64,
    pub delta: u64,
    pub t_epoch: u64,
    pub dt: u64,
    pub join_cutoff: u64,
}

/// `stake_min + coef·Δ`
pub fn stake_level(params: &PoolParams, coef: u64) -> u64 {
    params.stake_min + coef * params.delta
}

/// `w_i = stake_i / Σ stake`, exact.
pub fn compute_weights(active: &[Staker]) -> Result<Vec<Ratio<u128>>, PoolError> {
    let total: u128 = active.iter().map(|s| s.stake as u128).sum();
    if total == 0 {
        return Err(PoolError::EmptySet);
    }
    Ok(active.iter().map(|s| Ratio::new(s.stake as u128, total)).collect())
}

/// Index of the largest stake; ties go to the smallest id.
fn largest(stakers: &[Staker]) -> usize {
    let mut best = 0;
    for (i, s) in stakers.iter().enumerate() {
        let b = &stakers[best];
        if s.stake > b.stake || (s.stake == b.stake && s.id < b.id) {
            best = i;
        }
    }
    best
}

/// Floor-proportional split of `amount` by stake, remainder to the largest.
pub fn split_funding(amount: u64, active: &[Staker]) -> Result<Vec<u64>, PoolError> {
    let total: u128 = active.iter().map(|s| s.stake as u128).sum();
    if total == 0 {
        return Err(PoolError::EmptySet);
    }
    let mut parts: Vec<u64> = active
        .iter()
        .map(|s| (s.stake as u128 * amount as u128 / total) as u64)
        .collect();
    let rest = amount - parts.iter().sum::<u64>();
    parts[largest(active)] += rest;
    Ok(parts)
}

/// One DKG message: `None` when never received, otherwise its validity flag.
pub type DkgMessage = Option<bool>;

/// Two-phase identification: missing or invalid commitments drop out first,
/// survivors with missing or invalid shares drop out second.
pub fn identify_malicious_dkg(
    commitments: &BTreeMap<String, DkgMessage>,
    shares: &BTreeMap<String, DkgMessage>,
    active: &[String],
) -> (Vec<String>, BTreeSet<String>) {
    let mut malicious = BTreeSet::new();
    let phase1: Vec<&String> = active
        .iter()
        .filter(|id| {
            let ok = commitments.get(*id).copied().flatten() == Some(true);
            if !ok {
                malicious.insert((*id).clone());
            }
            ok
        })
        .collect();
    let clean = phase1
        .into_iter()
        .filter(|id| {
            let ok = shares.get(*id).copied().flatten() == Some(true);
            if !ok {
                malicious.insert((*id).clone());
            }
            ok
        })
        .cloned()
        .collect();
    (clean, malicious)
}

/// Messages a staker's stub emits in one DKG round.
pub fn dkg_messages(behavior: Behavior) -> (DkgMessage, DkgMessage) {
    match behavior {
        Behavior::Responsive => (Some(true), Some(true)),
        Behavior::TimesOut => (None, None),
        Behavior::SendsInvalid => (Some(true), Some(false)),
    }
}

/// Hash of the sorted participant keys, mapped to a curve point.
pub fn aggregate_key(pks: &[PublicKey]) -> PublicKey {
    let mut sorted: Vec<&[u8; 33]> = pks.iter().map(|p| p.as_bytes()).collect();
    sorted.sort();
    let bytes: Vec<u8> = sorted.into_iter().flatten().copied().collect();
    let s = scalar_from_hash(&sha256(&bytes));
    PublicKey::from_point(&(ProjectivePoint::GENERATOR * s)).expect("hash scalar is non-zero")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TssKey {
    pub aggregate_pk: PublicKey,
    pub members: Vec<String>,
    pub weights: Vec<Ratio<u128>>,
    pub rounds: u32,
}

impl TssKey {
    pub fn fingerprint(&self) -> Hash256 {
        sha256(self.aggregate_pk.as_bytes())
    }
}

/// Outcome of one penalty step for a single staker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Penalty {
    Cleared,
    Fined { fine: u64 },
    Removed { forfeited: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub active: Vec<(String, u64)>,
    pub waiting: Vec<(String, u64)>,
    pub weights: Vec<String>,
    pub fines: Vec<(String, u64)>,
    pub removed: Vec<String>,
    pub key_fingerprint: Option<Hash256>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelRecord {
    pub id: u64,
    pub borrower: String,
    pub a: u64,
    pub b: u64,
    pub funding: OutPoint,
    pub shares: Vec<(String, u64)>,
    pub draws: Vec<(String, u64)>,
    pub tx_b: Tx,
    pub tx_l: Tx,
}

#[derive(Debug, Clone)]
pub struct MultiBorrowerRequest {
    pub borrower: String,
    pub pk_b: PublicKey,
    pub a: u64,
    pub b: u64,
    pub lt_b: u32,
    pub lt_l: u32,
    pub rev_b: PublicKey,
    pub rev_l: PublicKey,
    pub tx_fund: Tx,
    pub proof: SpvProof,
}

#[derive(Debug, Clone)]
pub struct StakerRegistry {
    pub params: PoolParams,
    active: Vec<Staker>,
    waiting: Vec<Staker>,
    epoch: u64,
    key: Option<TssKey>,
    /// Fines and forfeited stakes.
    pub escrow: u64,
    /// Stake handed back to stakers that left or were pruned.
    pub withdrawn: u64,
    /// Stake drawn into loans.
    pub lent: u64,
    deposited: u64,
    channels: Vec<ChannelRecord>,
    reports: Vec<EpochReport>,
    fines: Vec<(String, u64)>,
    removed: Vec<String>,
    malicious: BTreeSet<String>,
}

fn sort_desc(v: &mut [Staker]) {
    v.sort_by(|x, y| y.stake.cmp(&x.stake).then_with(|| x.id.cmp(&y.id)));
}

impl StakerRegistry {
    pub fn new(params: PoolParams) -> Self {
        StakerRegistry {
            params,
            active: Vec::new(),
            waiting: Vec::new(),
            epoch: 0,
            key: None,
            escrow: 0,
            withdrawn: 0,
            lent: 0,
            deposited: 0,
            channels: Vec::new(),
            reports: Vec::new(),
            fines: Vec::new(),
            removed: Vec::new(),
            malicious: BTreeSet::new(),
        }
    }

    pub fn active(&self) -> &[Staker] {
        &self.active
    }

    pub fn waiting(&self) -> &[Staker] {
        &self.waiting
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn key(&self) -> Option<&TssKey> {
        self.key.as_ref()
    }

    pub fn channels(&self) -> &[ChannelRecord] {
        &self.channels
    }

    pub fn reports(&self) -> &[EpochReport] {
        &self.reports
    }

    /// Members identified as malicious during the last recomposition.
    pub fn last_malicious(&self) -> &BTreeSet<String> {
        &self.malicious
    }

    pub fn staker(&self, id: &str) -> Option<&Staker> {
        self.active.iter().chain(&self.waiting).find(|s| s.id == id)
    }

    pub fn set_behavior(&mut self, id: &str, behavior: Behavior) -> Result<(), PoolError> {
        let s = self
            .active
            .iter_mut()
            .chain(self.waiting.iter_mut())
            .find(|s| s.id == id)
            .ok_or_else(|| PoolError::UnknownStaker(id.to_string()))?;
        s.behavior = behavior;
        Ok(())
    }

    pub fn capacity(&self) -> u64 {
        self.active.iter().map(|s| s.stake).sum()
    }

    /// Everything ever deposited; equals [`StakerRegistry::accounted`].
    pub fn deposited(&self) -> u64 {
        self.deposited
    }

    pub fn accounted(&self) -> u64 {
        let held: u64 = self.active.iter().chain(&self.waiting).map(|s| s.stake).sum();
        held + self.escrow + self.withdrawn + self.lent
    }

    pub fn weights(&self) -> Result<Vec<Ratio<u128>>, PoolError> {
        compute_weights(&self.active)
    }

    /// Admits joins, applies leaves, fills the active set from the waiting
    /// list and swaps in out-staking candidates.
    pub fn process_epoch(
        &mut self,
        joins: Vec<(String, u64, PublicKey)>,
        leaves: &[String],
        now: u64,
    ) -> Result<(), PoolError> {
        if !joins.is_empty() && now >= self.params.join_cutoff {
            return Err(PoolError::JoinWindowClosed { cutoff: self.params.join_cutoff });
        }
        let mut seen = BTreeSet::new();
        for (id, stake, _) in &joins {
            if *stake < self.params.stake_min {
                return Err(PoolError::StakeBelowMinimum { stake: *stake, min: self.params.stake_min });
            }
            if self.staker(id).is_some() || !seen.insert(id.clone()) {
                return Err(PoolError::DuplicateStaker(id.clone()));
            }
        }
        for id in leaves {
            if self.staker(id).is_none() {
                return Err(PoolError::UnknownStaker(id.clone()));
            }
        }
        for (id, stake, pk) in joins {
            self.deposited += stake;
            self.waiting.push(Staker { id, stake, f: 0, behavior: Behavior::Responsive, pk });
        }
        for id in leaves {
            let s = self.take(id).expect("checked");
            self.withdrawn += s.stake;
        }
        self.fill(&BTreeSet::new());
        self.epoch += 1;
        Ok(())
    }

    fn take(&mut self, id: &str) -> Option<Staker> {
        if let Some(i) = self.active.iter().position(|s| s.id == id) {
            return Some(self.active.remove(i));
        }
        let i = self.waiting.iter().position(|s| s.id == id)?;
        Some(self.waiting.remove(i))
    }

    /// Promotion and out-staking swaps, never promoting `excluded` ids.
    fn fill(&mut self, excluded: &BTreeSet<String>) {
        sort_desc(&mut self.waiting);
        let eligible = |s: &Staker, min: u64| s.stake >= min && !excluded.contains(&s.id);
        while self.active.len() < self.params.n {
            let Some(i) = self.waiting.iter().position(|s| eligible(s, self.params.stake_min)) else { break };
            let s = self.waiting.remove(i);
            self.active.push(s);
        }
        loop {
            sort_desc(&mut self.active);
            let Some(i) = self.waiting.iter().position(|s| eligible(s, self.params.stake_min)) else { break };
            let Some(smallest) = self.active.last() else { break };
            if self.active.len() < self.params.n || self.waiting[i].stake <= smallest.stake {
                break;
            }
            let mut evicted = self.active.pop().expect("non-empty");
            evicted.f = 0;
            let s = self.waiting.remove(i);
            self.active.push(s);
            self.waiting.push(evicted);
            sort_desc(&mut self.waiting);
        }
        sort_desc(&mut self.active);
    }

    /// One penalty step for an active staker. Misses demote to the waiting
    /// list; a second consecutive miss removes the staker.
    pub fn apply_penalty(&mut self, id: &str, responded: bool) -> Result<Penalty, PoolError> {
        let i = self
            .active
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| PoolError::UnknownStaker(id.to_string()))?;
        if responded {
            self.active[i].f = 0;
            return Ok(Penalty::Cleared);
        }
        let mut s = self.active.remove(i);
        s.f += 1;
        if s.f >= 2 {
            self.escrow += s.stake;
            self.removed.push(s.id.clone());
            return Ok(Penalty::Removed { forfeited: s.stake });
        }
        let fine = s.stake - s.stake * 9 / 10;
        s.stake -= fine;
        self.escrow += fine;
        self.fines.push((s.id.clone(), fine));
        self.waiting.push(s);
        sort_desc(&mut self.waiting);
        Ok(Penalty::Fined { fine })
    }

    /// Reruns the DKG until every member of the active set responds.
    pub fn recompose_tss(&mut self) -> Result<&TssKey, PoolError> {
        let mut excluded = BTreeSet::new();
        let mut rounds = 0;
        self.malicious.clear();
        self.fill(&excluded);
        loop {
            if self.active.is_empty() {
                self.key = None;
                self.report();
                return Err(PoolError::Exhausted);
            }
            rounds += 1;
            let ids: Vec<String> = self.active.iter().map(|s| s.id.clone()).collect();
            let mut commits = BTreeMap::new();
            let mut shares = BTreeMap::new();
            for s in &self.active {
                let (c, sh) = dkg_messages(s.behavior);
                commits.insert(s.id.clone(), c);
                shares.insert(s.id.clone(), sh);
            }
            let (_, malicious) = identify_malicious_dkg(&commits, &shares, &ids);
            for id in &ids {
                self.apply_penalty(id, !malicious.contains(id))?;
            }
            if malicious.is_empty() {
                break;
            }
            self.malicious.extend(malicious.iter().cloned());
            excluded.extend(malicious);
            self.fill(&excluded);
        }
        let pks: Vec<PublicKey> = self.active.iter().map(|s| s.pk).collect();
        self.key = Some(TssKey {
            aggregate_pk: aggregate_key(&pks),
            members: self.active.iter().map(|s| s.id.clone()).collect(),
            weights: compute_weights(&self.active)?,
            rounds,
        });
        self.report();
        Ok(self.key.as_ref().expect("just set"))
    }

    fn report(&mut self) {
        let weights = compute_weights(&self.active)
            .map(|w| w.iter().map(|r| format!("{}/{}", r.numer(), r.denom())).collect())
            .unwrap_or_default();
        self.reports.push(EpochReport {
            epoch: self.epoch,
            active: self.active.iter().map(|s| (s.id.clone(), s.stake)).collect(),
            waiting: self.waiting.iter().map(|s| (s.id.clone(), s.stake)).collect(),
            weights,
            fines: std::mem::take(&mut self.fines),
            removed: std::mem::take(&mut self.removed),
            key_fingerprint: self.key.as_ref().map(|k| k.fingerprint()),
        });
    }

    /// Takes `b` proportionally from active stakes, then prunes stakers left
    /// below the minimum.
    pub fn draw_loan(&mut self, b: u64) -> Result<Vec<(String, u64)>, PoolError> {
        let available = self.capacity();
        if b > available {
            return Err(PoolError::InsufficientPool { available, requested: b });
        }
        let parts = split_funding(b, &self.active)?;
        let draws: Vec<(String, u64)> = self.active.iter().map(|s| s.id.clone()).zip(parts).collect();
        for (s, (_, d)) in self.active.iter_mut().zip(&draws) {
            s.stake -= d;
        }
        self.lent += b;
        let min = self.params.stake_min;
        let (keep, pruned): (Vec<Staker>, Vec<Staker>) = self.active.drain(..).partition(|s| s.stake >= min);
        self.active = keep;
        for s in pruned {
            self.withdrawn += s.stake;
            self.removed.push(s.id);
        }
        Ok(draws)
    }

    /// Multi-output commitment templates for one borrower: the borrower's
    /// transaction pays each staker its share directly, the pool's pays each
    /// staker through a revocable output.
    pub fn commitment_templates(
        &self,
        req: &MultiBorrowerRequest,
        funding: OutPoint,
        shares: &[(String, u64)],
    ) -> Result<(Tx, Tx), PoolError> {
        let mut out_b = vec![TxOut::new(0, revocable_script(req.lt_b, &req.pk_b, &self.pool_key()?, &req.rev_b))];
        let mut out_l = Vec::new();
        for (id, a_i) in shares {
            let s = self.staker(id).ok_or_else(|| PoolError::UnknownStaker(id.clone()))?;
            out_b.push(TxOut::new(*a_i, Script::p2pkh(&s.pk.hash160())));
            out_l.push(TxOut::new(*a_i, revocable_script(req.lt_l, &s.pk, &req.pk_b, &req.rev_l)));
        }
        out_l.push(TxOut::new(0, Script::p2pkh(&req.pk_b.hash160())));
        Ok((commitment_tx(funding, out_b), commitment_tx(funding, out_l)))
    }

    fn pool_key(&self) -> Result<PublicKey, PoolError> {
        self.key.as_ref().map(|k| k.aggregate_pk).ok_or(PoolError::NoKey)
    }

    /// Funding script shared by the pool key and a borrower.
    pub fn funding_spk(&self, pk_b: &PublicKey) -> Result<Script, PoolError> {
        Ok(Script::p2wsh(&funding_redeem_script(&self.pool_key()?, pk_b)))
    }

    /// Records an independent channel for a new borrower after checking the
    /// funding proof and drawing `b` from the pool.
    pub fn register_channel(&mut self, req: MultiBorrowerRequest, spv: &HeaderChain) -> Result<&ChannelRecord, PoolError> {
        let spk = self.funding_spk(&req.pk_b)?;
        let available = self.capacity();
        if req.b > available {
            return Err(PoolError::InsufficientPool { available, requested: req.b });
        }
        if !spv.verify_tx(&req.proof) || !spv.validate_block_hash(&req.proof.block_hash).0 {
            return Err(PoolError::BadSpvProof("inclusion does not verify on the main chain"));
        }
        if req.proof.tx != req.tx_fund.serialize_no_witness() {
            return Err(PoolError::BadSpvProof("proof is for a different transaction"));
        }
        if req.tx_fund.outputs.first() != Some(&TxOut::new(req.a, spk)) {
            return Err(PoolError::BadSpvProof("funding output does not match"));
        }
        let funding = OutPoint::new(req.tx_fund.txid(), 0);
        let parts = split_funding(req.a, &self.active)?;
        let shares: Vec<(String, u64)> = self.active.iter().map(|s| s.id.clone()).zip(parts).collect();
        let (tx_b, tx_l) = self.commitment_templates(&req, funding, &shares)?;
        let draws = self.draw_loan(req.b)?;
        let id = self.channels.len() as u64;
        self.channels.push(ChannelRecord { id, borrower: req.borrower, a: req.a, b: req.b, funding, shares, draws, tx_b, tx_l });
        Ok(self.channels.last().expect("just pushed"))
    }
}
