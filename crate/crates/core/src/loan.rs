//! The loan contract: a deterministic state machine that escrows stablecoin
//! balances and advances a loan through offer, request, acceptance, channel
//! opening, `N` installments and the terminal close. It never touches Bitcoin
//! directly; it only checks commitment shapes, signatures and SPV proofs.
//!
//! Units: stablecoin amounts are integer cents, BTC amounts are sats and
//! prices are cents per whole BTC. Every product is floored.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::btcsim::script::Instruction;
use crate::btcsim::{verify_sig, KeyPair, OutPoint, PublicKey, Signature, Tx};
use crate::channel::{build_commitment_pair, derive_revocation_pubkey, funding_sighash, ChannelParams, Side};
use crate::commitments::{sha256, Hash256};
use crate::spv::{HeaderChain, SpvProof};

pub const SATS_PER_BTC: u128 = 100_000_000;

pub type AccountId = String;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoanError {
    #[error("validation failed: {0}")]
    ValidationFailed(&'static str),
    #[error("account {account} holds {balance}, needs {needed}")]
    InsufficientBalance { account: AccountId, balance: u64, needed: u64 },
    #[error("escrow holds {balance}, needs {needed}")]
    EscrowShortfall { balance: u64, needed: u64 },
    #[error("unknown offer {0}")]
    UnknownOffer(u64),
    #[error("offer is {got:?}")]
    WrongStatus { got: LoanStatus },
    #[error("installment {index} is {got:?}")]
    WrongInstallmentStatus { index: u32, got: InstallmentStatus },
    #[error("installment {got} requested while {expected} is next")]
    WrongInstallment { expected: u32, got: u32 },
    #[error("collateral {a} outside {min}..={max}")]
    CollateralOutOfRange { a: u64, min: u64, max: u64 },
    #[error("deadline missed: now {now}, latest allowed {latest}")]
    TooLate { now: u64, latest: u64 },
    #[error("too early: now {now}, earliest allowed {earliest}")]
    TooEarly { now: u64, earliest: u64 },
    #[error("caller {0} is not authorised")]
    Unauthorised(AccountId),
    #[error("identity must be non-zero")]
    ZeroIdentity,
    #[error("signature does not verify")]
    BadSignature,
    #[error("revocation secret does not match the committed key")]
    BadSecret,
    #[error("commitment transaction has the wrong shape: {0}")]
    BadCommitment(&'static str),
    #[error("spv proof rejected: {0}")]
    BadSpvProof(&'static str),
    #[error("transaction does not spend the channel funding output")]
    NotAChannelSpend,
    #[error("no counterparty deadline has passed")]
    NoTimeoutPending,
    #[error("a close proof is required")]
    CloseProofRequired,
    #[error("no liquidation window is open for this party")]
    NoLiquidation,
    #[error("liquidation window closed at {deadline}")]
    WindowClosed { deadline: u64 },
    #[error("cure leaves collateral value {value} outside the safe range")]
    CureInsufficient { value: u64 },
    #[error("division by zero")]
    DivisionByZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoanStatus {
    Offered,
    Requested,
    Accepted,
    Opened,
    Successful,
    DefaultedClosed,
    LiquidatedClosed,
    Expired,
}

impl LoanStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            LoanStatus::Successful
                | LoanStatus::DefaultedClosed
                | LoanStatus::LiquidatedClosed
                | LoanStatus::Expired
        )
    }

    /// Edges of the status DAG.
    pub fn can_transition(self, to: LoanStatus) -> bool {
        use LoanStatus::*;
        matches!(
            (self, to),
            (Offered, Requested)
                | (Requested, Accepted)
                | (Accepted, Opened)
                | (Opened, Successful)
                | (Opened, DefaultedClosed)
                | (Opened, LiquidatedClosed)
                | (Offered, Expired)
                | (Requested, Expired)
                | (Accepted, Expired)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstallmentStatus {
    Pending,
    PaidInstallment,
    TookInstallment,
    BorrowerRevocationKey,
    LenderRevocationKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstallmentFormula {
    /// `floor(b/N) + floor(b·k)`; `b mod N` rides on the last installment.
    #[default]
    PrincipalPlusInterest,
    /// `floor(floor(b(1+k))/N)`; the remainder rides on the last installment.
    Amortised,
}

/// Who receives the deposit when the channel closes mutually.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoopDeposit {
    #[default]
    Lender,
    Borrower,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoanOptions {
    pub formula: InstallmentFormula,
    /// Borrower cure window; defaults to `2·IRP`.
    pub borrower_window: Option<u64>,
    /// Lender cure window; defaults to `2·IRP`.
    pub lender_window: Option<u64>,
    pub coop_deposit: CoopDeposit,
    /// A missed-payment claim must carry an SPV proof that the channel closed.
    pub require_close_proof_on_default: bool,
}

/// Lender's offer terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoanTerms {
    pub a_min: u64,
    pub a_max: u64,
    pub c: u64,
    pub k: Ratio<u64>,
    pub cr: Ratio<u64>,
    pub n: u32,
    pub ip: u64,
    pub rp: u64,
    pub irp: u64,
    pub pk_l: PublicKey,
    pub lnid_l: Hash256,
    pub q_l: PublicKey,
    pub t0: u64,
    pub oracle: String,
    pub lr_b: u64,
    pub lr_l: u64,
    pub options: LoanOptions,
}

/// Borrower's request. The locktimes are fixed here so the contract can
/// rebuild the commitment scripts it is asked to check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BorrowerRequest {
    pub a: u64,
    pub t0: u64,
    pub pk_b: PublicKey,
    pub lnid_b: Hash256,
    pub q_b: PublicKey,
    pub lt_b: u32,
    pub lt_l: u32,
    pub tx_fund: Tx,
    pub tx_comm0_b: Tx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Installment {
    pub index: u32,
    pub deadline: u64,
    pub amount: u64,
    pub status: InstallmentStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Liquidation {
    BorrowerWindow { deadline: u64, price: u64 },
    LenderWindow { deadline: u64, price: u64 },
}

impl Liquidation {
    pub fn side(&self) -> Side {
        match self {
            Liquidation::BorrowerWindow { .. } => Side::Borrower,
            Liquidation::LenderWindow { .. } => Side::Lender,
        }
    }

    pub fn deadline(&self) -> u64 {
        match *self {
            Liquidation::BorrowerWindow { deadline, .. } | Liquidation::LenderWindow { deadline, .. } => deadline,
        }
    }
}

/// Per-offer slice of the escrow account.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscrowBook {
    pub rp_l: u64,
    pub rp_b: u64,
    pub loan: u64,
    pub deposit: u64,
    pub pending: u64,
}

impl EscrowBook {
    pub fn total(&self) -> u64 {
        self.rp_l + self.rp_b + self.loan + self.deposit + self.pending
    }
}

#[derive(Debug, Clone)]
pub struct LoanOffer {
    pub id: u64,
    pub lender: AccountId,
    pub borrower: Option<AccountId>,
    pub terms: LoanTerms,
    pub request: Option<BorrowerRequest>,
    pub status: LoanStatus,
    pub b: u64,
    pub accept_price: u64,
    pub lr_l: u64,
    pub escrow: EscrowBook,
    pub sig_l_on_comm0_b: Option<Signature>,
    pub sig_b_on_comm0_l: Option<Signature>,
    pub comm_b: BTreeMap<u32, Tx>,
    pub comm_l: BTreeMap<u32, Tx>,
    pub sig_l_on_b: BTreeMap<u32, Signature>,
    pub sig_b_on_l: BTreeMap<u32, Signature>,
    pub installments: Vec<Installment>,
    pub last_price: Option<u64>,
    pub liquidation: Option<Liquidation>,
    pub extra_collateral: u64,
    pub extra_outpoints: Vec<OutPoint>,
}

impl LoanOffer {
    pub fn channel_params(&self) -> Option<ChannelParams> {
        let r = self.request.as_ref()?;
        Some(channel_params(&self.terms, r))
    }

    pub fn funding_outpoint(&self) -> Option<OutPoint> {
        Some(OutPoint::new(self.request.as_ref()?.tx_fund.txid(), 0))
    }

    /// Installments completed through the lender's revocation reveal.
    pub fn completed(&self) -> u32 {
        self.installments
            .iter()
            .take_while(|i| i.status == InstallmentStatus::LenderRevocationKey)
            .count() as u32
    }

    /// First installment not yet completed.
    pub fn current_installment(&self) -> Option<&Installment> {
        self.installments.get(self.completed() as usize)
    }

    /// Collateral still locked for the lender: the unreleased part of `a`
    /// plus any collateral added to cure a liquidation.
    pub fn remaining_collateral(&self) -> u64 {
        let Some(r) = &self.request else { return 0 };
        let n = self.terms.n as u128;
        let left = (n - self.completed() as u128) * r.a as u128 / n;
        left as u64 + self.extra_collateral
    }

    pub fn collateral_value(&self, price: u64) -> u64 {
        collateral_value(self.remaining_collateral(), price)
    }

    /// The liquidation window if it has run out at `now`.
    pub fn expired_liquidation(&self, now: u64) -> Option<Side> {
        self.liquidation.filter(|l| now >= l.deadline()).map(|l| l.side())
    }
}

pub fn channel_params(terms: &LoanTerms, r: &BorrowerRequest) -> ChannelParams {
    ChannelParams {
        a: r.a,
        pk_b: r.pk_b,
        pk_l: terms.pk_l,
        addr_b: r.pk_b.hash160(),
        addr_l: terms.pk_l.hash160(),
        lt_b: r.lt_b,
        lt_l: r.lt_l,
        n: terms.n,
    }
}

/// `floor(a·r/CR)` in cents.
pub fn loan_amount(a: u64, price: u64, cr: Ratio<u64>) -> u64 {
    let num = a as u128 * price as u128 * *cr.denom() as u128;
    let den = SATS_PER_BTC * *cr.numer() as u128;
    (num / den) as u64
}

/// `floor(a·r)` in cents.
pub fn collateral_value(a: u64, price: u64) -> u64 {
    (a as u128 * price as u128 / SATS_PER_BTC) as u64
}

/// Amount due for installment `i` in `1..=n`.
pub fn installment_amount(b: u64, k: Ratio<u64>, n: u32, i: u32, formula: InstallmentFormula) -> u64 {
    let (b, n128) = (b as u128, n as u128);
    let (kn, kd) = (*k.numer() as u128, *k.denom() as u128);
    let last = i == n;
    let amount = match formula {
        InstallmentFormula::PrincipalPlusInterest => {
            let base = b / n128 + b * kn / kd;
            if last { base + b % n128 } else { base }
        }
        InstallmentFormula::Amortised => {
            let total = b * (kd + kn) / kd;
            let base = total / n128;
            if last { base + total % n128 } else { base }
        }
    };
    amount as u64
}

/// Borrower collateralization ratio `BCAA·OP/LA`.
pub fn cdp_bcr(bcaa: Ratio<u128>, op: Ratio<u128>, la: Ratio<u128>) -> Result<Ratio<u128>, LoanError> {
    if *la.numer() == 0 {
        return Err(LoanError::DivisionByZero);
    }
    Ok(bcaa * op / la)
}

/// Maximum loan amount `BCAA·OP/MBCR`.
pub fn cdp_mla(bcaa: Ratio<u128>, op: Ratio<u128>, mbcr: Ratio<u128>) -> Result<Ratio<u128>, LoanError> {
    if *mbcr.numer() == 0 {
        return Err(LoanError::DivisionByZero);
    }
    Ok(bcaa * op / mbcr)
}

/// A position is liquidatable once its maximum loan falls below what is owed.
pub fn cdp_liquidatable(
    bcaa: Ratio<u128>,
    op: Ratio<u128>,
    mbcr: Ratio<u128>,
    ola: Ratio<u128>,
) -> Result<bool, LoanError> {
    Ok(cdp_mla(bcaa, op, mbcr)? < ola)
}

/// Piecewise-constant price feed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceOracle {
    pub name: String,
    pub points: BTreeMap<u64, u64>,
}

impl PriceOracle {
    pub fn new(name: impl Into<String>, initial: u64) -> Self {
        PriceOracle { name: name.into(), points: BTreeMap::from([(0, initial)]) }
    }

    pub fn set(&mut self, at: u64, price: u64) {
        self.points.insert(at, price);
    }

    pub fn price_at(&self, now: u64) -> Option<u64> {
        self.points.range(..=now).next_back().map(|(_, p)| *p)
    }
}

/// Stablecoin balances plus the contract's escrow account.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    balances: BTreeMap<AccountId, u64>,
    escrow: u64,
}

impl Ledger {
    /// Seeds an account; used only when setting up a scenario.
    pub fn mint(&mut self, who: &str, amount: u64) {
        *self.balances.entry(who.to_string()).or_default() += amount;
    }

    pub fn balance(&self, who: &str) -> u64 {
        self.balances.get(who).copied().unwrap_or(0)
    }

    pub fn escrow(&self) -> u64 {
        self.escrow
    }

    pub fn balances(&self) -> &BTreeMap<AccountId, u64> {
        &self.balances
    }

    pub fn total(&self) -> u128 {
        self.balances.values().map(|&v| v as u128).sum::<u128>() + self.escrow as u128
    }

    fn check(&self, who: &str, amount: u64) -> Result<(), LoanError> {
        let balance = self.balance(who);
        if balance < amount {
            return Err(LoanError::InsufficientBalance { account: who.to_string(), balance, needed: amount });
        }
        Ok(())
    }

    pub fn to_escrow(&mut self, who: &str, amount: u64) -> Result<(), LoanError> {
        self.check(who, amount)?;
        *self.balances.get_mut(who).expect("checked") -= amount;
        self.escrow += amount;
        Ok(())
    }

    pub fn from_escrow(&mut self, who: &str, amount: u64) -> Result<(), LoanError> {
        if self.escrow < amount {
            return Err(LoanError::EscrowShortfall { balance: self.escrow, needed: amount });
        }
        self.escrow -= amount;
        *self.balances.entry(who.to_string()).or_default() += amount;
        Ok(())
    }

    pub fn transfer(&mut self, from: &str, to: &str, amount: u64) -> Result<(), LoanError> {
        self.check(from, amount)?;
        *self.balances.get_mut(from).expect("checked") -= amount;
        *self.balances.entry(to.to_string()).or_default() += amount;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoanEvent {
    pub time: u64,
    pub op: String,
    pub offer_id: Option<u64>,
    pub params_digest: Hash256,
    pub outcome: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloseKind {
    BorrowerCommitment { index: u32 },
    LenderCommitment { index: u32 },
    Cooperative { to_lender: u64 },
    BorrowerMissedPayment { index: u32 },
    LenderMissedTake { index: u32 },
    BorrowerMissedReveal { index: u32 },
    LenderMissedReveal { index: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub offer_id: u64,
    pub kind: CloseKind,
    pub deposit_to: Side,
    pub deposit: u64,
    pub pending: Option<(Side, u64)>,
    pub reservation_to: Side,
    pub status: LoanStatus,
}

#[derive(Debug, Clone, Default)]
pub struct LoanContract {
    offers: BTreeMap<u64, LoanOffer>,
    next_id: u64,
    ledger: Ledger,
    events: Vec<LoanEvent>,
}

fn digest_of(repr: String) -> Hash256 {
    sha256(repr.as_bytes())
}

fn revocation_key_of(tx: &Tx) -> Option<PublicKey> {
    let ins = tx.outputs.first()?.script_pubkey.instructions().ok()?;
    ins.iter().rev().find_map(|i| match i {
        Instruction::Push(d) if d.len() == 33 => PublicKey::from_bytes(d).ok(),
        _ => None,
    })
}

/// Checks that `tx` is `side`'s commitment for state `i` and returns its
/// revocation key.
fn check_commitment(
    params: &ChannelParams,
    funding: OutPoint,
    tx: &Tx,
    side: Side,
    i: u32,
) -> Result<PublicKey, LoanError> {
    let rev = revocation_key_of(tx).ok_or(LoanError::BadCommitment("missing revocation key"))?;
    let expected = build_commitment_pair(params, funding, i, rev, rev)
        .map_err(|_| LoanError::BadCommitment("index out of range"))?;
    if expected.tx(side).serialize_no_witness() != tx.serialize_no_witness() {
        return Err(LoanError::BadCommitment("outputs or input differ from the expected state"));
    }
    Ok(rev)
}

fn check_sig(params: &ChannelParams, tx: &Tx, pk: &PublicKey, sig: &Signature) -> Result<(), LoanError> {
    if verify_sig(&funding_sighash(params, tx), pk, sig) {
        Ok(())
    } else {
        Err(LoanError::BadSignature)
    }
}

fn check_secret(q: &PublicKey, secret: &[u8; 32], committed: &PublicKey) -> Result<(), LoanError> {
    let point = KeyPair::from_bytes(secret).map_err(|_| LoanError::BadSecret)?.public();
    match derive_revocation_pubkey(q, &point) {
        Ok(k) if k == *committed => Ok(()),
        _ => Err(LoanError::BadSecret),
    }
}

fn proven_tx(spv: &HeaderChain, proof: &SpvProof) -> Result<Tx, LoanError> {
    if !spv.verify_tx(proof) {
        return Err(LoanError::BadSpvProof("inclusion does not verify"));
    }
    if !spv.validate_block_hash(&proof.block_hash).0 {
        return Err(LoanError::BadSpvProof("block is not on the main chain"));
    }
    Tx::parse(&proof.tx).map_err(|_| LoanError::BadSpvProof("transaction does not decode"))
}

fn late(now: u64, latest: u64) -> Result<(), LoanError> {
    if now > latest {
        Err(LoanError::TooLate { now, latest })
    } else {
        Ok(())
    }
}

impl LoanContract {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ledger(ledger: Ledger) -> Self {
        LoanContract { ledger, ..Self::default() }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn events(&self) -> &[LoanEvent] {
        &self.events
    }

    pub fn offer(&self, id: u64) -> Option<&LoanOffer> {
        self.offers.get(&id)
    }

    pub fn offers(&self) -> impl Iterator<Item = &LoanOffer> {
        self.offers.values()
    }

    /// Sum of every offer's escrow slice; always equals the escrow account.
    pub fn escrow_books_total(&self) -> u64 {
        self.offers.values().map(|o| o.escrow.total()).sum()
    }

    fn log<T>(&mut self, now: u64, op: &str, event: &str, offer_id: Option<u64>, digest: Hash256, res: &Result<T, LoanError>) {
        let (op, outcome) = match res {
            Ok(_) => (event.to_string(), "ok".to_string()),
            Err(e) => (op.to_string(), format!("rejected: {e}")),
        };
        self.events.push(LoanEvent { time: now, op, offer_id, params_digest: digest, outcome });
    }

    fn get(&self, id: u64) -> Result<&LoanOffer, LoanError> {
        self.offers.get(&id).ok_or(LoanError::UnknownOffer(id))
    }

    fn get_in(&self, id: u64, status: LoanStatus) -> Result<&LoanOffer, LoanError> {
        let o = self.get(id)?;
        if o.status != status {
            return Err(LoanError::WrongStatus { got: o.status });
        }
        Ok(o)
    }

    fn offer_mut(&mut self, id: u64) -> &mut LoanOffer {
        self.offers.get_mut(&id).expect("offer checked before mutation")
    }

    fn release(&mut self, who: &str, amount: u64) {
        self.ledger.from_escrow(who, amount).expect("escrow books cover every release");
    }

    pub fn create_loan_offer(&mut self, lender: &str, terms: LoanTerms, now: u64) -> Result<u64, LoanError> {
        let digest = digest_of(format!("{lender}{terms:?}"));
        let res = self.create_inner(lender, terms, now);
        let id = res.as_ref().ok().copied();
        self.log(now, "createLoanOffer", "LoanOfferCreated", id, digest, &res);
        res
    }

    fn create_inner(&mut self, lender: &str, terms: LoanTerms, now: u64) -> Result<u64, LoanError> {
        let t = &terms;
        if t.a_min == 0 || t.a_min > t.a_max {
            return Err(LoanError::ValidationFailed("collateral range"));
        }
        if t.n == 0 || t.irp == 0 || t.ip <= 3 * t.irp {
            return Err(LoanError::ValidationFailed("installment schedule"));
        }
        if *t.cr.numer() == 0 {
            return Err(LoanError::ValidationFailed("collateral ratio"));
        }
        if t.lr_b > t.lr_l {
            return Err(LoanError::ValidationFailed("liquidation thresholds out of order"));
        }
        if t.t0 <= now {
            return Err(LoanError::ValidationFailed("start time already passed"));
        }
        if t.lnid_l == Hash256::ZERO {
            return Err(LoanError::ZeroIdentity);
        }
        self.ledger.to_escrow(lender, t.rp)?;
        let id = self.next_id;
        self.next_id += 1;
        let lr_l = terms.lr_l;
        self.offers.insert(
            id,
            LoanOffer {
                id,
                lender: lender.to_string(),
                borrower: None,
                escrow: EscrowBook { rp_l: terms.rp, ..Default::default() },
                terms,
                request: None,
                status: LoanStatus::Offered,
                b: 0,
                accept_price: 0,
                lr_l,
                sig_l_on_comm0_b: None,
                sig_b_on_comm0_l: None,
                comm_b: BTreeMap::new(),
                comm_l: BTreeMap::new(),
                sig_l_on_b: BTreeMap::new(),
                sig_b_on_l: BTreeMap::new(),
                installments: Vec::new(),
                last_price: None,
                liquidation: None,
                extra_collateral: 0,
                extra_outpoints: Vec::new(),
            },
        );
        Ok(id)
    }

    pub fn request_loan(&mut self, id: u64, borrower: &str, req: BorrowerRequest, now: u64) -> Result<(), LoanError> {
        let digest = digest_of(format!("{id}{borrower}{req:?}"));
        let res = self.request_inner(id, borrower, req, now);
        self.log(now, "requestLoan", "LoanRequested", Some(id), digest, &res);
        res
    }

    fn request_inner(&mut self, id: u64, borrower: &str, req: BorrowerRequest, now: u64) -> Result<(), LoanError> {
        let o = self.get_in(id, LoanStatus::Offered)?;
        let t = &o.terms;
        late(now, t.t0.saturating_sub(2 * t.irp))?;
        if req.a < t.a_min || req.a > t.a_max {
            return Err(LoanError::CollateralOutOfRange { a: req.a, min: t.a_min, max: t.a_max });
        }
        if req.t0 != t.t0 {
            return Err(LoanError::ValidationFailed("start time differs from the offer"));
        }
        if req.lnid_b == Hash256::ZERO {
            return Err(LoanError::ZeroIdentity);
        }
        if borrower == o.lender {
            return Err(LoanError::Unauthorised(borrower.to_string()));
        }
        let params = channel_params(t, &req);
        params.validate().map_err(|_| LoanError::ValidationFailed("channel parameters"))?;
        if req.tx_fund.outputs.first() != Some(&params.funding_output()) {
            return Err(LoanError::ValidationFailed("funding output"));
        }
        let funding = OutPoint::new(req.tx_fund.txid(), 0);
        check_commitment(&params, funding, &req.tx_comm0_b, Side::Borrower, 0)?;
        let rp = t.rp;
        self.ledger.to_escrow(borrower, rp)?;
        let o = self.offer_mut(id);
        o.escrow.rp_b = rp;
        o.comm_b.insert(0, req.tx_comm0_b.clone());
        o.request = Some(req);
        o.borrower = Some(borrower.to_string());
        o.status = LoanStatus::Requested;
        Ok(())
    }

    pub fn accept_loan(
        &mut self,
        id: u64,
        lender: &str,
        tx_comm0_l: Tx,
        sig_l_on_comm0_b: Signature,
        price: u64,
        now: u64,
    ) -> Result<u64, LoanError> {
        let digest = digest_of(format!("{id}{lender}{tx_comm0_l:?}{sig_l_on_comm0_b:?}{price}"));
        let res = self.accept_inner(id, lender, tx_comm0_l, sig_l_on_comm0_b, price, now);
        self.log(now, "acceptLoan", "LoanAccepted", Some(id), digest, &res);
        res
    }

    fn accept_inner(
        &mut self,
        id: u64,
        lender: &str,
        tx_comm0_l: Tx,
        sig: Signature,
        price: u64,
        now: u64,
    ) -> Result<u64, LoanError> {
        let o = self.get_in(id, LoanStatus::Requested)?;
        if lender != o.lender {
            return Err(LoanError::Unauthorised(lender.to_string()));
        }
        let t = &o.terms;
        late(now, t.t0.saturating_sub(t.irp))?;
        let req = o.request.as_ref().expect("requested");
        let params = channel_params(t, req);
        let funding = OutPoint::new(req.tx_fund.txid(), 0);
        check_commitment(&params, funding, &tx_comm0_l, Side::Lender, 0)?;
        check_sig(&params, &req.tx_comm0_b, &t.pk_l, &sig)?;
        let b = loan_amount(req.a, price, t.cr);
        if b == 0 {
            return Err(LoanError::ValidationFailed("loan amount rounds to zero"));
        }
        let value = collateral_value(req.a, price);
        if value < t.lr_b || value > t.lr_l {
            return Err(LoanError::ValidationFailed("collateral value outside the liquidation thresholds"));
        }
        let c = t.c;
        self.ledger.to_escrow(lender, b + c)?;
        let o = self.offer_mut(id);
        o.escrow.loan = b;
        o.escrow.deposit = c;
        o.b = b;
        o.accept_price = price;
        o.last_price = Some(price);
        o.sig_l_on_comm0_b = Some(sig);
        o.sig_l_on_b.insert(0, sig);
        o.comm_l.insert(0, tx_comm0_l);
        o.status = LoanStatus::Accepted;
        Ok(b)
    }

    pub fn open_channel(
        &mut self,
        id: u64,
        borrower: &str,
        sig_b_on_comm0_l: Signature,
        fund_proof: &SpvProof,
        spv: &HeaderChain,
        now: u64,
    ) -> Result<(), LoanError> {
        let digest = digest_of(format!("{id}{borrower}{sig_b_on_comm0_l:?}{fund_proof:?}"));
        let res = self.open_inner(id, borrower, sig_b_on_comm0_l, fund_proof, spv, now);
        self.log(now, "openChannel", "ChannelOpened", Some(id), digest, &res);
        res
    }

    fn open_inner(
        &mut self,
        id: u64,
        borrower: &str,
        sig: Signature,
        proof: &SpvProof,
        spv: &HeaderChain,
        now: u64,
    ) -> Result<(), LoanError> {
        let o = self.get_in(id, LoanStatus::Accepted)?;
        if o.borrower.as_deref() != Some(borrower) {
            return Err(LoanError::Unauthorised(borrower.to_string()));
        }
        if now >= o.terms.t0 {
            return Err(LoanError::TooLate { now, latest: o.terms.t0 - 1 });
        }
        let req = o.request.as_ref().expect("requested");
        let params = channel_params(&o.terms, req);
        check_sig(&params, &o.comm_l[&0], &req.pk_b, &sig)?;
        let tx = proven_tx(spv, proof)?;
        if tx.txid() != req.tx_fund.txid() {
            return Err(LoanError::BadSpvProof("proof is for a different transaction"));
        }
        let payout = o.escrow.loan + o.escrow.rp_b;
        let t = o.terms.clone();
        let b = o.b;
        let installments = (1..=t.n)
            .map(|i| Installment {
                index: i,
                deadline: t.t0 + i as u64 * t.ip,
                amount: installment_amount(b, t.k, t.n, i, t.options.formula),
                status: InstallmentStatus::Pending,
            })
            .collect();
        self.release(borrower, payout);
        let o = self.offer_mut(id);
        o.escrow.loan = 0;
        o.escrow.rp_b = 0;
        o.sig_b_on_comm0_l = Some(sig);
        o.sig_b_on_l.insert(0, sig);
        o.installments = installments;
        o.status = LoanStatus::Opened;
        Ok(())
    }

    fn installment_in(&self, id: u64, i: u32, status: InstallmentStatus) -> Result<(&LoanOffer, &Installment), LoanError> {
        let o = self.get_in(id, LoanStatus::Opened)?;
        let cur = o.current_installment().ok_or(LoanError::WrongStatus { got: o.status })?;
        if cur.index != i {
            return Err(LoanError::WrongInstallment { expected: cur.index, got: i });
        }
        if cur.status != status {
            return Err(LoanError::WrongInstallmentStatus { index: i, got: cur.status });
        }
        Ok((o, cur))
    }

    fn set_installment(&mut self, id: u64, i: u32, status: InstallmentStatus) {
        self.offer_mut(id).installments[i as usize - 1].status = status;
    }

    pub fn pay_installment(&mut self, id: u64, borrower: &str, i: u32, tx_comm_b: Tx, now: u64) -> Result<(), LoanError> {
        let digest = digest_of(format!("{id}{borrower}{i}{tx_comm_b:?}"));
        let res = self.pay_inner(id, borrower, i, tx_comm_b, now);
        self.log(now, "payInstallment", "InstallmentPaid", Some(id), digest, &res);
        res
    }

    fn pay_inner(&mut self, id: u64, borrower: &str, i: u32, tx: Tx, now: u64) -> Result<(), LoanError> {
        let (o, inst) = self.installment_in(id, i, InstallmentStatus::Pending)?;
        if o.borrower.as_deref() != Some(borrower) {
            return Err(LoanError::Unauthorised(borrower.to_string()));
        }
        late(now, inst.deadline.saturating_sub(3 * o.terms.irp))?;
        let params = o.channel_params().expect("opened");
        check_commitment(&params, o.funding_outpoint().expect("opened"), &tx, Side::Borrower, i)?;
        let amount = inst.amount;
        self.ledger.to_escrow(borrower, amount)?;
        let o = self.offer_mut(id);
        o.escrow.pending = amount;
        o.comm_b.insert(i, tx);
        self.set_installment(id, i, InstallmentStatus::PaidInstallment);
        Ok(())
    }

    pub fn take_installment(
        &mut self,
        id: u64,
        lender: &str,
        i: u32,
        tx_comm_l: Tx,
        sig_l_on_b: Signature,
        now: u64,
    ) -> Result<(), LoanError> {
        let digest = digest_of(format!("{id}{lender}{i}{tx_comm_l:?}{sig_l_on_b:?}"));
        let res = self.take_inner(id, lender, i, tx_comm_l, sig_l_on_b, now);
        self.log(now, "takeInstallment", "InstallmentAccepted", Some(id), digest, &res);
        res
    }

    fn take_inner(&mut self, id: u64, lender: &str, i: u32, tx: Tx, sig: Signature, now: u64) -> Result<(), LoanError> {
        let (o, inst) = self.installment_in(id, i, InstallmentStatus::PaidInstallment)?;
        if lender != o.lender {
            return Err(LoanError::Unauthorised(lender.to_string()));
        }
        late(now, inst.deadline.saturating_sub(2 * o.terms.irp))?;
        let params = o.channel_params().expect("opened");
        check_commitment(&params, o.funding_outpoint().expect("opened"), &tx, Side::Lender, i)?;
        check_sig(&params, &o.comm_b[&i], &params.pk_l, &sig)?;
        let o = self.offer_mut(id);
        o.comm_l.insert(i, tx);
        o.sig_l_on_b.insert(i, sig);
        self.set_installment(id, i, InstallmentStatus::TookInstallment);
        Ok(())
    }

    /// The borrower hands over the secret for state `i-1` and signs the
    /// lender's new commitment.
    pub fn reveal_revocation_key_borrower(
        &mut self,
        id: u64,
        borrower: &str,
        i: u32,
        secret: [u8; 32],
        sig_b_on_l: Signature,
        now: u64,
    ) -> Result<(), LoanError> {
        let digest = digest_of(format!("{id}{borrower}{i}{}{sig_b_on_l:?}", hex::encode(secret)));
        let res = self.reveal_b_inner(id, borrower, i, secret, sig_b_on_l, now);
        self.log(now, "revealRevocationKeyBorrower", "BorrowerRevocationKeyRevealed", Some(id), digest, &res);
        res
    }

    fn reveal_b_inner(
        &mut self,
        id: u64,
        borrower: &str,
        i: u32,
        secret: [u8; 32],
        sig: Signature,
        now: u64,
    ) -> Result<(), LoanError> {
        let (o, inst) = self.installment_in(id, i, InstallmentStatus::TookInstallment)?;
        if o.borrower.as_deref() != Some(borrower) {
            return Err(LoanError::Unauthorised(borrower.to_string()));
        }
        late(now, inst.deadline.saturating_sub(o.terms.irp))?;
        let params = o.channel_params().expect("opened");
        check_sig(&params, &o.comm_l[&i], &params.pk_b, &sig)?;
        let committed = revocation_key_of(&o.comm_b[&(i - 1)]).expect("stored commitments were checked");
        check_secret(&o.terms.q_l, &secret, &committed)?;
        self.offer_mut(id).sig_b_on_l.insert(i, sig);
        self.set_installment(id, i, InstallmentStatus::BorrowerRevocationKey);
        Ok(())
    }

    /// The lender hands over the secret for state `i-1`; the installment is
    /// released and the last one ends the loan.
    pub fn reveal_revocation_key_lender(
        &mut self,
        id: u64,
        lender: &str,
        i: u32,
        secret: [u8; 32],
        now: u64,
    ) -> Result<(), LoanError> {
        let digest = digest_of(format!("{id}{lender}{i}{}", hex::encode(secret)));
        let res = self.reveal_l_inner(id, lender, i, secret, now);
        self.log(now, "revealRevocationKeyLender", "LenderRevocationKeyRevealed", Some(id), digest, &res);
        res
    }

    fn reveal_l_inner(&mut self, id: u64, lender: &str, i: u32, secret: [u8; 32], now: u64) -> Result<(), LoanError> {
        let (o, inst) = self.installment_in(id, i, InstallmentStatus::BorrowerRevocationKey)?;
        if lender != o.lender {
            return Err(LoanError::Unauthorised(lender.to_string()));
        }
        if now >= inst.deadline {
            return Err(LoanError::TooLate { now, latest: inst.deadline - 1 });
        }
        let req = o.request.as_ref().expect("opened");
        let committed = revocation_key_of(&o.comm_l[&(i - 1)]).expect("stored commitments were checked");
        check_secret(&req.q_b, &secret, &committed)?;
        let pending = o.escrow.pending;
        let last = i == o.terms.n;
        let refund = o.escrow.deposit + o.escrow.rp_l;
        let lender = o.lender.clone();
        self.release(&lender, pending);
        self.offer_mut(id).escrow.pending = 0;
        self.set_installment(id, i, InstallmentStatus::LenderRevocationKey);
        if last {
            self.release(&lender, refund);
            let o = self.offer_mut(id);
            o.escrow.deposit = 0;
            o.escrow.rp_l = 0;
            o.liquidation = None;
            o.status = LoanStatus::Successful;
        }
        Ok(())
    }

    /// Refunds an offer that never reached `Opened` by `T_0`.
    pub fn claim_expired(&mut self, id: u64, now: u64) -> Result<LoanStatus, LoanError> {
        let digest = digest_of(format!("{id}"));
        let res = self.expire_inner(id, now);
        self.log(now, "claimExpired", "LoanExpired", Some(id), digest, &res);
        res
    }

    fn expire_inner(&mut self, id: u64, now: u64) -> Result<LoanStatus, LoanError> {
        let o = self.get(id)?;
        let from = o.status;
        if !from.can_transition(LoanStatus::Expired) {
            return Err(LoanError::WrongStatus { got: from });
        }
        if now < o.terms.t0 {
            return Err(LoanError::TooEarly { now, earliest: o.terms.t0 });
        }
        let lender = o.lender.clone();
        let borrower = o.borrower.clone();
        let e = o.escrow;
        match from {
            LoanStatus::Offered => self.release(&lender, e.rp_l),
            LoanStatus::Requested => {
                self.release(&lender, e.rp_l);
                self.release(borrower.as_deref().expect("requested"), e.rp_b);
            }
            _ => self.release(&lender, e.total()),
        }
        let o = self.offer_mut(id);
        o.escrow = EscrowBook::default();
        o.status = LoanStatus::Expired;
        Ok(from)
    }

    fn payout(&mut self, id: u64, s: &Settlement) {
        let o = self.get(id).expect("checked");
        let (lender, borrower) = (o.lender.clone(), o.borrower.clone().expect("opened"));
        let rp = o.escrow.rp_l;
        let who = |side: Side| if side == Side::Lender { lender.as_str() } else { borrower.as_str() };
        self.release(who(s.deposit_to), s.deposit);
        if let Some((side, amount)) = s.pending {
            self.release(who(side), amount);
        }
        self.release(who(s.reservation_to), rp);
        let o = self.offer_mut(id);
        o.escrow = EscrowBook::default();
        o.status = s.status;
    }

    /// Settles the stablecoin side once a spend of the funding output is
    /// proven on the main chain.
    pub fn settle_on_chain_close(
        &mut self,
        id: u64,
        proof: &SpvProof,
        spv: &HeaderChain,
        now: u64,
    ) -> Result<Settlement, LoanError> {
        let digest = digest_of(format!("{id}{proof:?}"));
        let res = self.settle_inner(id, proof, spv, now);
        self.log(now, "settleOnChainClose", "ChannelSettled", Some(id), digest, &res);
        res
    }

    fn classify_close(&self, o: &LoanOffer, tx: &Tx) -> Result<CloseKind, LoanError> {
        let funding = o.funding_outpoint().expect("opened");
        if tx.inputs.len() != 1 || tx.inputs[0].prevout != funding {
            return Err(LoanError::NotAChannelSpend);
        }
        let txid = tx.txid();
        if let Some((&index, _)) = o.comm_b.iter().find(|(_, t)| t.txid() == txid) {
            return Ok(CloseKind::BorrowerCommitment { index });
        }
        if let Some((&index, _)) = o.comm_l.iter().find(|(_, t)| t.txid() == txid) {
            return Ok(CloseKind::LenderCommitment { index });
        }
        let params = o.channel_params().expect("opened");
        let to_lender = tx.outputs.first().map(|o| o.amount).unwrap_or(0);
        match crate::channel::build_close_tx(&params, funding, to_lender) {
            Ok(close) if close.serialize_no_witness() == tx.serialize_no_witness() => {
                Ok(CloseKind::Cooperative { to_lender })
            }
            _ => Err(LoanError::NotAChannelSpend),
        }
    }

    fn settle_inner(&mut self, id: u64, proof: &SpvProof, spv: &HeaderChain, now: u64) -> Result<Settlement, LoanError> {
        let o = self.get_in(id, LoanStatus::Opened)?;
        let tx = proven_tx(spv, proof)?;
        let kind = self.classify_close(o, &tx)?;
        let expired = o.expired_liquidation(now);
        let pending_index = o.completed() + 1;
        let pending_amount = o.escrow.pending;
        let pending_to = |closed_at: u32| if closed_at >= pending_index { Side::Lender } else { Side::Borrower };
        let (deposit_to, pending_side, reservation_to) = match kind {
            CloseKind::BorrowerCommitment { index } => {
                let dep = if expired == Some(Side::Lender) { Side::Borrower } else { Side::Lender };
                (dep, pending_to(index), Side::Lender)
            }
            CloseKind::LenderCommitment { index } => match expired {
                Some(Side::Borrower) => (Side::Lender, pending_to(index), Side::Lender),
                _ => (Side::Borrower, pending_to(index), Side::Borrower),
            },
            CloseKind::Cooperative { .. } => {
                let dep = match (expired, o.terms.options.coop_deposit) {
                    (Some(Side::Lender), _) | (None, CoopDeposit::Borrower) => Side::Borrower,
                    _ => Side::Lender,
                };
                (dep, Side::Borrower, Side::Lender)
            }
            _ => unreachable!("classify_close yields on-chain kinds only"),
        };
        let s = Settlement {
            offer_id: id,
            kind,
            deposit_to,
            deposit: o.escrow.deposit,
            pending: (pending_amount > 0).then_some((pending_side, pending_amount)),
            reservation_to,
            status: match (expired, kind) {
                (Some(_), _) => LoanStatus::LiquidatedClosed,
                (None, CloseKind::Cooperative { .. }) => LoanStatus::Successful,
                _ => LoanStatus::DefaultedClosed,
            },
        };
        self.payout(id, &s);
        Ok(s)
    }

    /// Awards the deposit to the honest party once the counterparty lets an
    /// installment deadline pass.
    pub fn dispute_timeout(
        &mut self,
        id: u64,
        close_proof: Option<&SpvProof>,
        spv: &HeaderChain,
        now: u64,
    ) -> Result<Settlement, LoanError> {
        let digest = digest_of(format!("{id}{close_proof:?}"));
        let res = self.dispute_inner(id, close_proof, spv, now);
        self.log(now, "disputeTimeout", "DisputeResolved", Some(id), digest, &res);
        res
    }

    fn dispute_inner(
        &mut self,
        id: u64,
        close_proof: Option<&SpvProof>,
        spv: &HeaderChain,
        now: u64,
    ) -> Result<Settlement, LoanError> {
        use InstallmentStatus::*;
        let o = self.get_in(id, LoanStatus::Opened)?;
        let inst = o.current_installment().ok_or(LoanError::NoTimeoutPending)?;
        let (i, t_i, irp) = (inst.index, inst.deadline, o.terms.irp);
        let (kind, honest) = match inst.status {
            Pending if now >= t_i => (CloseKind::BorrowerMissedPayment { index: i }, Side::Lender),
            PaidInstallment if now + 2 * irp > t_i => (CloseKind::LenderMissedTake { index: i }, Side::Borrower),
            TookInstallment if now + irp > t_i => (CloseKind::BorrowerMissedReveal { index: i }, Side::Lender),
            BorrowerRevocationKey if now >= t_i => (CloseKind::LenderMissedReveal { index: i }, Side::Borrower),
            _ => return Err(LoanError::NoTimeoutPending),
        };
        if honest == Side::Lender && o.terms.options.require_close_proof_on_default {
            let proof = close_proof.ok_or(LoanError::CloseProofRequired)?;
            let tx = proven_tx(spv, proof)?;
            self.classify_close(o, &tx)?;
        }
        let s = Settlement {
            offer_id: id,
            kind,
            deposit_to: honest,
            deposit: o.escrow.deposit,
            pending: (o.escrow.pending > 0).then_some((honest, o.escrow.pending)),
            reservation_to: honest,
            status: LoanStatus::DefaultedClosed,
        };
        self.payout(id, &s);
        Ok(s)
    }

    /// Feeds a price observation; opens a cure window when the collateral
    /// value crosses either threshold.
    pub fn on_price(&mut self, id: u64, price: u64, now: u64) -> Result<Option<Liquidation>, LoanError> {
        let digest = digest_of(format!("{id}{price}"));
        let res = self.price_inner(id, price, now);
        let event = match &res {
            Ok(Some(_)) => "LiquidationTriggered",
            _ => "PriceObserved",
        };
        self.log(now, "onPrice", event, Some(id), digest, &res);
        res
    }

    fn price_inner(&mut self, id: u64, price: u64, now: u64) -> Result<Option<Liquidation>, LoanError> {
        let o = self.get_in(id, LoanStatus::Opened)?;
        let value = o.collateral_value(price);
        let irp = o.terms.irp;
        let opts = &o.terms.options;
        let trigger = if o.liquidation.is_some() {
            None
        } else if value <= o.terms.lr_b {
            Some(Liquidation::BorrowerWindow { deadline: now + opts.borrower_window.unwrap_or(2 * irp), price })
        } else if value >= o.lr_l {
            Some(Liquidation::LenderWindow { deadline: now + opts.lender_window.unwrap_or(2 * irp), price })
        } else {
            None
        };
        let o = self.offer_mut(id);
        o.last_price = Some(price);
        if trigger.is_some() {
            o.liquidation = trigger;
        }
        Ok(trigger)
    }

    fn open_window(&self, id: u64, side: Side, now: u64) -> Result<&LoanOffer, LoanError> {
        let o = self.get_in(id, LoanStatus::Opened)?;
        let l = o.liquidation.filter(|l| l.side() == side).ok_or(LoanError::NoLiquidation)?;
        if now >= l.deadline() {
            return Err(LoanError::WindowClosed { deadline: l.deadline() });
        }
        Ok(o)
    }

    /// Borrower cure: proves a transaction that locks extra collateral under
    /// the funding script.
    pub fn fund_collateral(
        &mut self,
        id: u64,
        borrower: &str,
        proof: &SpvProof,
        spv: &HeaderChain,
        now: u64,
    ) -> Result<u64, LoanError> {
        let digest = digest_of(format!("{id}{borrower}{proof:?}"));
        let res = self.fund_inner(id, borrower, proof, spv, now);
        self.log(now, "fundCollateral", "CollateralFunded", Some(id), digest, &res);
        res
    }

    fn fund_inner(&mut self, id: u64, borrower: &str, proof: &SpvProof, spv: &HeaderChain, now: u64) -> Result<u64, LoanError> {
        let o = self.open_window(id, Side::Borrower, now)?;
        if o.borrower.as_deref() != Some(borrower) {
            return Err(LoanError::Unauthorised(borrower.to_string()));
        }
        let tx = proven_tx(spv, proof)?;
        let txid = tx.txid();
        let spk = o.channel_params().expect("opened").funding_spk();
        let added: Vec<(OutPoint, u64)> = tx
            .outputs
            .iter()
            .enumerate()
            .filter(|(_, out)| out.script_pubkey == spk)
            .map(|(v, out)| (OutPoint::new(txid, v as u32), out.amount))
            .filter(|(op, _)| !o.extra_outpoints.contains(op) && o.funding_outpoint() != Some(*op))
            .collect();
        let delta: u64 = added.iter().map(|(_, v)| v).sum();
        if delta == 0 {
            return Err(LoanError::ValidationFailed("transaction adds no collateral"));
        }
        let price = o.last_price.expect("a window implies a price");
        let value = collateral_value(o.remaining_collateral() + delta, price);
        if value <= o.terms.lr_b {
            return Err(LoanError::CureInsufficient { value });
        }
        let o = self.offer_mut(id);
        o.extra_collateral += delta;
        o.extra_outpoints.extend(added.into_iter().map(|(op, _)| op));
        o.liquidation = None;
        Ok(o.extra_collateral)
    }

    /// Lender cure: adds `delta` to the deposit and raises the upper
    /// threshold by the same amount.
    pub fn top_up_deposit(&mut self, id: u64, lender: &str, delta: u64, now: u64) -> Result<u64, LoanError> {
        let digest = digest_of(format!("{id}{lender}{delta}"));
        let res = self.top_up_inner(id, lender, delta, now);
        self.log(now, "topUpDeposit", "DepositToppedUp", Some(id), digest, &res);
        res
    }

    fn top_up_inner(&mut self, id: u64, lender: &str, delta: u64, now: u64) -> Result<u64, LoanError> {
        let o = self.open_window(id, Side::Lender, now)?;
        if lender != o.lender {
            return Err(LoanError::Unauthorised(lender.to_string()));
        }
        let price = o.last_price.expect("a window implies a price");
        let value = o.collateral_value(price);
        if value >= o.lr_l + delta {
            return Err(LoanError::CureInsufficient { value });
        }
        self.ledger.to_escrow(lender, delta)?;
        let o = self.offer_mut(id);
        o.escrow.deposit += delta;
        o.terms.c += delta;
        o.lr_l += delta;
        o.liquidation = None;
        Ok(o.escrow.deposit)
    }
}
