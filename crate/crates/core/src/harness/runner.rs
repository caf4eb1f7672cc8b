//! Scenario execution over a virtual clock. Every actor decision comes from
//! its strategy, every random value from the scenario seed.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::btcsim::{
    keygen, sighash, sign, sign_p2pkh_input, OutPoint, Script, SimChain, SimConfig, Tx, TxIn, TxOut,
};
use crate::channel::{
    build_close_tx, build_delayed_sweep, build_funding_tx, finalize_commitment, funding_witness, sign_close_tx,
    sign_commitment, ChannelParams, ChannelState, Party, Side,
};
use crate::commitments::{sha256, Hash256};
use crate::loan::{
    BorrowerRequest, Ledger, LoanContract, LoanStatus, LoanTerms, PriceOracle, Settlement,
};
use crate::multiparty::{stake_level, Behavior, MultiBorrowerRequest, StakerRegistry};

use super::report::{FinalState, Payout, Record, Report};
use super::scenario::{ActionKind, Expectation, LoanSpec, PoolSpec, Scenario, Strategy};
use super::HarnessError;

pub const LENDER: &str = "lender";
pub const BORROWER: &str = "borrower";

fn name(side: Side) -> &'static str {
    match side {
        Side::Borrower => BORROWER,
        Side::Lender => LENDER,
    }
}

fn protocol<T, E: std::fmt::Display>(step: &str, r: Result<T, E>) -> Result<T, HarnessError> {
    r.map_err(|e| HarnessError::Protocol { step: step.to_string(), message: e.to_string() })
}

/// Runs a scenario to completion and evaluates its expectations.
pub fn run_scenario(sc: &Scenario) -> Result<Report, HarnessError> {
    sc.validate()?;
    let mut report = Report::default();
    report.push(Record::Header { scenario: sc.name.clone(), seed: sc.seed });
    match (&sc.loan, &sc.pool) {
        (Some(spec), None) => LoanRun::setup(sc, spec, report)?.run(),
        (None, Some(pool)) => run_pool(sc, pool, report),
        _ => Err(HarnessError::ScenarioInvalid("scenario needs exactly one of loan or pool".into())),
    }
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Price(u64),
    Act(ActionKind),
    Pay(u32),
    Take(u32),
    RevealB(u32),
    RevealL(u32),
}

#[derive(Debug, Clone)]
enum Closing {
    Commitment { tx: Tx, side: Side, punished: bool },
    Cooperative,
}

struct LoanRun<'a> {
    sc: &'a Scenario,
    spec: &'a LoanSpec,
    chain: SimChain,
    contract: LoanContract,
    oracle: PriceOracle,
    lender: Party,
    borrower: Party,
    chan: ChannelState,
    offer: u64,
    start: u64,
    t0: u64,
    report: Report,
    seen_events: usize,
    payouts: BTreeMap<String, Payout>,
    contributed: BTreeMap<String, u64>,
    initial_btc: BTreeMap<String, u64>,
    collateral: Vec<(OutPoint, TxOut)>,
    closing: Option<Closing>,
    sats_initial: u64,
    usd_initial: u128,
}

impl<'a> LoanRun<'a> {
    fn setup(sc: &'a Scenario, spec: &'a LoanSpec, report: Report) -> Result<Self, HarnessError> {
        let mut rng = ChaCha20Rng::seed_from_u64(sc.seed);
        let lender = Party::generate(Side::Lender, &mut rng);
        let borrower = Party::generate(Side::Borrower, &mut rng);
        let b_spk = Script::p2pkh(&borrower.addr());
        let mut allocations = vec![TxOut::new(spec.a, b_spk.clone())];
        if spec.borrower_extra_sats > 0 {
            allocations.push(TxOut::new(spec.borrower_extra_sats, b_spk));
        }
        let chain = protocol(
            "genesis",
            SimChain::new(SimConfig {
                genesis_time: sc.genesis.time,
                bits: sc.genesis.bits,
                allocations,
                confirmation_depth: 6,
            }),
        )?;
        let start = chain.now();
        let mut oracle = PriceOracle::new("oracle", spec.price);
        oracle.points.clear();
        oracle.set(start, spec.price);
        for p in &sc.price_path {
            oracle.set(start + p.at, p.price);
        }
        let mut ledger = Ledger::default();
        ledger.mint(LENDER, spec.lender_usd);
        ledger.mint(BORROWER, spec.borrower_usd);
        let usd_initial = ledger.total();
        let params = ChannelParams {
            a: spec.a,
            pk_b: borrower.funding_key.public(),
            pk_l: lender.funding_key.public(),
            addr_b: borrower.addr(),
            addr_l: lender.addr(),
            lt_b: chain.height() as u32 + spec.lt_delay,
            lt_l: chain.height() as u32 + spec.lt_delay,
            n: spec.n,
        };
        let chan = protocol(
            "channel",
            ChannelState::new(params, borrower.revocation.basepoint(), lender.revocation.basepoint()),
        )?;
        let sats_initial = chain.total_value();
        let initial_btc = BTreeMap::from([
            (LENDER.to_string(), 0),
            (BORROWER.to_string(), spec.a + spec.borrower_extra_sats),
        ]);
        let mut run = LoanRun {
            sc,
            spec,
            chain,
            contract: LoanContract::with_ledger(ledger),
            oracle,
            lender,
            borrower,
            chan,
            offer: 0,
            start,
            t0: start + spec.t0_offset,
            report,
            seen_events: 0,
            payouts: BTreeMap::from([(LENDER.to_string(), Payout::default()), (BORROWER.to_string(), Payout::default())]),
            contributed: BTreeMap::from([(LENDER.to_string(), 0), (BORROWER.to_string(), spec.a)]),
            initial_btc,
            collateral: Vec::new(),
            closing: None,
            sats_initial,
            usd_initial,
        };
        run.open()?;
        Ok(run)
    }

    fn now(&self) -> u64 {
        self.chain.now()
    }

    fn params(&self) -> &ChannelParams {
        &self.chan.params
    }

    fn party(&self, side: Side) -> &Party {
        match side {
            Side::Borrower => &self.borrower,
            Side::Lender => &self.lender,
        }
    }

    fn strategy(&self, side: Side) -> Strategy {
        match side {
            Side::Borrower => self.sc.borrower,
            Side::Lender => self.sc.lender,
        }
    }

    fn status(&self) -> LoanStatus {
        self.contract.offer(self.offer).expect("offer exists").status
    }

    fn step(&mut self, actor: &str, action: &str, detail: String) {
        let time = self.now() - self.start;
        self.report.push(Record::Step { time, actor: actor.to_string(), action: action.to_string(), detail });
    }

    fn sync(&mut self) {
        for e in &self.contract.events()[self.seen_events..] {
            let mut e = e.clone();
            e.time -= self.start;
            self.report.push(Record::Contract(e));
        }
        self.seen_events = self.contract.events().len();
    }

    fn call<T, E: std::fmt::Display>(&mut self, step: &str, r: Result<T, E>) -> Result<T, HarnessError> {
        self.sync();
        protocol(step, r)
    }

    fn advance_to(&mut self, t: u64) {
        let now = self.now();
        if t > now {
            self.chain.advance_time(t - now);
        }
    }

    fn mine(&mut self) -> Result<(), HarnessError> {
        protocol("mine", self.chain.mine_blocks(1, 1))
    }

    fn submit(&mut self, what: &str, tx: Tx) -> Result<Hash256, HarnessError> {
        let txid = protocol(what, self.chain.submit_tx(tx))?;
        self.mine()?;
        Ok(txid)
    }

    fn deadline(&self, i: u32) -> u64 {
        self.t0 + i as u64 * self.spec.ip
    }

    fn points(&self, i: u32) -> (crate::btcsim::PublicKey, crate::btcsim::PublicKey) {
        (self.borrower.revocation.commitment_point(i), self.lender.revocation.commitment_point(i))
    }

    fn open(&mut self) -> Result<(), HarnessError> {
        let spec = self.spec;
        let terms = LoanTerms {
            a_min: spec.a,
            a_max: spec.a,
            c: spec.c,
            k: spec.k,
            cr: spec.cr,
            n: spec.n,
            ip: spec.ip,
            rp: spec.rp,
            irp: spec.irp,
            pk_l: self.lender.funding_key.public(),
            lnid_l: sha256(self.lender.funding_key.public().as_bytes()),
            q_l: self.lender.revocation.basepoint(),
            t0: self.t0,
            oracle: self.oracle.name.clone(),
            lr_b: spec.lr_b,
            lr_l: spec.lr_l,
            options: spec.options.clone(),
        };
        let now = self.now();
        let r = self.contract.create_loan_offer(LENDER, terms, now);
        self.offer = self.call("create offer", r)?;
        self.step(LENDER, "creates offer", format!("id {}", self.offer));

        let genesis = self.chain.blocks()[0].txs[0].txid();
        let coin = OutPoint::new(genesis, 0);
        let spent = TxOut::new(spec.a, Script::p2pkh(&self.borrower.addr()));
        let mut tx_fund = protocol("funding", build_funding_tx(self.params(), &[(coin, spec.a)]))?;
        sign_p2pkh_input(&mut tx_fund, 0, &spent, &self.borrower.funding_key);
        let funding = OutPoint::new(tx_fund.txid(), 0);
        protocol("funding", self.chan.mark_funded(funding))?;
        let (cb, cl) = self.points(0);
        let pair = protocol("commitment 0", self.chan.install_commitment(0, cb, cl))?.clone();

        self.chain.advance_time(1);
        let req = BorrowerRequest {
            a: spec.a,
            t0: self.t0,
            pk_b: self.borrower.funding_key.public(),
            lnid_b: sha256(self.borrower.funding_key.public().as_bytes()),
            q_b: self.borrower.revocation.basepoint(),
            lt_b: self.params().lt_b,
            lt_l: self.params().lt_l,
            tx_fund: tx_fund.clone(),
            tx_comm0_b: pair.tx_b.clone(),
        };
        let now = self.now();
        let r = self.contract.request_loan(self.offer, BORROWER, req, now);
        self.call("request", r)?;
        self.step(BORROWER, "requests loan", format!("a {} funding {}", spec.a, funding.txid));

        self.chain.advance_time(1);
        let sig_l = sign_commitment(self.params(), &pair, Side::Borrower, &self.lender.funding_key);
        self.chan.commitments.get_mut(&0).expect("installed").sig_l_on_tx_b = Some(sig_l);
        let now = self.now();
        let price = self.oracle.price_at(now).expect("initial price");
        let r = self.contract.accept_loan(self.offer, LENDER, pair.tx_l.clone(), sig_l, price, now);
        let b = self.call("accept", r)?;
        self.step(LENDER, "accepts", format!("b {b} at price {price}"));

        let txid = self.submit("funding", tx_fund)?;
        let proof = self.chain.spv_proof(&txid).expect("mined");
        let sig_b = sign_commitment(self.params(), &pair, Side::Lender, &self.borrower.funding_key);
        self.chan.commitments.get_mut(&0).expect("installed").sig_b_on_tx_l = Some(sig_b);
        let now = self.now();
        let r = self.contract.open_channel(self.offer, BORROWER, sig_b, &proof, self.chain.spv(), now);
        self.call("open", r)?;
        protocol("open", self.chan.mark_open())?;
        self.payouts.get_mut(BORROWER).expect("party").usd += b;
        self.step(BORROWER, "opens channel", format!("height {}", self.chain.height()));
        Ok(())
    }

    fn events(&self) -> Vec<(u64, Event)> {
        let mut evs: Vec<(u64, u8, usize, Event)> = Vec::new();
        for (k, p) in self.sc.price_path.iter().enumerate() {
            evs.push((self.start + p.at, 0, k, Event::Price(p.price)));
        }
        for (k, a) in self.sc.schedule.iter().enumerate() {
            evs.push((self.start + a.at, 1, k, Event::Act(a.action)));
        }
        let irp = self.spec.irp;
        for i in 1..=self.spec.n {
            let t = self.deadline(i);
            evs.push((t - 3 * irp, 2, 0, Event::Pay(i)));
            evs.push((t - 2 * irp, 2, 1, Event::Take(i)));
            evs.push((t - irp, 2, 2, Event::RevealB(i)));
            evs.push((t - 1, 2, 3, Event::RevealL(i)));
        }
        evs.sort_by_key(|(t, o, k, _)| (*t, *o, *k));
        evs.into_iter().map(|(t, _, _, e)| (t, e)).collect()
    }

    fn run(mut self) -> Result<Report, HarnessError> {
        self.after_installment(0)?;
        for (t, ev) in self.events() {
            if self.closing.is_some() || self.status().is_terminal() {
                break;
            }
            if self.check_expiry(t)? {
                break;
            }
            self.advance_to(t);
            match ev {
                Event::Price(p) => self.on_price(p)?,
                Event::Act(a) => self.action(a)?,
                Event::Pay(i) => self.pay(i)?,
                Event::Take(i) => self.take(i)?,
                Event::RevealB(i) => self.reveal_b(i)?,
                Event::RevealL(i) => self.reveal_l(i)?,
            }
        }
        if self.closing.is_none() {
            self.check_expiry(u64::MAX)?;
        }
        if self.closing.is_none() && self.status() == LoanStatus::Successful {
            self.cooperative_close(0)?;
        }
        self.finish()
    }

    fn on_price(&mut self, price: u64) -> Result<(), HarnessError> {
        if self.status() != LoanStatus::Opened {
            return Ok(());
        }
        let now = self.now();
        let r = self.contract.on_price(self.offer, price, now);
        if let Some(l) = self.call("price", r)? {
            self.step("oracle", "liquidation window", format!("{l:?}"));
        }
        Ok(())
    }

    fn check_expiry(&mut self, t: u64) -> Result<bool, HarnessError> {
        let o = self.contract.offer(self.offer).expect("offer exists");
        let Some(l) = o.liquidation.filter(|l| o.status == LoanStatus::Opened && l.deadline() <= t) else {
            return Ok(false);
        };
        self.advance_to(l.deadline());
        let closer = l.side().other();
        self.step(name(closer), "closes after lapsed liquidation window", format!("{:?} window", l.side()));
        let index = self.latest_signed(closer);
        self.unilateral_close(closer, index, true)?;
        Ok(true)
    }

    fn action(&mut self, a: ActionKind) -> Result<(), HarnessError> {
        let status = self.status();
        match a {
            ActionKind::TopUpDeposit { amount } => {
                let now = self.now();
                let r = self.contract.top_up_deposit(self.offer, LENDER, amount, now);
                self.sync();
                let detail = match r {
                    Ok(c) => format!("deposit now {c}"),
                    Err(e) => format!("rejected: {e}"),
                };
                self.step(LENDER, "tops up deposit", detail);
            }
            ActionKind::FundCollateral { sats } => self.fund_collateral(sats)?,
            ActionKind::CooperativeClose { to_lender } => {
                if matches!(status, LoanStatus::Opened | LoanStatus::Successful) && self.closing.is_none() {
                    self.cooperative_close(to_lender)?;
                }
            }
        }
        Ok(())
    }

    fn fund_collateral(&mut self, sats: u64) -> Result<(), HarnessError> {
        let spk = Script::p2pkh(&self.borrower.addr());
        let Some((op, value)) = self.chain.outpoints_of(&spk).into_iter().find(|(_, v)| *v >= sats) else {
            self.step(BORROWER, "cannot fund collateral", format!("no coin of {sats}"));
            return Ok(());
        };
        let locked = TxOut::new(sats, self.params().funding_spk());
        let mut outputs = vec![locked.clone()];
        if value > sats {
            outputs.push(TxOut::new(value - sats, spk.clone()));
        }
        let mut tx = Tx { version: 2, inputs: vec![TxIn::new(op)], outputs, locktime: 0 };
        sign_p2pkh_input(&mut tx, 0, &TxOut::new(value, spk), &self.borrower.funding_key);
        let txid = self.submit("collateral", tx)?;
        self.collateral.push((OutPoint::new(txid, 0), locked));
        *self.contributed.get_mut(BORROWER).expect("party") += sats;
        let proof = self.chain.spv_proof(&txid).expect("mined");
        let now = self.now();
        let r = self.contract.fund_collateral(self.offer, BORROWER, &proof, self.chain.spv(), now);
        self.sync();
        let detail = match r {
            Ok(extra) => format!("extra collateral now {extra}"),
            Err(e) => format!("rejected: {e}"),
        };
        self.step(BORROWER, "funds collateral", detail);
        Ok(())
    }

    fn pay(&mut self, i: u32) -> Result<(), HarnessError> {
        if self.strategy(Side::Borrower) == Strategy::DefaultAfter(i - 1) {
            self.step(BORROWER, "skips payment", format!("installment {i}"));
            return self.dispute(self.deadline(i), Side::Lender);
        }
        protocol("balances", self.chan.set_installment_balances(i))?;
        let (cb, cl) = self.points(i);
        let tx_b = protocol("commitment", self.chan.install_commitment(i, cb, cl))?.tx_b.clone();
        let now = self.now();
        let r = self.contract.pay_installment(self.offer, BORROWER, i, tx_b, now);
        self.call("pay", r)?;
        self.step(BORROWER, "pays", format!("installment {i}"));
        Ok(())
    }

    fn take(&mut self, i: u32) -> Result<(), HarnessError> {
        if self.strategy(Side::Lender) == Strategy::DefaultAfter(i - 1) {
            self.step(LENDER, "skips take", format!("installment {i}"));
            return self.dispute(self.deadline(i) - 2 * self.spec.irp + 1, Side::Borrower);
        }
        let pair = self.chan.commitments[&i].clone();
        let sig = sign_commitment(self.params(), &pair, Side::Borrower, &self.lender.funding_key);
        self.chan.commitments.get_mut(&i).expect("installed").sig_l_on_tx_b = Some(sig);
        let now = self.now();
        let r = self.contract.take_installment(self.offer, LENDER, i, pair.tx_l.clone(), sig, now);
        self.call("take", r)?;
        self.step(LENDER, "takes", format!("installment {i}"));
        Ok(())
    }

    fn reveal_b(&mut self, i: u32) -> Result<(), HarnessError> {
        if self.strategy(Side::Borrower) == Strategy::SilentAfterPay(i) {
            self.step(BORROWER, "withholds revocation key", format!("installment {i}"));
            return self.dispute(self.deadline(i) - self.spec.irp + 1, Side::Lender);
        }
        let pair = self.chan.commitments[&i].clone();
        let sig = sign_commitment(self.params(), &pair, Side::Lender, &self.borrower.funding_key);
        self.chan.commitments.get_mut(&i).expect("installed").sig_b_on_tx_l = Some(sig);
        let secret = self.borrower.revocation.commitment_secret(i - 1);
        let now = self.now();
        let r = self.contract.reveal_revocation_key_borrower(self.offer, BORROWER, i, secret.to_bytes().into(), sig, now);
        self.call("reveal borrower key", r)?;
        protocol("record secret", self.chan.record_revealed(Side::Borrower, i - 1, secret))?;
        self.step(BORROWER, "reveals revocation key", format!("state {}", i - 1));
        Ok(())
    }

    fn reveal_l(&mut self, i: u32) -> Result<(), HarnessError> {
        if self.strategy(Side::Lender) == Strategy::SilentAfterPay(i) {
            self.step(LENDER, "withholds revocation key", format!("installment {i}"));
            return self.dispute(self.deadline(i), Side::Borrower);
        }
        let o = self.contract.offer(self.offer).expect("offer exists");
        let amount = o.escrow.pending;
        let deposit = o.escrow.deposit;
        let secret = self.lender.revocation.commitment_secret(i - 1);
        let now = self.now();
        let r = self.contract.reveal_revocation_key_lender(self.offer, LENDER, i, secret.to_bytes().into(), now);
        self.call("reveal lender key", r)?;
        protocol("record secret", self.chan.record_revealed(Side::Lender, i - 1, secret))?;
        let p = self.payouts.get_mut(LENDER).expect("party");
        p.usd += amount;
        if self.status() == LoanStatus::Successful {
            self.payouts.get_mut(LENDER).expect("party").usd += deposit;
        }
        self.step(LENDER, "reveals revocation key", format!("state {}, installment {i} complete", i - 1));
        self.after_installment(i)
    }

    fn after_installment(&mut self, i: u32) -> Result<(), HarnessError> {
        for side in [Side::Borrower, Side::Lender] {
            match self.strategy(side) {
                Strategy::ForceCloseAt(j) if j == i => {
                    let index = self.latest_signed(side);
                    return self.unilateral_close(side, index, true);
                }
                Strategy::BroadcastOldState(j) if j == i => return self.unilateral_close(side, i - 1, true),
                _ => {}
            }
        }
        Ok(())
    }

    /// Highest state whose commitment `side` can complete with the
    /// counterparty's signature.
    fn latest_signed(&self, side: Side) -> u32 {
        self.chan
            .commitments
            .iter()
            .rev()
            .find(|(_, p)| match side {
                Side::Borrower => p.sig_l_on_tx_b.is_some(),
                Side::Lender => p.sig_b_on_tx_l.is_some(),
            })
            .map(|(i, _)| *i)
            .expect("state 0 is always signed")
    }

    fn settle(&mut self, txid: &Hash256) -> Result<(), HarnessError> {
        if self.status() != LoanStatus::Opened {
            return Ok(());
        }
        let proof = self.chain.spv_proof(txid).expect("mined");
        let now = self.now();
        let r = self.contract.settle_on_chain_close(self.offer, &proof, self.chain.spv(), now);
        let s = self.call("settle", r)?;
        self.apply_settlement(s);
        Ok(())
    }

    fn apply_settlement(&mut self, s: Settlement) {
        self.payouts.get_mut(name(s.deposit_to)).expect("party").usd += s.deposit;
        if let Some((side, amount)) = s.pending {
            self.payouts.get_mut(name(side)).expect("party").usd += amount;
        }
        self.report.push(Record::Settlement(s));
    }

    fn unilateral_close(&mut self, side: Side, index: u32, settle: bool) -> Result<(), HarnessError> {
        let pair = self.chan.commitments[&index].clone();
        let key = self.party(side).funding_key.clone();
        let tx = protocol("finalize", finalize_commitment(self.params(), &pair, side, &key))?;
        let txid = self.submit("commitment", tx.clone())?;
        self.step(name(side), "broadcasts commitment", format!("state {index} txid {txid}"));
        let other = side.other();
        let dest = Script::p2pkh(&self.party(other).addr());
        let punished = match self.chan.punish(&self.chain, &txid, self.party(other), dest) {
            Ok(ptx) => {
                let pid = self.submit("punish", ptx)?;
                self.step(name(other), "sweeps revoked output", format!("txid {pid}"));
                true
            }
            Err(_) => false,
        };
        if settle {
            self.settle(&txid)?;
        }
        self.closing = Some(Closing::Commitment { tx, side, punished });
        Ok(())
    }

    fn cooperative_close(&mut self, to_lender: u64) -> Result<(), HarnessError> {
        let funding = protocol("funding", self.chan.funding_outpoint())?;
        let mut tx = protocol("close", build_close_tx(self.params(), funding, to_lender))?;
        sign_close_tx(self.params(), &mut tx, &self.lender.funding_key, &self.borrower.funding_key);
        let txid = self.submit("close", tx)?;
        self.step("both", "close cooperatively", format!("{to_lender} to lender, txid {txid}"));
        self.settle(&txid)?;
        self.closing = Some(Closing::Cooperative);
        Ok(())
    }

    fn dispute(&mut self, at: u64, honest: Side) -> Result<(), HarnessError> {
        self.advance_to(at);
        let with_proof = honest == Side::Lender && self.spec.options.require_close_proof_on_default;
        let mut proof = None;
        if with_proof {
            let index = self.latest_signed(honest);
            self.unilateral_close(honest, index, false)?;
            let Some(Closing::Commitment { tx, .. }) = &self.closing else { unreachable!() };
            proof = self.chain.spv_proof(&tx.txid());
        }
        let now = self.now();
        let r = self.contract.dispute_timeout(self.offer, proof.as_ref(), self.chain.spv(), now);
        let s = self.call("dispute", r)?;
        self.step(name(honest), "claims timeout", format!("{:?}", s.kind));
        self.apply_settlement(s);
        if !with_proof {
            let index = self.latest_signed(honest);
            self.unilateral_close(honest, index, false)?;
        }
        Ok(())
    }

    fn sweep_delayed(&mut self) -> Result<(), HarnessError> {
        let Some(Closing::Commitment { tx, side, punished: false }) = self.closing.clone() else {
            return Ok(());
        };
        if tx.outputs[0].amount == 0 {
            return Ok(());
        }
        let lt = self.params().locktime(side);
        while self.chain.height() < lt as u64 {
            self.mine()?;
        }
        let owner = self.party(side).funding_key.clone();
        let dest = Script::p2pkh(&self.party(side).addr());
        let sweep = build_delayed_sweep(&tx, 0, lt, &owner, dest);
        let txid = self.submit("sweep", sweep)?;
        self.step(name(side), "sweeps delayed output", format!("txid {txid}"));
        Ok(())
    }

    fn return_collateral(&mut self) -> Result<(), HarnessError> {
        if self.collateral.is_empty() {
            return Ok(());
        }
        let total: u64 = self.collateral.iter().map(|(_, o)| o.amount).sum();
        let mut tx = Tx {
            version: 2,
            inputs: self.collateral.iter().map(|(op, _)| TxIn::new(*op)).collect(),
            outputs: vec![TxOut::new(total, Script::p2pkh(&self.borrower.addr()))],
            locktime: 0,
        };
        for (idx, (_, spent)) in self.collateral.iter().enumerate() {
            let d = sighash(&tx, idx, spent).expect("input exists");
            let w = funding_witness(self.params(), &sign(&d, &self.lender.funding_key), &sign(&d, &self.borrower.funding_key));
            tx.inputs[idx].witness = w;
        }
        let txid = self.submit("collateral return", tx)?;
        self.step("both", "release extra collateral", format!("{total} to borrower, txid {txid}"));
        Ok(())
    }

    fn finish(mut self) -> Result<Report, HarnessError> {
        self.sweep_delayed()?;
        self.return_collateral()?;
        self.sync();
        let mut fs = FinalState {
            status: Some(self.status()),
            usd_total_initial: self.usd_initial,
            usd_total_final: self.contract.ledger().total(),
            sats_total_initial: self.sats_initial,
            sats_total_final: self.chain.total_value(),
            final_price: self.oracle.price_at(self.now()),
            chain_height: self.chain.height(),
            spv_digest: self.chain.spv().state_digest(),
            ..Default::default()
        };
        for (who, party) in [(LENDER, &self.lender), (BORROWER, &self.borrower)] {
            let btc = self.chain.balance_of(&Script::p2pkh(&party.addr()));
            fs.usd.insert(who.to_string(), self.contract.ledger().balance(who));
            fs.btc.insert(who.to_string(), btc);
            let mut p = self.payouts[who];
            p.btc = btc + self.contributed[who] - self.initial_btc[who];
            fs.payouts.insert(who.to_string(), p);
        }
        let mut report = self.report;
        finish_report(&mut report, fs, &self.sc.expectations, &PoolView::default());
        Ok(report)
    }
}

/// Pool facts the expectations can refer to.
#[derive(Default)]
struct PoolView {
    stakes: BTreeMap<String, u64>,
    active: Vec<String>,
    malicious: BTreeSet<String>,
}

fn finish_report(report: &mut Report, fs: FinalState, expectations: &[Expectation], pool: &PoolView) {
    let conserved = fs.conserved();
    let sums = format!(
        "usd {}->{}, sats {}->{}",
        fs.usd_total_initial, fs.usd_total_final, fs.sats_total_initial, fs.sats_total_final
    );
    let verdicts: Vec<Record> = expectations
        .iter()
        .map(|e| {
            let (pass, actual) = evaluate(e, &fs, pool);
            Record::Verdict { expectation: serde_json::to_string(e).expect("serializes"), pass, actual }
        })
        .collect();
    report.push(Record::Final(fs));
    report.push(Record::Verdict { expectation: "conservation".into(), pass: conserved, actual: sums });
    for v in verdicts {
        report.push(v);
    }
}

fn evaluate(e: &Expectation, fs: &FinalState, pool: &PoolView) -> (bool, String) {
    fn num(v: Option<u64>, want: u64) -> (bool, String) {
        (v == Some(want), v.map_or("missing".into(), |v| v.to_string()))
    }
    match e {
        Expectation::UsdBalance { party, equals } => num(fs.usd.get(party).copied(), *equals),
        Expectation::BtcOwned { party, equals } => num(fs.btc.get(party).copied(), *equals),
        Expectation::PayoutUsd { party, equals } => num(fs.payouts.get(party).map(|p| p.usd), *equals),
        Expectation::PayoutBtc { party, equals } => num(fs.payouts.get(party).map(|p| p.btc), *equals),
        Expectation::Status { equals } => (fs.status == Some(*equals), format!("{:?}", fs.status)),
        Expectation::Stake { staker, equals } => {
            let got = pool.stakes.get(staker).copied();
            (got == *equals, format!("{got:?}"))
        }
        Expectation::ActiveSet { ids } => (pool.active == *ids, format!("{:?}", pool.active)),
        Expectation::Malicious { ids } => {
            let want: BTreeSet<String> = ids.iter().cloned().collect();
            (pool.malicious == want, format!("{:?}", pool.malicious))
        }
    }
}

fn behavior(s: Strategy) -> Behavior {
    match s {
        Strategy::TimesOut => Behavior::TimesOut,
        Strategy::SendsInvalid => Behavior::SendsInvalid,
        _ => Behavior::Responsive,
    }
}

fn run_pool(sc: &Scenario, spec: &PoolSpec, mut report: Report) -> Result<Report, HarnessError> {
    let mut rng = ChaCha20Rng::seed_from_u64(sc.seed);
    let borrowers: Vec<_> = spec.epochs.iter().flat_map(|e| e.borrowers.iter().copied()).collect();
    let borrower_keys: Vec<_> = borrowers.iter().map(|_| keygen(&mut rng)).collect();
    let allocations = borrowers
        .iter()
        .zip(&borrower_keys)
        .map(|(b, k)| TxOut::new(b.a, Script::p2pkh(&k.public().hash160())))
        .collect();
    let mut chain = protocol(
        "genesis",
        SimChain::new(SimConfig { genesis_time: sc.genesis.time, bits: sc.genesis.bits, allocations, confirmation_depth: 6 }),
    )?;
    let genesis = chain.blocks()[0].txs[0].txid();
    let start = chain.now();
    let sats_initial = chain.total_value();
    let mut reg = StakerRegistry::new(spec.params.clone());
    let mut malicious = BTreeSet::new();
    let mut next_borrower = 0usize;
    let push_step = |report: &mut Report, time: u64, actor: &str, action: &str, detail: String| {
        report.push(Record::Step { time, actor: actor.into(), action: action.into(), detail });
    };
    for (e, epoch) in spec.epochs.iter().enumerate() {
        let now = start + e as u64 * spec.params.t_epoch;
        if now > chain.now() {
            chain.advance_time(now - chain.now());
        }
        let t = now - start;
        let joins: Vec<_> = epoch
            .joins
            .iter()
            .map(|j| (j.id.clone(), stake_level(&spec.params, j.coef), keygen(&mut rng).public()))
            .collect();
        match reg.process_epoch(joins, &epoch.leaves, t) {
            Ok(()) => {
                for j in &epoch.joins {
                    reg.set_behavior(&j.id, behavior(j.strategy)).expect("just joined");
                }
                push_step(&mut report, t, "pool", "epoch processed", format!("{} joins, {} leaves", epoch.joins.len(), epoch.leaves.len()));
            }
            Err(err) => push_step(&mut report, t, "pool", "epoch rejected", err.to_string()),
        }
        for (id, s) in &epoch.behaviors {
            if reg.set_behavior(id, behavior(*s)).is_err() {
                push_step(&mut report, t, "pool", "unknown staker", id.clone());
            }
        }
        let detail = match reg.recompose_tss() {
            Ok(k) => format!("key {} over {:?} in {} rounds", k.fingerprint(), k.members, k.rounds),
            Err(err) => err.to_string(),
        };
        malicious.extend(reg.last_malicious().iter().cloned());
        push_step(&mut report, t, "pool", "recompose", detail);
        report.push(Record::Epoch(reg.reports().last().expect("recompose reports").clone()));

        for b in &epoch.borrowers {
            let k = &borrower_keys[next_borrower];
            let coin = OutPoint::new(genesis, next_borrower as u32);
            next_borrower += 1;
            let Ok(spk) = reg.funding_spk(&k.public()) else {
                push_step(&mut report, t, "pool", "no key for borrower", String::new());
                continue;
            };
            let mut tx = Tx {
                version: 2,
                inputs: vec![TxIn::new(coin)],
                outputs: vec![TxOut::new(b.a, spk)],
                locktime: 0,
            };
            sign_p2pkh_input(&mut tx, 0, &TxOut::new(b.a, Script::p2pkh(&k.public().hash160())), k);
            let txid = protocol("pool funding", chain.submit_tx(tx.clone()))?;
            protocol("mine", chain.mine_blocks(1, 1))?;
            let req = MultiBorrowerRequest {
                borrower: format!("borrower{}", next_borrower - 1),
                pk_b: k.public(),
                a: b.a,
                b: b.b,
                lt_b: chain.height() as u32 + 12,
                lt_l: chain.height() as u32 + 12,
                rev_b: keygen(&mut rng).public(),
                rev_l: keygen(&mut rng).public(),
                tx_fund: tx,
                proof: chain.spv_proof(&txid).expect("mined"),
            };
            let detail = match reg.register_channel(req, chain.spv()) {
                Ok(c) => format!(
                    "channel {} for {}: shares {:?}, draws {:?}, commitment outputs {}",
                    c.id,
                    c.borrower,
                    c.shares,
                    c.draws,
                    c.tx_b.outputs.len()
                ),
                Err(err) => format!("rejected: {err}"),
            };
            push_step(&mut report, chain.now() - start, "pool", "register channel", detail);
        }
    }
    let mut usd = BTreeMap::new();
    for s in reg.active().iter().chain(reg.waiting()) {
        usd.insert(s.id.clone(), s.stake);
    }
    usd.insert("pool_escrow".into(), reg.escrow);
    usd.insert("withdrawn".into(), reg.withdrawn);
    usd.insert("lent".into(), reg.lent);
    let fs = FinalState {
        status: None,
        usd: usd.clone(),
        usd_total_initial: reg.deposited() as u128,
        usd_total_final: reg.accounted() as u128,
        sats_total_initial: sats_initial,
        sats_total_final: chain.total_value(),
        chain_height: chain.height(),
        spv_digest: chain.spv().state_digest(),
        ..Default::default()
    };
    let view = PoolView {
        stakes: reg.active().iter().chain(reg.waiting()).map(|s| (s.id.clone(), s.stake)).collect(),
        active: reg.active().iter().map(|s| s.id.clone()).collect(),
        malicious,
    };
    finish_report(&mut report, fs, &sc.expectations, &view);
    Ok(report)
}
