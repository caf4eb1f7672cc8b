//! Acceptance run: every criterion at its tolerance, one PASS/FAIL line each.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use primitive_types::U256;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use common::*;
use wrapless::btcsim::{keygen, sign_p2pkh_input, Script, SimChain, SimConfig, Tx, TxIn, TxOut};
use wrapless::channel::{build_punish_tx, derive_revocation_secret, Side};
use wrapless::commitments::{merkle_root, smt_root, Hash256, Smt};
use wrapless::harness::suites::{liquidation_scenarios, multiparty_scenarios, payoff_scenarios};
use wrapless::harness::{run_scenario, Report, Scenario, BORROWER, LENDER};
use wrapless::loan::{installment_amount, loan_amount, InstallmentFormula, LoanError, LoanOptions, LoanStatus};
use wrapless::multiparty::{
    dkg_messages, identify_malicious_dkg, split_funding, Behavior, Penalty, PoolParams, Staker, StakerRegistry,
};
use wrapless::spv::{bits_to_target, meets_target, retarget, AddOutcome, ChainParams, HeaderChain, SpvError};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Debug>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e:?}"))
}

// 1 -------------------------------------------------------------------------

fn merkle_smt_oracles() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut checks = 0;
    for n in 1..=64usize {
        for _ in 0..4 {
            let leaves: Vec<Vec<u8>> = (0..n).map(|_| (0..rng.gen_range(0..100)).map(|_| rng.gen()).collect()).collect();
            let got = ok(merkle_root(&leaves), "merkle_root")?;
            ensure!(got.0 == naive_merkle_root(&leaves), "merkle root mismatch at n={n}");
            checks += 1;
        }
    }
    for depth in 1..=8u32 {
        for _ in 0..25 {
            let size = 1u64 << depth;
            let count = rng.gen_range(0..=size.min(40));
            let entries: BTreeMap<u64, Vec<u8>> = (0..count)
                .map(|_| (rng.gen_range(0..size), (0..rng.gen_range(1..16)).map(|_| rng.gen()).collect()))
                .collect();
            let expect = materialized_smt_root(&entries, depth);
            ensure!(ok(smt_root(&entries, depth), "smt_root")?.0 == expect, "smt_root mismatch at depth {depth}");
            let mut smt = ok(Smt::new(depth), "Smt::new")?;
            for (k, v) in &entries {
                ok(smt.update(*k, Some(v)), "update")?;
            }
            ensure!(smt.root().0 == expect, "incremental smt mismatch at depth {depth}");
            checks += 2;
        }
    }
    Ok(format!("{checks} roots agree"))
}

// 2 -------------------------------------------------------------------------

fn spv_rules() -> Outcome {
    let mut chain = chain_2_240(b"rules");
    let g = chain.genesis_hash();
    let now = BASE_TIME as u64 + 10_000;

    // Rule 1: exactly 80 bytes.
    let h1 = child(&chain, g, BASE_TIME + 600, 1);
    let raw = h1.serialize();
    ensure!(matches!(chain.add_block_header(&raw[..79], now), Err(SpvError::BadLength(79))), "79 bytes accepted");
    let mut long = raw.to_vec();
    long.push(0);
    ensure!(matches!(chain.add_block_header(&long, now), Err(SpvError::BadLength(81))), "81 bytes accepted");
    ensure!(matches!(chain.add_block_header(&raw, now), Ok(AddOutcome::ExtendedMain)), "valid header rejected");
    let tip = chain.tip().hash;

    // Rule 2: known parent.
    let orphan = child(&chain, tip, BASE_TIME + 1_200, 2);
    let mut stray = orphan;
    stray.prev = Hash256([7; 32]);
    mine(&mut stray);
    ensure!(matches!(chain.validate_header(&stray, now), Err(SpvError::UnknownParent(_))), "unknown parent accepted");
    ensure!(chain.validate_header(&orphan, now).is_ok(), "known parent rejected");

    // Rule 3: past median time past, at most two hours ahead.
    let mtp = ok(chain.median_time_past(&tip), "mtp")?;
    let timestamp_err = |h| matches!(chain.validate_header(h, now), Err(SpvError::BadTimestamp { .. }));
    let mut after_mtp = child(&chain, tip, mtp + 1, 3);
    ensure!(after_mtp.timestamp == mtp + 1 && chain.validate_header(&after_mtp, now).is_ok(), "one past median rejected");
    after_mtp.timestamp = mtp;
    ensure!(timestamp_err(&after_mtp), "timestamp equal to median accepted");
    let limit = (now + 7_200) as u32;
    let mut edge = child(&chain, tip, limit, 5);
    ensure!(edge.timestamp == limit && chain.validate_header(&edge, now).is_ok(), "timestamp at now+2h rejected");
    edge.timestamp = limit + 1;
    ensure!(timestamp_err(&edge), "timestamp past now+2h accepted");

    // Rule 4: the expected difficulty bits.
    let mut harder = orphan;
    harder.bits = 0x1f00_8000;
    mine(&mut harder);
    ensure!(matches!(chain.validate_header(&harder, now), Err(SpvError::BadBits { .. })), "wrong bits accepted");

    // Rule 5: hash below target.
    let target = ok(bits_to_target(orphan.bits), "bits")?;
    let mut weak = orphan;
    while meets_target(&weak.hash(), target) {
        weak.nonce = weak.nonce.wrapping_add(1);
    }
    ensure!(matches!(chain.validate_header(&weak, now), Err(SpvError::InsufficientPow)), "weak pow accepted");

    // Retarget clamp on synthetic timespans.
    let old = U256::one() << 200;
    let max = U256::one() << 255;
    let exp = 1_209_600u64;
    for (span, want) in [
        (8 * exp as i64, old * 4),
        (4 * exp as i64, old * 4),
        (3 * exp as i64, old * 3),
        (exp as i64, old),
        (exp as i64 / 4, old / 4),
        (exp as i64 / 8, old / 4),
        (-1, old / 4),
    ] {
        ensure!(retarget(old, span, exp, max) == want, "retarget({span}) wrong");
    }
    ensure!(retarget(old, 8 * exp as i64, exp, old * 2) == old * 2, "retarget ignores the cap");

    // The clamp as the chain applies it, every four blocks.
    for (gap, factor_up) in [(100_000u32, true), (1, false)] {
        let mut g = genesis(0x2001_0000, b"clamp");
        g.timestamp = BASE_TIME;
        mine(&mut g);
        let mut params = ChainParams::new(g, U256::one() << 252);
        params.retarget_interval = 4;
        let mut c = ok(HeaderChain::new(params), "chain")?;
        let mut parent = c.genesis_hash();
        let mut t = g.timestamp;
        for h in 1..4u64 {
            t += gap;
            let b = child(&c, parent, t, h);
            t = b.timestamp;
            ok(c.add_block_header(&b.serialize(), u64::MAX / 2), "clamp chain")?;
            parent = b.hash();
        }
        let old = ok(bits_to_target(g.bits), "bits")?;
        let next = ok(bits_to_target(ok(c.next_bits(&parent), "next_bits")?), "bits")?;
        let want = if factor_up { old * 4 } else { old / 4 };
        ensure!(next == want, "chain retarget gave {next:x}, want {want:x}");
    }
    Ok("5 rules accept and reject; clamp x4 and x1/4 exact".into())
}

// 3 -------------------------------------------------------------------------

const FAR: u64 = u32::MAX as u64;

fn scripted_reorg(blocks: u64, depth: u64) -> Result<(), String> {
    let mut chain = chain_2_240(b"fork");
    let mut main = vec![chain.genesis_hash()];
    for h in 1..=blocks {
        let b = child(&chain, main[h as usize - 1], BASE_TIME + 600 * h as u32, h);
        ok(chain.add_block_header(&b.serialize(), FAR), "main")?;
        main.push(b.hash());
    }
    let confirmed_before = chain.confirmed_height();
    let fork_base = blocks - depth;
    let mut parent = main[fork_base as usize];
    let mut fork = Vec::new();
    let mut last = None;
    for j in 1..=depth + 1 {
        let b = child(&chain, parent, BASE_TIME + 600 * (fork_base + j) as u32 + 300, 1_000 + j);
        last = Some(ok(chain.add_block_header(&b.serialize(), FAR), "fork")?);
        parent = b.hash();
        fork.push(parent);
    }
    ensure!(matches!(last, Some(AddOutcome::Reorganized { .. })), "heavier fork did not take over");
    let orphan_height = fork_base + 1;
    let orphan = main[orphan_height as usize];
    ensure!(!chain.validate_block_hash(&orphan).0, "orphan still in main chain");
    ensure!(chain.validate_block_hash(&fork[0]).0, "fork block not in main chain");
    if orphan_height <= confirmed_before {
        let leaf = chain.confirmed_smt().get(orphan_height).map(<[u8]>::to_vec);
        ensure!(leaf == Some(fork[0].0.to_vec()), "confirmed leaf {orphan_height} not rewritten");
    }
    Ok(())
}

struct Node {
    raw: [u8; 80],
    parent: Option<usize>,
}

fn header_tree(size: usize, rng: &mut ChaCha20Rng) -> Result<Vec<Node>, String> {
    let mut chain = chain_2_240(b"tree");
    let mut nodes: Vec<(Hash256, u32, Node)> = Vec::new();
    for k in 0..size {
        let parent = if nodes.is_empty() || rng.gen_bool(0.1) {
            None
        } else {
            Some(rng.gen_range(nodes.len().saturating_sub(6)..nodes.len()))
        };
        let (phash, pts) = match parent {
            Some(p) => (nodes[p].0, nodes[p].1),
            None => (chain.genesis_hash(), BASE_TIME),
        };
        let b = child(&chain, phash, pts + 600 + rng.gen_range(0..600), k as u64);
        ok(chain.add_block_header(&b.serialize(), FAR), "tree")?;
        nodes.push((b.hash(), b.timestamp, Node { raw: b.serialize(), parent }));
    }
    Ok(nodes.into_iter().map(|n| n.2).collect())
}

fn reorg_property() -> Outcome {
    scripted_reorg(20, 3)?;
    scripted_reorg(20, 8)?;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let tree = header_tree(48, &mut rng)?;
    for _ in 0..50 {
        let mut chosen = BTreeSet::new();
        for _ in 0..rng.gen_range(1..=tree.len()) {
            let mut n = Some(rng.gen_range(0..tree.len()));
            while let Some(i) = n {
                if !chosen.insert(i) {
                    break;
                }
                n = tree[i].parent;
            }
        }
        // Random topological order: a node is ready once its parent is placed.
        let mut placed = BTreeSet::new();
        let mut order = Vec::new();
        while order.len() < chosen.len() {
            let ready: Vec<usize> = chosen
                .iter()
                .copied()
                .filter(|i| !placed.contains(i) && tree[*i].parent.map_or(true, |p| placed.contains(&p)))
                .collect();
            let pick = *ready.choose(&mut rng).expect("parent-closed set");
            placed.insert(pick);
            order.push(pick);
        }
        let raws: Vec<[u8; 80]> = order.iter().map(|i| tree[*i].raw).collect();
        let mut seq = chain_2_240(b"tree");
        for r in &raws {
            ok(seq.add_block_header(r, FAR), "sequential")?;
        }
        let mut batch = chain_2_240(b"tree");
        ok(batch.add_block_header_batch(&raws, FAR), "batch")?;
        ensure!(seq.state_digest() == batch.state_digest(), "batch and sequential digests differ");
    }
    Ok("reorgs at depth 3 and 8; 50 header sets agree".into())
}

// 4 -------------------------------------------------------------------------

fn verify_tx_round_trip() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let kp = keygen(&mut rng);
    let spk = Script::p2pkh(&kp.public().hash160());
    let allocations = vec![TxOut::new(1_000_000, spk.clone()); 15];
    let mut chain = ok(SimChain::new(SimConfig { allocations, ..SimConfig::default() }), "sim")?;
    for _ in 0..20 {
        let mut coins = chain.outpoints_of(&spk);
        coins.shuffle(&mut rng);
        for (op, amount) in coins.into_iter().take(rng.gen_range(0..=14)) {
            let split = rng.gen_range(1..amount);
            let mut tx = Tx {
                version: 2,
                inputs: vec![TxIn::new(op)],
                outputs: vec![TxOut::new(split, spk.clone()), TxOut::new(amount - split, spk.clone())],
                locktime: 0,
            };
            sign_p2pkh_input(&mut tx, 0, &TxOut::new(amount, spk.clone()), &kp);
            ok(chain.submit_tx(tx), "submit")?;
        }
        ok(chain.mine_blocks(1, 600), "mine")?;
    }
    let mut proofs = Vec::new();
    for block in &chain.blocks()[1..] {
        ensure!(block.txs.len() <= 15, "block holds {} txs", block.txs.len());
        for txid in block.txids() {
            let p = chain.spv_proof(&txid).ok_or("missing proof")?;
            ensure!(chain.spv().verify_tx(&p), "honest proof for {txid} rejected");
            proofs.push(p);
        }
    }
    for _ in 0..10_000 {
        let mut p = proofs.choose(&mut rng).expect("proofs").clone();
        let fields = 256 + p.tx.len() * 8 + p.inclusion.siblings.len() * 256 + 32;
        let mut bit = rng.gen_range(0..fields);
        if bit < 256 {
            p.block_hash.0[bit / 8] ^= 1 << (bit % 8);
        } else if {
            bit -= 256;
            bit < p.tx.len() * 8
        } {
            p.tx[bit / 8] ^= 1 << (bit % 8);
        } else if {
            bit -= p.tx.len() * 8;
            bit < p.inclusion.siblings.len() * 256
        } {
            p.inclusion.siblings[bit / 256].0[(bit % 256) / 8] ^= 1 << (bit % 8);
        } else {
            p.inclusion.leaf_index ^= 1 << (bit - p.inclusion.siblings.len() * 256);
        }
        ensure!(!chain.spv().verify_tx(&p), "mutated proof verified");
    }
    Ok(format!("{} proofs verify; 10000 mutations fail", proofs.len()))
}

// 5, 8 ------------------------------------------------------------------------

fn passed(s: &Scenario) -> Result<Report, String> {
    let r = ok(run_scenario(s), &s.name)?;
    ok(r.ensure_passed(), &s.name)?;
    ensure!(r.final_state().is_some_and(|f| f.conserved()), "{}: value not conserved", s.name);
    Ok(r)
}

fn payoff_matrix() -> Outcome {
    for s in payoff_scenarios(5) {
        let r = passed(&s)?;
        let l = s.loan.as_ref().expect("loan");
        let b = l.a as u128 * l.price as u128 / 100_000_000 * *l.cr.denom() as u128 / *l.cr.numer() as u128;
        let (b, a, c) = (b as u64, l.a, l.c);
        let interest = b as u128 * *l.k.numer() as u128 / *l.k.denom() as u128;
        let normal_l = b + l.n as u64 * interest as u64 + c;
        let f = r.final_state().expect("final");
        let get = |who: &str| f.payouts.get(who).map(|p| (p.usd, p.btc)).unwrap_or_default();
        let want = match s.name.as_str() {
            "payoff/normal" => [(normal_l, 0), (b, a)],
            "payoff/borrower_close" => [(c, a), (b, 0)],
            "payoff/lender_close" => [(0, a), (b + c, 0)],
            "payoff/cooperative" => {
                let e = 40_000_000;
                [(c, e), (b, a - e)]
            }
            other => return Err(format!("unexpected scenario {other}")),
        };
        let got = [get(LENDER), get(BORROWER)];
        ensure!(got == want, "{}: lender/borrower payouts {got:?}, want {want:?}", s.name);
    }
    Ok("normal, borrower close, lender close, cooperative exact".into())
}

fn liquidation_suite() -> Outcome {
    let want = [
        ("liquidation/borrower_cures", LoanStatus::Successful),
        ("liquidation/borrower_lapses", LoanStatus::LiquidatedClosed),
        ("liquidation/lender_cures", LoanStatus::Successful),
        ("liquidation/lender_lapses", LoanStatus::LiquidatedClosed),
    ];
    let scenarios = liquidation_scenarios(8);
    ensure!(scenarios.len() == want.len(), "expected four scenarios");
    for (s, (name, status)) in scenarios.iter().zip(want) {
        ensure!(s.name == name, "scenario order {}", s.name);
        let r = passed(s)?;
        let f = r.final_state().expect("final");
        ensure!(f.status == Some(status), "{name}: {:?}", f.status);
        let l = s.loan.as_ref().expect("loan");
        let b = loan_amount(l.a, l.price, l.cr);
        let pay = |who: &str| f.payouts.get(who).map(|p| (p.usd, p.btc)).unwrap_or_default();
        match name {
            "liquidation/borrower_lapses" => {
                ensure!(pay(LENDER) == (l.c, l.a), "lender takes a and keeps c");
                ensure!(pay(BORROWER).0 == b, "borrower keeps b");
            }
            "liquidation/lender_lapses" => {
                ensure!(pay(BORROWER).0 == b + l.c, "borrower takes c");
                ensure!(pay(LENDER).1 == l.a, "lender closes penalty free");
            }
            _ => {}
        }
    }
    Ok("cure continues, lapse closes, deposit top-up, borrower takes c".into())
}

// 6 -------------------------------------------------------------------------

fn installment_mechanics() -> Outcome {
    for (formula, each) in [
        (InstallmentFormula::PrincipalPlusInterest, 150 * USD),
        (InstallmentFormula::Amortised, 105 * USD),
    ] {
        let mut w = LoanWorld::new(LoanOptions { formula, ..LoanOptions::default() }, 6);
        w.open();
        let o = w.contract.offer(w.id).expect("offer");
        ensure!(o.b == 1_000 * USD, "b = {}", o.b);
        ensure!(o.installments.len() == N as usize, "{} installments", o.installments.len());
        for inst in &o.installments {
            ensure!(inst.amount == each, "{formula:?} installment {} charges {}", inst.index, inst.amount);
            ensure!(inst.amount == installment_amount(o.b, Ratio::new(5, 100), N, inst.index, formula), "formula drift");
        }
    }
    let t = LoanWorld::due(1);
    let deadlines = [t - 3 * IRP, t - 2 * IRP, t - IRP, t - 1];
    for step in 0..4 {
        for (offset, accept) in [(1, false), (0, true)] {
            let mut w = LoanWorld::new(LoanOptions::default(), 6);
            w.open();
            for (s, d) in deadlines.iter().enumerate().take(step) {
                run_step(&mut w, s, *d).map_err(|e| format!("step {s}: {e:?}"))?;
            }
            let res = run_step(&mut w, step, deadlines[step] + offset);
            if accept {
                ensure!(res.is_ok(), "step {step} rejected at its deadline: {res:?}");
            } else {
                ensure!(matches!(res, Err(LoanError::TooLate { .. })), "step {step} one second late: {res:?}");
            }
        }
    }
    Ok("150 and 105 per installment; 4 guards reject at +1 s".into())
}

fn run_step(w: &mut LoanWorld, step: usize, now: u64) -> Result<(), LoanError> {
    match step {
        0 => w.pay(1, now),
        1 => w.take(1, now),
        2 => w.reveal_b(1, now),
        _ => w.reveal_l(1, now),
    }
}

// 7 -------------------------------------------------------------------------

fn revocation_punishment() -> Outcome {
    let mut cases = 0;
    for i in 0..=5u32 {
        for cheater in [Side::Borrower, Side::Lender] {
            let honest = cheater.other();
            if i > 0 {
                let mut w = ChannelWorld::new(5, 70 + i as u64);
                for j in 1..=i {
                    w.advance(j);
                }
                let old = w.broadcast(cheater, i - 1);
                let dest = Script::p2pkh(&w.party(honest).addr());
                let before = w.chain.balance_of(&dest);
                let tx = ok(w.chan.punish(&w.chain, &old, w.party(honest), dest.clone()), "punish")?;
                ok(w.chain.submit_tx(tx), "punish tx")?;
                ok(w.chain.mine_blocks(1, 600), "mine")?;
                let swept = w.chan.commitments[&(i - 1)].tx(cheater).outputs[0].amount;
                ensure!(w.chain.balance_of(&dest) == before + swept, "sweep of state {} missing", i - 1);
                cases += 1;
            }
            let mut w = ChannelWorld::new(5, 90 + i as u64);
            for j in 1..=i {
                w.advance(j);
            }
            let cur = w.broadcast(cheater, i);
            let dest = Script::p2pkh(&w.party(honest).addr());
            ensure!(w.chan.punish(&w.chain, &cur, w.party(honest), dest.clone()).is_err(), "current state {i} punishable");
            if i > 0 {
                // Even the freshest revealed secret does not open the current output.
                let secret = w.party(cheater).revocation.commitment_secret(i - 1);
                let rev = ok(derive_revocation_secret(&w.party(honest).revocation.basepoint_secret(), &secret), "derive")?;
                let commit = w.chan.commitments[&i].tx(cheater).clone();
                let forged = build_punish_tx(&commit, 0, &w.party(honest).funding_key, &rev, dest);
                ensure!(w.chain.submit_tx(forged).is_err(), "current state {i} swept with an old secret");
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} cases"))
}

// 9 -------------------------------------------------------------------------

fn staker(id: String, stake: u64, rng: &mut ChaCha20Rng) -> (String, u64, wrapless::btcsim::PublicKey) {
    (id, stake, keygen(rng).public())
}

fn multiparty() -> Outcome {
    for s in multiparty_scenarios(9) {
        passed(&s)?;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(9);

    // 100 -> 90 -> removed.
    let params = PoolParams { n: 1, stake_min: 50, delta: 10, t_epoch: 600, dt: 60, join_cutoff: u64::MAX };
    let mut reg = StakerRegistry::new(params);
    ok(reg.process_epoch(vec![staker("s".into(), 100, &mut rng)], &[], 0), "join")?;
    ensure!(ok(reg.apply_penalty("s", false), "penalty")? == Penalty::Fined { fine: 10 }, "first miss");
    ensure!(reg.staker("s").map(|s| s.stake) == Some(90), "stake after fine");
    ok(reg.process_epoch(vec![], &[], 1), "refill")?;
    ensure!(ok(reg.apply_penalty("s", false), "penalty")? == Penalty::Removed { forfeited: 90 }, "second miss");
    ensure!(reg.staker("s").is_none() && reg.escrow == 100, "removal");

    // Weights under membership churn.
    let params = PoolParams { n: 8, stake_min: 10, delta: 5, t_epoch: 600, dt: 60, join_cutoff: u64::MAX };
    let mut reg = StakerRegistry::new(params);
    let mut members: Vec<String> = Vec::new();
    for change in 0..1_000u64 {
        if members.is_empty() || rng.gen_bool(0.6) {
            let id = format!("m{change}");
            ok(reg.process_epoch(vec![staker(id.clone(), 10 + 5 * rng.gen_range(0..40), &mut rng)], &[], change), "join")?;
            members.push(id);
        } else {
            let id = members.swap_remove(rng.gen_range(0..members.len()));
            ok(reg.process_epoch(vec![], &[id], change), "leave")?;
        }
        if !reg.active().is_empty() {
            let sum: Ratio<u128> = ok(reg.weights(), "weights")?.into_iter().sum();
            ensure!(sum == Ratio::from_integer(1), "weights sum {sum} after change {change}");
        }
    }

    // Splits and draws conserve.
    for _ in 0..500 {
        let active: Vec<Staker> = (0..rng.gen_range(1..10))
            .map(|k| Staker {
                id: format!("p{k}"),
                stake: rng.gen_range(1..1_000_000),
                f: 0,
                behavior: Behavior::Responsive,
                pk: keygen(&mut rng).public(),
            })
            .collect();
        let amount = rng.gen_range(0..u32::MAX as u64);
        let parts = ok(split_funding(amount, &active), "split")?;
        ensure!(parts.iter().sum::<u64>() == amount, "split loses value");
    }
    let params = PoolParams { n: 5, stake_min: 100, delta: 10, t_epoch: 600, dt: 60, join_cutoff: u64::MAX };
    let mut reg = StakerRegistry::new(params);
    let joins = (0..5).map(|k| staker(format!("d{k}"), 100 + 10 * rng.gen_range(0..50), &mut rng)).collect();
    ok(reg.process_epoch(joins, &[], 0), "join")?;
    for _ in 0..20 {
        let cap = reg.capacity();
        if cap == 0 {
            break;
        }
        let (b, lent) = (rng.gen_range(1..=cap.min(300)), reg.lent);
        let draws = ok(reg.draw_loan(b), "draw")?;
        ensure!(draws.iter().map(|d| d.1).sum::<u64>() == b, "draw loses value");
        ensure!(reg.lent == lent + b && reg.accounted() == reg.deposited(), "pool books off after draw");
    }

    // DKG identification is exactly the scripted misbehavers.
    for _ in 0..200 {
        let ids: Vec<String> = (0..rng.gen_range(1..12)).map(|k| format!("k{k}")).collect();
        let mut commitments = BTreeMap::new();
        let mut shares = BTreeMap::new();
        let mut scripted = BTreeSet::new();
        for id in &ids {
            let b = *[Behavior::Responsive, Behavior::TimesOut, Behavior::SendsInvalid].choose(&mut rng).expect("b");
            if b != Behavior::Responsive {
                scripted.insert(id.clone());
            }
            let (c, s) = dkg_messages(b);
            commitments.insert(id.clone(), c);
            shares.insert(id.clone(), s);
        }
        let (honest, malicious) = identify_malicious_dkg(&commitments, &shares, &ids);
        ensure!(malicious == scripted, "identified {malicious:?}, scripted {scripted:?}");
        ensure!(honest.iter().all(|h| !scripted.contains(h)) && honest.len() + scripted.len() == ids.len(), "honest set");
    }
    Ok("penalty trace, 1000 churns, conservation, DKG exact".into())
}

// 10 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut scenarios = payoff_scenarios(10);
    scenarios.extend(liquidation_scenarios(10));
    scenarios.extend(multiparty_scenarios(10));
    for s in &scenarios {
        let a = ok(run_scenario(s), &s.name)?.to_jsonl();
        let b = ok(run_scenario(s), &s.name)?.to_jsonl();
        ensure!(a == b, "{} differs between runs", s.name);
    }
    Ok(format!("{} scenarios byte-identical", scenarios.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("merkle/smt oracle equivalence", 5, merkle_smt_oracles),
        ("spv validation rules", 5, spv_rules),
        ("reorg property", 30, reorg_property),
        ("verify_tx round trip", 30, verify_tx_round_trip),
        ("payoff matrix", 60, payoff_matrix),
        ("installment mechanics", 60, installment_mechanics),
        ("revocation punishment", 60, revocation_punishment),
        ("liquidation suite", 60, liquidation_suite),
        ("multiparty", 60, multiparty),
        ("determinism", 120, determinism),
    ];
    let mut failed = 0;
    for (n, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= Duration::from_secs(*limit) => (true, d),
            Ok(d) => (false, format!("{d}; too slow")),
            Err(e) => (false, e),
        };
        failed += usize::from(!pass);
        println!(
            "{} {:>2} {name} ({:.2}s / {limit}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            n + 1,
            took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
