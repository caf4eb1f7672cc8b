mod common;

use proptest::prelude::*;

use common::*;
use wrapless::btcsim::Script;
use wrapless::channel::{build_close_tx, build_delayed_sweep, sign_close_tx, Side};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mutual_close_pays_the_agreed_split(e in 0..=BTC) {
        let mut w = ChannelWorld::new(4, 1);
        let funding = w.chan.funding_outpoint().unwrap();
        let mut tx = build_close_tx(&w.chan.params, funding, e).unwrap();
        prop_assert_eq!(tx.outputs.iter().map(|o| o.amount).sum::<u64>(), BTC);
        sign_close_tx(&w.chan.params, &mut tx, &w.lender.funding_key, &w.borrower.funding_key);
        w.chain.submit_tx(tx).unwrap();
        w.chain.mine_blocks(1, 600).unwrap();
        prop_assert_eq!(w.chain.balance_of(&Script::p2pkh(&w.lender.addr())), e);
        prop_assert_eq!(w.chain.balance_of(&Script::p2pkh(&w.borrower.addr())), BTC - e);
    }

    /// Every installment state splits exactly `a`, moving monotonically toward the borrower.
    #[test]
    fn installment_balances_conserve(n in 1u32..20) {
        let mut w = ChannelWorld::new(n, 2);
        let mut last = 0;
        for i in 1..=n {
            w.advance(i);
            let (b, l) = (w.chan.balance(Side::Borrower), w.chan.balance(Side::Lender));
            prop_assert_eq!(b + l, BTC);
            prop_assert!(b >= last);
            last = b;
            for side in [Side::Borrower, Side::Lender] {
                let tx = w.chan.commitments[&i].tx(side);
                prop_assert_eq!(tx.outputs.iter().map(|o| o.amount).sum::<u64>(), BTC);
            }
        }
        prop_assert_eq!(last, BTC);
    }
}

#[test]
fn close_above_collateral_is_refused() {
    let w = ChannelWorld::new(2, 3);
    let funding = w.chan.funding_outpoint().unwrap();
    assert!(build_close_tx(&w.chan.params, funding, BTC + 1).is_err());
}

#[test]
fn delayed_output_waits_for_its_locktime() {
    let mut w = ChannelWorld::new(3, 4);
    w.advance(1);
    w.advance(2);
    let txid = w.broadcast(Side::Borrower, 2);
    let commit = w.chain.find_tx(&txid).unwrap().1.clone();
    let lt = w.chan.params.lt_b;
    let dest = Script::p2pkh(&w.borrower.addr());
    let early = build_delayed_sweep(&commit, 0, lt, &w.borrower.funding_key, dest.clone());
    assert!(w.chain.submit_tx(early.clone()).is_err());
    while w.chain.height() < lt as u64 {
        w.chain.mine_blocks(1, 600).unwrap();
    }
    w.chain.submit_tx(early).unwrap();
    w.chain.mine_blocks(1, 600).unwrap();
    // Output 1 already paid the lender; output 0 is now the borrower's.
    assert_eq!(w.chain.balance_of(&dest), commit.outputs[0].amount);
    assert_eq!(
        w.chain.balance_of(&Script::p2pkh(&w.lender.addr())),
        commit.outputs[1].amount
    );
}

#[test]
fn punished_sweep_takes_the_whole_revocable_output() {
    let mut w = ChannelWorld::new(3, 5);
    w.advance(1);
    w.advance(2);
    let old = w.broadcast(Side::Lender, 1);
    let dest = Script::p2pkh(&w.borrower.addr());
    let tx = w.chan.punish(&w.chain, &old, &w.borrower, dest.clone()).unwrap();
    w.chain.submit_tx(tx).unwrap();
    w.chain.mine_blocks(1, 600).unwrap();
    // The lender's commitment pays the borrower's share on output 1 and the
    // lender's share on the revocable output 0: the borrower ends with all of it.
    assert_eq!(w.chain.balance_of(&dest), BTC);
    // The cheater cannot punish itself.
    assert!(w.chan.punish(&w.chain, &old, &w.lender, dest).is_err());
}
