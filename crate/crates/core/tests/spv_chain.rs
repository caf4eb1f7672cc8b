mod common;

use proptest::prelude::*;

use common::*;
use wrapless::commitments::smt_verify;
use wrapless::spv::{AddOutcome, SpvError};

const NOW: u64 = u32::MAX as u64;

#[test]
fn rejected_headers_leave_state_untouched() {
    let mut chain = chain_2_240(b"untouched");
    let g = chain.genesis_hash();
    let h = child(&chain, g, BASE_TIME + 600, 1);
    chain.add_block_header(&h.serialize(), NOW).unwrap();
    let digest = chain.state_digest();
    assert!(matches!(chain.add_block_header(&h.serialize(), NOW), Err(SpvError::DuplicateBlock(_))));
    let mut bad = child(&chain, h.hash(), BASE_TIME + 1_200, 2);
    bad.bits ^= 1;
    assert!(chain.add_block_header(&bad.serialize(), NOW).is_err());
    assert_eq!(chain.state_digest(), digest);
}

#[test]
fn batch_keeps_prefix_before_first_bad_header() {
    let mut chain = chain_2_240(b"batch");
    let a = child(&chain, chain.genesis_hash(), BASE_TIME + 600, 1);
    let mut stray = a;
    stray.prev = a.merkle_root;
    let err = chain.add_block_header_batch(&[a.serialize(), stray.serialize(), a.serialize()], NOW).unwrap_err();
    assert!(matches!(err, SpvError::BatchFailed { index: 1, .. }));
    let mut oracle = chain_2_240(b"batch");
    oracle.add_block_header(&a.serialize(), NOW).unwrap();
    assert_eq!(chain.state_digest(), oracle.state_digest());
    assert_eq!(chain.add_block_header_batch(&Vec::<[u8; 80]>::new(), NOW).unwrap(), vec![]);
    assert_eq!(chain.state_digest(), oracle.state_digest());
}

#[test]
fn confirmations_and_confirmed_tree() {
    let mut chain = chain_2_240(b"confirm");
    let mut hashes = vec![chain.genesis_hash()];
    for h in 1..=10u64 {
        let b = child(&chain, *hashes.last().unwrap(), BASE_TIME + 600 * h as u32, h);
        assert_eq!(chain.add_block_header(&b.serialize(), NOW).unwrap(), AddOutcome::ExtendedMain);
        hashes.push(b.hash());
    }
    let depth = chain.params().confirmation_depth;
    assert_eq!(chain.confirmed_height(), 10 - depth);
    assert_eq!(chain.validate_block_hash(&hashes[10]), (true, 0));
    assert_eq!(chain.validate_block_hash(&hashes[3]), (true, 7));
    assert_eq!(chain.validate_block_hash(&wrapless::commitments::Hash256([9; 32])), (false, 0));
    for (h, hash) in hashes.iter().enumerate() {
        let h = h as u64;
        match chain.confirmed_inclusion_proof(h) {
            Ok(p) => {
                assert!(h <= chain.confirmed_height());
                assert!(smt_verify(&chain.confirmed_root(), h, Some(&hash.0), &p));
            }
            Err(SpvError::NotYetConfirmed { .. }) => assert!(h > chain.confirmed_height()),
            Err(e) => panic!("{e}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// A longer side branch always wins; the orphaned block leaves the main
    /// chain and its confirmed leaf follows the new branch.
    #[test]
    fn longer_fork_wins(depth in 1u64..7, salt in any::<u32>()) {
        let blocks = 12;
        let mut chain = chain_2_240(&salt.to_le_bytes());
        let mut main = vec![chain.genesis_hash()];
        for h in 1..=blocks {
            let b = child(&chain, main[h as usize - 1], BASE_TIME + 600 * h as u32, h);
            chain.add_block_header(&b.serialize(), NOW).unwrap();
            main.push(b.hash());
        }
        let confirmed_before = chain.confirmed_height();
        let base = blocks - depth;
        let mut parent = main[base as usize];
        let mut outcomes = Vec::new();
        let mut first = None;
        for j in 1..=depth + 1 {
            let b = child(&chain, parent, BASE_TIME + 600 * (base + j) as u32 + 7, 500 + j);
            outcomes.push(chain.add_block_header(&b.serialize(), NOW).unwrap());
            parent = b.hash();
            first.get_or_insert(parent);
        }
        prop_assert!(outcomes[..depth as usize].iter().all(|o| *o == AddOutcome::NewFork));
        let reorganized = matches!(outcomes.last(), Some(AddOutcome::Reorganized { .. }));
        prop_assert!(reorganized);
        prop_assert_eq!(chain.tip().hash, parent);
        prop_assert!(!chain.validate_block_hash(&main[base as usize + 1]).0);
        let first = first.unwrap();
        prop_assert!(chain.validate_block_hash(&first).0);
        if base < confirmed_before {
            prop_assert_eq!(chain.confirmed_smt().get(base + 1), Some(&first.0[..]));
        }
        prop_assert_eq!(chain.main_hash_at(base + 1), Some(first));
    }
}
