use num_rational::Ratio;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use wrapless::btcsim::keygen;
use wrapless::multiparty::{compute_weights, split_funding, Behavior, PoolParams, Staker, StakerRegistry};

fn stakers(stakes: &[u64]) -> Vec<Staker> {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    stakes
        .iter()
        .enumerate()
        .map(|(i, s)| Staker { id: format!("s{i}"), stake: *s, f: 0, behavior: Behavior::Responsive, pk: keygen(&mut rng).public() })
        .collect()
}

proptest! {
    #[test]
    fn weights_sum_to_one(stakes in prop::collection::vec(1u64..u64::MAX / 64, 1..32)) {
        let w = compute_weights(&stakers(&stakes)).unwrap();
        prop_assert_eq!(w.iter().sum::<Ratio<u128>>(), Ratio::from_integer(1));
    }

    /// Parts sum to the amount and each is within one unit of its exact share,
    /// except the largest staker who absorbs the remainder.
    #[test]
    fn split_is_floor_proportional(stakes in prop::collection::vec(1u64..1_000_000, 1..16), amount in 0u64..1 << 40) {
        let active = stakers(&stakes);
        let parts = split_funding(amount, &active).unwrap();
        prop_assert_eq!(parts.iter().sum::<u64>(), amount);
        let total: u128 = stakes.iter().map(|s| *s as u128).sum();
        let mut over = 0;
        for (s, p) in stakes.iter().zip(&parts) {
            let floor = (*s as u128 * amount as u128 / total) as u64;
            prop_assert!(*p >= floor);
            if *p > floor {
                over += 1;
            }
        }
        prop_assert!(over <= 1);
    }

    #[test]
    fn registry_books_balance(ops in prop::collection::vec((any::<bool>(), 0u64..30), 1..60)) {
        let params = PoolParams { n: 4, stake_min: 100, delta: 10, t_epoch: 600, dt: 60, join_cutoff: u64::MAX };
        let mut reg = StakerRegistry::new(params);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for (k, (join, x)) in ops.into_iter().enumerate() {
            if join || reg.active().is_empty() {
                let _ = reg.process_epoch(vec![(format!("j{k}"), 100 + 10 * x, keygen(&mut rng).public())], &[], k as u64);
            } else if x % 3 == 0 {
                let id = reg.active()[x as usize % reg.active().len()].id.clone();
                let _ = reg.apply_penalty(&id, false);
            } else {
                let _ = reg.draw_loan(x * 7);
            }
            prop_assert_eq!(reg.accounted(), reg.deposited());
            prop_assert!(reg.active().len() <= 4);
            prop_assert!(reg.active().iter().all(|s| s.stake >= 100));
        }
    }
}

#[test]
fn empty_set_has_no_weights() {
    assert!(compute_weights(&[]).is_err());
    assert!(split_funding(5, &[]).is_err());
}
