//! Canned scenario suites, the rationality check and the light-client
//! reorg demo.

use num_rational::Ratio;
use primitive_types::U256;

use crate::commitments::{sha256d, Hash256};
use crate::loan::{LoanOptions, LoanStatus, SATS_PER_BTC};
use crate::multiparty::PoolParams;
use crate::spv::{bits_to_target, grind, AddOutcome, BlockHeader, ChainParams, HeaderChain};

use super::report::{Record, Report};
use super::runner::{run_scenario, BORROWER, LENDER};
use super::scenario::{
    Action, ActionKind, EpochSpec, Expectation, GenesisSpec, LoanSpec, PoolBorrowerSpec, PoolSpec, PricePoint,
    Scenario, StakerSpec, Strategy,
};
use super::HarnessError;

pub const SUITES: [&str; 4] = ["payoff", "liquidation", "multiparty", "spv"];

/// Runs a named suite into a single report: each scenario's records in
/// order, then any suite-level verdicts.
pub fn run_suite(name: &str, seed: u64) -> Result<Report, HarnessError> {
    let mut out = Report::default();
    out.push(Record::Header { scenario: format!("suite {name}"), seed });
    match name {
        "payoff" => {
            let base = payoff_base(seed);
            append_all(&mut out, &payoff_scenarios(seed))?;
            for r in rationality(&base)? {
                out.push(r.verdict());
            }
            let spec = base.loan.as_ref().expect("loan scenario");
            out.push(Record::Verdict {
                expectation: "premise a·r > b and c ≥ a·r − b".into(),
                pass: premise_holds(spec),
                actual: format!("a·r {}, b {}, c {}", value_of(spec.a, spec.price), base_b(spec), spec.c),
            });
        }
        "liquidation" => append_all(&mut out, &liquidation_scenarios(seed))?,
        "multiparty" => append_all(&mut out, &multiparty_scenarios(seed))?,
        "spv" => {
            for depth in [3, 8] {
                out.records.extend(spv_demo(20, depth, seed)?.records);
            }
        }
        other => return Err(HarnessError::UnknownSuite(other.to_string())),
    }
    Ok(out)
}

fn append_all(out: &mut Report, scenarios: &[Scenario]) -> Result<(), HarnessError> {
    for sc in scenarios {
        out.records.extend(run_scenario(sc)?.records);
    }
    Ok(())
}

fn value_of(sats: u64, price: u64) -> u128 {
    sats as u128 * price as u128 / SATS_PER_BTC
}

fn base_b(spec: &LoanSpec) -> u64 {
    crate::loan::loan_amount(spec.a, spec.price, spec.cr)
}

/// Whether defaulting is unattractive for the borrower and running away with
/// the loan is unattractive for the lender at the opening price.
pub fn premise_holds(spec: &LoanSpec) -> bool {
    let ar = value_of(spec.a, spec.price);
    let b = base_b(spec) as u128;
    ar > b && spec.c as u128 + b >= ar
}

fn usd(party: &str, equals: u64) -> Expectation {
    Expectation::UsdBalance { party: party.into(), equals }
}
fn pay_usd(party: &str, equals: u64) -> Expectation {
    Expectation::PayoutUsd { party: party.into(), equals }
}
fn pay_btc(party: &str, equals: u64) -> Expectation {
    Expectation::PayoutBtc { party: party.into(), equals }
}
fn status(equals: LoanStatus) -> Expectation {
    Expectation::Status { equals }
}

/// One BTC at 100,000 USD, CR 2, ten 5% installments.
pub fn payoff_base(seed: u64) -> Scenario {
    Scenario {
        name: "payoff/normal".into(),
        seed,
        genesis: GenesisSpec::default(),
        loan: Some(LoanSpec {
            a: 100_000_000,
            price: 10_000_000,
            c: 5_500_000,
            k: Ratio::new(5, 100),
            cr: Ratio::new(2, 1),
            n: 10,
            ip: 86_400,
            irp: 3_600,
            rp: 10_000,
            t0_offset: 86_400,
            lt_delay: 12,
            lr_b: 6_000_000,
            lr_l: 10_200_000,
            options: LoanOptions::default(),
            lender_usd: 20_000_000,
            borrower_usd: 10_000_000,
            borrower_extra_sats: 0,
        }),
        price_path: Vec::new(),
        borrower: Strategy::Honest,
        lender: Strategy::Honest,
        schedule: Vec::new(),
        pool: None,
        expectations: Vec::new(),
    }
}

fn variant(base: &Scenario, name: &str, f: impl FnOnce(&mut Scenario)) -> Scenario {
    let mut s = base.clone();
    s.name = name.into();
    f(&mut s);
    s
}

/// Normal completion, both unilateral closes and a cooperative split.
pub fn payoff_scenarios(seed: u64) -> Vec<Scenario> {
    let base = payoff_base(seed);
    vec![
        variant(&base, "payoff/normal", |s| {
            s.expectations = vec![
                status(LoanStatus::Successful),
                pay_usd(LENDER, 13_000_000),
                pay_btc(LENDER, 0),
                pay_usd(BORROWER, 5_000_000),
                pay_btc(BORROWER, 100_000_000),
                usd(LENDER, 22_500_000),
                usd(BORROWER, 7_500_000),
            ]
        }),
        variant(&base, "payoff/borrower_close", |s| {
            s.borrower = Strategy::ForceCloseAt(0);
            s.expectations = vec![
                status(LoanStatus::DefaultedClosed),
                pay_btc(LENDER, 100_000_000),
                pay_usd(LENDER, 5_500_000),
                pay_usd(BORROWER, 5_000_000),
                pay_btc(BORROWER, 0),
            ]
        }),
        variant(&base, "payoff/lender_close", |s| {
            s.lender = Strategy::ForceCloseAt(0);
            s.expectations = vec![
                status(LoanStatus::DefaultedClosed),
                pay_btc(LENDER, 100_000_000),
                pay_usd(LENDER, 0),
                pay_usd(BORROWER, 10_500_000),
                pay_btc(BORROWER, 0),
            ]
        }),
        variant(&base, "payoff/cooperative", |s| {
            s.schedule = vec![Action { at: 3_600, action: ActionKind::CooperativeClose { to_lender: 40_000_000 } }];
            s.expectations = vec![
                status(LoanStatus::Successful),
                pay_btc(LENDER, 40_000_000),
                pay_usd(LENDER, 5_500_000),
                pay_btc(BORROWER, 60_000_000),
                pay_usd(BORROWER, 5_000_000),
            ]
        }),
    ]
}

/// Outcome of one deviation against the honest run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rationality {
    pub party: &'static str,
    pub strategy: Strategy,
    /// USD plus BTC valued at the final price, in cents.
    pub honest: u128,
    pub deviant: u128,
}

impl Rationality {
    pub fn strictly_worse(&self) -> bool {
        self.deviant < self.honest
    }

    fn verdict(&self) -> Record {
        Record::Verdict {
            expectation: format!("rationality: {} {:?} worse than honest", self.party, self.strategy),
            pass: self.strictly_worse(),
            actual: format!("{} vs honest {}", self.deviant, self.honest),
        }
    }
}

pub const BORROWER_DEVIATIONS: [Strategy; 4] = [
    Strategy::ForceCloseAt(0),
    Strategy::DefaultAfter(3),
    Strategy::BroadcastOldState(2),
    Strategy::SilentAfterPay(1),
];

pub const LENDER_DEVIATIONS: [Strategy; 4] = [
    Strategy::ForceCloseAt(0),
    Strategy::BroadcastOldState(2),
    Strategy::SilentAfterPay(1),
    Strategy::DefaultAfter(2),
];

fn combined_value(report: &Report, party: &str) -> Result<u128, HarnessError> {
    let fs = report
        .final_state()
        .ok_or_else(|| HarnessError::MalformedReport("run has no final state".into()))?;
    let price = fs.final_price.unwrap_or(0);
    let usd = fs.usd.get(party).copied().unwrap_or(0) as u128;
    let btc = fs.btc.get(party).copied().unwrap_or(0);
    Ok(usd + value_of(btc, price))
}

/// Runs each single-party deviation from `base` with the counterparty
/// honest and compares the deviator's combined value with the honest run.
pub fn rationality(base: &Scenario) -> Result<Vec<Rationality>, HarnessError> {
    let mut honest_sc = base.clone();
    honest_sc.borrower = Strategy::Honest;
    honest_sc.lender = Strategy::Honest;
    honest_sc.expectations.clear();
    let honest = run_scenario(&honest_sc)?;
    let mut out = Vec::new();
    for (party, list) in [(BORROWER, BORROWER_DEVIATIONS), (LENDER, LENDER_DEVIATIONS)] {
        for strategy in list {
            let mut sc = honest_sc.clone();
            sc.name = format!("{}/{party}_{strategy:?}", base.name);
            if party == BORROWER {
                sc.borrower = strategy;
            } else {
                sc.lender = strategy;
            }
            let dev = run_scenario(&sc)?;
            out.push(Rationality {
                party,
                strategy,
                honest: combined_value(&honest, party)?,
                deviant: combined_value(&dev, party)?,
            });
        }
    }
    Ok(out)
}

fn liquidation_base(seed: u64, name: &str) -> Scenario {
    let mut s = payoff_base(seed);
    s.name = name.into();
    let l = s.loan.as_mut().expect("loan scenario");
    l.options.borrower_window = Some(7_200);
    l.options.lender_window = Some(7_200);
    s
}

const LIQ_AT: u64 = 86_400 + 43_200;

/// Both cure windows, each cured and each left to lapse.
pub fn liquidation_scenarios(seed: u64) -> Vec<Scenario> {
    let drop = PricePoint { at: LIQ_AT, price: 6_000_000 };
    let rise = PricePoint { at: LIQ_AT, price: 10_200_000 };
    vec![
        {
            let mut s = liquidation_base(seed, "liquidation/borrower_cures");
            s.loan.as_mut().expect("loan").borrower_extra_sats = 50_000_000;
            s.price_path = vec![drop];
            s.schedule = vec![Action { at: LIQ_AT + 600, action: ActionKind::FundCollateral { sats: 50_000_000 } }];
            s.expectations = vec![status(LoanStatus::Successful), pay_btc(BORROWER, 150_000_000)];
            s
        },
        {
            let mut s = liquidation_base(seed, "liquidation/borrower_lapses");
            s.price_path = vec![drop];
            s.expectations = vec![
                status(LoanStatus::LiquidatedClosed),
                pay_usd(LENDER, 5_500_000),
                pay_btc(LENDER, 100_000_000),
                pay_usd(BORROWER, 5_000_000),
            ];
            s
        },
        {
            let mut s = liquidation_base(seed, "liquidation/lender_cures");
            s.price_path = vec![rise];
            s.schedule = vec![Action { at: LIQ_AT + 600, action: ActionKind::TopUpDeposit { amount: 1_000_000 } }];
            s.expectations = vec![status(LoanStatus::Successful), pay_usd(LENDER, 14_000_000)];
            s
        },
        {
            let mut s = liquidation_base(seed, "liquidation/lender_lapses");
            s.price_path = vec![rise];
            s.expectations = vec![
                status(LoanStatus::LiquidatedClosed),
                pay_usd(BORROWER, 10_500_000),
                pay_btc(LENDER, 100_000_000),
            ];
            s
        },
    ]
}

fn pool_scenario(seed: u64, name: &str, params: PoolParams, epochs: Vec<EpochSpec>, expectations: Vec<Expectation>) -> Scenario {
    Scenario {
        name: name.into(),
        seed,
        genesis: GenesisSpec::default(),
        loan: None,
        price_path: Vec::new(),
        borrower: Strategy::Honest,
        lender: Strategy::Honest,
        schedule: Vec::new(),
        pool: Some(PoolSpec { params, epochs }),
        expectations,
    }
}

fn staker(id: &str, coef: u64, strategy: Strategy) -> StakerSpec {
    StakerSpec { id: id.into(), coef, strategy }
}

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Penalty escalation, DKG exclusion and proportional loan draws.
pub fn multiparty_scenarios(seed: u64) -> Vec<Scenario> {
    let params = |n, stake_min, delta| PoolParams { n, stake_min, delta, t_epoch: 600, dt: 60, join_cutoff: 1_000_000 };
    vec![
        pool_scenario(
            seed,
            "multiparty/penalty_trace",
            params(1, 50, 10),
            vec![
                EpochSpec { joins: vec![staker("s", 5, Strategy::TimesOut)], ..Default::default() },
                EpochSpec::default(),
            ],
            vec![
                Expectation::Stake { staker: "s".into(), equals: None },
                Expectation::Malicious { ids: ids(&["s"]) },
            ],
        ),
        pool_scenario(
            seed,
            "multiparty/dkg",
            params(3, 100, 10),
            vec![EpochSpec {
                joins: vec![
                    staker("a", 5, Strategy::Honest),
                    staker("b", 4, Strategy::TimesOut),
                    staker("c", 3, Strategy::SendsInvalid),
                    staker("d", 2, Strategy::Honest),
                ],
                ..Default::default()
            }],
            vec![Expectation::Malicious { ids: ids(&["b", "c"]) }, Expectation::ActiveSet { ids: ids(&["a", "d"]) }],
        ),
        pool_scenario(
            seed,
            "multiparty/borrowers",
            params(3, 100, 100),
            vec![
                EpochSpec {
                    joins: vec![
                        staker("x", 9, Strategy::Honest),
                        staker("y", 4, Strategy::Honest),
                        staker("z", 4, Strategy::Honest),
                    ],
                    ..Default::default()
                },
                EpochSpec {
                    borrowers: vec![
                        PoolBorrowerSpec { a: 100_000_000, b: 300 },
                        PoolBorrowerSpec { a: 100_000_000, b: 200 },
                    ],
                    ..Default::default()
                },
                EpochSpec { borrowers: vec![PoolBorrowerSpec { a: 100_000_000, b: 10_000 }], ..Default::default() },
            ],
            vec![
                Expectation::Stake { staker: "x".into(), equals: Some(750) },
                Expectation::Stake { staker: "y".into(), equals: Some(375) },
                Expectation::Stake { staker: "z".into(), equals: Some(375) },
                Expectation::ActiveSet { ids: ids(&["x", "y", "z"]) },
            ],
        ),
    ]
}

/// Header-only chain at target 2^240: `blocks` headers on the main branch,
/// then a competing branch forking `reorg_depth` blocks below the tip that
/// grows one block longer.
pub fn spv_demo(blocks: u64, reorg_depth: u64, seed: u64) -> Result<Report, HarnessError> {
    if reorg_depth == 0 || reorg_depth > blocks {
        return Err(HarnessError::ScenarioInvalid(format!("reorg depth {reorg_depth} outside 1..={blocks}")));
    }
    let spv_err = |e: crate::spv::SpvError| HarnessError::Protocol { step: "spv".into(), message: e.to_string() };
    let max_target = U256::one() << 240;
    let mut genesis = BlockHeader {
        version: 1,
        prev: Hash256::ZERO,
        merkle_root: salted(seed, 0, 0),
        timestamp: 1_700_000_000,
        bits: 0x1f01_0000,
        nonce: 0,
    };
    mine(&mut genesis, max_target);
    let mut chain = HeaderChain::new(ChainParams::new(genesis, max_target)).map_err(spv_err)?;
    let mut report = Report::default();
    report.push(Record::Header { scenario: format!("spv/reorg_{reorg_depth}"), seed });
    let step = |report: &mut Report, time: u64, action: &str, detail: String| {
        report.push(Record::Step { time, actor: "spv".into(), action: action.into(), detail });
    };

    let base = genesis.timestamp as u64;
    let mut parent = genesis.hash();
    for h in 1..=blocks {
        let header = child(&chain, parent, base + 600 * h, salted(seed, 1, h)).map_err(spv_err)?;
        chain.add_block_header(&header.serialize(), base + 600 * h).map_err(spv_err)?;
        parent = header.hash();
    }
    let fork_height = blocks - reorg_depth;
    let orphan_height = fork_height + 1;
    let orphan = chain.main_hash_at(orphan_height).expect("main chain height");
    let confirmed_before = chain.confirmed_height();
    let leaf_before = chain.confirmed_smt().get(orphan_height).map(<[u8]>::to_vec);
    let root_before = chain.confirmed_root();
    let before = chain.validate_block_hash(&orphan);
    step(&mut report, 0, "main chain", format!("tip {} height {}, confirmed {confirmed_before}", chain.tip().hash, chain.height()));

    let mut parent = chain.main_hash_at(fork_height).expect("fork point");
    let mut reorged = false;
    for j in 1..=reorg_depth + 1 {
        let t = base + 600 * (fork_height + j) + 1;
        let header = child(&chain, parent, t, salted(seed, 2, j)).map_err(spv_err)?;
        let now = base + 600 * (blocks + 1) + 1;
        let outcome = chain.add_block_header(&header.serialize(), now).map_err(spv_err)?;
        if let AddOutcome::Reorganized { old_tip, new_tip } = outcome {
            reorged = true;
            step(&mut report, j, "reorganized", format!("{old_tip} -> {new_tip}"));
        }
        parent = header.hash();
    }
    let after = chain.validate_block_hash(&orphan);
    let leaf_after = chain.confirmed_smt().get(orphan_height).map(<[u8]>::to_vec);
    let rewritten = leaf_before.is_some() && leaf_before != leaf_after;
    step(
        &mut report,
        reorg_depth + 1,
        "fork chain",
        format!("tip {} height {}, confirmed {}, root {} -> {}", chain.tip().hash, chain.height(), chain.confirmed_height(), root_before, chain.confirmed_root()),
    );
    let verdicts = [
        ("reorganization happened", reorged, format!("{reorged}")),
        (
            "orphaned block flips from main to side",
            before.0 && !after.0 && chain.tip().hash == parent,
            format!("{before:?} -> {after:?}"),
        ),
        (
            "confirmed tree rewritten iff the fork reaches a confirmed height",
            rewritten == (orphan_height <= confirmed_before),
            format!("rewritten {rewritten}, fork at {fork_height}, confirmed {confirmed_before}"),
        ),
    ];
    for (e, pass, actual) in verdicts {
        report.push(Record::Verdict { expectation: e.into(), pass, actual });
    }
    Ok(report)
}

fn salted(seed: u64, branch: u8, h: u64) -> Hash256 {
    let mut buf = seed.to_le_bytes().to_vec();
    buf.push(branch);
    buf.extend_from_slice(&h.to_le_bytes());
    sha256d(&buf)
}

fn mine(h: &mut BlockHeader, target: U256) {
    while !grind(h, target) {
        h.timestamp += 1;
        h.nonce = 0;
    }
}

fn child(chain: &HeaderChain, parent: Hash256, t: u64, merkle_root: Hash256) -> Result<BlockHeader, crate::spv::SpvError> {
    let bits = chain.next_bits(&parent)?;
    let mut h = BlockHeader { version: 1, prev: parent, merkle_root, timestamp: t as u32, bits, nonce: 0 };
    mine(&mut h, bits_to_target(bits)?);
    Ok(h)
}
