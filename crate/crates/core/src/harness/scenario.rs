//! Scenario files: JSON with a fixed schema. Unknown keys are rejected.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::loan::{LoanOptions, LoanStatus};
use crate::multiparty::PoolParams;

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub genesis: GenesisSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loan: Option<LoanSpec>,
    /// Oracle prices in cents per BTC, keyed by seconds after genesis.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub price_path: Vec<PricePoint>,
    #[serde(default)]
    pub borrower: Strategy,
    #[serde(default)]
    pub lender: Strategy,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
    #[serde(default)]
    pub expectations: Vec<Expectation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenesisSpec {
    pub time: u32,
    pub bits: u32,
}

impl Default for GenesisSpec {
    fn default() -> Self {
        GenesisSpec { time: 1_700_000_000, bits: 0x1f01_0000 }
    }
}

fn default_ip() -> u64 {
    86_400
}
fn default_irp() -> u64 {
    3_600
}
fn default_t0_offset() -> u64 {
    86_400
}
fn default_lt_delay() -> u32 {
    12
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoanSpec {
    /// Collateral in sats.
    pub a: u64,
    /// Price at acceptance, cents per BTC.
    pub price: u64,
    pub c: u64,
    pub k: Ratio<u64>,
    pub cr: Ratio<u64>,
    pub n: u32,
    #[serde(default = "default_ip")]
    pub ip: u64,
    #[serde(default = "default_irp")]
    pub irp: u64,
    #[serde(default)]
    pub rp: u64,
    /// Seconds from genesis to `T_0`.
    #[serde(default = "default_t0_offset")]
    pub t0_offset: u64,
    /// Blocks between channel opening and both commitment locktimes.
    #[serde(default = "default_lt_delay")]
    pub lt_delay: u32,
    pub lr_b: u64,
    pub lr_l: u64,
    #[serde(default)]
    pub options: LoanOptions,
    pub lender_usd: u64,
    pub borrower_usd: u64,
    /// Wallet sats the borrower holds besides the collateral.
    #[serde(default)]
    pub borrower_extra_sats: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricePoint {
    pub at: u64,
    pub price: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Honest,
    /// Completes installments `1..=i`, then takes no step in installment `i+1`.
    DefaultAfter(u32),
    /// Broadcasts its current commitment once installment `i` is complete.
    ForceCloseAt(u32),
    /// Broadcasts the revoked commitment `i-1` once installment `i` is complete.
    BroadcastOldState(u32),
    /// Takes its first step in installment `i`, then stops.
    SilentAfterPay(u32),
    TimesOut,
    SendsInvalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Action {
    /// Seconds after genesis.
    pub at: u64,
    pub action: ActionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionKind {
    TopUpDeposit { amount: u64 },
    FundCollateral { sats: u64 },
    CooperativeClose { to_lender: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub params: PoolParams,
    pub epochs: Vec<EpochSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochSpec {
    pub joins: Vec<StakerSpec>,
    pub leaves: Vec<String>,
    /// Behaviour overrides applied before this epoch's DKG.
    pub behaviors: Vec<(String, Strategy)>,
    pub borrowers: Vec<PoolBorrowerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StakerSpec {
    pub id: String,
    /// Stake as `stake_min + coef·Δ`.
    pub coef: u64,
    #[serde(default)]
    pub strategy: Strategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolBorrowerSpec {
    pub a: u64,
    pub b: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expectation {
    /// Final stablecoin balance.
    UsdBalance { party: String, equals: u64 },
    /// Final sats on the party's pay-to-pubkey-hash address.
    BtcOwned { party: String, equals: u64 },
    /// Stablecoin received from the contract, reservation payments excluded.
    PayoutUsd { party: String, equals: u64 },
    /// Sats received out of the channel.
    PayoutBtc { party: String, equals: u64 },
    Status { equals: LoanStatus },
    /// `None` means the staker has been removed.
    Stake { staker: String, equals: Option<u64> },
    ActiveSet { ids: Vec<String> },
    /// Union of every DKG round's malicious set.
    Malicious { ids: Vec<String> },
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| HarnessError::ScenarioInvalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::ScenarioInvalid(m));
        if self.loan.is_some() == self.pool.is_some() {
            return bad("scenario needs exactly one of loan or pool".into());
        }
        if !self.price_path.windows(2).all(|w| w[0].at < w[1].at) {
            return bad("price path times must increase".into());
        }
        if !self.schedule.windows(2).all(|w| w[0].at <= w[1].at) {
            return bad("schedule times must not decrease".into());
        }
        if let Some(l) = &self.loan {
            for (who, s) in [("borrower", self.borrower), ("lender", self.lender)] {
                match s {
                    Strategy::TimesOut | Strategy::SendsInvalid => {
                        return bad(format!("{who} strategy {s:?} applies to stakers only"))
                    }
                    Strategy::BroadcastOldState(0) => return bad(format!("{who} has no revoked state at 0")),
                    Strategy::SilentAfterPay(0) => return bad(format!("{who} installments start at 1")),
                    Strategy::DefaultAfter(i)
                    | Strategy::ForceCloseAt(i)
                    | Strategy::BroadcastOldState(i)
                    | Strategy::SilentAfterPay(i)
                        if i > l.n =>
                    {
                        return bad(format!("{who} strategy index {i} exceeds {}", l.n))
                    }
                    _ => {}
                }
            }
            if l.n == 0 || l.ip <= 3 * l.irp || l.t0_offset <= 2 * l.irp {
                return bad("installment schedule is infeasible".into());
            }
        } else if self.borrower != Strategy::Honest || self.lender != Strategy::Honest || !self.schedule.is_empty() {
            return bad("loan strategies and actions need a loan".into());
        }
        if let Some(p) = &self.pool {
            for e in &p.epochs {
                for (id, s) in e.behaviors.iter().map(|(i, s)| (i, *s)).chain(e.joins.iter().map(|j| (&j.id, j.strategy))) {
                    if !matches!(s, Strategy::Honest | Strategy::TimesOut | Strategy::SendsInvalid) {
                        return bad(format!("staker {id} strategy {s:?} applies to loan parties only"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Scenario::from_json(r#"{"name":"x","seed":1,"pool":null,"bogus":1}"#).unwrap_err();
        assert!(matches!(err, HarnessError::ScenarioInvalid(m) if m.contains("bogus")));
    }

    #[test]
    fn strategies_round_trip() {
        let s: Vec<Strategy> = serde_json::from_str(r#"["honest", {"default_after": 3}, {"force_close_at": 0}]"#).unwrap();
        assert_eq!(s, [Strategy::Honest, Strategy::DefaultAfter(3), Strategy::ForceCloseAt(0)]);
    }
}
