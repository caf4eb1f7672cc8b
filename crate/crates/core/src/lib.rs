//! A deterministic laboratory for a BTC-collateralized lending protocol.
//!
//! The crate bundles a simulated Bitcoin chain ([`btcsim`]), a header-only light
//! client ([`spv`]), loan-channel transaction construction ([`channel`]), the
//! USD-side loan contract with liquidation ([`loan`]), a staker-pool extension
//! ([`multiparty`]) and a seeded scenario runner ([`harness`]).

pub mod btcsim;
pub mod channel;
pub mod commitments;
pub mod harness;
pub mod loan;
pub mod multiparty;
pub mod spv;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/commitments.md")]
    mod commitments {}
    #[doc = include_str!("../../../book/src/spv.md")]
    mod spv {}
    #[doc = include_str!("../../../book/src/channels.md")]
    mod channels {}
    #[doc = include_str!("../../../book/src/loans.md")]
    mod loans {}
    #[doc = include_str!("../../../book/src/liquidation.md")]
    mod liquidation {}
    #[doc = include_str!("../../../book/src/multiparty.md")]
    mod multiparty {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
}
