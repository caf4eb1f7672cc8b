//! Line-delimited JSON reports closed by a digest record over every
//! preceding line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_with::{serde_as, DisplayFromStr};

use crate::commitments::{sha256d, Hash256};
use crate::loan::{LoanEvent, LoanStatus, Settlement};
use crate::multiparty::EpochReport;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Payout {
    pub usd: u64,
    pub btc: u64,
}

/// The `u128` totals travel as decimal strings so tagged records can be read back.
#[serde_as]
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FinalState {
    pub status: Option<LoanStatus>,
    pub usd: BTreeMap<String, u64>,
    pub btc: BTreeMap<String, u64>,
    pub payouts: BTreeMap<String, Payout>,
    #[serde_as(as = "DisplayFromStr")]
    pub usd_total_initial: u128,
    #[serde_as(as = "DisplayFromStr")]
    pub usd_total_final: u128,
    pub sats_total_initial: u64,
    pub sats_total_final: u64,
    pub final_price: Option<u64>,
    pub chain_height: u64,
    pub spv_digest: Hash256,
}

impl FinalState {
    pub fn conserved(&self) -> bool {
        self.usd_total_initial == self.usd_total_final && self.sats_total_initial == self.sats_total_final
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Header { scenario: String, seed: u64 },
    Step { time: u64, actor: String, action: String, detail: String },
    Contract(LoanEvent),
    Settlement(Settlement),
    Epoch(EpochReport),
    Final(FinalState),
    Verdict { expectation: String, pass: bool, actual: String },
    Digest { digest: Hash256 },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Report {
    pub records: Vec<Record>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Json,
    Text,
}

/// `sha256d` over the newline-joined lines.
pub fn digest_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Hash256 {
    let mut buf = Vec::new();
    for l in lines {
        buf.extend_from_slice(l.as_bytes());
        buf.push(b'\n');
    }
    sha256d(&buf)
}

impl Report {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn final_state(&self) -> Option<&FinalState> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Final(f) => Some(f),
            _ => None,
        })
    }

    pub fn verdicts(&self) -> impl Iterator<Item = (&str, bool, &str)> {
        self.records.iter().filter_map(|r| match r {
            Record::Verdict { expectation, pass, actual } => Some((expectation.as_str(), *pass, actual.as_str())),
            _ => None,
        })
    }

    pub fn passed(&self) -> bool {
        self.verdicts().all(|(_, p, _)| p)
    }

    pub fn failures(&self) -> Vec<String> {
        self.verdicts().filter(|(_, p, _)| !p).map(|(e, _, a)| format!("{e}: got {a}")).collect()
    }

    pub fn ensure_passed(&self) -> Result<(), HarnessError> {
        let failures = self.failures();
        if failures.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::ExpectationFailed(failures))
        }
    }

    fn body_lines(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| !matches!(r, Record::Digest { .. }))
            .map(|r| serde_json::to_string(r).expect("records serialize"))
            .collect()
    }

    pub fn digest(&self) -> Hash256 {
        let lines = self.body_lines();
        digest_lines(lines.iter().map(String::as_str))
    }

    /// JSON lines with the trailing digest record.
    pub fn to_jsonl(&self) -> String {
        let mut lines = self.body_lines();
        let d = digest_lines(lines.iter().map(String::as_str));
        lines.push(serde_json::to_string(&Record::Digest { digest: d }).expect("digest serializes"));
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = match r {
                Record::Header { scenario, seed } => format!("scenario {scenario} seed {seed}"),
                Record::Step { time, actor, action, detail } => format!("{time:>12} {actor:<9} {action} {detail}"),
                Record::Contract(e) => format!(
                    "{:>12} contract  {} {}",
                    e.time,
                    e.op,
                    if e.outcome == "ok" { "" } else { &e.outcome }
                ),
                Record::Settlement(s) => format!("settlement {:?} deposit {} -> {:?} status {:?}", s.kind, s.deposit, s.deposit_to, s.status),
                Record::Epoch(e) => format!("epoch {} active {:?} weights {:?} fines {:?} removed {:?}", e.epoch, e.active, e.weights, e.fines, e.removed),
                Record::Final(f) => format!("final status {:?} usd {:?} btc {:?} payouts {:?}", f.status, f.usd, f.btc, f.payouts),
                Record::Verdict { expectation, pass, actual } => {
                    format!("{} {expectation} (got {actual})", if *pass { "PASS" } else { "FAIL" })
                }
                Record::Digest { digest } => format!("digest {digest}"),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out.push_str(&format!("digest {}\n", self.digest()));
        out
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => self.to_jsonl(),
            Format::Text => self.to_text(),
        }
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, HarnessError> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::MalformedReport(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Report { records })
    }
}

/// Recomputes the digest of a JSON-lines report and compares it with the
/// trailing digest record.
pub fn verify_report(text: &str) -> Result<Hash256, HarnessError> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let (last, body) = lines.split_last().ok_or_else(|| HarnessError::MalformedReport("empty report".into()))?;
    let claimed = match serde_json::from_str::<Record>(last) {
        Ok(Record::Digest { digest }) => digest,
        _ => return Err(HarnessError::MalformedReport("last line is not a digest record".into())),
    };
    for l in body {
        serde_json::from_str::<Record>(l).map_err(|e| HarnessError::MalformedReport(e.to_string()))?;
    }
    let actual = digest_lines(body.iter().copied());
    if actual != claimed {
        return Err(HarnessError::DigestMismatch { claimed, actual });
    }
    Ok(actual)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut r = Report::default();
        r.push(Record::Header { scenario: "s".into(), seed: 1 });
        r.push(Record::Verdict { expectation: "e".into(), pass: true, actual: "1".into() });
        r
    }

    #[test]
    fn round_trip_and_verify() {
        let text = sample().to_jsonl();
        let d = verify_report(&text).unwrap();
        assert_eq!(d, sample().digest());
        let parsed = Report::parse_jsonl(&text).unwrap();
        assert_eq!(parsed.digest(), d);
    }

    #[test]
    fn tampering_is_detected() {
        let text = sample().to_jsonl().replace("\"seed\":1", "\"seed\":2");
        assert!(matches!(verify_report(&text), Err(HarnessError::DigestMismatch { .. })));
    }
}
