use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::script::Script;
use crate::commitments::{sha256d, Hash256};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("{0} trailing bytes after transaction")]
    TrailingBytes(usize),
    #[error("non-canonical compact size")]
    NonCanonicalSize,
    #[error("unsupported segwit flag {0:#04x}")]
    BadFlag(u8),
    #[error("transaction has no inputs or no outputs")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("input index {index} out of range for {len} inputs")]
pub struct IndexOutOfRange {
    pub index: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutPoint {
    pub txid: Hash256,
    pub vout: u32,
}

impl OutPoint {
    pub const NULL: OutPoint = OutPoint { txid: Hash256::ZERO, vout: u32::MAX };

    pub fn new(txid: Hash256, vout: u32) -> Self {
        OutPoint { txid, vout }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TxIn {
    pub prevout: OutPoint,
    pub witness: Vec<Vec<u8>>,
    pub sequence: u32,
}

impl TxIn {
    pub fn new(prevout: OutPoint) -> Self {
        TxIn { prevout, witness: Vec::new(), sequence: 0xffff_fffe }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TxOut {
    pub amount: u64,
    pub script_pubkey: Script,
}

impl TxOut {
    pub fn new(amount: u64, script_pubkey: Script) -> Self {
        TxOut { amount, script_pubkey }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tx {
    pub version: i32,
    pub inputs: Vec<TxIn>,
    pub outputs: Vec<TxOut>,
    /// Absolute block height.
    pub locktime: u32,
}

pub fn write_compact_size(out: &mut Vec<u8>, n: u64) {
    match n {
        0..=0xfc => out.push(n as u8),
        0xfd..=0xffff => {
            out.push(0xfd);
            out.extend_from_slice(&(n as u16).to_le_bytes());
        }
        0x1_0000..=0xffff_ffff => {
            out.push(0xfe);
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        _ => {
            out.push(0xff);
            out.extend_from_slice(&n.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn peek(&self) -> Option<u8> {
        self.buf.get(self.pos).copied()
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn compact_size(&mut self) -> Result<u64, DecodeError> {
        let (n, min) = match self.u8()? {
            0xfd => (u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as u64, 0xfd),
            0xfe => (self.u32()? as u64, 0x1_0000),
            0xff => (self.u64()?, 0x1_0000_0000),
            b => return Ok(b as u64),
        };
        if n < min {
            return Err(DecodeError::NonCanonicalSize);
        }
        Ok(n)
    }

    fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.compact_size()?;
        let n = usize::try_from(n).map_err(|_| DecodeError::Truncated)?;
        Ok(self.take(n)?.to_vec())
    }
}

impl Tx {
    pub fn has_witness(&self) -> bool {
        self.inputs.iter().any(|i| !i.witness.is_empty())
    }

    fn encode(&self, with_witness: bool) -> Vec<u8> {
        let witness = with_witness && self.has_witness();
        let mut out = Vec::new();
        out.extend_from_slice(&self.version.to_le_bytes());
        if witness {
            out.extend_from_slice(&[0x00, 0x01]);
        }
        write_compact_size(&mut out, self.inputs.len() as u64);
        for i in &self.inputs {
            out.extend_from_slice(&i.prevout.txid.0);
            out.extend_from_slice(&i.prevout.vout.to_le_bytes());
            out.push(0); // empty scriptSig
            out.extend_from_slice(&i.sequence.to_le_bytes());
        }
        write_compact_size(&mut out, self.outputs.len() as u64);
        for o in &self.outputs {
            out.extend_from_slice(&o.amount.to_le_bytes());
            write_compact_size(&mut out, o.script_pubkey.len() as u64);
            out.extend_from_slice(o.script_pubkey.as_bytes());
        }
        if witness {
            for i in &self.inputs {
                write_compact_size(&mut out, i.witness.len() as u64);
                for item in &i.witness {
                    write_compact_size(&mut out, item.len() as u64);
                    out.extend_from_slice(item);
                }
            }
        }
        out.extend_from_slice(&self.locktime.to_le_bytes());
        out
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.encode(true)
    }

    /// The encoding committed to by [`Tx::txid`] and by block Merkle roots.
    pub fn serialize_no_witness(&self) -> Vec<u8> {
        self.encode(false)
    }

    pub fn txid(&self) -> Hash256 {
        sha256d(&self.serialize_no_witness())
    }

    pub fn parse(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader { buf: raw, pos: 0 };
        let version = r.u32()? as i32;
        let witness = r.peek() == Some(0);
        if witness {
            r.u8()?;
            let flag = r.u8()?;
            if flag != 1 {
                return Err(DecodeError::BadFlag(flag));
            }
        }
        let n_in = r.compact_size()?;
        let mut inputs = Vec::new();
        for _ in 0..n_in {
            let txid = Hash256::from_slice(r.take(32)?).expect("32 bytes");
            let vout = r.u32()?;
            let _script_sig = r.bytes()?;
            let sequence = r.u32()?;
            inputs.push(TxIn { prevout: OutPoint { txid, vout }, witness: Vec::new(), sequence });
        }
        let n_out = r.compact_size()?;
        let mut outputs = Vec::new();
        for _ in 0..n_out {
            let amount = r.u64()?;
            let script_pubkey = Script::from_bytes(r.bytes()?);
            outputs.push(TxOut { amount, script_pubkey });
        }
        if witness {
            for input in inputs.iter_mut() {
                let n = r.compact_size()?;
                for _ in 0..n {
                    input.witness.push(r.bytes()?);
                }
            }
        }
        let locktime = r.u32()?;
        if r.pos != raw.len() {
            return Err(DecodeError::TrailingBytes(raw.len() - r.pos));
        }
        if inputs.is_empty() || outputs.is_empty() {
            return Err(DecodeError::Empty);
        }
        Ok(Tx { version, inputs, outputs, locktime })
    }

    pub fn output_total(&self) -> u64 {
        self.outputs.iter().map(|o| o.amount).sum()
    }

    pub fn is_coinbase(&self) -> bool {
        self.inputs.len() == 1 && self.inputs[0].prevout == OutPoint::NULL
    }
}

/// Digest every signature in the simulator commits to: the witness-free
/// transaction, the input index, and the spent output's script and amount.
pub fn sighash(tx: &Tx, input_index: usize, spent: &TxOut) -> Result<Hash256, IndexOutOfRange> {
    if input_index >= tx.inputs.len() {
        return Err(IndexOutOfRange { index: input_index, len: tx.inputs.len() });
    }
    let mut buf = tx.serialize_no_witness();
    buf.extend_from_slice(&(input_index as u32).to_le_bytes());
    write_compact_size(&mut buf, spent.script_pubkey.len() as u64);
    buf.extend_from_slice(spent.script_pubkey.as_bytes());
    buf.extend_from_slice(&spent.amount.to_le_bytes());
    Ok(sha256d(&buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::btcsim::script::{Builder, OP_TRUE};

    fn sample() -> Tx {
        Tx {
            version: 2,
            inputs: vec![TxIn {
                prevout: OutPoint::new(sha256d(b"prev"), 1),
                witness: vec![vec![1, 2, 3], vec![]],
                sequence: 7,
            }],
            outputs: vec![
                TxOut::new(5000, Builder::new().push_opcode(OP_TRUE).into_script()),
                TxOut::new(70, Script::from_bytes(vec![0xab; 300])),
            ],
            locktime: 12,
        }
    }

    #[test]
    fn round_trip_with_and_without_witness() {
        let tx = sample();
        assert_eq!(Tx::parse(&tx.serialize()).unwrap(), tx);
        let mut bare = tx.clone();
        bare.inputs[0].witness.clear();
        assert_eq!(Tx::parse(&tx.serialize_no_witness()).unwrap(), bare);
        assert_eq!(bare.txid(), tx.txid());
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let raw = sample().serialize();
        assert_eq!(Tx::parse(&raw[..raw.len() - 1]), Err(DecodeError::Truncated));
        let mut extra = raw.clone();
        extra.push(0);
        assert_eq!(Tx::parse(&extra), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn compact_size_boundaries() {
        for n in [0u64, 0xfc, 0xfd, 0xffff, 0x1_0000, 0xffff_ffff, 0x1_0000_0000] {
            let mut out = Vec::new();
            write_compact_size(&mut out, n);
            let mut r = Reader { buf: &out, pos: 0 };
            assert_eq!(r.compact_size().unwrap(), n);
        }
        let mut r = Reader { buf: &[0xfd, 0x10, 0x00], pos: 0 };
        assert_eq!(r.compact_size(), Err(DecodeError::NonCanonicalSize));
    }

    #[test]
    fn sighash_properties() {
        let tx = sample();
        let spent = TxOut::new(5070, Script::from_bytes(vec![0x51]));
        let base = sighash(&tx, 0, &spent).unwrap();
        let mut other = tx.clone();
        other.outputs[0].amount += 1;
        assert_ne!(sighash(&other, 0, &spent).unwrap(), base);
        let mut rewitnessed = tx.clone();
        rewitnessed.inputs[0].witness = vec![vec![9; 70]];
        assert_eq!(sighash(&rewitnessed, 0, &spent).unwrap(), base);
        let reparsed = Tx::parse(&tx.serialize()).unwrap();
        assert_eq!(sighash(&reparsed, 0, &spent).unwrap(), base);
        assert_eq!(sighash(&tx, 1, &spent), Err(IndexOutOfRange { index: 1, len: 1 }));
    }
}
