//! The opcode subset used by funding, commitment, HTLC and address scripts,
//! and a stack machine that evaluates it.

use std::fmt;

use thiserror::Error;

use super::keys::{hash160, verify_sig, PublicKey, Signature};
use super::tx::{sighash, Tx, TxOut};
use crate::commitments::sha256;

pub const OP_0: u8 = 0x00;
pub const OP_PUSHDATA1: u8 = 0x4c;
pub const OP_PUSHDATA2: u8 = 0x4d;
pub const OP_1: u8 = 0x51;
pub const OP_TRUE: u8 = OP_1;
pub const OP_2: u8 = 0x52;
pub const OP_16: u8 = 0x60;
pub const OP_IF: u8 = 0x63;
pub const OP_ELSE: u8 = 0x67;
pub const OP_ENDIF: u8 = 0x68;
pub const OP_DROP: u8 = 0x75;
pub const OP_DUP: u8 = 0x76;
pub const OP_EQUAL: u8 = 0x87;
pub const OP_EQUALVERIFY: u8 = 0x88;
pub const OP_SHA256: u8 = 0xa8;
pub const OP_HASH160: u8 = 0xa9;
pub const OP_CHECKSIG: u8 = 0xac;
pub const OP_CHECKMULTISIG: u8 = 0xae;
pub const OP_CHECKLOCKTIMEVERIFY: u8 = 0xb1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("malformed script: {0}")]
    MalformedScript(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction<'a> {
    Op(u8),
    Push(&'a [u8]),
}

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Script(Vec<u8>);

impl fmt::Debug for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Script({})", hex::encode(&self.0))
    }
}

impl Script {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Script(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn instructions(&self) -> Result<Vec<Instruction<'_>>, ScriptError> {
        let b = &self.0;
        let mut out = Vec::new();
        let mut i = 0;
        while i < b.len() {
            let op = b[i];
            i += 1;
            let len = match op {
                0x01..=0x4b => op as usize,
                OP_PUSHDATA1 => {
                    let n = *b.get(i).ok_or(ScriptError::MalformedScript("truncated push"))?;
                    i += 1;
                    n as usize
                }
                OP_PUSHDATA2 => {
                    let n = b
                        .get(i..i + 2)
                        .ok_or(ScriptError::MalformedScript("truncated push"))?;
                    i += 2;
                    u16::from_le_bytes([n[0], n[1]]) as usize
                }
                OP_0 => {
                    out.push(Instruction::Push(&[]));
                    continue;
                }
                _ => {
                    out.push(Instruction::Op(op));
                    continue;
                }
            };
            let data = b
                .get(i..i + len)
                .ok_or(ScriptError::MalformedScript("truncated push"))?;
            i += len;
            out.push(Instruction::Push(data));
        }
        Ok(out)
    }

    /// `OP_0 <sha256(redeem)>`
    pub fn p2wsh(redeem: &Script) -> Script {
        Builder::new().push_opcode(OP_0).push_slice(&sha256(redeem.as_bytes()).0).into_script()
    }

    /// `OP_DUP OP_HASH160 <h> OP_EQUALVERIFY OP_CHECKSIG`
    pub fn p2pkh(addr: &[u8; 20]) -> Script {
        Builder::new()
            .push_opcode(OP_DUP)
            .push_opcode(OP_HASH160)
            .push_slice(addr)
            .push_opcode(OP_EQUALVERIFY)
            .push_opcode(OP_CHECKSIG)
            .into_script()
    }

    pub fn witness_script_hash(&self) -> Option<[u8; 32]> {
        let b = &self.0;
        (b.len() == 34 && b[0] == OP_0 && b[1] == 32).then(|| b[2..].try_into().expect("32 bytes"))
    }

    pub fn p2pkh_hash(&self) -> Option<[u8; 20]> {
        let b = &self.0;
        let shape = b.len() == 25
            && b[0] == OP_DUP
            && b[1] == OP_HASH160
            && b[2] == 20
            && b[23] == OP_EQUALVERIFY
            && b[24] == OP_CHECKSIG;
        shape.then(|| b[3..23].try_into().expect("20 bytes"))
    }
}

#[derive(Debug, Default)]
pub struct Builder(Vec<u8>);

impl Builder {
    pub fn new() -> Self {
        Builder(Vec::new())
    }

    pub fn push_opcode(mut self, op: u8) -> Self {
        self.0.push(op);
        self
    }

    pub fn push_slice(mut self, data: &[u8]) -> Self {
        match data.len() {
            0 => self.0.push(OP_0),
            n @ 1..=0x4b => self.0.push(n as u8),
            n @ 0x4c..=0xff => self.0.extend_from_slice(&[OP_PUSHDATA1, n as u8]),
            n => {
                assert!(n <= 0xffff, "push exceeds PUSHDATA2");
                self.0.push(OP_PUSHDATA2);
                self.0.extend_from_slice(&(n as u16).to_le_bytes());
            }
        }
        self.0.extend_from_slice(data);
        self
    }

    pub fn push_key(self, pk: &PublicKey) -> Self {
        self.push_slice(pk.as_bytes())
    }

    /// Small integers use `OP_0`/`OP_1..OP_16`; others a minimal script number.
    pub fn push_int(self, n: i64) -> Self {
        match n {
            0 => self.push_opcode(OP_0),
            1..=16 => self.push_opcode(OP_1 + (n as u8) - 1),
            _ => self.push_slice(&encode_num(n)),
        }
    }

    pub fn into_script(self) -> Script {
        Script(self.0)
    }
}

pub fn encode_num(n: i64) -> Vec<u8> {
    if n == 0 {
        return Vec::new();
    }
    let neg = n < 0;
    let mut abs = n.unsigned_abs();
    let mut out = Vec::new();
    while abs > 0 {
        out.push((abs & 0xff) as u8);
        abs >>= 8;
    }
    if out.last().expect("non-empty") & 0x80 != 0 {
        out.push(if neg { 0x80 } else { 0 });
    } else if neg {
        *out.last_mut().expect("non-empty") |= 0x80;
    }
    out
}

/// Decodes a script number of at most `max_len` bytes.
pub fn decode_num(bytes: &[u8], max_len: usize) -> Option<i64> {
    if bytes.len() > max_len {
        return None;
    }
    if bytes.is_empty() {
        return Some(0);
    }
    let mut v: i64 = 0;
    for (i, b) in bytes.iter().enumerate() {
        v |= (*b as i64) << (8 * i);
    }
    let last = bytes[bytes.len() - 1];
    if last & 0x80 != 0 {
        v &= !(0x80i64 << (8 * (bytes.len() - 1)));
        v = -v;
    }
    Some(v)
}

fn cast_to_bool(v: &[u8]) -> bool {
    for (i, b) in v.iter().enumerate() {
        if *b != 0 {
            // Negative zero is false.
            return !(i == v.len() - 1 && *b == 0x80);
        }
    }
    false
}

/// What a script is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct ScriptContext<'a> {
    pub tx: &'a Tx,
    pub input_index: usize,
    pub spent: &'a TxOut,
    pub block_height: u64,
}

enum Halt {
    Fail,
    Malformed(&'static str),
}

type Step = Result<(), Halt>;

/// Evaluates `witness` against `script_pubkey`.
///
/// P2WSH outputs take the redeem script from the last witness item; any other
/// output is executed directly with the witness as its initial stack. Returns
/// `Ok(false)` on any failed check and an error only for malformed scripts.
pub fn eval_script(
    witness: &[Vec<u8>],
    script_pubkey: &Script,
    ctx: &ScriptContext<'_>,
) -> Result<bool, ScriptError> {
    let (mut stack, script) = match script_pubkey.witness_script_hash() {
        Some(h) => {
            let Some((redeem, items)) = witness.split_last() else {
                return Ok(false);
            };
            if sha256(redeem).0 != h {
                return Ok(false);
            }
            (items.to_vec(), Script::from_bytes(redeem.clone()))
        }
        None => (witness.to_vec(), script_pubkey.clone()),
    };
    match execute(&script, &mut stack, ctx) {
        Ok(()) => Ok(stack.len() == 1 && cast_to_bool(&stack[0])),
        Err(Halt::Fail) => Ok(false),
        Err(Halt::Malformed(why)) => Err(ScriptError::MalformedScript(why)),
    }
}

fn pop(stack: &mut Vec<Vec<u8>>) -> Result<Vec<u8>, Halt> {
    stack.pop().ok_or(Halt::Fail)
}

fn check_sig(sig: &[u8], pk: &[u8], ctx: &ScriptContext<'_>) -> bool {
    let (Ok(sig), Ok(pk)) = (Signature::from_bytes(sig), PublicKey::from_bytes(pk)) else {
        return false;
    };
    match sighash(ctx.tx, ctx.input_index, ctx.spent) {
        Ok(digest) => verify_sig(&digest, &pk, &sig),
        Err(_) => false,
    }
}

fn execute(script: &Script, stack: &mut Vec<Vec<u8>>, ctx: &ScriptContext<'_>) -> Step {
    let instructions = script.instructions().map_err(|ScriptError::MalformedScript(w)| Halt::Malformed(w))?;
    let mut branches: Vec<bool> = Vec::new();
    for ins in instructions {
        let executing = branches.iter().all(|b| *b);
        let op = match ins {
            Instruction::Push(data) => {
                if executing {
                    stack.push(data.to_vec());
                }
                continue;
            }
            Instruction::Op(op) => op,
        };
        match op {
            OP_IF => {
                let cond = if executing { cast_to_bool(&pop(stack)?) } else { false };
                branches.push(cond);
                continue;
            }
            OP_ELSE => {
                let top = branches.last_mut().ok_or(Halt::Malformed("ELSE without IF"))?;
                *top = !*top;
                continue;
            }
            OP_ENDIF => {
                branches.pop().ok_or(Halt::Malformed("ENDIF without IF"))?;
                continue;
            }
            OP_1..=OP_16 | OP_DROP | OP_DUP | OP_EQUAL | OP_EQUALVERIFY | OP_SHA256
            | OP_HASH160 | OP_CHECKSIG | OP_CHECKMULTISIG | OP_CHECKLOCKTIMEVERIFY => {}
            _ => return Err(Halt::Malformed("unknown opcode")),
        }
        if !executing {
            continue;
        }
        match op {
            OP_1..=OP_16 => stack.push(vec![op - OP_1 + 1]),
            OP_DROP => {
                pop(stack)?;
            }
            OP_DUP => {
                let top = stack.last().ok_or(Halt::Fail)?.clone();
                stack.push(top);
            }
            OP_EQUAL | OP_EQUALVERIFY => {
                let a = pop(stack)?;
                let b = pop(stack)?;
                if op == OP_EQUALVERIFY {
                    if a != b {
                        return Err(Halt::Fail);
                    }
                } else {
                    stack.push(if a == b { vec![1] } else { vec![] });
                }
            }
            OP_SHA256 => {
                let v = pop(stack)?;
                stack.push(sha256(&v).0.to_vec());
            }
            OP_HASH160 => {
                let v = pop(stack)?;
                stack.push(hash160(&v).to_vec());
            }
            OP_CHECKSIG => {
                let pk = pop(stack)?;
                let sig = pop(stack)?;
                let ok = check_sig(&sig, &pk, ctx);
                stack.push(if ok { vec![1] } else { vec![] });
            }
            OP_CHECKMULTISIG => {
                let ok = check_multisig(stack, ctx)?;
                stack.push(if ok { vec![1] } else { vec![] });
            }
            OP_CHECKLOCKTIMEVERIFY => {
                let top = stack.last().ok_or(Halt::Fail)?;
                let n = decode_num(top, 5).ok_or(Halt::Fail)?;
                if n < 0 || ctx.block_height < n as u64 || (ctx.tx.locktime as i64) < n {
                    return Err(Halt::Fail);
                }
            }
            _ => unreachable!("filtered above"),
        }
    }
    if !branches.is_empty() {
        return Err(Halt::Malformed("unbalanced IF"));
    }
    Ok(())
}

/// `<dummy> sig_1..sig_m m pk_1..pk_n n`; signatures must appear in key order.
fn check_multisig(stack: &mut Vec<Vec<u8>>, ctx: &ScriptContext<'_>) -> Result<bool, Halt> {
    let n = decode_num(&pop(stack)?, 4).ok_or(Halt::Fail)?;
    if !(0..=20).contains(&n) {
        return Err(Halt::Fail);
    }
    let mut keys: Vec<Vec<u8>> = (0..n).map(|_| pop(stack)).collect::<Result<_, _>>()?;
    let m = decode_num(&pop(stack)?, 4).ok_or(Halt::Fail)?;
    if m < 0 || m > n {
        return Err(Halt::Fail);
    }
    let mut sigs: Vec<Vec<u8>> = (0..m).map(|_| pop(stack)).collect::<Result<_, _>>()?;
    pop(stack)?; // dummy
    // Both vectors are top-of-stack first, matching the reference matching order.
    keys.reverse();
    sigs.reverse();
    while let Some(sig) = sigs.last() {
        if sigs.len() > keys.len() {
            return Ok(false);
        }
        let key = keys.pop().expect("checked length");
        if check_sig(sig, &key, ctx) {
            sigs.pop();
        }
    }
    Ok(true)
}
