//! A miniature Bitcoin: keys and ECDSA, transactions, a script interpreter for
//! the opcodes the protocol needs, and a UTXO chain with a low-difficulty miner.

mod chain;
pub mod keys;
pub mod script;
pub mod tx;

pub use chain::{BlockExport, Clock, SimBlock, SimChain, SimConfig, SimError};
pub use keys::{hash160, keygen, sign, verify_sig, KeyError, KeyPair, PublicKey, Signature};
pub use script::{eval_script, Builder, Script, ScriptContext, ScriptError};
pub use tx::{sighash, OutPoint, Tx, TxIn, TxOut};

/// Signs input `index` as a P2PKH spend of `spent` and installs the witness.
pub fn sign_p2pkh_input(tx: &mut Tx, index: usize, spent: &TxOut, kp: &KeyPair) {
    let digest = sighash(tx, index, spent).expect("caller passes a valid index");
    tx.inputs[index].witness = vec![sign(&digest, kp).to_vec(), kp.public().as_bytes().to_vec()];
}
