//! Transactional wrappers for thread-safe data structures.
//!
//! The crate is built around a word-based software transactional memory
//! ([`stm`]) whose cells are used both for plain transactional data and as
//! conflict-abstraction locations: dedicated cells that non-commuting
//! operations read and write so the STM detects semantic conflicts on behalf
//! of wrapped structures. On top of that sit abstract locks ([`lock`]),
//! replay logs and shadow copies for lazy updates ([`replay`]), a set of
//! wrapped collections ([`collections`]), and a bounded checker for
//! conflict-abstraction soundness ([`verifier`]).

pub mod collections;
pub mod lock;
pub mod replay;
pub mod stm;
pub mod verifier;

pub use stm::{
    Cell, CellKind, Conflict, RetryPolicy, Stm, StmError, StmMode, StmStats, TxAbort, TxResult,
    Txn, TxnLocal, Version,
};
