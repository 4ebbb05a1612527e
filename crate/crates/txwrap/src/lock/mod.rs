//! Abstract locks: the conflict-abstraction layer between wrapped data
//! structures and the STM.
//!
//! Callers declare intents over abstract-state keys (a map key, a queue's
//! Min/MultiSet element). A lock allocator policy turns each intent into a
//! concurrency-control action: the pessimistic policy blocks on per-key mode
//! locks held two-phase until commit or rollback, the optimistic policy maps
//! keys onto a striped array of STM cells, reading the stripe for READ
//! intents and writing a fresh token for WRITE intents so that the STM
//! detects non-commuting operations as ordinary memory conflicts.

mod ca;
mod pessimistic;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::Duration;

use dashmap::DashMap;

use crate::stm::{Cell, CellKind, Conflict, Stm, TxResult, Txn};

pub use ca::{
    ca_touch, counter_threshold_spec, pqueue_minmultiset_spec, striped_map_spec, CaSpec,
};
pub use pessimistic::{Acquired, ModeLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Read,
    Write,
}

/// One lock intent: WRITE for operations that mutate the abstract-state
/// component named by the key, READ for observers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Intent<K> {
    pub key: K,
    pub mode: Mode,
}

impl<K> Intent<K> {
    pub fn read(key: K) -> Self {
        Intent {
            key,
            mode: Mode::Read,
        }
    }

    pub fn write(key: K) -> Self {
        Intent {
            key,
            mode: Mode::Write,
        }
    }
}

/// Symmetric compatibility between held and requested modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompatibilityMatrix {
    read_read: bool,
    read_write: bool,
    write_write: bool,
}

impl CompatibilityMatrix {
    /// Multiple readers, exclusive writer.
    pub const DEFAULT: CompatibilityMatrix = CompatibilityMatrix {
        read_read: true,
        read_write: false,
        write_write: false,
    };

    /// Multiple readers or multiple writers, but never both. Used for the
    /// priority queue's MultiSet element, whose inserts all commute.
    pub const MULTISET: CompatibilityMatrix = CompatibilityMatrix {
        read_read: true,
        read_write: false,
        write_write: true,
    };

    pub fn new(read_read: bool, read_write: bool, write_write: bool) -> Self {
        CompatibilityMatrix {
            read_read,
            read_write,
            write_write,
        }
    }

    pub fn compatible(&self, a: Mode, b: Mode) -> bool {
        match (a, b) {
            (Mode::Read, Mode::Read) => self.read_read,
            (Mode::Write, Mode::Write) => self.write_write,
            _ => self.read_write,
        }
    }
}

pub const DEFAULT_PESSIMISTIC_TIMEOUT: Duration = Duration::from_millis(10);
pub const DEFAULT_STRIPES: usize = 1024;

/// Pessimistic allocator: a growing table of per-key mode locks, compared
/// against a per-key compatibility matrix, acquired with a timeout and
/// released only when the owning transaction finishes.
pub struct PessimisticPolicy<K> {
    table: DashMap<K, Arc<ModeLock>>,
    matrix_for: Box<dyn Fn(&K) -> CompatibilityMatrix + Send + Sync>,
    timeout: Duration,
}

impl<K: Hash + Eq + Clone + Send + Sync + 'static> PessimisticPolicy<K> {
    pub fn new() -> Self {
        Self::with_matrix(DEFAULT_PESSIMISTIC_TIMEOUT, |_| CompatibilityMatrix::DEFAULT)
    }

    pub fn with_matrix(
        timeout: Duration,
        matrix_for: impl Fn(&K) -> CompatibilityMatrix + Send + Sync + 'static,
    ) -> Self {
        PessimisticPolicy {
            table: DashMap::new(),
            matrix_for: Box::new(matrix_for),
            timeout,
        }
    }

    fn lock_for(&self, key: &K) -> Arc<ModeLock> {
        self.table
            .entry(key.clone())
            .or_insert_with(|| Arc::new(ModeLock::new()))
            .clone()
    }

    /// Blocking mode-lock acquisition, registered for release at both commit
    /// and rollback on first grant. Timeout aborts the transaction so it can
    /// back off and retry, escaping deadlocks.
    pub fn acquire(&self, tx: &mut Txn, key: &K, mode: Mode) -> TxResult<()> {
        let lock = self.lock_for(key);
        let matrix = (self.matrix_for)(key);
        match lock.acquire(tx.id(), mode, matrix, self.timeout) {
            Ok(Acquired::First) => {
                let txn_id = tx.id();
                let for_commit = Arc::clone(&lock);
                tx.on_commit(move || for_commit.release(txn_id));
                tx.on_rollback(move || lock.release(txn_id));
                Ok(())
            }
            Ok(Acquired::AlreadyHeld) => Ok(()),
            Err(_) => Err(Conflict::for_kind(CellKind::ConflictAbstraction)),
        }
    }

    /// Test hook: the mode this transaction currently holds on `key`.
    pub fn held_mode(&self, txn_id: u64, key: &K) -> Option<Mode> {
        self.table.get(key).and_then(|l| l.holder_mode(txn_id))
    }
}

impl<K: Hash + Eq + Clone + Send + Sync + 'static> Default for PessimisticPolicy<K> {
    fn default() -> Self {
        Self::new()
    }
}

/// Optimistic allocator: `stripes` conflict-abstraction cells, with a
/// deterministic stripe function mapping each key to one of them.
pub struct OptimisticPolicy<K> {
    cells: Vec<Cell>,
    stripe: Box<dyn Fn(&K) -> usize + Send + Sync>,
}

fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl<K: Hash + Send + Sync + 'static> OptimisticPolicy<K> {
    /// Hash striping over `stripes` cells with a 64-bit mix of the key hash.
    pub fn striped(stm: &Stm, stripes: usize) -> Self {
        Self::with_stripe(stm, stripes, |key: &K| {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            key.hash(&mut h);
            mix64(h.finish()) as usize
        })
    }

    pub fn with_stripe(
        stm: &Stm,
        stripes: usize,
        stripe: impl Fn(&K) -> usize + Send + Sync + 'static,
    ) -> Self {
        assert!(stripes > 0, "stripe count must be positive");
        OptimisticPolicy {
            cells: (0..stripes).map(|_| stm.alloc_ca_cell(0)).collect(),
            stripe: Box::new(stripe),
        }
    }

    pub fn stripes(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_for(&self, key: &K) -> &Cell {
        &self.cells[(self.stripe)(key) % self.cells.len()]
    }

    /// READ intents read the stripe cell; WRITE intents write a fresh token
    /// to it, so overlapping non-commuting operations collide in the STM.
    pub fn touch(&self, tx: &mut Txn, key: &K, mode: Mode) -> TxResult<()> {
        let cell = self.cell_for(key);
        match mode {
            Mode::Read => tx.read(cell).map(|_| ()),
            Mode::Write => {
                let token = tx.stm().fresh_token();
                tx.write(cell, token)
            }
        }
    }

    /// Post-operation validating read of a key's stripe cell, for the lazy
    /// surround protocol.
    pub fn touch_validating_read(&self, tx: &mut Txn, key: &K) -> TxResult<()> {
        tx.read_validating(self.cell_for(key)).map(|_| ())
    }
}

/// Lock allocator policy: how abstract-state intents become concurrency
/// control.
pub enum LockPolicy<K> {
    Pessimistic(PessimisticPolicy<K>),
    Optimistic(OptimisticPolicy<K>),
}

impl<K> LockPolicy<K>
where
    K: Hash + Eq + Ord + Clone + Send + Sync + 'static,
{
    pub fn is_pessimistic(&self) -> bool {
        matches!(self, LockPolicy::Pessimistic(_))
    }

    pub fn acquire(&self, tx: &mut Txn, key: &K, mode: Mode) -> TxResult<()> {
        match self {
            LockPolicy::Pessimistic(p) => p.acquire(tx, key, mode),
            LockPolicy::Optimistic(o) => o.touch(tx, key, mode),
        }
    }
}

/// Duplicate intents on the same key collapse to the strongest mode, and the
/// result is ordered by key, giving a deterministic acquisition order.
pub fn dedupe_intents<K: Ord + Clone>(intents: &[Intent<K>]) -> BTreeMap<K, Mode> {
    let mut deduped: BTreeMap<K, Mode> = BTreeMap::new();
    for intent in intents {
        deduped
            .entry(intent.key.clone())
            .and_modify(|m| *m = (*m).max(intent.mode))
            .or_insert(intent.mode);
    }
    deduped
}

/// Acquire every intent through the policy, then run the body. This is the
/// eager-update entry point: the touches happen before the operation.
pub fn abstract_lock_apply<K, Z>(
    tx: &mut Txn,
    policy: &LockPolicy<K>,
    intents: &[Intent<K>],
    body: impl FnOnce(&mut Txn) -> TxResult<Z>,
) -> TxResult<Z>
where
    K: Hash + Eq + Ord + Clone + Send + Sync + 'static,
{
    for (key, mode) in dedupe_intents(intents) {
        policy.acquire(tx, &key, mode)?;
    }
    body(tx)
}

/// Like [`abstract_lock_apply`], additionally registering `inverse` of the
/// body's result as an after-rollback handler. Rollback handlers run in
/// reverse registration order, so a sequence of eager operations is undone
/// back to front.
pub fn abstract_lock_apply_inv<K, Z>(
    tx: &mut Txn,
    policy: &LockPolicy<K>,
    intents: &[Intent<K>],
    body: impl FnOnce(&mut Txn) -> TxResult<Z>,
    inverse: impl FnOnce(Z) + 'static,
) -> TxResult<Z>
where
    K: Hash + Eq + Ord + Clone + Send + Sync + 'static,
    Z: Clone + 'static,
{
    let result = abstract_lock_apply(tx, policy, intents, body)?;
    let undo = result.clone();
    tx.on_rollback(move || inverse(undo));
    Ok(result)
}
