use std::any::Any;
use std::cell::Cell as StdCell;
use std::collections::HashMap;
use std::marker::PhantomData;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::cell::{is_locked, stamp_of, Cell, CellKind};
use super::{ActiveTxn, Conflict, Stm, TxResult, Version};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnStatus {
    Active,
    Committed,
    Aborted,
}

/// Lifecycle hook points. `WhileCommitLocked` actions run on the committing
/// path only, after read validation and before the write set is published,
/// while the commit locks are held; replay logs apply themselves there.
/// `AfterRollback` actions run in reverse registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandlerPhase {
    WhileCommitLocked,
    AfterCommit,
    AfterRollback,
}

struct ReadEntry {
    cell: Cell,
    stamp: u64,
}

struct WriteEntry {
    cell: Cell,
    pending: u64,
    /// Stamp observed at first buffering; validated unchanged at commit so
    /// overlapping committed writers conflict even when neither read the cell.
    guard_stamp: u64,
}

static LOCAL_KEYS: AtomicU64 = AtomicU64::new(1);

/// Key for transaction-local storage. Each instance names a distinct slot;
/// the stored value is created on first use within a transaction and dropped
/// when the transaction finishes.
pub struct TxnLocal<T> {
    key: u64,
    _marker: PhantomData<fn() -> T>,
}

impl<T> TxnLocal<T> {
    pub fn new() -> Self {
        TxnLocal {
            key: LOCAL_KEYS.fetch_add(1, Ordering::Relaxed),
            _marker: PhantomData,
        }
    }
}

impl<T> Default for TxnLocal<T> {
    fn default() -> Self {
        Self::new()
    }
}

thread_local! {
    static IN_TXN: StdCell<bool> = const { StdCell::new(false) };
}

pub(super) fn enter_executor_txn() {
    IN_TXN.with(|f| {
        assert!(
            !f.get(),
            "nested transactions are not supported: atomically() called from inside a transaction body"
        );
        f.set(true);
    });
}

pub(super) fn leave_executor_txn() {
    IN_TXN.with(|f| f.set(false));
}

const WRITER_WAIT: Duration = Duration::from_millis(2);
const COMMIT_LOCK_SPINS: usize = 1 << 20;

/// Per-attempt transaction context: status, read and write sets,
/// transaction-local storage, and lifecycle handlers. Confined to the thread
/// that began it.
pub struct Txn {
    stm: Stm,
    id: u64,
    attempt: u32,
    status: TxnStatus,
    begin_version: u64,
    snapshot: u64,
    read_set: HashMap<u64, ReadEntry>,
    write_set: HashMap<u64, WriteEntry>,
    locals: HashMap<u64, Rc<dyn Any>>,
    wcl_handlers: Vec<Box<dyn FnOnce()>>,
    after_commit: Vec<Box<dyn FnOnce()>>,
    after_rollback: Vec<Box<dyn FnOnce()>>,
    /// Cells where this transaction holds the encounter-time writer lock.
    writer_locks: Vec<Cell>,
    /// Cells where this transaction registered as a visible reader.
    reader_regs: Vec<Cell>,
    active: Arc<ActiveTxn>,
    in_commit: bool,
}

impl Txn {
    pub(super) fn begin(stm: Stm, attempt: u32) -> Txn {
        let id = stm.shared.txn_ids.fetch_add(1, Ordering::Relaxed) + 1;
        let begin_version = stm.shared.clock.load(Ordering::Acquire);
        let active = Arc::new(ActiveTxn {
            begin_version,
            doomed: AtomicU64::new(0),
        });
        stm.shared.active.insert(id, Arc::clone(&active));
        Txn {
            stm,
            id,
            attempt,
            status: TxnStatus::Active,
            begin_version,
            snapshot: begin_version,
            read_set: HashMap::new(),
            write_set: HashMap::new(),
            locals: HashMap::new(),
            wcl_handlers: Vec::new(),
            after_commit: Vec::new(),
            after_rollback: Vec::new(),
            writer_locks: Vec::new(),
            reader_regs: Vec::new(),
            active,
            in_commit: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// 1-based attempt number within the surrounding `atomically`.
    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn status(&self) -> TxnStatus {
        self.status
    }

    pub fn stm(&self) -> &Stm {
        &self.stm
    }

    pub fn snapshot_version(&self) -> Version {
        Version(self.snapshot)
    }

    fn assert_usable(&self) {
        assert_eq!(self.status, TxnStatus::Active, "transaction is not active");
        assert!(
            !self.in_commit,
            "STM operations are not allowed from while-commit-locked handlers"
        );
    }

    fn doom_check(&self) -> TxResult<()> {
        match self.active.doom_state() {
            Some(c) => Err(c),
            None => Ok(()),
        }
    }

    fn count_access(&self, cell: &Cell, write: bool) {
        if cell.kind() == CellKind::ConflictAbstraction {
            let ctr = if write {
                &self.stm.shared.ca_writes
            } else {
                &self.stm.shared.ca_reads
            };
            ctr.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Read a cell. Returns the pending token if this transaction has written
    /// the cell, otherwise a committed token consistent with the snapshot,
    /// extending the snapshot (after revalidating) when the cell is newer.
    pub fn read(&mut self, cell: &Cell) -> TxResult<u64> {
        self.read_impl(cell, true)
    }

    /// Read without snapshot extension: a stamp newer than the current
    /// snapshot is a conflict. Used for the post-operation reads of the lazy
    /// surround protocol, where a newer stamp means a conflicting transaction
    /// committed after the shadow copy answered and the speculation is stale.
    pub fn read_validating(&mut self, cell: &Cell) -> TxResult<u64> {
        self.read_impl(cell, false)
    }

    fn read_impl(&mut self, cell: &Cell, allow_extension: bool) -> TxResult<u64> {
        self.assert_usable();
        self.doom_check()?;
        self.count_access(cell, false);

        if let Some(entry) = self.write_set.get(&cell.id()) {
            return Ok(entry.pending);
        }
        if let Some(entry) = self.read_set.get(&cell.id()) {
            return match cell.stable_read() {
                Some((stamp, value)) if stamp == entry.stamp => Ok(value),
                _ => Err(Conflict::for_kind(cell.kind())),
            };
        }
        if self.stm.shared.mode == super::StmMode::FullyEager {
            let writer = cell.inner.writer.load(Ordering::Acquire);
            if writer != 0 && writer != self.id {
                return Err(Conflict::for_kind(cell.kind()));
            }
        }

        let (stamp, value) = cell
            .stable_read()
            .ok_or_else(|| Conflict::for_kind(cell.kind()))?;
        if stamp > self.snapshot {
            if !allow_extension {
                return Err(Conflict::for_kind(cell.kind()));
            }
            self.extend_snapshot()?;
        }
        self.read_set.insert(
            cell.id(),
            ReadEntry {
                cell: cell.clone(),
                stamp,
            },
        );
        if self.stm.shared.mode == super::StmMode::FullyEager {
            cell.inner.readers.lock().insert(self.id);
            self.reader_regs.push(cell.clone());
        }
        Ok(value)
    }

    /// Move the snapshot to the current clock, provided everything read (and
    /// every first-write guard) is still unchanged.
    fn extend_snapshot(&mut self) -> TxResult<()> {
        let target = self.stm.shared.clock.load(Ordering::Acquire);
        self.validate_unlocked()?;
        self.snapshot = target;
        Ok(())
    }

    fn validate_unlocked(&self) -> TxResult<()> {
        for entry in self.read_set.values() {
            match entry.cell.stable_read() {
                Some((stamp, _)) if stamp == entry.stamp => {}
                _ => return Err(Conflict::for_kind(entry.cell.kind())),
            }
        }
        for entry in self.write_set.values() {
            match entry.cell.stable_read() {
                Some((stamp, _)) if stamp == entry.guard_stamp => {}
                _ => return Err(Conflict::for_kind(entry.cell.kind())),
            }
        }
        Ok(())
    }

    /// Buffer a token into the write set. Eager modes take the encounter-time
    /// writer lock on first write; the fully eager mode additionally resolves
    /// against visible readers, the younger side aborting.
    pub fn write(&mut self, cell: &Cell, token: u64) -> TxResult<()> {
        self.assert_usable();
        self.doom_check()?;
        self.count_access(cell, true);

        if let Some(entry) = self.write_set.get_mut(&cell.id()) {
            entry.pending = token;
            return Ok(());
        }
        if self.stm.shared.mode.is_eager() {
            self.acquire_writer(cell)?;
        }
        if self.stm.shared.mode == super::StmMode::FullyEager {
            self.resolve_visible_readers(cell)?;
        }
        let (guard_stamp, _) = cell
            .stable_read()
            .ok_or_else(|| Conflict::for_kind(cell.kind()))?;
        self.write_set.insert(
            cell.id(),
            WriteEntry {
                cell: cell.clone(),
                pending: token,
                guard_stamp,
            },
        );
        Ok(())
    }

    fn is_younger_than(&self, other_id: u64, other: &ActiveTxn) -> bool {
        (self.begin_version, self.id) > (other.begin_version, other_id)
    }

    fn acquire_writer(&mut self, cell: &Cell) -> TxResult<()> {
        let deadline = Instant::now() + WRITER_WAIT;
        loop {
            self.doom_check()?;
            match cell.inner.writer.compare_exchange(
                0,
                self.id,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => {
                    self.writer_locks.push(cell.clone());
                    return Ok(());
                }
                Err(holder) if holder == self.id => return Ok(()),
                Err(holder) => {
                    if let Some(other) = self.stm.shared.active.get(&holder) {
                        if self.is_younger_than(holder, other.value()) {
                            return Err(Conflict::for_kind(cell.kind()));
                        }
                        other.doom(cell.kind());
                    }
                    if Instant::now() >= deadline {
                        return Err(Conflict::for_kind(cell.kind()));
                    }
                    std::hint::spin_loop();
                    std::thread::yield_now();
                }
            }
        }
    }

    fn resolve_visible_readers(&mut self, cell: &Cell) -> TxResult<()> {
        let deadline = Instant::now() + WRITER_WAIT;
        loop {
            let others: Vec<u64> = {
                let readers = cell.inner.readers.lock();
                readers.iter().copied().filter(|r| *r != self.id).collect()
            };
            if others.is_empty() {
                return Ok(());
            }
            for reader in others {
                if let Some(other) = self.stm.shared.active.get(&reader) {
                    if self.is_younger_than(reader, other.value()) {
                        return Err(Conflict::for_kind(cell.kind()));
                    }
                    other.doom(cell.kind());
                }
            }
            if Instant::now() >= deadline {
                return Err(Conflict::for_kind(cell.kind()));
            }
            std::thread::yield_now();
        }
    }

    /// Transaction-local storage: the first call per key runs `init` and
    /// caches the value for the rest of the transaction.
    pub fn local_or_init<T: 'static>(
        &mut self,
        key: &TxnLocal<T>,
        init: impl FnOnce() -> T,
    ) -> Rc<T> {
        self.assert_usable();
        let slot = self
            .locals
            .entry(key.key)
            .or_insert_with(|| Rc::new(init()) as Rc<dyn Any>);
        Rc::clone(slot)
            .downcast::<T>()
            .expect("transaction-local slot holds a value of a different type")
    }

    pub fn local_get<T: 'static>(&self, key: &TxnLocal<T>) -> Option<Rc<T>> {
        let slot = self.locals.get(&key.key)?;
        Some(
            Rc::clone(slot)
                .downcast::<T>()
                .expect("transaction-local slot holds a value of a different type"),
        )
    }

    pub fn register_handler(&mut self, phase: HandlerPhase, action: impl FnOnce() + 'static) {
        self.assert_usable();
        let boxed: Box<dyn FnOnce()> = Box::new(action);
        match phase {
            HandlerPhase::WhileCommitLocked => self.wcl_handlers.push(boxed),
            HandlerPhase::AfterCommit => self.after_commit.push(boxed),
            HandlerPhase::AfterRollback => self.after_rollback.push(boxed),
        }
    }

    pub fn on_commit(&mut self, action: impl FnOnce() + 'static) {
        self.register_handler(HandlerPhase::AfterCommit, action);
    }

    pub fn on_rollback(&mut self, action: impl FnOnce() + 'static) {
        self.register_handler(HandlerPhase::AfterRollback, action);
    }

    pub fn while_commit_locked(&mut self, action: impl FnOnce() + 'static) {
        self.register_handler(HandlerPhase::WhileCommitLocked, action);
    }

    /// Attempt to commit: lock the write set in global cell-id order,
    /// validate, run the while-commit-locked handlers, publish under a fresh
    /// commit version, then run the after-commit handlers.
    pub(super) fn commit(&mut self) -> Result<Version, Conflict> {
        assert_eq!(self.status, TxnStatus::Active, "transaction is not active");
        if let Err(c) = self.doom_check() {
            self.rollback();
            return Err(c);
        }

        if self.write_set.is_empty() && self.wcl_handlers.is_empty() {
            let version = Version(self.snapshot);
            let actions = std::mem::take(&mut self.after_commit);
            self.finish_common();
            self.status = TxnStatus::Committed;
            for action in actions {
                action();
            }
            return Ok(version);
        }

        let mut entries: Vec<(Cell, u64)> = self
            .write_set
            .values()
            .map(|e| (e.cell.clone(), e.pending))
            .collect();
        entries.sort_by_key(|(cell, _)| cell.id());

        let mut locked = 0usize;
        let mut failure: Option<Conflict> = None;
        'acquire: for (cell, _) in &entries {
            let mut spins = 0usize;
            while !cell.try_lock_commit() {
                spins += 1;
                if spins > COMMIT_LOCK_SPINS {
                    failure = Some(Conflict::for_kind(cell.kind()));
                    break 'acquire;
                }
                std::hint::spin_loop();
                if spins % 4096 == 0 {
                    std::thread::yield_now();
                }
            }
            locked += 1;
        }

        if failure.is_none() {
            failure = self.validate_locked().err();
        }

        if let Some(conflict) = failure {
            for (cell, _) in entries.iter().take(locked) {
                cell.unlock_commit();
            }
            self.rollback();
            return Err(conflict);
        }

        self.in_commit = true;
        for action in std::mem::take(&mut self.wcl_handlers) {
            action();
        }
        self.in_commit = false;

        let version = self
            .stm
            .shared
            .clock
            .fetch_add(1, Ordering::AcqRel)
            + 1;
        for (cell, pending) in &entries {
            cell.publish(*pending, version);
        }

        let actions = std::mem::take(&mut self.after_commit);
        self.finish_common();
        self.status = TxnStatus::Committed;
        for action in actions {
            action();
        }
        Ok(Version(version))
    }

    fn validate_locked(&self) -> TxResult<()> {
        for entry in self.read_set.values() {
            let word = entry.cell.inner.vlock.load(Ordering::Acquire);
            if self.write_set.contains_key(&entry.cell.id()) {
                if stamp_of(word) != entry.stamp {
                    return Err(Conflict::for_kind(entry.cell.kind()));
                }
            } else if is_locked(word) || stamp_of(word) != entry.stamp {
                return Err(Conflict::for_kind(entry.cell.kind()));
            }
        }
        for entry in self.write_set.values() {
            let word = entry.cell.inner.vlock.load(Ordering::Acquire);
            if stamp_of(word) != entry.guard_stamp {
                return Err(Conflict::for_kind(entry.cell.kind()));
            }
        }
        Ok(())
    }

    /// Abandon the attempt: the write set is discarded unapplied and the
    /// after-rollback handlers run in reverse registration order.
    pub(super) fn rollback(&mut self) {
        if self.status != TxnStatus::Active {
            return;
        }
        let handlers = std::mem::take(&mut self.after_rollback);
        for action in handlers.into_iter().rev() {
            action();
        }
        self.finish_common();
        self.status = TxnStatus::Aborted;
    }

    fn finish_common(&mut self) {
        for cell in self.writer_locks.drain(..) {
            let _ = cell.inner.writer.compare_exchange(
                self.id,
                0,
                Ordering::AcqRel,
                Ordering::Acquire,
            );
        }
        for cell in self.reader_regs.drain(..) {
            cell.inner.readers.lock().remove(&self.id);
        }
        self.stm.shared.active.remove(&self.id);
        self.read_set.clear();
        self.write_set.clear();
        self.locals.clear();
        self.wcl_handlers.clear();
        self.after_commit.clear();
    }
}

impl Drop for Txn {
    fn drop(&mut self) {
        if self.status == TxnStatus::Active {
            self.rollback();
        }
    }
}
