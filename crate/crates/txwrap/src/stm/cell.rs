use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

/// Distinguishes conflict-abstraction cells from ordinary transactional data.
/// Retries caused by a conflict on a `ConflictAbstraction` cell are counted
/// separately by the runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Native,
    ConflictAbstraction,
}

pub(crate) const VLOCK_BIT: u64 = 1 << 63;

pub(crate) fn is_locked(word: u64) -> bool {
    word & VLOCK_BIT != 0
}

pub(crate) fn stamp_of(word: u64) -> u64 {
    word & !VLOCK_BIT
}

pub(crate) struct CellInner {
    pub(crate) id: u64,
    pub(crate) kind: CellKind,
    /// Version word: bit 63 is the commit lock, the rest is the stamp of the
    /// last committed write. Publication stores the value first, then the new
    /// stamp with the lock bit cleared, so a stable (unlocked, equal before
    /// and after) word brackets a consistent value read.
    pub(crate) vlock: AtomicU64,
    pub(crate) value: AtomicU64,
    /// Encounter-time write lock: the id of the holding transaction, 0 when
    /// free. Used only by the eager detection modes.
    pub(crate) writer: AtomicU64,
    /// Visible readers, maintained only in fully-eager mode.
    pub(crate) readers: Mutex<HashSet<u64>>,
}

static CELL_IDS: AtomicU64 = AtomicU64::new(1);

/// An STM-managed memory location holding a 64-bit token and the version
/// stamp of its last committed write. Cells are cheap handles and may be
/// shared freely across threads.
#[derive(Clone)]
pub struct Cell {
    pub(crate) inner: Arc<CellInner>,
}

impl Cell {
    pub(crate) fn new(kind: CellKind, initial: u64) -> Self {
        Cell {
            inner: Arc::new(CellInner {
                id: CELL_IDS.fetch_add(1, Ordering::Relaxed),
                kind,
                vlock: AtomicU64::new(0),
                value: AtomicU64::new(initial),
                writer: AtomicU64::new(0),
                readers: Mutex::new(HashSet::new()),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn kind(&self) -> CellKind {
        self.inner.kind
    }

    /// Stamp of the last committed write, for assertions and tests.
    pub fn stamp(&self) -> u64 {
        stamp_of(self.inner.vlock.load(Ordering::Acquire))
    }

    /// Last committed value, read outside any transaction. Spins while a
    /// committer holds the cell locked.
    pub fn committed_value(&self) -> u64 {
        loop {
            if let Some((_, v)) = self.try_stable_read() {
                return v;
            }
            std::hint::spin_loop();
        }
    }

    /// One attempt at a consistent (stamp, value) pair; `None` if the cell is
    /// locked or changed mid-read.
    pub(crate) fn try_stable_read(&self) -> Option<(u64, u64)> {
        let before = self.inner.vlock.load(Ordering::Acquire);
        if is_locked(before) {
            return None;
        }
        let value = self.inner.value.load(Ordering::Acquire);
        let after = self.inner.vlock.load(Ordering::Acquire);
        if before == after {
            Some((stamp_of(before), value))
        } else {
            None
        }
    }

    /// Consistent (stamp, value) pair, spinning through short commit windows.
    /// `None` once the spin budget is exhausted.
    pub(crate) fn stable_read(&self) -> Option<(u64, u64)> {
        for spin in 0..32768usize {
            if let Some(pair) = self.try_stable_read() {
                return Some(pair);
            }
            std::hint::spin_loop();
            if spin % 1024 == 1023 {
                std::thread::yield_now();
            }
        }
        None
    }

    pub(crate) fn try_lock_commit(&self) -> bool {
        let cur = self.inner.vlock.load(Ordering::Acquire);
        if is_locked(cur) {
            return false;
        }
        self.inner
            .vlock
            .compare_exchange(cur, cur | VLOCK_BIT, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    pub(crate) fn unlock_commit(&self) {
        let cur = self.inner.vlock.load(Ordering::Acquire);
        debug_assert!(is_locked(cur));
        self.inner
            .vlock
            .store(stamp_of(cur), Ordering::Release);
    }

    /// Publish a committed value. Caller must hold the commit lock.
    pub(crate) fn publish(&self, value: u64, stamp: u64) {
        debug_assert!(is_locked(self.inner.vlock.load(Ordering::Relaxed)));
        self.inner.value.store(value, Ordering::Release);
        self.inner.vlock.store(stamp, Ordering::Release);
    }
}

impl std::fmt::Debug for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cell")
            .field("id", &self.inner.id)
            .field("kind", &self.inner.kind)
            .field("stamp", &self.stamp())
            .finish()
    }
}
