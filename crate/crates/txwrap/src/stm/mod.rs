//! A word-based software transactional memory with a global version clock.
//!
//! Transactions buffer writes, track the stamps of everything they read, and
//! validate at commit under per-cell locks taken in global id order. Three
//! conflict-detection modes are supported: fully lazy (all conflicts found at
//! commit), eager write/write (encounter-time writer locks), and fully eager
//! (writer locks plus visible readers). The same machinery backs both plain
//! transactional data and the conflict-abstraction cells used by the wrapper
//! layers.

mod cell;
mod txn;

use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use dashmap::DashMap;

pub use cell::{Cell, CellKind};
pub use txn::{HandlerPhase, Txn, TxnLocal, TxnStatus};

/// Logical commit time drawn from the global version clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Version(pub u64);

impl Version {
    pub fn get(self) -> u64 {
        self.0
    }
}

/// When the runtime looks for conflicts.
///
/// * `Lazy`: everything at commit (commit-time locking, read-set validation,
///   and a stamp guard on first-write observations so overlapping blind
///   writers still collide).
/// * `EagerWw`: write/write at encounter via per-cell writer locks;
///   read/write still at commit or the next validation.
/// * `FullyEager`: additionally registers visible readers so a writer finds
///   read/write conflicts at write-encounter time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StmMode {
    Lazy,
    EagerWw,
    FullyEager,
}

impl StmMode {
    pub fn is_eager(self) -> bool {
        !matches!(self, StmMode::Lazy)
    }
}

impl std::fmt::Display for StmMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StmMode::Lazy => "LAZY",
            StmMode::EagerWw => "EAGER_WW",
            StmMode::FullyEager => "FULLY_EAGER",
        };
        f.write_str(s)
    }
}

/// Bounded retry with randomized exponential backoff.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    /// Fractional jitter applied symmetrically around the nominal delay.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 64,
            backoff_base: Duration::from_micros(1),
            backoff_cap: Duration::from_millis(10),
            jitter: 0.5,
        }
    }
}

impl RetryPolicy {
    pub(crate) fn delay_for(&self, attempt: u32) -> Duration {
        let shift = attempt.saturating_sub(1).min(24);
        let nominal = self
            .backoff_base
            .saturating_mul(1u32 << shift)
            .min(self.backoff_cap);
        if self.jitter <= 0.0 {
            return nominal;
        }
        let nanos = nominal.as_nanos() as f64;
        let factor = 1.0 + self.jitter * (rand::random::<f64>() * 2.0 - 1.0);
        Duration::from_nanos((nanos * factor).max(0.0) as u64)
    }
}

/// Signal that the current attempt observed a conflict and must be retried.
/// Carries whether the conflicting location was a conflict-abstraction cell,
/// which the harness reports separately.
#[derive(Debug, Clone, Copy)]
pub struct Conflict {
    pub(crate) ca: bool,
}

impl Conflict {
    pub(crate) fn for_kind(kind: CellKind) -> Self {
        Conflict {
            ca: kind == CellKind::ConflictAbstraction,
        }
    }

    pub fn is_ca_attributed(&self) -> bool {
        self.ca
    }
}

/// Result of an individual transactional operation.
pub type TxResult<T> = Result<T, Conflict>;

/// Body outcome for transactions that can abort with a user error. The error
/// propagates out of [`Stm::atomically_or_err`] after the rollback handlers
/// have run.
#[derive(Debug)]
pub enum TxAbort<E> {
    Conflict(Conflict),
    Abort(E),
}

impl<E> From<Conflict> for TxAbort<E> {
    fn from(c: Conflict) -> Self {
        TxAbort::Conflict(c)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StmError<E = Infallible> {
    #[error("transaction gave up after {attempts} attempts")]
    RetriesExhausted { attempts: u32 },
    #[error("transaction aborted by its body")]
    Aborted(#[source] E),
}

/// Counter snapshot for benchmarking and tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StmStats {
    pub commits: u64,
    pub retries: u64,
    pub ca_retries: u64,
    pub ca_cell_reads: u64,
    pub ca_cell_writes: u64,
}

impl StmStats {
    pub fn delta_since(&self, earlier: &StmStats) -> StmStats {
        StmStats {
            commits: self.commits - earlier.commits,
            retries: self.retries - earlier.retries,
            ca_retries: self.ca_retries - earlier.ca_retries,
            ca_cell_reads: self.ca_cell_reads - earlier.ca_cell_reads,
            ca_cell_writes: self.ca_cell_writes - earlier.ca_cell_writes,
        }
    }
}

pub(crate) struct ActiveTxn {
    pub(crate) begin_version: u64,
    /// 0 = alive, 1 = doomed by a native-cell conflict, 2 = doomed by a
    /// conflict-abstraction cell.
    pub(crate) doomed: AtomicU64,
}

impl ActiveTxn {
    pub(crate) fn doom(&self, kind: CellKind) {
        let code = match kind {
            CellKind::Native => 1,
            CellKind::ConflictAbstraction => 2,
        };
        let _ = self
            .doomed
            .compare_exchange(0, code, Ordering::AcqRel, Ordering::Acquire);
    }

    pub(crate) fn doom_state(&self) -> Option<Conflict> {
        match self.doomed.load(Ordering::Acquire) {
            0 => None,
            1 => Some(Conflict { ca: false }),
            _ => Some(Conflict { ca: true }),
        }
    }
}

pub(crate) struct StmShared {
    pub(crate) clock: AtomicU64,
    pub(crate) tokens: AtomicU64,
    pub(crate) txn_ids: AtomicU64,
    pub(crate) mode: StmMode,
    pub(crate) retry: RetryPolicy,
    pub(crate) active: DashMap<u64, Arc<ActiveTxn>>,
    pub(crate) commits: AtomicU64,
    pub(crate) retries: AtomicU64,
    pub(crate) ca_retries: AtomicU64,
    pub(crate) ca_reads: AtomicU64,
    pub(crate) ca_writes: AtomicU64,
}

/// Handle to an STM instance. Cloning is cheap; all clones share the same
/// clock, cells may be used from any number of threads.
#[derive(Clone)]
pub struct Stm {
    pub(crate) shared: Arc<StmShared>,
}

impl Stm {
    pub fn new(mode: StmMode) -> Self {
        Self::with_retry(mode, RetryPolicy::default())
    }

    pub fn with_retry(mode: StmMode, retry: RetryPolicy) -> Self {
        Stm {
            shared: Arc::new(StmShared {
                clock: AtomicU64::new(0),
                tokens: AtomicU64::new(0),
                txn_ids: AtomicU64::new(0),
                mode,
                retry,
                active: DashMap::new(),
                commits: AtomicU64::new(0),
                retries: AtomicU64::new(0),
                ca_retries: AtomicU64::new(0),
                ca_reads: AtomicU64::new(0),
                ca_writes: AtomicU64::new(0),
            }),
        }
    }

    pub fn mode(&self) -> StmMode {
        self.shared.mode
    }

    pub fn alloc_cell(&self, initial: u64) -> Cell {
        Cell::new(CellKind::Native, initial)
    }

    pub fn alloc_ca_cell(&self, initial: u64) -> Cell {
        Cell::new(CellKind::ConflictAbstraction, initial)
    }

    /// A token no other call on this instance has returned. Always positive.
    pub fn fresh_token(&self) -> u64 {
        self.shared.tokens.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn clock(&self) -> Version {
        Version(self.shared.clock.load(Ordering::Acquire))
    }

    pub fn stats(&self) -> StmStats {
        StmStats {
            commits: self.shared.commits.load(Ordering::Relaxed),
            retries: self.shared.retries.load(Ordering::Relaxed),
            ca_retries: self.shared.ca_retries.load(Ordering::Relaxed),
            ca_cell_reads: self.shared.ca_reads.load(Ordering::Relaxed),
            ca_cell_writes: self.shared.ca_writes.load(Ordering::Relaxed),
        }
    }

    /// Run `body` atomically, retrying on conflict per the retry policy.
    /// Exactly the final attempt's effects are visible afterwards.
    pub fn atomically<T>(
        &self,
        body: impl FnMut(&mut Txn) -> TxResult<T>,
    ) -> Result<T, StmError> {
        self.atomically_versioned(body).map(|(t, _)| t)
    }

    /// Like [`Stm::atomically`] but also returns the commit version, which
    /// orders this transaction against other committed transactions.
    pub fn atomically_versioned<T>(
        &self,
        mut body: impl FnMut(&mut Txn) -> TxResult<T>,
    ) -> Result<(T, Version), StmError> {
        match self.atomically_impl(|tx| body(tx).map_err(TxAbort::<Infallible>::Conflict)) {
            Ok(out) => Ok(out),
            Err(StmError::RetriesExhausted { attempts }) => {
                Err(StmError::RetriesExhausted { attempts })
            }
            Err(StmError::Aborted(never)) => match never {},
        }
    }

    /// Run a body that may abort with a user error. The error is returned
    /// after the transaction has rolled back; conflicts still retry.
    pub fn atomically_or_err<T, E>(
        &self,
        mut body: impl FnMut(&mut Txn) -> Result<T, TxAbort<E>>,
    ) -> Result<T, StmError<E>> {
        self.atomically_impl(|tx| body(tx)).map(|(t, _)| t)
    }

    fn atomically_impl<T, E>(
        &self,
        mut body: impl FnMut(&mut Txn) -> Result<T, TxAbort<E>>,
    ) -> Result<(T, Version), StmError<E>> {
        txn::enter_executor_txn();
        let result = self.attempt_loop(&mut body);
        txn::leave_executor_txn();
        result
    }

    fn attempt_loop<T, E>(
        &self,
        body: &mut impl FnMut(&mut Txn) -> Result<T, TxAbort<E>>,
    ) -> Result<(T, Version), StmError<E>> {
        let max = self.shared.retry.max_attempts.max(1);
        for attempt in 1..=max {
            let mut tx = Txn::begin(self.clone(), attempt);
            let conflict = match body(&mut tx) {
                Ok(value) => match tx.commit() {
                    Ok(version) => {
                        self.shared.commits.fetch_add(1, Ordering::Relaxed);
                        return Ok((value, version));
                    }
                    Err(c) => c,
                },
                Err(TxAbort::Conflict(c)) => {
                    tx.rollback();
                    c
                }
                Err(TxAbort::Abort(e)) => {
                    tx.rollback();
                    return Err(StmError::Aborted(e));
                }
            };
            self.shared.retries.fetch_add(1, Ordering::Relaxed);
            if conflict.ca {
                self.shared.ca_retries.fetch_add(1, Ordering::Relaxed);
            }
            if attempt < max {
                std::thread::sleep(self.shared.retry.delay_for(attempt));
            }
        }
        Err(StmError::RetriesExhausted { attempts: max })
    }
}
