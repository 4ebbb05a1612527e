use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::{CompatibilityMatrix, Mode};

/// A mode lock granted according to a compatibility matrix. Re-entrant for
/// the same transaction; a READ holding may be upgraded to WRITE.
pub struct ModeLock {
    state: Mutex<LockState>,
    cv: Condvar,
}

#[derive(Default)]
struct LockState {
    holders: HashMap<u64, Mode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquired {
    /// First grant to this transaction on this lock.
    First,
    /// Already held (possibly upgraded); no new release registration needed.
    AlreadyHeld,
}

#[derive(Debug, Clone, Copy)]
pub struct AcquireTimeout;

impl ModeLock {
    pub fn new() -> Self {
        ModeLock {
            state: Mutex::new(LockState::default()),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(
        &self,
        txn_id: u64,
        mode: Mode,
        matrix: CompatibilityMatrix,
        timeout: Duration,
    ) -> Result<Acquired, AcquireTimeout> {
        let deadline = Instant::now() + timeout;
        let mut state = self.state.lock();
        loop {
            match state.holders.get(&txn_id).copied() {
                Some(Mode::Write) => return Ok(Acquired::AlreadyHeld),
                Some(Mode::Read) if mode == Mode::Read => return Ok(Acquired::AlreadyHeld),
                held => {
                    let compatible = state
                        .holders
                        .iter()
                        .filter(|(id, _)| **id != txn_id)
                        .all(|(_, other)| matrix.compatible(mode, *other));
                    if compatible {
                        state.holders.insert(txn_id, mode);
                        return Ok(match held {
                            Some(_) => Acquired::AlreadyHeld,
                            None => Acquired::First,
                        });
                    }
                }
            }
            if self.cv.wait_until(&mut state, deadline).timed_out() {
                return Err(AcquireTimeout);
            }
        }
    }

    pub fn release(&self, txn_id: u64) {
        let mut state = self.state.lock();
        state.holders.remove(&txn_id);
        self.cv.notify_all();
    }

    pub fn holder_mode(&self, txn_id: u64) -> Option<Mode> {
        self.state.lock().holders.get(&txn_id).copied()
    }

    pub fn holder_count(&self) -> usize {
        self.state.lock().holders.len()
    }
}

impl Default for ModeLock {
    fn default() -> Self {
        Self::new()
    }
}

pub(super) type SharedModeLock = Arc<ModeLock>;
