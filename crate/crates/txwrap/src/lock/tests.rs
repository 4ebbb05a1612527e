use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use proptest::prelude::*;

use super::*;
use crate::stm::{RetryPolicy, Stm, StmMode};

#[test]
fn matrix_is_symmetric_and_defaults_match() {
    for m in [
        CompatibilityMatrix::DEFAULT,
        CompatibilityMatrix::MULTISET,
        CompatibilityMatrix::new(true, true, false),
    ] {
        for a in [Mode::Read, Mode::Write] {
            for b in [Mode::Read, Mode::Write] {
                assert_eq!(m.compatible(a, b), m.compatible(b, a));
            }
        }
    }
    assert!(CompatibilityMatrix::DEFAULT.compatible(Mode::Read, Mode::Read));
    assert!(!CompatibilityMatrix::DEFAULT.compatible(Mode::Read, Mode::Write));
    assert!(!CompatibilityMatrix::DEFAULT.compatible(Mode::Write, Mode::Write));
    assert!(CompatibilityMatrix::MULTISET.compatible(Mode::Write, Mode::Write));
    assert!(!CompatibilityMatrix::MULTISET.compatible(Mode::Read, Mode::Write));
}

#[test]
fn intents_collapse_to_strongest_mode() {
    let intents = vec![
        Intent::read(7u64),
        Intent::write(7),
        Intent::read(7),
        Intent::read(3),
    ];
    let deduped = dedupe_intents(&intents);
    assert_eq!(deduped.len(), 2);
    assert_eq!(deduped[&7], Mode::Write);
    assert_eq!(deduped[&3], Mode::Read);
}

#[test]
fn optimistic_read_intent_reads_the_stripe() {
    let stm = Stm::new(StmMode::Lazy);
    let policy = OptimisticPolicy::with_stripe(&stm, 16, |k: &u64| *k as usize);
    let before = stm.stats();
    stm.atomically(|tx| policy.touch(tx, &5, Mode::Read)).unwrap();
    let delta = stm.stats().delta_since(&before);
    assert_eq!(delta.ca_cell_reads, 1);
    assert_eq!(delta.ca_cell_writes, 0);
}

#[test]
fn disjoint_write_intents_do_not_conflict() {
    let stm = Stm::new(StmMode::Lazy);
    let policy = Arc::new(OptimisticPolicy::with_stripe(&stm, 7, |k: &u64| {
        *k as usize
    }));
    let barrier = Arc::new(Barrier::new(2));
    let before = stm.stats();
    let handles: Vec<_> = [5u64, 6u64]
        .into_iter()
        .map(|key| {
            let (stm, policy, barrier) = (stm.clone(), Arc::clone(&policy), Arc::clone(&barrier));
            thread::spawn(move || {
                stm.atomically(|tx| {
                    policy.touch(tx, &key, Mode::Write)?;
                    if tx.attempt() == 1 {
                        barrier.wait();
                    }
                    Ok(())
                })
                .unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let delta = stm.stats().delta_since(&before);
    assert_eq!(delta.retries, 0);
    assert_eq!(delta.commits, 2);
}

#[test]
fn same_key_write_intents_conflict_exactly_once() {
    let stm = Stm::new(StmMode::Lazy);
    let policy = Arc::new(OptimisticPolicy::with_stripe(&stm, 16, |k: &u64| {
        *k as usize
    }));
    let barrier = Arc::new(Barrier::new(2));
    let before = stm.stats();
    let handles: Vec<_> = (0..2)
        .map(|_| {
            let (stm, policy, barrier) = (stm.clone(), Arc::clone(&policy), Arc::clone(&barrier));
            thread::spawn(move || {
                stm.atomically(|tx| {
                    policy.touch(tx, &13, Mode::Write)?;
                    if tx.attempt() == 1 {
                        barrier.wait();
                    }
                    Ok(())
                })
                .unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let delta = stm.stats().delta_since(&before);
    assert_eq!(delta.retries, 1, "exactly one side retries");
    assert_eq!(delta.commits, 2);
    assert_eq!(delta.ca_retries, 1);
}

/// The three counter scenarios, driven directly through the
/// conflict-abstraction touch layer.
#[test]
fn counter_ca_cases() {
    let spec = counter_threshold_spec(2);

    // Counter value 52: neither incr nor decr touches the cell.
    let stm = Stm::new(StmMode::Lazy);
    let cells = vec![stm.alloc_ca_cell(0)];
    let before = stm.stats();
    run_pair_scripted(&stm, |tx, which| {
        let method = if which == 0 { "incr" } else { "decr" };
        ca_touch(tx, &spec, &cells, method, &[], 52)
    });
    let delta = stm.stats().delta_since(&before);
    assert_eq!(delta.ca_cell_reads + delta.ca_cell_writes, 0);
    assert_eq!(delta.retries, 0);
    assert_eq!(delta.commits, 2);

    // Counter value 0, two concurrent incr: both read, no conflict.
    let stm = Stm::new(StmMode::Lazy);
    let cells = vec![stm.alloc_ca_cell(0)];
    let before = stm.stats();
    run_pair_scripted(&stm, |tx, _| ca_touch(tx, &spec, &cells, "incr", &[], 0));
    let delta = stm.stats().delta_since(&before);
    assert_eq!(delta.ca_cell_reads, 2);
    assert_eq!(delta.ca_cell_writes, 0);
    assert_eq!(delta.retries, 0);

    // Counter value 1, two concurrent decr: both write, the STM detects a
    // conflict and exactly one retries.
    let stm = Stm::new(StmMode::Lazy);
    let cells = vec![stm.alloc_ca_cell(0)];
    let before = stm.stats();
    run_pair_scripted(&stm, |tx, _| ca_touch(tx, &spec, &cells, "decr", &[], 1));
    let delta = stm.stats().delta_since(&before);
    assert!(delta.ca_cell_writes >= 2);
    assert_eq!(delta.retries, 1);
    assert_eq!(delta.ca_retries, 1);
}

/// Run two single-op transactions that each hold their buffered state until
/// both have executed their touches, forcing a true overlap.
fn run_pair_scripted(
    stm: &Stm,
    op: impl Fn(&mut crate::stm::Txn, usize) -> crate::stm::TxResult<()> + Sync,
) {
    let barrier = Barrier::new(2);
    thread::scope(|s| {
        for which in 0..2 {
            let (op, barrier) = (&op, &barrier);
            let stm = stm.clone();
            s.spawn(move || {
                stm.atomically(|tx| {
                    op(tx, which)?;
                    if tx.attempt() == 1 {
                        barrier.wait();
                    }
                    Ok(())
                })
                .unwrap();
            });
        }
    });
}

#[test]
fn pessimistic_reentrant_and_upgrade() {
    let stm = Stm::new(StmMode::Lazy);
    let policy: PessimisticPolicy<u64> = PessimisticPolicy::new();
    stm.atomically(|tx| {
        policy.acquire(tx, &1, Mode::Read)?;
        policy.acquire(tx, &1, Mode::Read)?;
        assert_eq!(policy.held_mode(tx.id(), &1), Some(Mode::Read));
        policy.acquire(tx, &1, Mode::Write)?;
        assert_eq!(policy.held_mode(tx.id(), &1), Some(Mode::Write));
        Ok(())
    })
    .unwrap();
}

#[test]
fn pessimistic_locks_release_on_both_paths() {
    let stm = Stm::new(StmMode::Lazy);
    let policy: Arc<PessimisticPolicy<u64>> = Arc::new(PessimisticPolicy::new());

    stm.atomically(|tx| policy.acquire(tx, &9, Mode::Write)).unwrap();
    let err = stm.atomically_or_err(|tx| {
        policy.acquire(tx, &9, Mode::Write)?;
        Err::<(), _>(crate::stm::TxAbort::Abort(()))
    });
    assert!(err.is_err());
    // Both the committed and the rolled-back transaction released the lock.
    stm.atomically(|tx| policy.acquire(tx, &9, Mode::Write)).unwrap();
}

#[test]
fn pessimistic_timeout_aborts_and_retries() {
    let stm = Stm::with_retry(
        StmMode::Lazy,
        RetryPolicy {
            max_attempts: 128,
            ..RetryPolicy::default()
        },
    );
    let policy: Arc<PessimisticPolicy<u64>> = Arc::new(PessimisticPolicy::with_matrix(
        Duration::from_millis(2),
        |_| CompatibilityMatrix::DEFAULT,
    ));

    let entered = Arc::new(Barrier::new(2));
    let release = Arc::new(Barrier::new(2));
    let holder = {
        let (stm, policy) = (stm.clone(), Arc::clone(&policy));
        let (entered, release) = (Arc::clone(&entered), Arc::clone(&release));
        thread::spawn(move || {
            stm.atomically(|tx| {
                policy.acquire(tx, &4, Mode::Write)?;
                if tx.attempt() == 1 {
                    entered.wait();
                    release.wait();
                }
                Ok(())
            })
            .unwrap();
        })
    };
    entered.wait();

    let before = stm.stats();
    let contender = {
        let (stm, policy) = (stm.clone(), Arc::clone(&policy));
        thread::spawn(move || {
            stm.atomically(|tx| policy.acquire(tx, &4, Mode::Write)).unwrap();
        })
    };
    // The contender times out against the held lock and retries.
    while stm.stats().delta_since(&before).retries == 0 {
        thread::yield_now();
    }
    assert!(stm.stats().delta_since(&before).ca_retries >= 1);
    release.wait();
    holder.join().unwrap();
    contender.join().unwrap();
}

#[test]
fn multiset_matrix_admits_concurrent_writers() {
    let stm = Stm::new(StmMode::Lazy);
    let policy: Arc<PessimisticPolicy<u64>> = Arc::new(PessimisticPolicy::with_matrix(
        DEFAULT_PESSIMISTIC_TIMEOUT,
        |_| CompatibilityMatrix::MULTISET,
    ));
    let barrier = Arc::new(Barrier::new(2));
    let before = stm.stats();
    let handles: Vec<_> = (0..2)
        .map(|_| {
            let (stm, policy, barrier) = (stm.clone(), Arc::clone(&policy), Arc::clone(&barrier));
            thread::spawn(move || {
                stm.atomically(|tx| {
                    policy.acquire(tx, &0, Mode::Write)?;
                    if tx.attempt() == 1 {
                        barrier.wait();
                    }
                    Ok(())
                })
                .unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(stm.stats().delta_since(&before).retries, 0);
}

proptest! {
    /// Keys equal under the stripe function always share a cell, and any
    /// pair conflicting under identity striping still conflicts under a
    /// finite stripe count (collisions only merge classes).
    #[test]
    fn stripe_soundness(k1 in 0u64..10_000, k2 in 0u64..10_000, m in 1usize..64) {
        let stm = Stm::new(StmMode::Lazy);
        let policy = OptimisticPolicy::striped(&stm, m);
        let c1 = policy.cell_for(&k1).id();
        let c1_again = policy.cell_for(&k1).id();
        prop_assert_eq!(c1, c1_again);
        if k1 == k2 {
            prop_assert_eq!(c1, policy.cell_for(&k2).id());
        }
    }
}
