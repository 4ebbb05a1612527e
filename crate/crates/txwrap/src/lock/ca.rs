use std::sync::Arc;

use crate::stm::{Cell, TxResult, Txn};

/// A conflict-abstraction specification: for each method and each of the
/// `locations` cells, predicates deciding whether the call reads or writes
/// that cell, given the call's arguments and a sampled observation of the
/// abstract state. Pure functions of their inputs.
#[derive(Clone)]
pub struct CaSpec {
    pub locations: usize,
    read_pred: Arc<dyn Fn(&str, &[i64], i64, usize) -> bool + Send + Sync>,
    write_pred: Arc<dyn Fn(&str, &[i64], i64, usize) -> bool + Send + Sync>,
}

impl CaSpec {
    pub fn new(
        locations: usize,
        read_pred: impl Fn(&str, &[i64], i64, usize) -> bool + Send + Sync + 'static,
        write_pred: impl Fn(&str, &[i64], i64, usize) -> bool + Send + Sync + 'static,
    ) -> Self {
        CaSpec {
            locations,
            read_pred: Arc::new(read_pred),
            write_pred: Arc::new(write_pred),
        }
    }

    pub fn reads(&self, method: &str, args: &[i64], observation: i64, loc: usize) -> bool {
        (self.read_pred)(method, args, observation, loc)
    }

    pub fn writes(&self, method: &str, args: &[i64], observation: i64, loc: usize) -> bool {
        (self.write_pred)(method, args, observation, loc)
    }

    pub fn read_set(&self, method: &str, args: &[i64], observation: i64) -> Vec<usize> {
        (0..self.locations)
            .filter(|i| self.reads(method, args, observation, *i))
            .collect()
    }

    pub fn write_set(&self, method: &str, args: &[i64], observation: i64) -> Vec<usize> {
        (0..self.locations)
            .filter(|i| self.writes(method, args, observation, *i))
            .collect()
    }
}

/// The counter abstraction over a single location: `incr` reads it and
/// `decr` writes it whenever the observed count is below the threshold.
pub fn counter_threshold_spec(threshold: i64) -> CaSpec {
    CaSpec::new(
        1,
        move |method, _args, obs, _i| method == "incr" && obs < threshold,
        move |method, _args, obs, _i| method == "decr" && obs < threshold,
    )
}

/// Striped map abstraction: observers read location `k mod M`, mutators
/// write it. The key is the first argument.
pub fn striped_map_spec(stripes: usize) -> CaSpec {
    let m = stripes as i64;
    let stripe = move |args: &[i64]| (args[0].rem_euclid(m)) as usize;
    CaSpec::new(
        stripes,
        move |method, args, _obs, i| {
            matches!(method, "get" | "contains") && stripe(args) == i
        },
        move |method, args, _obs, i| matches!(method, "put" | "remove") && stripe(args) == i,
    )
}

/// Priority-queue abstraction over two locations (0 = Min, 1 = MultiSet),
/// after the two-element abstract state of the queue wrapper. The observation
/// is the current minimum, `i64::MAX` when empty.
pub fn pqueue_minmultiset_spec() -> CaSpec {
    const MIN: usize = 0;
    const MULTISET: usize = 1;
    CaSpec::new(
        2,
        move |method, args, obs, i| match method {
            "insert" => i == MIN && args[0] >= obs,
            "min" => i == MIN,
            "contains" => i == MULTISET,
            _ => false,
        },
        move |method, args, obs, i| match method {
            "insert" => i == MULTISET || (i == MIN && args[0] < obs),
            "removeMin" => true,
            _ => false,
        },
    )
}

/// Perform the conflict-abstraction touches for one method call: for every
/// location the spec marks written, write a fresh token; otherwise, if
/// marked read, read it. The touches surround the actual data-structure
/// operation, which never goes through these cells itself.
pub fn ca_touch(
    tx: &mut Txn,
    spec: &CaSpec,
    cells: &[Cell],
    method: &str,
    args: &[i64],
    observation: i64,
) -> TxResult<()> {
    debug_assert_eq!(cells.len(), spec.locations);
    for (i, cell) in cells.iter().enumerate() {
        if spec.writes(method, args, observation, i) {
            let token = tx.stm().fresh_token();
            tx.write(cell, token)?;
        } else if spec.reads(method, args, observation, i) {
            tx.read(cell)?;
        }
    }
    Ok(())
}
