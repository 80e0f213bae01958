//! Scalar operation counter used to audit the analytic cost formulas.
//!
//! Forward kernels on the tape charge the scalar work they execute while an
//! instrumented region is open on the current thread. Accounting rules:
//!
//! * a multiply-accumulate charges one multiplication and one addition;
//! * a threshold comparison charges one addition;
//! * an absolute-difference term accumulated into an L1 distance charges one
//!   addition;
//! * gathering a weight row selected by a binary mask is a selection, kept in
//!   its own tally and never counted as arithmetic;
//! * activations and normalizations (softmax and its scale, exp, relu, layer
//!   norm, cross-entropy) are not charged;
//! * sign flips and data movement (reshape, transpose, tile, slicing) are free.
//!
//! Backward passes never charge.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCount {
    pub additions: u64,
    pub multiplications: u64,
    pub selections: u64,
}

thread_local! {
    static ACTIVE: Cell<Option<TraceCount>> = const { Cell::new(None) };
}

pub(crate) fn charge(additions: usize, multiplications: usize) {
    ACTIVE.with(|a| {
        if let Some(mut t) = a.get() {
            t.additions += additions as u64;
            t.multiplications += multiplications as u64;
            a.set(Some(t));
        }
    });
}

pub(crate) fn charge_selections(n: usize) {
    ACTIVE.with(|a| {
        if let Some(mut t) = a.get() {
            t.selections += n as u64;
            a.set(Some(t));
        }
    });
}

struct Region;

impl Drop for Region {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.set(None));
    }
}

/// Runs `f` with counting enabled and returns its result with the tally.
pub fn count<R>(f: impl FnOnce() -> R) -> Result<(R, TraceCount)> {
    let nested = ACTIVE.with(|a| a.get().is_some());
    if nested {
        return Err(Error::NestedInstrumentation);
    }
    ACTIVE.with(|a| a.set(Some(TraceCount::default())));
    let region = Region;
    let out = f();
    let tally = ACTIVE.with(|a| a.get()).unwrap_or_default();
    drop(region);
    Ok((out, tally))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charges_only_inside_region() {
        charge(5, 5);
        let ((), t) = count(|| {
            charge(3, 2);
            charge_selections(7);
        })
        .unwrap();
        assert_eq!(t, TraceCount { additions: 3, multiplications: 2, selections: 7 });
        let ((), t) = count(|| ()).unwrap();
        assert_eq!(t, TraceCount::default());
    }

    #[test]
    fn nesting_is_rejected() {
        let (inner, _) = count(|| count(|| ()).map(|_| ())).unwrap();
        assert!(matches!(inner, Err(Error::NestedInstrumentation)));
        // outer region closed cleanly
        assert!(count(|| ()).is_ok());
    }
}
