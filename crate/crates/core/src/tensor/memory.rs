//! Live-element accounting for tensor buffers.
//!
//! Every tensor buffer registers its element count when allocated and
//! releases it when dropped. Counters are kept per thread so that concurrent
//! test threads and independent graphs never see each other's traffic; a
//! profiling run therefore measures exactly the buffers created on its own
//! thread.
//!
//! Parameter buffers are tracked separately from working buffers
//! (activations, gradients, constants). The high-water mark covers working
//! buffers only.

use std::cell::Cell;

use crate::error::{Error, Result};

/// Accounting class of a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemClass {
    Working,
    Parameter,
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LIVE_PARAMS: Cell<usize> = const { Cell::new(0) };
    static LIMIT: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Point-in-time view of this thread's counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemorySnapshot {
    pub live: usize,
    pub peak: usize,
    pub live_params: usize,
}

pub fn snapshot() -> MemorySnapshot {
    MemorySnapshot {
        live: LIVE.with(Cell::get),
        peak: PEAK.with(Cell::get),
        live_params: LIVE_PARAMS.with(Cell::get),
    }
}

/// Resets the high-water mark to the current live count.
pub fn reset_peak() {
    let live = LIVE.with(Cell::get);
    PEAK.with(|p| p.set(live));
}

/// Caps the number of live working elements on this thread. Allocations
/// beyond the cap fail with [`Error::OutOfMemory`].
pub fn set_limit(limit: Option<usize>) {
    LIMIT.with(|l| l.set(limit));
}

pub(crate) fn acquire(n: usize, class: MemClass) -> Result<()> {
    match class {
        MemClass::Parameter => {
            LIVE_PARAMS.with(|c| c.set(c.get() + n));
            Ok(())
        }
        MemClass::Working => {
            let live = LIVE.with(Cell::get);
            if let Some(limit) = LIMIT.with(Cell::get) {
                if live + n > limit {
                    return Err(Error::OutOfMemory {
                        requested: n,
                        live,
                        limit,
                    });
                }
            }
            let now = live + n;
            LIVE.with(|c| c.set(now));
            PEAK.with(|p| {
                if now > p.get() {
                    p.set(now)
                }
            });
            Ok(())
        }
    }
}

/// Accounts an allocation that must not fail (copy-on-write of existing
/// storage).
pub(crate) fn acquire_unlimited(n: usize, class: MemClass) {
    let limit = LIMIT.with(|l| l.replace(None));
    acquire(n, class).expect("no limit set");
    LIMIT.with(|l| l.set(limit));
}

pub(crate) fn release(n: usize, class: MemClass) {
    let cell = match class {
        MemClass::Working => &LIVE,
        MemClass::Parameter => &LIVE_PARAMS,
    };
    // A buffer dropped on a thread other than its allocating one would
    // underflow here; saturate instead.
    cell.with(|c| c.set(c.get().saturating_sub(n)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn peak_tracks_live_buffers() {
        reset_peak();
        let base = snapshot().live;
        let a = Tensor::<f32>::zeros(&[10, 10]);
        let b = Tensor::<f32>::zeros(&[5]);
        assert_eq!(snapshot().live, base + 105);
        drop(a);
        assert_eq!(snapshot().live, base + 5);
        assert_eq!(snapshot().peak, base + 105);
        drop(b);
        reset_peak();
        assert_eq!(snapshot().peak, base);
    }

    #[test]
    fn shared_storage_is_counted_once() {
        let base = snapshot().live;
        let a = Tensor::<f64>::zeros(&[4, 6]);
        let b = a.reshape(&[24]).unwrap();
        let c = a.clone();
        assert_eq!(snapshot().live, base + 24);
        drop((a, b, c));
        assert_eq!(snapshot().live, base);
    }

    #[test]
    fn limit_rejects_large_requests() {
        set_limit(Some(snapshot().live + 100));
        let err = Tensor::<f32>::try_zeros(&[20, 20]).unwrap_err();
        set_limit(None);
        match err {
            Error::OutOfMemory { requested, .. } => assert_eq!(requested, 400),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn parameters_are_not_working_memory() {
        let before = snapshot();
        let p = Tensor::<f32>::zeros(&[8]).into_class(MemClass::Parameter);
        let after = snapshot();
        assert_eq!(after.live, before.live);
        assert_eq!(after.live_params, before.live_params + 8);
        drop(p);
        assert_eq!(snapshot().live_params, before.live_params);
    }
}
