//! Multiply-accumulate instrumentation for the dense kernels.
//!
//! Counting is off by default. A [`MacScope`] turns it on for the current
//! thread; `matmul` adds `m·k·n` and the softmax kernels add one unit per
//! element they normalize.

use std::cell::Cell;

use crate::error::{Error, Result};

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn record(macs: u64) {
    COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + macs));
        }
    });
}

/// Enables counting on this thread until dropped. Nested scopes share the
/// running total and restore the outer state on drop.
pub struct MacScope {
    previous: Option<u64>,
}

impl MacScope {
    pub fn begin() -> Self {
        let previous = COUNTER.with(|c| c.replace(Some(0)));
        MacScope { previous }
    }

    pub fn count(&self) -> u64 {
        COUNTER.with(|c| c.get().unwrap_or(0))
    }
}

impl Drop for MacScope {
    fn drop(&mut self) {
        let inner = COUNTER.with(|c| c.get()).unwrap_or(0);
        let restored = self.previous.map(|p| p + inner);
        COUNTER.with(|c| c.set(restored));
    }
}

/// Current running count, or a state error when no scope is active.
pub fn current_macs() -> Result<u64> {
    COUNTER
        .with(|c| c.get())
        .ok_or_else(|| Error::State("MAC counter is not enabled".into()))
}

/// Runs `f` with counting enabled and returns its result with the count.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let scope = MacScope::begin();
    let out = f();
    let n = scope.count();
    (out, n)
}
