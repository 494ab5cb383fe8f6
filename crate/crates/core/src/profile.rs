//! Lightweight instrumentation: a thread-local multiply-accumulate counter.
//!
//! The dense inner-product helpers (`linear`, sparse convolution) report the
//! exact number of multiplies they perform. Normalization, activation, and
//! interpolation do not count toward MACs. The counter is always compiled in;
//! it costs one add per matrix call.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Records `n` multiply-accumulates on the current thread.
#[inline]
pub fn record_macs(n: u64) {
    MACS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Resets the counter and returns the previous value.
pub fn reset_macs() -> u64 {
    MACS.with(|c| c.replace(0))
}

/// Current counter value for this thread.
pub fn macs() -> u64 {
    MACS.with(Cell::get)
}
