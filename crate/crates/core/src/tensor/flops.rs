//! Per-thread count of floating-point operations issued by convolutions and
//! matrix products (two per multiply-accumulate). Elementwise ops are not
//! counted.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns its result together with the FLOPs it issued on this
/// thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = COUNTER.with(Cell::get);
    let r = f();
    let after = COUNTER.with(Cell::get);
    (r, after - before)
}
