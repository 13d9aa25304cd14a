//! Flat f64 storage with live-allocation accounting.
//!
//! Every `Buffer` registers its length with a thread-local counter on
//! creation and deregisters on drop. `peak()` reports the high-water mark
//! of concurrently live floats since the last `reset_peak()`, which is the
//! memory measure used by the bench module (portable and deterministic,
//! unlike process RSS).

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static LIVE_FLOATS: Cell<u64> = const { Cell::new(0) };
    static PEAK_FLOATS: Cell<u64> = const { Cell::new(0) };
}

/// Owned row-major f64 storage. Allocation and release update the
/// thread-local live-float counters.
#[derive(Debug)]
pub struct Buffer(Vec<f64>);

impl Buffer {
    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![0.0; len])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        LIVE_FLOATS.with(|live| {
            let now = live.get() + v.len() as u64;
            live.set(now);
            PEAK_FLOATS.with(|peak| {
                if now > peak.get() {
                    peak.set(now);
                }
            });
        });
        Buffer(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::from_vec(self.0.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        LIVE_FLOATS.with(|live| live.set(live.get() - self.0.len() as u64));
    }
}

impl Deref for Buffer {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Currently live floats on this thread.
pub fn live_floats() -> u64 {
    LIVE_FLOATS.with(|c| c.get())
}

/// High-water mark since the last `reset_peak`.
pub fn peak_floats() -> u64 {
    PEAK_FLOATS.with(|c| c.get())
}

/// Resets the peak to the current live count.
pub fn reset_peak() {
    let live = live_floats();
    PEAK_FLOATS.with(|c| c.set(live));
}
