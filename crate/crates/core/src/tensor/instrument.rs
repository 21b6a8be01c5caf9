//! Allocation and FLOP counters.
//!
//! Every tensor payload lives in a [`Buffer`], which reports its byte size to
//! thread-local counters on creation and release. Operations report their
//! forward FLOPs through [`add_flops`]. Counters are per thread, so
//! independent computations on separate threads never interfere.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};
use std::time::{Duration, Instant};

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

const F64_BYTES: i64 = std::mem::size_of::<f64>() as i64;

fn on_alloc(len: usize) {
    let bytes = len as i64 * F64_BYTES;
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

fn on_release(len: usize) {
    let bytes = len as i64 * F64_BYTES;
    LIVE.with(|live| live.set(live.get() - bytes));
}

/// Records `n` floating-point operations against the current thread.
#[inline]
pub fn add_flops(n: u64) {
    FLOPS.with(|f| f.set(f.get().wrapping_add(n)));
}

/// Tracked payload storage for tensors: a `Vec<f64>` whose size is counted.
pub struct Buffer(Vec<f64>);

impl Buffer {
    pub fn new(data: Vec<f64>) -> Self {
        on_alloc(data.len());
        Buffer(data)
    }

    pub fn zeros(len: usize) -> Self {
        Buffer::new(vec![0.0; len])
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.0.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        on_release(self.0.len());
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

impl std::fmt::Debug for Buffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// Counter snapshot for one measurement window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrumentationStats {
    /// Live payload bytes at the end of the window, relative to its start.
    pub live_bytes: u64,
    /// Largest number of simultaneously live payload bytes allocated inside the window.
    pub peak_bytes: u64,
    /// Forward FLOPs (a multiply-add counts as 2).
    pub flops: u64,
    pub duration: Duration,
}

/// Current counter values for this thread, relative to process start.
pub fn snapshot() -> (i64, i64, u64) {
    (
        LIVE.with(Cell::get),
        PEAK.with(Cell::get),
        FLOPS.with(Cell::get),
    )
}

/// Runs `f` inside a fresh measurement window.
///
/// Bytes that were live before entry form the baseline and are not counted.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, InstrumentationStats) {
    let baseline = LIVE.with(Cell::get);
    PEAK.with(|p| p.set(baseline));
    let flops0 = FLOPS.with(Cell::get);
    let start = Instant::now();
    let out = f();
    let duration = start.elapsed();
    let live = LIVE.with(Cell::get);
    let peak = PEAK.with(Cell::get);
    let flops = FLOPS.with(Cell::get).wrapping_sub(flops0);
    let stats = InstrumentationStats {
        live_bytes: (live - baseline).max(0) as u64,
        peak_bytes: (peak - baseline).max(0) as u64,
        flops,
        duration,
    };
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_allocation_counts_payload() {
        let (_, stats) = measure(|| {
            let b = Buffer::zeros(100);
            drop(b);
        });
        assert!(stats.peak_bytes >= 800);
        assert_eq!(stats.live_bytes, 0);
    }

    #[test]
    fn sequential_peaks_do_not_add() {
        let (_, stats) = measure(|| {
            for _ in 0..2 {
                let _b = Buffer::zeros(1000);
            }
        });
        assert_eq!(stats.peak_bytes, 8000);
    }

    #[test]
    fn concurrent_buffers_add() {
        let (_, stats) = measure(|| {
            let _a = Buffer::zeros(10);
            let _b = Buffer::zeros(20);
        });
        assert_eq!(stats.peak_bytes, 240);
    }

    #[test]
    fn baseline_is_excluded() {
        let outside = Buffer::zeros(500);
        let (_, stats) = measure(|| {
            let _b = Buffer::zeros(10);
        });
        assert_eq!(stats.peak_bytes, 80);
        drop(outside);
    }

    #[test]
    fn flops_accumulate_within_window() {
        let (_, stats) = measure(|| {
            add_flops(7);
            add_flops(5);
        });
        assert_eq!(stats.flops, 12);
    }
}
