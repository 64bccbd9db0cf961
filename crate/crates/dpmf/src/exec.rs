//! Execution-mode switch for the data-parallel inner loops.
//!
//! The crate's hot loops (Monte Carlo batches, per-grid-point Volterra sums,
//! particle diffusion substeps) are written against [`map_collect`], which
//! dispatches to rayon or to a plain sequential loop. All parallel reductions
//! merge in index order from independently seeded streams, so the two modes
//! produce bit-identical results; the switch only affects wall time.
//!
//! With the `parallel` feature disabled, rayon is not compiled in and
//! everything runs sequentially regardless of the configured mode.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How to run data-parallel sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    /// Rayon work-stealing over the default global pool.
    Parallel,
}

#[cfg(feature = "parallel")]
static MODE: AtomicU8 = AtomicU8::new(1);
#[cfg(not(feature = "parallel"))]
static MODE: AtomicU8 = AtomicU8::new(0);

/// Set the process-wide execution mode. `Parallel` is ignored when the
/// `parallel` feature is off.
pub fn set_mode(mode: Mode) {
    let v = match mode {
        Mode::Sequential => 0,
        Mode::Parallel => 1,
    };
    MODE.store(v, Ordering::Relaxed);
}

/// Current execution mode.
pub fn mode() -> Mode {
    #[cfg(not(feature = "parallel"))]
    {
        return Mode::Sequential;
    }
    #[cfg(feature = "parallel")]
    {
        match MODE.load(Ordering::Relaxed) {
            0 => Mode::Sequential,
            _ => Mode::Parallel,
        }
    }
}

/// Map `f` over `0..n` and collect results in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f` to every element of `items` in place, in parallel when enabled.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, item)| f(i, item));
        return;
    }
    for (i, item) in items.iter_mut().enumerate() {
        f(i, item);
    }
}
