//! Worker pool sizing. `VORTX_THREADS` caps the rayon pool; unset means
//! the rayon default (one worker per logical core). Only per-slot
//! parallel maps use the pool, so results do not depend on thread count.

use std::sync::Once;

static INIT: Once = Once::new();

/// Install the global rayon pool sized from `VORTX_THREADS`. Idempotent;
/// called by the CLI and by the parallel entry points in `eval3d` and
/// `pipeline::synth`.
pub fn init_pool() {
    INIT.call_once(|| {
        if let Some(n) = thread_cap() {
            // Ignore failure: a pool may already exist in test harnesses.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    });
}

pub fn thread_cap() -> Option<usize> {
    std::env::var("VORTX_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
}
