//! Worker-pool setup.
//!
//! `CSA_TS_THREADS` caps the rayon pool used by the numeric kernels and the
//! per-seed experiment jobs. Results are bit-identical for any thread count:
//! parallel work only ever writes disjoint output slices and every reduction
//! runs in a fixed order.

use std::sync::Once;

static INIT: Once = Once::new();

/// Initialise the global thread pool from `CSA_TS_THREADS` (once).
///
/// Unset, zero, or unparsable values leave rayon's default (one worker per
/// core). Calling this after the pool already exists is a no-op.
pub fn init_from_env() {
    INIT.call_once(|| {
        if let Some(n) = configured_threads() {
            // Ignore the error: the pool may already have been built by a
            // concurrent caller, which is fine.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

pub fn configured_threads() -> Option<usize> {
    std::env::var("CSA_TS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}
